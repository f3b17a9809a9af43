"""Learned image-quality scorer used as the tuning agent's reward source.

The scorer maps a 64x64 patch through four 3x3 convolution + mean-pool
stages (32, 32, 64, 64 filters), a 64-neuron dense layer, and a single
sigmoid output, so scores always land strictly inside (0, 1). Training
regresses the score onto the gradient structural similarity between the
full-dose patch and its reduced-dose counterpart, computed on window-
normalized images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import domain_error, shape_error
from .metrics import hu_to_unit, ssim
from .nn import Adam, LayerSpec, Network

PATCH_SIZE = 64

QUALITY_SPECS = (
    LayerSpec("conv2d-valid", 32, (1, 3, 3)),
    LayerSpec("leaky-relu"),
    LayerSpec("mean-pool"),
    LayerSpec("conv2d-valid", 32, (1, 3, 3)),
    LayerSpec("leaky-relu"),
    LayerSpec("mean-pool"),
    LayerSpec("conv2d-valid", 64, (1, 3, 3)),
    LayerSpec("leaky-relu"),
    LayerSpec("mean-pool"),
    LayerSpec("conv2d-valid", 64, (1, 3, 3)),
    LayerSpec("leaky-relu"),
    LayerSpec("mean-pool"),
    LayerSpec("fully-connected", 64),
    LayerSpec("leaky-relu"),
    LayerSpec("fully-connected", 1),
    LayerSpec("sigmoid"),
)


@dataclass
class QualityTrainConfig:
    iterations: int = 1500
    batch: int = 16
    lr: float = 1e-4
    seed: int = 0


def build_quality_net(seed: int) -> Network:
    return Network.build(QUALITY_SPECS, (1, 1, PATCH_SIZE, PATCH_SIZE), seed)


def gradient_ssim(reference: np.ndarray, test: np.ndarray) -> float:
    """SSIM between gradient-magnitude images.

    Gradients are central differences with edge replication, so constant
    images have exactly zero gradient and compare as identical.
    """
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise shape_error(
            "quality", f"gradient_ssim shapes differ: {reference.shape} vs {test.shape}"
        )
    return ssim(_gradient_magnitude(reference), _gradient_magnitude(test))


def train_quality(pairs, config: QualityTrainConfig) -> tuple[Network, list[float]]:
    """Regress sigmoid scores onto target values in [0, 1].

    pairs: sequence of (64x64 HU patch, target score). Returns the trained
    network and the per-iteration loss history.
    """
    pairs = list(pairs)
    if not pairs:
        raise domain_error("quality", "training needs at least one (patch, score) pair")
    inputs = np.stack([hu_to_unit(p) for p, _ in pairs])[:, None, None]
    targets = np.array([float(t) for _, t in pairs])
    if inputs.shape[3:] != (PATCH_SIZE, PATCH_SIZE):
        raise shape_error("quality", f"patches must be 64x64, got {inputs.shape[3:]}")
    if targets.min() < 0.0 or targets.max() > 1.0:
        raise domain_error("quality", "target scores must lie in [0, 1]")

    rng = np.random.default_rng(config.seed)
    net = build_quality_net(config.seed)
    opt = Adam(lr=config.lr)
    history = []
    for _ in range(config.iterations):
        idx = rng.integers(0, len(pairs), size=config.batch)
        x = inputs[idx]
        t = targets[idx][:, None]
        net.zero_grads()
        out = net.forward(x)
        diff = out - t
        history.append(float(np.mean(diff * diff)))
        net.backward(2.0 * diff / diff.size, need_input_grad=False)
        opt.step(net.params())
    return net, history


def score_quality(net: Network, patch: np.ndarray) -> float:
    """Deterministic quality score in (0, 1) for one 64x64 HU patch."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (PATCH_SIZE, PATCH_SIZE):
        raise shape_error("quality", f"patch must be 64x64, got {patch.shape}")
    x = hu_to_unit(patch)[None, None, None]
    return float(net.forward(x)[0, 0])


def quality_target(clean_patch: np.ndarray, reduced_patch: np.ndarray) -> float:
    """Training target: gradient SSIM of the window-normalized pair, clamped at 0."""
    value = gradient_ssim(hu_to_unit(clean_patch), hu_to_unit(reduced_patch))
    return max(0.0, value)


def _gradient_magnitude(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    return np.sqrt(gx * gx + gy * gy)
