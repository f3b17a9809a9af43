"""Residual convolutional denoiser that estimates the guidance image.

The network takes a 64x64x9 block, shrinks it to 56x56x1 through four
unpadded 3x3x3 convolutions, grows it back to 64x64 through four 3x3
transposed convolutions, and predicts the denoised central slice. Skip
connections feed each encoder output's central z slice into the mirror
decoder stage, and the input's central slice is added to the final output,
so the stack only has to learn the noise residual. The composite receptive
field is 17x17x9.

HU values are scaled by 1/1000 at the network boundary; the residual path
keeps the mapping exact in HU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, domain_error, shape_error
from .nn import Adam, LayerSpec, Network
from .volume import CtVolume, Patch3d, extract_patches

PATCH_DIMS = (64, 64, 9)  # (px, py, pz)
OUT_SIZE = 64
HU_SCALE = 1000.0

WINDOW_STRIDE = 48  # in-plane stride -> 16-pixel overlap between windows
Z_MARGIN = PATCH_DIMS[2] // 2

GUIDANCE_SPECS = (
    LayerSpec("conv3d-valid", 32, (3, 3, 3)),
    LayerSpec("leaky-relu"),
    LayerSpec("conv3d-valid", 32, (3, 3, 3)),
    LayerSpec("leaky-relu"),
    LayerSpec("conv3d-valid", 32, (3, 3, 3)),
    LayerSpec("leaky-relu"),
    LayerSpec("conv3d-valid", 32, (3, 3, 3)),
    LayerSpec("leaky-relu"),
    LayerSpec("deconv2d", 32, (3, 3)),
    LayerSpec("leaky-relu"),
    LayerSpec("residual-add", source=5),
    LayerSpec("deconv2d", 32, (3, 3)),
    LayerSpec("leaky-relu"),
    LayerSpec("residual-add", source=3),
    LayerSpec("deconv2d", 32, (3, 3)),
    LayerSpec("leaky-relu"),
    LayerSpec("residual-add", source=1),
    LayerSpec("deconv2d", 1, (3, 3)),
    LayerSpec("residual-add", source=-1),
)


@dataclass
class GuidanceTrainConfig:
    iterations: int = 2000
    batch: int = 8
    lr: float = 1e-4
    seed: int = 0


def build_guidance_net(seed: int) -> Network:
    return Network.build(GUIDANCE_SPECS, (1, PATCH_DIMS[2], PATCH_DIMS[1], PATCH_DIMS[0]), seed)


def train_guidance(pairs, config: GuidanceTrainConfig) -> tuple[Network, list[float]]:
    """Minimize MSE between predicted and clean central slices.

    pairs: sequence of (noisy Patch3d 64x64x9, clean (64, 64) slice). Batches
    are drawn with replacement using the config seed; returns the trained
    network and the per-iteration loss history.
    """
    pairs = list(pairs)
    if not pairs:
        raise domain_error("guidance", "training needs at least one (patch, target) pair")
    inputs = np.stack([p.data for p, _ in pairs])[:, None] / HU_SCALE
    targets = np.stack([np.asarray(t, dtype=np.float64) for _, t in pairs])[:, None, None] / HU_SCALE
    if inputs.shape[2:] != (PATCH_DIMS[2], PATCH_DIMS[1], PATCH_DIMS[0]):
        raise shape_error("guidance", f"patches must be 64x64x9, got {inputs.shape[2:]}")

    rng = np.random.default_rng(config.seed)
    net = build_guidance_net(config.seed)
    opt = Adam(lr=config.lr)
    history = []
    for _ in range(config.iterations):
        idx = rng.integers(0, len(pairs), size=config.batch)
        x = inputs[idx]
        t = targets[idx]
        net.zero_grads()
        out = net.forward(x)
        diff = out - t
        history.append(float(np.mean(diff * diff)))
        net.backward(2.0 * diff / diff.size, need_input_grad=False)
        opt.step(net.params())
    return net, history


def estimate_guidance(net: Network, vol: CtVolume, batch: int = 4) -> CtVolume:
    """Denoise a volume by sliding 64x64x9 windows.

    Windows advance 48 pixels in plane and 1 slice in z; each prediction is
    written to the window's central slice and overlaps are averaged with
    uniform weights. In-plane strips beyond the last window and the 4
    outermost slices keep the noisy input values.
    """
    if vol.nz < PATCH_DIMS[2]:
        raise shape_error("guidance", f"volume needs nz >= {PATCH_DIMS[2]}, got {vol.nz}")
    if net is None:
        raise ConfigError("guidance network not loaded")
    origins = [
        (x0, y0, z0)
        for z0 in range(0, vol.nz - PATCH_DIMS[2] + 1)
        for y0 in _window_starts(vol.ny)
        for x0 in _window_starts(vol.nx)
    ]
    acc = np.zeros_like(vol.data)
    cnt = np.zeros_like(vol.data)
    for i in range(0, len(origins), batch):
        chunk = origins[i : i + batch]
        x = np.stack(
            [
                vol.data[z0 : z0 + PATCH_DIMS[2], y0 : y0 + OUT_SIZE, x0 : x0 + OUT_SIZE]
                for x0, y0, z0 in chunk
            ]
        )[:, None] / HU_SCALE
        out = net.forward(x) * HU_SCALE
        for j, (x0, y0, z0) in enumerate(chunk):
            acc[z0 + Z_MARGIN, y0 : y0 + OUT_SIZE, x0 : x0 + OUT_SIZE] += out[j, 0, 0]
            cnt[z0 + Z_MARGIN, y0 : y0 + OUT_SIZE, x0 : x0 + OUT_SIZE] += 1.0
    data = vol.data.copy()
    covered = cnt > 0
    data[covered] = acc[covered] / cnt[covered]
    return vol.with_data(data)


def build_training_pairs(clean: CtVolume, noisy: CtVolume) -> list[tuple[Patch3d, np.ndarray]]:
    """Non-overlapping 64x64x9 patches from the noisy volume, each paired with
    the clean volume's central slice over the same in-plane footprint."""
    if clean.dims != noisy.dims:
        raise shape_error("guidance", f"clean dims {clean.dims} != noisy dims {noisy.dims}")
    pairs = []
    for patch in extract_patches(noisy, PATCH_DIMS):
        x0, y0, z0 = patch.origin
        target = clean.data[z0 + Z_MARGIN, y0 : y0 + OUT_SIZE, x0 : x0 + OUT_SIZE]
        pairs.append((patch, np.array(target)))
    return pairs


def _window_starts(extent: int) -> list[int]:
    return list(range(0, extent - OUT_SIZE + 1, WINDOW_STRIDE))
