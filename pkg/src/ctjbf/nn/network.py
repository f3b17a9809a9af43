"""Sequential network container with residual skip edges.

A network is declared as an ordered list of LayerSpecs. Shapes are validated
at build time by composing each layer's out_shape, so a malformed topology
fails before any arithmetic. Weights are He-uniform initialized from a seed,
which makes two builds with the same seed bit-identical.

External tensor layout is (batch, channel, z, y, x) for convolution-stage
inputs/outputs and (batch, features) after a fully-connected layer; the
channel-first internal layout of layers.py is hidden here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import StateError, shape_error
from .layers import (
    Conv3d,
    Deconv2d,
    FullyConnected,
    Layer,
    LeakyReLU,
    MeanPool2x2,
    ResidualAdd,
    Sigmoid,
)
from .tensor import Tensor

INPUT_SOURCE = -1  # residual-add source index meaning "the network input"


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description.

    kind: conv3d-valid | conv2d-valid | deconv2d | fully-connected |
          leaky-relu | sigmoid | residual-add | mean-pool
    filters: output channels / neurons for weighted layers
    kernel: (kz, ky, kx) for convs, (ky, kx) for deconv2d
    source: producing layer index for residual-add (-1 = network input)
    """

    kind: str
    filters: int | None = None
    kernel: tuple | None = None
    source: int | None = None


class Network:
    """Ordered layers + weights; supports forward, backward, and cloning."""

    def __init__(self, specs, layers, input_shape, seed):
        self.specs: tuple[LayerSpec, ...] = tuple(specs)
        self.layers: list[Layer] = layers
        self.input_shape = tuple(input_shape)  # per-sample (C, Z, Y, X)
        self.seed = seed
        self._fwd_ready = False

    # -- construction ------------------------------------------------------

    @staticmethod
    def build(specs, input_shape, seed: int) -> "Network":
        rng = np.random.default_rng(seed)
        layers: list[Layer] = []
        shape = tuple(input_shape)
        shapes = []
        for i, spec in enumerate(specs):
            try:
                layer = _make_layer(spec, shape)
                if spec.kind == "residual-add":
                    src_shape = (
                        tuple(input_shape)
                        if spec.source == INPUT_SOURCE
                        else shapes[spec.source]
                    )
                    _check_residual(shape, src_shape)
                shape = layer.out_shape(shape)
            except Exception as exc:
                raise shape_error("nn", f"layer {i} ({spec.kind}): {exc}") from exc
            layers.append(layer)
            shapes.append(shape)
        net = Network(specs, layers, input_shape, seed)
        for layer in layers:
            _init_weights(layer, rng)
        return net

    def clone(self) -> "Network":
        """Independent deep copy of topology and weights (not buffers)."""
        other = Network.build(self.specs, self.input_shape, self.seed)
        for mine, theirs in zip(self.params(), other.params()):
            theirs.data[...] = mine.data
        return other

    # -- execution ---------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Run the network on a batch; caches activations for backward."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise shape_error(
                "nn",
                f"input per-sample shape {x.shape[1:]} != expected {self.input_shape}",
            )
        if x.ndim == 5:
            cur = np.ascontiguousarray(np.moveaxis(x, 0, 1))  # (C, B, Z, Y, X)
        else:
            cur = x
        self._input = cur
        outs = []
        for spec, layer in zip(self.specs, self.layers):
            if spec.kind == "residual-add":
                src = self._input if spec.source == INPUT_SOURCE else outs[spec.source]
                cur = layer.forward(cur, src)
            else:
                cur = layer.forward(cur)
            outs.append(cur)
        self._outs = outs
        self._fwd_ready = True
        if cur.ndim == 5:
            return np.ascontiguousarray(np.moveaxis(cur, 0, 1))
        return cur

    def backward(self, dy: np.ndarray, need_input_grad: bool = True) -> Tensor | None:
        """Accumulate weight gradients from the loss gradient of the output.

        Must follow the matching forward() on this instance. Returns the
        gradient with respect to the network input as a Tensor (external
        layout), or None when need_input_grad is False.
        """
        if not self._fwd_ready:
            raise StateError("backward called before forward (no cached activations)")
        dy = np.asarray(dy, dtype=np.float64)
        n = len(self.layers)
        if self._outs[-1].ndim == 5:
            dy = np.ascontiguousarray(np.moveaxis(dy, 0, 1))
        pending: list[np.ndarray | None] = [None] * n
        pending[n - 1] = dy
        dinput = None

        def add_to(idx, g):
            nonlocal dinput
            if idx == INPUT_SOURCE:
                dinput = g if dinput is None else dinput + g
            else:
                pending[idx] = g if pending[idx] is None else pending[idx] + g

        for i in range(n - 1, -1, -1):
            g = pending[i]
            if g is None:
                continue
            layer = self.layers[i]
            spec = self.specs[i]
            want_dx = need_input_grad or i > _first_weighted(self.specs)
            if spec.kind == "residual-add":
                dx, dsrc = layer.backward(g)
                add_to(spec.source, dsrc)
            else:
                dx = layer.backward(g, need_input_grad=want_dx)
            if dx is not None:
                add_to(i - 1, dx)
        self._fwd_ready = False
        if dinput is None:
            return None
        if dinput.ndim == 5:
            dinput = np.ascontiguousarray(np.moveaxis(dinput, 0, 1))
        return Tensor(dinput)

    # -- parameters --------------------------------------------------------

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def zero_grads(self) -> None:
        for t in self.params():
            t.zero_grad()

    def num_weights(self) -> int:
        return sum(t.size for t in self.params())

    def entries(self):
        """(kind, [tensors]) per layer, in declaration order (for checkpoints)."""
        return [(spec.kind, layer.params()) for spec, layer in zip(self.specs, self.layers)]


def _first_weighted(specs) -> int:
    for i, s in enumerate(specs):
        if s.kind in ("conv3d-valid", "conv2d-valid", "deconv2d", "fully-connected"):
            return i
    return 0


def _make_layer(spec: LayerSpec, in_shape) -> Layer:
    kind = spec.kind
    if kind in ("conv3d-valid", "conv2d-valid"):
        kernel = spec.kernel if spec.kernel else ((3, 3, 3) if kind == "conv3d-valid" else (1, 3, 3))
        if len(kernel) == 2:
            kernel = (1, *kernel)
        if kind == "conv2d-valid" and kernel[0] != 1:
            raise ValueError(f"conv2d kernel must have kz=1, got {kernel}")
        return Conv3d(in_shape[0], spec.filters, kernel)
    if kind == "deconv2d":
        kernel = spec.kernel or (3, 3)
        if len(kernel) == 3:
            kernel = kernel[1:]
        return Deconv2d(in_shape[0], spec.filters, kernel)
    if kind == "fully-connected":
        return FullyConnected(int(np.prod(in_shape)), spec.filters)
    if kind == "leaky-relu":
        return LeakyReLU()
    if kind == "sigmoid":
        return Sigmoid()
    if kind == "mean-pool":
        return MeanPool2x2()
    if kind == "residual-add":
        if spec.source is None:
            raise ValueError("residual-add needs a source layer")
        return ResidualAdd(spec.source)
    raise ValueError(f"unknown layer kind {kind!r}")


def _check_residual(cur_shape, src_shape):
    if src_shape[0] != cur_shape[0]:
        raise ValueError(
            f"residual source channels {src_shape[0]} != current {cur_shape[0]}"
        )
    if src_shape[2] < cur_shape[2] or src_shape[3] < cur_shape[3]:
        raise ValueError(
            f"residual source spatial {src_shape} smaller than current {cur_shape}"
        )


def _init_weights(layer: Layer, rng: np.random.Generator) -> None:
    """He-uniform by fan-in; biases start at zero."""
    if isinstance(layer, (Conv3d, Deconv2d)):
        fan_in = layer.in_channels * int(np.prod(layer.kernel))
        limit = np.sqrt(6.0 / fan_in)
        layer.w.data[...] = rng.uniform(-limit, limit, size=layer.w.shape)
    elif isinstance(layer, FullyConnected):
        limit = np.sqrt(6.0 / layer.in_features)
        layer.w.data[...] = rng.uniform(-limit, limit, size=layer.w.shape)
