"""Layer implementations for the minimal deterministic network core.

Convolution-stage activations use a channel-first internal layout
(C, B, Z, Y, X) so the im2col buffers can be filled with long contiguous
copies; fully-connected stages use (B, features). Each layer caches what its
backward pass needs on self, so backward() must follow the matching
forward() on the same instance.

Valid convolutions are computed by packing the (channel, z-offset, y-offset)
triples into the gemm contraction dimension and handling the x-offset with a
single stacked gemm over the full row width followed by shifted accumulation;
this keeps the BLAS calls large and the gather copies contiguous.
"""

from __future__ import annotations

import numpy as np

from ..errors import shape_error
from .tensor import Tensor


class Layer:
    kind = "?"

    def params(self) -> list[Tensor]:
        return []

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv3d(Layer):
    """Valid (unpadded) cross-correlation; kernel (kz, ky, kx), stride 1.

    With kz == 1 this is a plain 2D convolution applied per z slice, which is
    how the 2D layers of the head and scoring networks are realized.
    """

    def __init__(self, in_channels: int, filters: int, kernel: tuple[int, int, int]):
        kz, ky, kx = kernel
        if min(kz, ky, kx) < 1 or kz % 2 == 0 or ky % 2 == 0 or kx % 2 == 0:
            raise shape_error("nn", f"conv kernel must be odd, got {kernel}")
        self.in_channels = in_channels
        self.filters = filters
        self.kernel = (kz, ky, kx)
        self.w = Tensor(np.zeros((filters, in_channels, kz, ky, kx)))
        self.b = Tensor(np.zeros(filters))
        self._cols = None
        self._work = None
        self._shape_key = None

    @property
    def kind(self):
        return "conv3d-valid" if self.kernel[0] > 1 else "conv2d-valid"

    def params(self):
        return [self.w, self.b]

    def out_shape(self, in_shape):
        c, z, y, x = in_shape
        kz, ky, kx = self.kernel
        if c != self.in_channels:
            raise shape_error(
                "nn", f"{self.kind}: got {c} channels, layer expects {self.in_channels}"
            )
        zo, yo, xo = z - kz + 1, y - ky + 1, x - kx + 1
        if min(zo, yo, xo) < 1:
            raise shape_error(
                "nn", f"{self.kind}: input {in_shape} smaller than kernel {self.kernel}"
            )
        return (self.filters, zo, yo, xo)

    def forward(self, x):
        c, bsz, z, y, xw = x.shape
        kz, ky, kx = self.kernel
        co = self.filters
        _, zo, yo, xo = self.out_shape((c, z, y, xw))
        k = c * kz * ky
        n = bsz * zo * yo * xw
        key = (x.shape,)
        if self._shape_key != key:
            self._cols = np.empty((k, bsz, zo, yo, xw))
            self._work = np.empty((kx * co, n))
            self._shape_key = key
        cols = self._cols
        r = 0
        for ci in range(c):
            for dz in range(kz):
                for dy in range(ky):
                    cols[r] = x[ci, :, dz : dz + zo, dy : dy + yo, :]
                    r += 1
        wstack = np.ascontiguousarray(
            self.w.data.transpose(4, 0, 1, 2, 3)
        ).reshape(kx * co, k)
        np.matmul(wstack, cols.reshape(k, n), out=self._work)
        g = self._work.reshape(kx, co, bsz, zo, yo, xw)
        out = np.empty((co, bsz, zo, yo, xo))
        out[...] = g[0][..., 0:xo]
        for dx in range(1, kx):
            out += g[dx][..., dx : dx + xo]
        out += self.b.data[:, None, None, None, None]
        self._x_shape = x.shape
        return out

    def backward(self, dy, need_input_grad=True):
        c, bsz, z, y, xw = self._x_shape
        kz, ky, kx = self.kernel
        co = self.filters
        zo, yo, xo = z - kz + 1, y - ky + 1, xw - kx + 1
        k = c * kz * ky
        n = bsz * zo * yo * xw
        emb = self._work
        emb.fill(0.0)
        embv = emb.reshape(kx, co, bsz, zo, yo, xw)
        for dx in range(kx):
            embv[dx][..., dx : dx + xo] = dy
        cols_m = self._cols.reshape(k, n)
        dw_stack = emb @ cols_m.T  # (kx*co, k)
        dw = dw_stack.reshape(kx, co, c, kz, ky).transpose(1, 2, 3, 4, 0)
        self.w.ensure_grad()
        self.w.grad += dw
        self.b.ensure_grad()
        self.b.grad += dy.sum(axis=(1, 2, 3, 4))
        if not need_input_grad:
            return None
        wstack = np.ascontiguousarray(
            self.w.data.transpose(4, 0, 1, 2, 3)
        ).reshape(kx * co, k)
        np.matmul(wstack.T, emb, out=cols_m)  # dcols overwrites the cols buffer
        dcols = cols_m.reshape(k, bsz, zo, yo, xw)
        dx_full = np.zeros((c, bsz, z, y, xw))
        r = 0
        for ci in range(c):
            for dz in range(kz):
                for dy_ in range(ky):
                    dx_full[ci, :, dz : dz + zo, dy_ : dy_ + yo, :] += dcols[r]
                    r += 1
        return dx_full


class Deconv2d(Layer):
    """Stride-1 transposed 2D convolution: each spatial dim grows by kernel-1.

    Realized as zero-padding by kernel-1 followed by a valid convolution with
    the spatially flipped kernel, which reuses the Conv3d compute path. The z
    extent passes through unchanged (kernels are 1 x ky x kx).
    """

    kind = "deconv2d"

    def __init__(self, in_channels: int, filters: int, kernel: tuple[int, int] = (3, 3)):
        ky, kx = kernel
        self.in_channels = in_channels
        self.filters = filters
        self.kernel = (1, ky, kx)
        self.w = Tensor(np.zeros((filters, in_channels, 1, ky, kx)))
        self.b = Tensor(np.zeros(filters))
        self._conv = Conv3d(in_channels, filters, self.kernel)
        self._conv.b = self.b

    def params(self):
        return [self.w, self.b]

    def out_shape(self, in_shape):
        c, z, y, x = in_shape
        _, ky, kx = self.kernel
        if c != self.in_channels:
            raise shape_error(
                "nn", f"deconv2d: got {c} channels, layer expects {self.in_channels}"
            )
        return (self.filters, z, y + ky - 1, x + kx - 1)

    def forward(self, x):
        _, ky, kx = self.kernel
        xp = np.pad(
            x, ((0, 0), (0, 0), (0, 0), (ky - 1, ky - 1), (kx - 1, kx - 1))
        )
        self._conv.w = Tensor(self.w.data[:, :, :, ::-1, ::-1].copy())
        return self._conv.forward(xp)

    def backward(self, dy, need_input_grad=True):
        _, ky, kx = self.kernel
        dxp = self._conv.backward(dy, need_input_grad=need_input_grad)
        self.w.ensure_grad()
        self.w.grad += self._conv.w.grad[:, :, :, ::-1, ::-1]
        if not need_input_grad:
            return None
        return dxp[:, :, :, ky - 1 : dxp.shape[3] - ky + 1, kx - 1 : dxp.shape[4] - kx + 1]


class FullyConnected(Layer):
    """Dense layer; flattens convolution-stage input per sample."""

    kind = "fully-connected"

    def __init__(self, in_features: int, out_features: int):
        self.in_features = in_features
        self.out_features = out_features
        self.w = Tensor(np.zeros((out_features, in_features)))
        self.b = Tensor(np.zeros(out_features))

    def params(self):
        return [self.w, self.b]

    def out_shape(self, in_shape):
        feat = int(np.prod(in_shape))
        if feat != self.in_features:
            raise shape_error(
                "nn",
                f"fully-connected: input {in_shape} has {feat} features, expects {self.in_features}",
            )
        return (self.out_features,)

    def forward(self, x):
        if x.ndim == 5:  # (C, B, Z, Y, X) -> (B, C*Z*Y*X)
            self._conv_shape = x.shape
            flat = np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4)).reshape(
                x.shape[1], -1
            )
        else:
            self._conv_shape = None
            flat = x
        self._x = flat
        return flat @ self.w.data.T + self.b.data

    def backward(self, dy, need_input_grad=True):
        self.w.ensure_grad()
        self.w.grad += dy.T @ self._x
        self.b.ensure_grad()
        self.b.grad += dy.sum(axis=0)
        if not need_input_grad:
            return None
        dx = dy @ self.w.data
        if self._conv_shape is not None:
            c, bsz, z, y, xw = self._conv_shape
            dx = np.ascontiguousarray(
                dx.reshape(bsz, c, z, y, xw).transpose(1, 0, 2, 3, 4)
            )
        return dx


class LeakyReLU(Layer):
    kind = "leaky-relu"

    def __init__(self, slope: float = 0.01):
        self.slope = slope

    def forward(self, x):
        mask = np.where(x > 0, 1.0, self.slope)
        self._mask = mask
        return x * mask

    def backward(self, dy, need_input_grad=True):
        return dy * self._mask


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = 1.0 / (1.0 + np.exp(-x))
        self._y = y
        return y

    def backward(self, dy, need_input_grad=True):
        return dy * self._y * (1.0 - self._y)


class MeanPool2x2(Layer):
    """2x2 mean pooling, stride 2, over the trailing (y, x) axes.

    Odd trailing rows/columns are dropped (floor semantics); their gradient
    is zero.
    """

    kind = "mean-pool"

    def out_shape(self, in_shape):
        c, z, y, x = in_shape
        if y < 2 or x < 2:
            raise shape_error("nn", f"mean-pool: spatial dims too small in {in_shape}")
        return (c, z, y // 2, x // 2)

    def forward(self, x):
        c, bsz, z, y, xw = x.shape
        self._x_shape = x.shape
        ye, xe = (y // 2) * 2, (xw // 2) * 2
        v = x[:, :, :, :ye, :xe].reshape(c, bsz, z, y // 2, 2, xw // 2, 2)
        return v.mean(axis=(4, 6))

    def backward(self, dy, need_input_grad=True):
        c, bsz, z, y, xw = self._x_shape
        dx = np.zeros(self._x_shape)
        ye, xe = (y // 2) * 2, (xw // 2) * 2
        spread = np.repeat(np.repeat(dy, 2, axis=3), 2, axis=4)
        dx[:, :, :, :ye, :xe] = 0.25 * spread
        return dx


class ResidualAdd(Layer):
    """Adds an earlier layer's output (central z slice, center-cropped in
    plane) to the current activation. source is resolved by the network."""

    kind = "residual-add"

    def __init__(self, source: int):
        self.source = source

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, src):
        zc = src.shape[2] // 2
        sl = src[:, :, zc : zc + x.shape[2]]
        oy = (sl.shape[3] - x.shape[3]) // 2
        ox = (sl.shape[4] - x.shape[4]) // 2
        if src.shape[0] != x.shape[0] or oy < 0 or ox < 0:
            raise shape_error(
                "nn",
                f"residual-add: source shape {src.shape} incompatible with {x.shape}",
            )
        self._src_shape = src.shape
        self._zc, self._oy, self._ox = zc, oy, ox
        self._x_shape = x.shape
        return x + sl[:, :, :, oy : oy + x.shape[3], ox : ox + x.shape[4]]

    def backward(self, dy, need_input_grad=True):
        dsrc = np.zeros(self._src_shape)
        zc, oy, ox = self._zc, self._oy, self._ox
        _, _, z, y, xw = self._x_shape
        dsrc[:, :, zc : zc + z, oy : oy + y, ox : ox + xw] = dy
        return dy, dsrc
