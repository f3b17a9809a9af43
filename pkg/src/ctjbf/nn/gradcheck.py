"""Analytic-versus-numeric gradient comparison on a scalar MSE head.

Central differences with h = 1e-5 are compared against the gradients produced
by backward(). The relative error uses a scale-aware floor so parameters with
negligible gradient do not dominate the report:

    rel = |analytic - numeric| / (|analytic| + |numeric| + 1e-6 * (1 + gmax))

where gmax is the largest numeric gradient magnitude over the whole check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import domain_error

WEIGHT_LIMIT = 10_000
STEP = 1e-5


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    worst_param: int
    worst_index: tuple
    input_max_rel_error: float

    def __str__(self):
        return (
            f"gradcheck: {self.checked} weights, max rel err {self.max_rel_error:.3e} "
            f"(param {self.worst_param} at {self.worst_index}), "
            f"input max rel err {self.input_max_rel_error:.3e}"
        )


def finite_diff_check(net, x: np.ndarray, target: np.ndarray | None = None) -> GradCheckReport:
    """Compare backward() gradients with central differences.

    Checks every weight and the network input on the loss
    L = mean((net(x) - target)^2). Nets are limited to 10^4 weights to keep
    the quadratic cost at desk scale.
    """
    if net.num_weights() > WEIGHT_LIMIT:
        raise domain_error(
            "nn", f"finite_diff_check is for nets with <= {WEIGHT_LIMIT} weights, got {net.num_weights()}"
        )
    x = np.asarray(x, dtype=np.float64)
    y = net.forward(x)
    if target is None:
        target = np.zeros_like(y)

    def loss_only():
        out = net.forward(x)
        net._fwd_ready = False
        return float(np.mean((out - target) ** 2))

    net.zero_grads()
    y = net.forward(x)
    dy = 2.0 * (y - target) / y.size
    din = net.backward(dy, need_input_grad=True)
    params = net.params()
    analytic = [p.grad.copy() for p in params]

    numeric = [np.zeros_like(p.data) for p in params]
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        num_flat = numeric[pi].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + STEP
            lp = loss_only()
            flat[i] = orig - STEP
            lm = loss_only()
            flat[i] = orig
            num_flat[i] = (lp - lm) / (2.0 * STEP)

    gmax = max((np.abs(n).max() for n in numeric if n.size), default=0.0)
    floor = 1e-6 * (1.0 + gmax)
    worst = 0.0
    worst_param, worst_index = -1, ()
    checked = 0
    for pi, (a, n) in enumerate(zip(analytic, numeric)):
        rel = np.abs(a - n) / (np.abs(a) + np.abs(n) + floor)
        checked += a.size
        if a.size and rel.max() > worst:
            worst = float(rel.max())
            worst_param = pi
            worst_index = np.unravel_index(np.argmax(rel), rel.shape)

    # input gradient against the same differences
    num_in = np.zeros_like(x)
    flat = x.reshape(-1)
    num_flat = num_in.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + STEP
        lp = loss_only()
        flat[i] = orig - STEP
        lm = loss_only()
        flat[i] = orig
        num_flat[i] = (lp - lm) / (2.0 * STEP)
    gmax_in = max(gmax, float(np.abs(num_in).max()))
    rel_in = np.abs(din.data - num_in) / (
        np.abs(din.data) + np.abs(num_in) + 1e-6 * (1.0 + gmax_in)
    )
    return GradCheckReport(
        max_rel_error=worst,
        checked=checked,
        worst_param=worst_param,
        worst_index=worst_index,
        input_max_rel_error=float(rel_in.max()),
    )
