"""End-to-end denoising: guidance estimation, agent-driven parameter tuning,
and iterated joint bilateral filtering.

The guidance image is estimated once from the input volume. Each filter
iteration resets the sigma pair to its initial guesses, runs a fixed number
of greedy tuning steps, applies the filter with the tuned parameters, and
appends its tuning decisions to the parameter trace. Tuning is either global
(one rollout at the volume's center of mass) or tile-wise (independent
rollouts per in-plane tile, cross-faded into a per-voxel parameter map).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agent import (
    AgentNetwork,
    TuningRollout,
    TuningState,
    fidelity_reward,
    quality_reward,
    select,
)
from .errors import ConfigError
from .filtering import DEFAULT_KERNEL, JbfParams, ParamMap, jbf_apply
from .guidance import estimate_guidance
from .nn import Network
from .volume import CtVolume

STATE_MARGINS = (4, 4, 2)  # half extents of the 9x9x5 state patch


@dataclass
class DenoiseConfig:
    jbf_iterations: int = 4
    tuning_steps: int = 5
    sigma_s_init: float = 1.5
    sigma_i_init: float = 30.0
    mode: str = "global"  # "global" | "tile"
    tile_size: int = 64
    blend_margin: int = 16
    kernel_dims: tuple[int, int, int] = DEFAULT_KERNEL

    def __post_init__(self):
        if self.jbf_iterations < 1:
            raise ConfigError(f"jbf_iterations must be >= 1, got {self.jbf_iterations}")
        if self.tuning_steps < 0:
            raise ConfigError(f"tuning_steps must be >= 0, got {self.tuning_steps}")
        if self.sigma_s_init <= 0 or self.sigma_i_init <= 0:
            raise ConfigError("sigma initial guesses must be > 0")
        if self.mode not in ("global", "tile"):
            raise ConfigError(f"mode must be 'global' or 'tile', got {self.mode!r}")


@dataclass
class TraceRecord:
    iteration: int
    step: int
    param: int
    action: int
    sigma_s: float
    sigma_i: float
    reward: float
    tile: int = 0

    def to_line(self) -> str:
        return (
            f"{self.iteration} {self.step} {self.param} {self.action} "
            f"{self.sigma_s:.6g} {self.sigma_i:.6g} {self.reward:.6g}"
        )


@dataclass
class ParameterTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def to_text(self) -> str:
        return "\n".join(r.to_line() for r in self.records) + ("\n" if self.records else "")

    def __len__(self):
        return len(self.records)


def denoise_volume(
    vol: CtVolume,
    guidance_net: Network,
    quality_net: Network,
    agent_net: AgentNetwork | None,
    config: DenoiseConfig | None = None,
    reference: CtVolume | None = None,
) -> tuple[CtVolume, ParameterTrace]:
    """Full inference pass; returns the denoised volume and the tuning trace.

    With a reference volume, tuning switches to the ground-truth fidelity
    reward and chooses each step by one-step lookahead over all candidate
    actions (the PT-GT arm); the agent network is not consulted then.
    """
    config = config or DenoiseConfig()
    if guidance_net is None or quality_net is None:
        raise ConfigError("denoise needs guidance and quality networks")
    if agent_net is None and config.tuning_steps > 0 and reference is None:
        raise ConfigError("denoise needs an agent network when tuning is enabled")
    guidance = estimate_guidance(guidance_net, vol)
    current = vol
    trace = ParameterTrace()
    for iteration in range(config.jbf_iterations):
        init = TuningState(config.sigma_s_init, config.sigma_i_init)
        params = tune_parameters(
            current, guidance, agent_net, quality_net, init,
            config.tuning_steps, config, trace, iteration, reference,
        )
        current = jbf_apply(current, guidance, params)
    return current, trace


def tune_parameters(
    noisy: CtVolume,
    guidance: CtVolume,
    agent_net: AgentNetwork | None,
    quality_net: Network,
    init: TuningState,
    steps: int,
    config: DenoiseConfig | None = None,
    trace: ParameterTrace | None = None,
    iteration: int = 0,
    reference: CtVolume | None = None,
) -> JbfParams | ParamMap:
    """Greedy tuning rollouts; returns scalar params or a per-voxel map.

    Global mode runs one rollout at the volume's center of mass. Tile mode
    runs one rollout per in-plane tile (state at the tile center) and builds
    a ParamMap with a linear cross-fade over the blend margin.
    """
    config = config or DenoiseConfig()
    if steps == 0:
        if config.mode == "global":
            return JbfParams(init.sigma_s, init.sigma_i, config.kernel_dims)
    if config.mode == "global":
        center = _clamp_center(_center_of_mass(noisy), noisy.dims)
        tuned = _run_rollout(
            noisy, guidance, agent_net, quality_net, init, steps,
            center, config, trace, iteration, 0, reference,
        )
        return JbfParams(tuned.sigma_s, tuned.sigma_i, config.kernel_dims)

    tiles = _tile_grid(noisy.dims, config.tile_size)
    sigmas = []
    for tile_idx, (tx, ty, tw, th) in enumerate(tiles):
        center = _clamp_center((tx + tw // 2, ty + th // 2, noisy.nz // 2), noisy.dims)
        tuned = _run_rollout(
            noisy, guidance, agent_net, quality_net, init, steps,
            center, config, trace, iteration, tile_idx, reference,
        )
        sigmas.append((tuned.sigma_s, tuned.sigma_i))
    ss, si = _blend_tiles(noisy.dims, tiles, sigmas, config.blend_margin)
    return ParamMap(ss, si, config.kernel_dims)


def _run_rollout(
    noisy, guidance, agent_net, quality_net, init, steps,
    center, config, trace, iteration, tile_idx, reference,
) -> TuningState:
    if steps == 0:
        return init
    if reference is not None:
        rollout = TuningRollout(
            noisy, guidance, init, center,
            lambda b, a: 0.0, config.kernel_dims,
        )
        rollout.reward_fn = fidelity_reward(rollout.region_reference(reference))
    else:
        rollout = TuningRollout(
            noisy, guidance, init, center, quality_reward(quality_net), config.kernel_dims
        )
    rng = np.random.default_rng(0)  # greedy selection draws nothing
    for step in range(steps):
        if reference is not None:
            p, t = _best_fidelity_choice(rollout)
        else:
            p, t = select(agent_net, rollout.state_patch, 0.0, rng)
        reward = rollout.step(p, t)
        if trace is not None:
            trace.records.append(
                TraceRecord(
                    iteration=iteration, step=step, param=p, action=t,
                    sigma_s=rollout.tuning.sigma_s, sigma_i=rollout.tuning.sigma_i,
                    reward=reward, tile=tile_idx,
                )
            )
    return rollout.tuning


def _best_fidelity_choice(rollout: TuningRollout) -> tuple[int, int]:
    """One-step lookahead: the (parameter, action) pair with the best
    immediate ground-truth reward; ties break to the lowest indices."""
    best = None
    for p in range(2):
        for t in range(5):
            _, reward, _, _ = rollout.preview(p, t)
            if best is None or reward > best[0] + 1e-15:
                best = (reward, p, t)
    return best[1], best[2]


def _center_of_mass(vol: CtVolume) -> tuple[int, int, int]:
    """Intensity-weighted centroid with air at roughly zero weight."""
    w = np.clip(vol.data + 1000.0, 0.0, None)
    total = w.sum()
    if total <= 0.0:
        return (vol.nx // 2, vol.ny // 2, vol.nz // 2)
    zz, yy, xx = np.meshgrid(
        np.arange(vol.nz), np.arange(vol.ny), np.arange(vol.nx), indexing="ij"
    )
    return (
        int(round((w * xx).sum() / total)),
        int(round((w * yy).sum() / total)),
        int(round((w * zz).sum() / total)),
    )


def _clamp_center(center, dims) -> tuple[int, int, int]:
    mx, my, mz = STATE_MARGINS
    nx, ny, nz = dims
    cx, cy, cz = center
    return (
        min(max(cx, mx), nx - mx - 1),
        min(max(cy, my), ny - my - 1),
        min(max(cz, mz), nz - mz - 1),
    )


def _tile_grid(dims, tile_size):
    nx, ny, _ = dims
    tiles = []
    for ty in range(0, ny, tile_size):
        for tx in range(0, nx, tile_size):
            tiles.append((tx, ty, min(tile_size, nx - tx), min(tile_size, ny - ty)))
    return tiles


def _blend_tiles(dims, tiles, sigmas, margin):
    """Per-voxel sigma fields: trapezoidal tile weights, normalized, constant
    along z. Adjacent tiles cross-fade linearly over the blend margin."""
    nx, ny, nz = dims
    xs = np.arange(nx, dtype=np.float64)
    ys = np.arange(ny, dtype=np.float64)
    half = max(margin, 1) / 2.0
    acc_w = np.zeros((ny, nx))
    acc_ss = np.zeros((ny, nx))
    acc_si = np.zeros((ny, nx))
    for (tx, ty, tw, th), (ss, si) in zip(tiles, sigmas):
        wx = _trapezoid(xs, tx, tx + tw, half)
        wy = _trapezoid(ys, ty, ty + th, half)
        w = wy[:, None] * wx[None, :]
        acc_w += w
        acc_ss += w * ss
        acc_si += w * si
    ss_map = acc_ss / acc_w
    si_map = acc_si / acc_w
    return (
        np.broadcast_to(ss_map, (nz, ny, nx)).copy(),
        np.broadcast_to(si_map, (nz, ny, nx)).copy(),
    )


def _trapezoid(coords, lo, hi, half):
    """1 well inside [lo, hi), ramping to 0 at +-half outside the edges."""
    rise = np.clip((coords - (lo - half)) / (2.0 * half), 0.0, 1.0)
    fall = np.clip(((hi - 1 + half) - coords) / (2.0 * half), 0.0, 1.0)
    return np.minimum(rise, fall)
