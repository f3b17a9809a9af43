"""Dual-head Q-learning agent that tunes the filter's two sigma parameters.

The policy network shares two 3x3x3 convolution layers over a 9x9x5 state
patch, then splits: one head scores which parameter to tune (2 outputs), the
other scores which multiplicative action to apply (5 outputs). Training uses
a replay pool, a periodically synced frozen copy of the policy net for the
two Bellman targets, and the summed squared-error loss over both heads.

A tuning step never commits a filtered image: the filter is applied
provisionally around the state location to produce the reward and the next
state patch, while the sigma values persist across steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, domain_error, shape_error
from .filtering import DEFAULT_KERNEL, JbfParams, jbf_apply_region
from .metrics import hu_to_unit
from .nn import Adam, LayerSpec, Network, load_entries, save_entries
from .quality import score_quality
from .volume import CtVolume

ACTION_FACTORS = (1.5, 1.1, 1.0, 0.9, 0.5)
PARAM_NAMES = ("sigma_s", "sigma_i")
STATE_DIMS = (9, 9, 5)  # (px, py, pz)
REWARD_PATCH = 64
SIGMA_CLAMP = (1e-3, 1e3)  # relative to the episode's initial values

TRUNK_SPECS = (
    LayerSpec("conv3d-valid", 32, (3, 3, 3)),
    LayerSpec("leaky-relu"),
    LayerSpec("conv3d-valid", 64, (3, 3, 3)),
    LayerSpec("leaky-relu"),
)
PARAM_HEAD_SPECS = (
    LayerSpec("conv2d-valid", 64, (1, 3, 3)),
    LayerSpec("leaky-relu"),
    LayerSpec("fully-connected", 128),
    LayerSpec("leaky-relu"),
    LayerSpec("fully-connected", 2),
)
ACTION_HEAD_SPECS = (
    LayerSpec("conv2d-valid", 128, (1, 3, 3)),
    LayerSpec("leaky-relu"),
    LayerSpec("conv2d-valid", 128, (1, 3, 3)),
    LayerSpec("leaky-relu"),
    LayerSpec("fully-connected", 256),
    LayerSpec("leaky-relu"),
    LayerSpec("fully-connected", 5),
)


@dataclass(frozen=True)
class TuningState:
    """The sigma pair being tuned plus the step index within the episode.

    ref_sigma_* anchor the safety clamps to the episode's initial values.
    """

    sigma_s: float
    sigma_i: float
    step: int = 0
    ref_sigma_s: float | None = None
    ref_sigma_i: float | None = None

    def __post_init__(self):
        if self.sigma_s <= 0 or self.sigma_i <= 0:
            raise domain_error("agent", f"sigmas must be > 0: ({self.sigma_s}, {self.sigma_i})")
        if self.ref_sigma_s is None:
            object.__setattr__(self, "ref_sigma_s", self.sigma_s)
        if self.ref_sigma_i is None:
            object.__setattr__(self, "ref_sigma_i", self.sigma_i)


@dataclass
class Experience:
    """One replay record."""

    patch: np.ndarray  # (5, 9, 9) HU
    tuning: TuningState
    param_choice: int
    action_choice: int
    reward: float
    next_patch: np.ndarray
    next_tuning: TuningState
    terminal: bool


@dataclass(frozen=True)
class BellmanTargets:
    y1: float
    y2: float
    gamma: float

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise domain_error("agent", f"gamma must be in [0, 1), got {self.gamma}")


class AgentNetwork:
    """Shared trunk plus parameter-choice and action-choice heads."""

    def __init__(self, trunk: Network, param_head: Network, action_head: Network):
        self.trunk = trunk
        self.param_head = param_head
        self.action_head = action_head

    def q_values(self, patches: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Head outputs for a batch of (5, 9, 9) HU patches.

        Returns (parameter Q-values (B, 2), action Q-values (B, 5)). Caches
        activations, so a backward() may follow directly.
        """
        patches = np.asarray(patches, dtype=np.float64)
        if patches.ndim == 3:
            patches = patches[None]
        if patches.shape[1:] != (STATE_DIMS[2], STATE_DIMS[1], STATE_DIMS[0]):
            raise shape_error("agent", f"state patches must be 9x9x5, got {patches.shape[1:]}")
        x = hu_to_unit(patches)[:, None]
        h = self.trunk.forward(x)
        return self.param_head.forward(h), self.action_head.forward(h)

    def backward(self, dqp: np.ndarray, dqt: np.ndarray) -> None:
        """Push gradients from both heads through the shared trunk."""
        gp = self.param_head.backward(dqp)
        gt = self.action_head.backward(dqt)
        self.trunk.backward(gp.data + gt.data, need_input_grad=False)

    def params(self):
        return self.trunk.params() + self.param_head.params() + self.action_head.params()

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def entries(self):
        return self.trunk.entries() + self.param_head.entries() + self.action_head.entries()

    def clone(self) -> "AgentNetwork":
        return AgentNetwork(
            self.trunk.clone(), self.param_head.clone(), self.action_head.clone()
        )

    def save(self, path):
        save_entries(self.entries(), path)

    def load(self, path):
        load_entries(self.entries(), path)


def build_agent_net(seed: int) -> AgentNetwork:
    in_shape = (1, STATE_DIMS[2], STATE_DIMS[1], STATE_DIMS[0])
    trunk = Network.build(TRUNK_SPECS, in_shape, seed)
    trunk_out = (64, 1, 5, 5)
    param_head = Network.build(PARAM_HEAD_SPECS, trunk_out, seed + 1)
    action_head = Network.build(ACTION_HEAD_SPECS, trunk_out, seed + 2)
    return AgentNetwork(trunk, param_head, action_head)


def select(
    net: AgentNetwork, patch: np.ndarray, epsilon: float, rng: np.random.Generator
) -> tuple[int, int]:
    """Epsilon-greedy choice of (parameter index, action index).

    With probability 1 - epsilon both heads act greedily (ties break to the
    lowest index); otherwise both choices are uniform random.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise domain_error("agent", f"epsilon must be in [0, 1], got {epsilon}")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(0, 2)), int(rng.integers(0, 5))
    qp, qt = net.q_values(patch[None] if patch.ndim == 3 else patch)
    return int(np.argmax(qp[0])), int(np.argmax(qt[0]))


def apply_action(state: TuningState, p: int, t: int) -> TuningState:
    """Multiply the chosen sigma by the chosen factor, clamped to
    [1e-3, 1e3] times the episode's initial value."""
    if p not in (0, 1) or t not in range(5):
        raise domain_error("agent", f"invalid choice indices ({p}, {t})")
    factor = ACTION_FACTORS[t]
    if p == 0:
        lo, hi = SIGMA_CLAMP[0] * state.ref_sigma_s, SIGMA_CLAMP[1] * state.ref_sigma_s
        return replace(state, sigma_s=min(max(state.sigma_s * factor, lo), hi), step=state.step + 1)
    lo, hi = SIGMA_CLAMP[0] * state.ref_sigma_i, SIGMA_CLAMP[1] * state.ref_sigma_i
    return replace(state, sigma_i=min(max(state.sigma_i * factor, lo), hi), step=state.step + 1)


def compute_reward(quality_net: Network, patch_before: np.ndarray, patch_after: np.ndarray) -> float:
    """Quality-score difference after minus before; lands in (-1, 1)."""
    return score_quality(quality_net, patch_after) - score_quality(quality_net, patch_before)


def bellman_targets(
    reward: float,
    gamma: float,
    target_net: AgentNetwork,
    next_patch: np.ndarray,
    terminal: bool,
) -> BellmanTargets:
    """Dual targets from the frozen policy copy: y = r + gamma * max Q'."""
    if terminal:
        return BellmanTargets(reward, reward, gamma)
    if gamma == 0.0:
        return BellmanTargets(reward, reward, gamma)
    qp, qt = target_net.q_values(next_patch[None] if next_patch.ndim == 3 else next_patch)
    return BellmanTargets(
        reward + gamma * float(qp[0].max()),
        reward + gamma * float(qt[0].max()),
        gamma,
    )


def agent_loss(
    net: AgentNetwork, batch: list[Experience], targets: list[BellmanTargets]
) -> float:
    """Summed squared error of both heads at the taken choices, averaged over
    the batch; gradients are accumulated into the network."""
    if not batch:
        raise domain_error("agent", "agent_loss needs a nonempty batch")
    if len(batch) != len(targets):
        raise domain_error("agent", f"{len(batch)} experiences vs {len(targets)} targets")
    states = np.stack([e.patch for e in batch])
    qp, qt = net.q_values(states)
    n = len(batch)
    rows = np.arange(n)
    p_idx = np.array([e.param_choice for e in batch])
    t_idx = np.array([e.action_choice for e in batch])
    y1 = np.array([t.y1 for t in targets])
    y2 = np.array([t.y2 for t in targets])
    rp = qp[rows, p_idx] - y1
    rt = qt[rows, t_idx] - y2
    loss = float(np.mean(rp**2 + rt**2))
    dqp = np.zeros_like(qp)
    dqt = np.zeros_like(qt)
    dqp[rows, p_idx] = 2.0 * rp / n
    dqt[rows, t_idx] = 2.0 * rt / n
    net.backward(dqp, dqt)
    return loss


def sync_target(policy_net: AgentNetwork) -> AgentNetwork:
    """Frozen deep copy of the policy network."""
    return policy_net.clone()


class ReplayPool:
    """Bounded experience store; a full pool replaces random slots."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise domain_error("agent", f"pool capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: list[Experience] = []
        self._rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self._items)

    def add(self, exp: Experience) -> None:
        if len(self._items) < self.capacity:
            self._items.append(exp)
        else:
            self._items[int(self._rng.integers(0, self.capacity))] = exp

    def sample(self, k: int) -> list[Experience]:
        k = min(k, len(self._items))
        idx = self._rng.choice(len(self._items), size=k, replace=False)
        return [self._items[i] for i in idx]


class TuningRollout:
    """Tuning-episode dynamics at one location of one volume.

    Each step applies the filter provisionally over the local reward region
    and the 9x9x5 state footprint with the post-action sigmas; the reward
    compares the new region against the previous step's, and the filtered
    patch becomes the next state.
    """

    def __init__(
        self,
        noisy: CtVolume,
        guidance: CtVolume,
        init: TuningState,
        center: tuple[int, int, int],
        reward_fn,
        kernel_dims=DEFAULT_KERNEL,
    ):
        cx, cy, cz = center
        px, py, pz = STATE_DIMS
        nx, ny, nz = noisy.dims
        if not (
            px // 2 <= cx < nx - px // 2
            and py // 2 <= cy < ny - py // 2
            and pz // 2 <= cz < nz - pz // 2
        ):
            raise shape_error("agent", f"state center {center} too close to the volume edge")
        self.noisy = noisy
        self.guidance = guidance
        self.tuning = init
        self.center = center
        self.reward_fn = reward_fn
        self.kernel_dims = kernel_dims
        half = REWARD_PATCH // 2
        self._region_origin = (
            min(max(cx - half, 0), max(nx - REWARD_PATCH, 0)),
            min(max(cy - half, 0), max(ny - REWARD_PATCH, 0)),
            cz,
        )
        self._patch_origin = (cx - px // 2, cy - py // 2, cz - pz // 2)
        self.state_patch = self._crop_patch(noisy.data)
        self.prev_region = self._crop_region(noisy.data)

    def _crop_patch(self, data):
        x0, y0, z0 = self._patch_origin
        px, py, pz = STATE_DIMS
        return np.array(data[z0 : z0 + pz, y0 : y0 + py, x0 : x0 + px])

    def _crop_region(self, data):
        x0, y0, z0 = self._region_origin
        return np.array(data[z0, y0 : y0 + REWARD_PATCH, x0 : x0 + REWARD_PATCH])

    def region_reference(self, reference: CtVolume) -> np.ndarray:
        """The reward region cropped from a co-registered reference volume."""
        return self._crop_region(reference.data)

    def preview(self, p: int, t: int):
        """Evaluate one candidate step without committing it."""
        tuning = apply_action(self.tuning, p, t)
        params = JbfParams(tuning.sigma_s, tuning.sigma_i, self.kernel_dims)
        rx0, ry0, rz0 = self._region_origin
        region = jbf_apply_region(
            self.noisy, self.guidance, params, (rx0, ry0, rz0), (REWARD_PATCH, REWARD_PATCH, 1)
        )[0]
        patch = jbf_apply_region(
            self.noisy, self.guidance, params, self._patch_origin, STATE_DIMS
        )
        reward = self.reward_fn(self.prev_region, region)
        return tuning, reward, region, patch

    def step(self, p: int, t: int) -> float:
        tuning, reward, region, patch = self.preview(p, t)
        self.tuning = tuning
        self.prev_region = region
        self.state_patch = patch
        return reward


def quality_reward(quality_net: Network):
    """Reward callback of Eq.-style quality deltas (the default)."""
    if quality_net is None:
        raise ConfigError("quality network not loaded")
    return lambda before, after: compute_reward(quality_net, before, after)


def fidelity_reward(reference_region: np.ndarray):
    """Ground-truth reward: decrease in MSE against a reference region,
    computed on window-normalized intensities (the PT-GT ablation arm)."""
    ref = hu_to_unit(reference_region)

    def fn(before, after):
        mse_before = float(np.mean((hu_to_unit(before) - ref) ** 2))
        mse_after = float(np.mean((hu_to_unit(after) - ref) ** 2))
        return mse_before - mse_after

    return fn


class TuningEnv:
    """Training episodes over a set of low-dose slabs.

    Guidance volumes are estimated once per slab up front. Episode starts
    sample a slab and an in-plane location whose 64x64 reward region fits
    inside the volume.
    """

    def __init__(
        self,
        slabs: list[CtVolume],
        guidance_volumes: list[CtVolume],
        quality_net: Network,
        sigma_s_init: float = 1.5,
        sigma_i_init: float = 30.0,
        episode_len: int = 20,
        kernel_dims=DEFAULT_KERNEL,
    ):
        if not slabs:
            raise ConfigError("tuning environment needs at least one slab")
        if len(guidance_volumes) != len(slabs):
            raise ConfigError("one guidance volume per slab required")
        if quality_net is None:
            raise ConfigError("quality network not loaded")
        for s in slabs:
            if s.nx < REWARD_PATCH or s.ny < REWARD_PATCH or s.nz < STATE_DIMS[2]:
                raise ConfigError(
                    f"slab dims {s.dims} too small for a {REWARD_PATCH}x{REWARD_PATCH} reward region"
                )
        self.slabs = slabs
        self.guidance_volumes = guidance_volumes
        self.quality_net = quality_net
        self.init = TuningState(sigma_s_init, sigma_i_init)
        self.episode_len = episode_len
        self.kernel_dims = kernel_dims
        self._rollout: TuningRollout | None = None
        self._steps = 0

    @classmethod
    def from_nets(cls, slabs, guidance_net, quality_net, **kwargs):
        from .guidance import estimate_guidance

        if guidance_net is None:
            raise ConfigError("guidance network not loaded")
        guidance_volumes = [estimate_guidance(guidance_net, s) for s in slabs]
        return cls(slabs, guidance_volumes, quality_net, **kwargs)

    def sample_center(self, slab: CtVolume, rng: np.random.Generator):
        half = REWARD_PATCH // 2
        cx = int(rng.integers(half, slab.nx - half)) if slab.nx > REWARD_PATCH else half
        cy = int(rng.integers(half, slab.ny - half)) if slab.ny > REWARD_PATCH else half
        cz = int(rng.integers(STATE_DIMS[2] // 2, slab.nz - STATE_DIMS[2] // 2))
        return (cx, cy, cz)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        idx = int(rng.integers(0, len(self.slabs)))
        center = self.sample_center(self.slabs[idx], rng)
        self._rollout = TuningRollout(
            self.slabs[idx],
            self.guidance_volumes[idx],
            self.init,
            center,
            quality_reward(self.quality_net),
            self.kernel_dims,
        )
        self._steps = 0
        return self._rollout.state_patch

    def make_rollout(self, slab_index: int, center) -> TuningRollout:
        """A standalone rollout at a fixed location (policy evaluation)."""
        return TuningRollout(
            self.slabs[slab_index],
            self.guidance_volumes[slab_index],
            self.init,
            center,
            quality_reward(self.quality_net),
            self.kernel_dims,
        )

    def step(self, p: int, t: int) -> Experience:
        if self._rollout is None:
            raise ConfigError("environment must be reset before stepping")
        r = self._rollout
        patch = r.state_patch
        tuning = r.tuning
        reward = r.step(p, t)
        self._steps += 1
        return Experience(
            patch=patch,
            tuning=tuning,
            param_choice=p,
            action_choice=t,
            reward=reward,
            next_patch=r.state_patch,
            next_tuning=r.tuning,
            terminal=self._steps >= self.episode_len,
        )

    @property
    def state_patch(self):
        return self._rollout.state_patch


@dataclass
class AgentTrainConfig:
    iterations: int = 5000
    batch: int = 64
    pool_capacity: int = 3200
    sync_every: int = 300
    gamma: float = 0.99
    episode_len: int = 20
    eps_start: float = 1.0
    eps_end: float = 0.1
    decay_fraction: float = 0.5
    lr: float = 1e-4
    seed: int = 0


@dataclass
class AgentTrainResult:
    net: AgentNetwork
    losses: list[float] = field(default_factory=list)
    sync_count: int = 0
    optimizer_steps: int = 0
    max_pool_size: int = 0


def train_agent(env: TuningEnv, config: AgentTrainConfig) -> AgentTrainResult:
    """Q-learning over env episodes; one optimizer step per env step after
    the pool holds a full batch. Epsilon decays linearly from eps_start to
    eps_end over the first decay_fraction of the run, and the target network
    refreshes every sync_every optimizer steps."""
    agent = build_agent_net(config.seed)
    target = sync_target(agent)
    pool = ReplayPool(config.pool_capacity, seed=config.seed + 1)
    opt = Adam(lr=config.lr)
    rng = np.random.default_rng(config.seed + 2)
    result = AgentTrainResult(net=agent)

    env.episode_len = config.episode_len
    env.reset(rng)
    decay_steps = max(1, int(config.iterations * config.decay_fraction))
    for it in range(config.iterations):
        eps = max(
            config.eps_end,
            config.eps_start - (config.eps_start - config.eps_end) * it / decay_steps,
        )
        p, t = select(agent, env.state_patch, eps, rng)
        exp = env.step(p, t)
        pool.add(exp)
        result.max_pool_size = max(result.max_pool_size, len(pool))
        if len(pool) >= config.batch:
            batch = pool.sample(config.batch)
            targets = _bellman_batch(batch, config.gamma, target)
            agent.zero_grads()
            loss = agent_loss(agent, batch, targets)
            opt.step(agent.params())
            result.losses.append(loss)
            result.optimizer_steps += 1
            if result.optimizer_steps % config.sync_every == 0:
                target = sync_target(agent)
                result.sync_count += 1
        if exp.terminal:
            env.reset(rng)
    return result


def rollout_return(rollout: TuningRollout, policy, steps: int, rng: np.random.Generator) -> float:
    """Total reward of one episode under policy(patch, rng) -> (p, t)."""
    total = 0.0
    for _ in range(steps):
        p, t = policy(rollout.state_patch, rng)
        total += rollout.step(p, t)
    return total


def greedy_policy(agent: AgentNetwork):
    return lambda patch, rng: select(agent, patch, 0.0, rng)


def random_policy():
    return lambda patch, rng: (int(rng.integers(0, 2)), int(rng.integers(0, 5)))


def _bellman_batch(batch, gamma, target_net) -> list[BellmanTargets]:
    rewards = np.array([e.reward for e in batch])
    terminal = np.array([e.terminal for e in batch])
    y1 = rewards.copy()
    y2 = rewards.copy()
    live = ~terminal
    if gamma > 0.0 and live.any():
        next_states = np.stack([e.next_patch for e in batch])[live]
        qp, qt = target_net.q_values(next_states)
        y1[live] += gamma * qp.max(axis=1)
        y2[live] += gamma * qt.max(axis=1)
    return [BellmanTargets(a, b, gamma) for a, b in zip(y1, y2)]
