"""Command-line workflow: simulate, train, denoise, evaluate, ablate.

Hyperparameters resolve in order: explicit flag > config file > profile >
built-in default. Config files are line-oriented ``key = value`` text; '#'
starts a comment. Unknown keys are usage errors. The paper profile stores
the full-scale training values; the desk profile (default) keeps every run
workstation-sized.

Exit codes: 0 success, 1 runtime failure (message names the failing module),
2 usage error.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import agent as agent_mod
from . import guidance as guidance_mod
from . import quality as quality_mod
from .errors import ConfigError, CtjbfError
from .metrics import evaluate
from .nn import load_network, save_entries, save_network
from .pipeline import DenoiseConfig, denoise_volume
from .simulate import DoseModel, body_phantom_spec, make_phantom, simulate_low_dose
from .volume import load_volume, save_volume

PROFILES = {
    "desk": dict(
        guidance_iters=2000, guidance_batch=8,
        quality_iters=1500, quality_batch=16,
        agent_iters=5000, agent_batch=64,
        pool=3200, sync=300, gamma=0.99, episode_len=20,
        jbf_iters=4, tuning_steps=5,
    ),
    "paper": dict(
        guidance_iters=70000, guidance_batch=48,
        quality_iters=1500, quality_batch=16,
        agent_iters=120000, agent_batch=512,
        pool=3200, sync=300, gamma=0.99, episode_len=20,
        jbf_iters=4, tuning_steps=5,
    ),
}

TRAINING_COMMANDS = ("train-guidance", "train-quality", "train-agent")


@dataclass
class RunConfig:
    """Resolved invocation: subcommand, seed, profile, and effective options."""

    subcommand: str
    profile: str
    seed: int | None
    options: dict

    def get(self, key, default=None):
        value = self.options.get(key)
        if value is None:
            value = PROFILES[self.profile].get(key, default)
        return value


class UsageError(Exception):
    pass


def main(argv=None) -> int:
    code = run(sys.argv[1:] if argv is None else argv)
    if argv is None:
        sys.exit(code)
    return code


def run(argv) -> int:
    try:
        config, handler = _parse(list(argv))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse --help or bad flags
        return 0 if exc.code in (0, None) else 2
    try:
        handler(config)
        return 0
    except CtjbfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


# -- argument handling -------------------------------------------------------

_OPTION_KEYS = {
    "simulate": {"count", "dims", "doses", "base_sigma", "correlation_sigma"},
    "train-guidance": {"guidance_iters", "guidance_batch", "lr"},
    "train-quality": {"quality_iters", "quality_batch", "lr", "quality_doses"},
    "train-agent": {
        "agent_iters", "agent_batch", "pool", "sync", "gamma", "episode_len",
        "lr", "slab_dose", "sigma_s", "sigma_i",
    },
    "denoise": {"jbf_iters", "tuning_steps", "mode", "sigma_s", "sigma_i"},
    "evaluate": set(),
    "ablate": {"jbf_iters", "tuning_steps", "mode", "sigma_s", "sigma_i", "dose"},
}


def _parse(argv):
    parser = argparse.ArgumentParser(prog="ctjbf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, training=False):
        p.add_argument("--profile", choices=("desk", "paper"), default="desk")
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--seed", type=int, required=training)

    p = sub.add_parser("simulate", help="generate phantom volumes with dose-reduced copies")
    common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--dims", type=str, help="nx,ny,nz (default 112,112,12)")
    p.add_argument("--doses", type=str, help="percent list, default 5,10,25,50")
    p.add_argument("--base-sigma", dest="base_sigma", type=float)
    p.add_argument("--correlation-sigma", dest="correlation_sigma", type=float)

    p = sub.add_parser("train-guidance", help="train the guidance denoiser")
    common(p, training=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--iters", dest="guidance_iters", type=int)
    p.add_argument("--batch", dest="guidance_batch", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("train-quality", help="train the quality scorer")
    common(p, training=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--iters", dest="quality_iters", type=int)
    p.add_argument("--batch", dest="quality_batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--doses", dest="quality_doses", type=str, help="percent list, default 50,25")

    p = sub.add_parser("train-agent", help="train the parameter-tuning agent")
    common(p, training=True)
    p.add_argument("--slabs", type=Path, required=True)
    p.add_argument("--guidance", type=Path, required=True)
    p.add_argument("--quality", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--iters", dest="agent_iters", type=int)
    p.add_argument("--batch", dest="agent_batch", type=int)
    p.add_argument("--pool", type=int)
    p.add_argument("--sync", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--episode-len", dest="episode_len", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--slab-dose", dest="slab_dose", type=int, help="dose percent of slab files (default 25)")

    p = sub.add_parser("denoise", help="denoise one volume")
    common(p)
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--guidance", type=Path, required=True)
    p.add_argument("--quality", type=Path, required=True)
    p.add_argument("--agent", type=Path, required=True)
    p.add_argument("--iters", dest="jbf_iters", type=int)
    p.add_argument("--steps", dest="tuning_steps", type=int)
    p.add_argument("--mode", choices=("global", "tile"))
    p.add_argument("--trace", type=Path)

    p = sub.add_parser("evaluate", help="PSNR/SSIM report over paired volumes")
    common(p)
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--baseline", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate", help="compare plain, tuned, and ground-truth-tuned filtering")
    common(p)
    p.add_argument("--data", type=Path, required=True, help="dir with *_full.ctv and noisy copies")
    p.add_argument("--guidance", type=Path, required=True)
    p.add_argument("--quality", type=Path, required=True)
    p.add_argument("--agent", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dose", type=int, help="dose percent of the noisy arm inputs (default 25)")
    p.add_argument("--iters", dest="jbf_iters", type=int)
    p.add_argument("--steps", dest="tuning_steps", type=int)
    p.add_argument("--mode", choices=("global", "tile"))

    args = parser.parse_args(argv)
    options = {k: v for k, v in vars(args).items() if k not in ("command", "profile", "config", "seed")}
    if args.config is not None:
        file_values = _read_config_file(args.config, _OPTION_KEYS.get(args.command, set()))
        for key, value in file_values.items():
            if options.get(key) is None:
                options[key] = value
    config = RunConfig(args.command, args.profile, args.seed, options)
    if config.subcommand in TRAINING_COMMANDS and config.seed is None:
        raise UsageError(f"{config.subcommand} requires --seed")
    handlers = {
        "simulate": cmd_simulate,
        "train-guidance": cmd_train_guidance,
        "train-quality": cmd_train_quality,
        "train-agent": cmd_train_agent,
        "denoise": cmd_denoise,
        "evaluate": cmd_evaluate,
        "ablate": cmd_ablate,
    }
    return config, handlers[config.subcommand]


def _read_config_file(path: Path, allowed: set) -> dict:
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    values = {}
    casts = dict(
        count=int, dims=str, doses=str, base_sigma=float, correlation_sigma=float,
        guidance_iters=int, guidance_batch=int, quality_iters=int, quality_batch=int,
        agent_iters=int, agent_batch=int, pool=int, sync=int, gamma=float,
        episode_len=int, lr=float, slab_dose=int, quality_doses=str,
        jbf_iters=int, tuning_steps=int, mode=str, sigma_s=float, sigma_i=float,
        dose=int,
    )
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in allowed:
            raise UsageError(f"{path}:{ln}: unknown key {key!r} for this subcommand")
        values[key] = casts.get(key, str)(value)
    return values


# -- subcommand handlers -----------------------------------------------------

DEFAULT_DIMS = (112, 112, 12)
DEFAULT_DOSES = (5, 10, 25, 50)


def cmd_simulate(cfg: RunConfig) -> None:
    out_dir = Path(cfg.options["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    count = cfg.get("count", 10)
    dims = _parse_ints(cfg.get("dims"), DEFAULT_DIMS)
    doses = _parse_ints(cfg.get("doses"), DEFAULT_DOSES)
    base_sigma = cfg.get("base_sigma", 15.0)
    corr = cfg.get("correlation_sigma", 1.2)
    seed = cfg.seed if cfg.seed is not None else 0
    for i in range(count):
        spec = body_phantom_spec(seed * 10_000 + i, dims=tuple(dims))
        clean = make_phantom(spec)
        save_volume(clean, out_dir / f"phantom_{i:02d}_full.ctv")
        for pct in doses:
            model = DoseModel(pct / 100.0, base_sigma=base_sigma, correlation_sigma=corr)
            noisy = simulate_low_dose(clean, model, seed=seed * 10_000 + i * 100 + pct)
            save_volume(noisy, out_dir / f"phantom_{i:02d}_d{pct}.ctv")
    print(f"simulate: wrote {count} phantoms x {1 + len(doses)} volumes to {out_dir}")


def cmd_train_guidance(cfg: RunConfig) -> None:
    data_dir = Path(cfg.options["data"])
    pairs = []
    for clean_path, noisy_paths in _paired_files(data_dir):
        clean = load_volume(clean_path)
        for noisy_path in noisy_paths:
            pairs.extend(guidance_mod.build_training_pairs(clean, load_volume(noisy_path)))
    train_cfg = guidance_mod.GuidanceTrainConfig(
        iterations=cfg.get("guidance_iters"),
        batch=cfg.get("guidance_batch"),
        lr=cfg.get("lr", 1e-4),
        seed=cfg.seed,
    )
    t0 = time.perf_counter()
    net, history = guidance_mod.train_guidance(pairs, train_cfg)
    save_network(net, cfg.options["out"])
    print(
        f"train-guidance: {len(pairs)} pairs, {train_cfg.iterations} iters, "
        f"final loss {history[-1]:.3e}, {time.perf_counter() - t0:.0f}s -> {cfg.options['out']}"
    )


def cmd_train_quality(cfg: RunConfig) -> None:
    data_dir = Path(cfg.options["data"])
    doses = _parse_ints(cfg.get("quality_doses"), (50, 25))
    pairs = []
    for clean_path, noisy_paths in _paired_files(data_dir, doses=doses):
        clean = load_volume(clean_path)
        for noisy_path in noisy_paths:
            noisy = load_volume(noisy_path)
            pairs.extend(_quality_pairs(clean, noisy))
    train_cfg = quality_mod.QualityTrainConfig(
        iterations=cfg.get("quality_iters"),
        batch=cfg.get("quality_batch"),
        lr=cfg.get("lr", 1e-4),
        seed=cfg.seed,
    )
    t0 = time.perf_counter()
    net, history = quality_mod.train_quality(pairs, train_cfg)
    save_network(net, cfg.options["out"])
    print(
        f"train-quality: {len(pairs)} pairs, {train_cfg.iterations} iters, "
        f"final loss {history[-1]:.3e}, {time.perf_counter() - t0:.0f}s -> {cfg.options['out']}"
    )


def cmd_train_agent(cfg: RunConfig) -> None:
    slab_dose = cfg.get("slab_dose", 25)
    slab_paths = sorted(Path(cfg.options["slabs"]).glob(f"*_d{slab_dose}.ctv"))
    if not slab_paths:
        raise ConfigError(f"no *_d{slab_dose}.ctv slabs in {cfg.options['slabs']}")
    slabs = [load_volume(p) for p in slab_paths]
    gnet = _load_guidance(cfg.options["guidance"])
    qnet = _load_quality(cfg.options["quality"])
    env = agent_mod.TuningEnv.from_nets(
        slabs, gnet, qnet,
        sigma_s_init=cfg.get("sigma_s", 1.5),
        sigma_i_init=cfg.get("sigma_i", 30.0),
        episode_len=cfg.get("episode_len"),
    )
    train_cfg = agent_mod.AgentTrainConfig(
        iterations=cfg.get("agent_iters"),
        batch=cfg.get("agent_batch"),
        pool_capacity=cfg.get("pool"),
        sync_every=cfg.get("sync"),
        gamma=cfg.get("gamma"),
        episode_len=cfg.get("episode_len"),
        lr=cfg.get("lr", 1e-4),
        seed=cfg.seed,
    )
    t0 = time.perf_counter()
    result = agent_mod.train_agent(env, train_cfg)
    save_entries(result.net.entries(), cfg.options["out"])
    print(
        f"train-agent: {len(slabs)} slabs, {train_cfg.iterations} steps, "
        f"{result.sync_count} target syncs, final loss {result.losses[-1]:.3e}, "
        f"{time.perf_counter() - t0:.0f}s -> {cfg.options['out']}"
    )


def cmd_denoise(cfg: RunConfig) -> None:
    vol = load_volume(cfg.options["input"])
    gnet = _load_guidance(cfg.options["guidance"])
    qnet = _load_quality(cfg.options["quality"])
    anet = _load_agent(cfg.options["agent"])
    dn_cfg = DenoiseConfig(
        jbf_iterations=cfg.get("jbf_iters"),
        tuning_steps=cfg.get("tuning_steps"),
        sigma_s_init=cfg.get("sigma_s", 1.5),
        sigma_i_init=cfg.get("sigma_i", 30.0),
        mode=cfg.get("mode", "global"),
    )
    out, trace = denoise_volume(vol, gnet, qnet, anet, dn_cfg)
    save_volume(out, cfg.options["out"])
    if cfg.options.get("trace"):
        Path(cfg.options["trace"]).write_text(trace.to_text())
    print(f"denoise: {cfg.options['input']} -> {cfg.options['out']} ({len(trace)} tuning records)")


def cmd_evaluate(cfg: RunConfig) -> None:
    refs = sorted(Path(cfg.options["ref"]).glob("*.ctv"))
    tests = sorted(Path(cfg.options["test"]).glob("*.ctv"))
    if len(refs) != len(tests) or not refs:
        raise ConfigError(f"ref/test counts differ or empty: {len(refs)} vs {len(tests)}")
    pairs = [(load_volume(r), load_volume(t)) for r, t in zip(refs, tests)]
    baseline = None
    if cfg.options.get("baseline"):
        base_paths = sorted(Path(cfg.options["baseline"]).glob("*.ctv"))
        if len(base_paths) != len(refs):
            raise ConfigError("baseline volume count differs from ref count")
        baseline = [load_volume(p) for p in base_paths]
    names = [r.stem for r in refs]
    report = evaluate(pairs, baseline=baseline, names=names)
    Path(cfg.options["out"]).write_text(report.to_text() + "\n")
    print(report.to_text())


def cmd_ablate(cfg: RunConfig) -> None:
    data_dir = Path(cfg.options["data"])
    dose = cfg.get("dose", 25)
    cases = _paired_files(data_dir, doses=(dose,))
    if not cases:
        raise ConfigError(f"no phantom pairs with dose {dose}% in {data_dir}")
    gnet = _load_guidance(cfg.options["guidance"])
    qnet = _load_quality(cfg.options["quality"])
    anet = _load_agent(cfg.options["agent"])
    base_cfg = dict(
        jbf_iterations=cfg.get("jbf_iters"),
        sigma_s_init=cfg.get("sigma_s", 1.5),
        sigma_i_init=cfg.get("sigma_i", 30.0),
        mode=cfg.get("mode", "global"),
    )
    steps = cfg.get("tuning_steps")
    arms = {
        "plain-jbf": (DenoiseConfig(tuning_steps=0, **base_cfg), False),
        "tuned-quality": (DenoiseConfig(tuning_steps=steps, **base_cfg), False),
        "tuned-ground-truth": (DenoiseConfig(tuning_steps=steps, **base_cfg), True),
    }
    refs, noisies = [], []
    for clean_path, noisy_paths in cases:
        refs.append(load_volume(clean_path))
        noisies.append(load_volume(noisy_paths[0]))
    names = [p.stem for p, _ in cases]
    blocks = []
    for label, (dn_cfg, use_reference) in arms.items():
        outs = []
        for ref, noisy in zip(refs, noisies):
            out, _ = denoise_volume(
                noisy, gnet, qnet, anet, dn_cfg,
                reference=ref if use_reference else None,
            )
            outs.append(out)
        report = evaluate(
            list(zip(refs, outs)), baseline=noisies, names=names, label=label
        )
        blocks.append(report.to_text())
    text = "\n\n".join(blocks) + "\n"
    Path(cfg.options["out"]).write_text(text)
    print(text)


# -- helpers -----------------------------------------------------------------

def _parse_ints(value, default):
    if value is None:
        return tuple(default)
    if isinstance(value, (tuple, list)):
        return tuple(int(v) for v in value)
    return tuple(int(v) for v in str(value).split(","))


def _paired_files(data_dir: Path, doses=None):
    """[(full_path, [noisy paths])] for phantom files in a directory."""
    out = []
    for full in sorted(data_dir.glob("*_full.ctv")):
        stem = full.name[: -len("_full.ctv")]
        if doses is None:
            noisy = sorted(data_dir.glob(f"{stem}_d*.ctv"))
        else:
            noisy = [data_dir / f"{stem}_d{pct}.ctv" for pct in doses]
            noisy = [p for p in noisy if p.exists()]
        if noisy:
            out.append((full, noisy))
    return out


def _quality_pairs(clean, noisy, tile=64, stride=48):
    """64x64 slice tiles paired with gradient-similarity targets."""
    pairs = []
    z_lo, z_hi = 4, max(5, clean.nz - 4)
    for z in range(z_lo, z_hi):
        for y0 in range(0, clean.ny - tile + 1, stride):
            for x0 in range(0, clean.nx - tile + 1, stride):
                c = clean.data[z, y0 : y0 + tile, x0 : x0 + tile]
                n = noisy.data[z, y0 : y0 + tile, x0 : x0 + tile]
                pairs.append((np.array(n), quality_mod.quality_target(c, n)))
    return pairs


def _load_guidance(path):
    net = guidance_mod.build_guidance_net(0)
    load_network(net, path)
    return net


def _load_quality(path):
    net = quality_mod.build_quality_net(0)
    load_network(net, path)
    return net


def _load_agent(path):
    net = agent_mod.build_agent_net(0)
    net.load(path)
    return net


if __name__ == "__main__":
    main()
