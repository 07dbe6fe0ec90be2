"""gridcmd: one binary for the whole pipeline.

    gridcmd gen-demos        collect expert demonstrations
    gridcmd train-generator  supervised instruction-generator training
    gridcmd train-controller multi-task PPO for the low-level controller
    gridcmd train-baseline   flat PPO baseline (sparse or dense reward)
    gridcmd evaluate         TC% / Avg-HI evaluation of the two-level agent
    gridcmd serve            HTTP session service for the console

Exit codes: 0 success, 1 usage error, 2 runtime failure. A --config JSON
file supplies defaults; explicit flags win. All randomness derives from
--seed. Relative --out paths land under $GRIDCMD_RUN_DIR.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .runs import RunManifest, resolve_out

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(USAGE_EXIT)


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="JSON file with default values for any flag")
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")


def build_parser() -> _Parser:
    parser = _Parser(prog="gridcmd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-demos", help="collect expert demonstrations")
    p.add_argument("--rooms", type=int, choices=(4, 6), default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--out", default=None)
    _add_common(p)

    p = sub.add_parser("train-generator", help="train the instruction generator")
    p.add_argument("--demos", default=None)
    p.add_argument("--take", type=int, default=None, help="train on the first N demo episodes")
    p.add_argument("--arch-scale", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--out", default=None)
    _add_common(p)

    p = sub.add_parser("train-controller", help="multi-task PPO controller training")
    p.add_argument("--rooms", type=int, choices=(4, 6), default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--arch-scale", type=float, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--target-success", type=float, default=None)
    p.add_argument("--out", default=None)
    _add_common(p)

    p = sub.add_parser("train-baseline", help="flat PPO baseline on the full task")
    p.add_argument("--reward", choices=("sparse", "dense"), default=None)
    p.add_argument("--rooms", type=int, choices=(4, 6), default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--arch-scale", type=float, default=None)
    p.add_argument("--out", default=None)
    _add_common(p)

    p = sub.add_parser("evaluate", help="evaluate the two-level agent")
    p.add_argument("--gen", default=None, help="generator checkpoint ('expert' for the bot)")
    p.add_argument("--ctrl", default=None, help="controller checkpoint ('expert' for the bot)")
    p.add_argument("--rooms", type=int, choices=(4, 6), default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--intervention", choices=("none", "oracle"), default=None)
    p.add_argument("--h-l", type=int, default=None, help="macro horizon")
    p.add_argument("--out", default=None)
    _add_common(p)

    p = sub.add_parser("serve", help="run the session service")
    p.add_argument("--gen", default=None)
    p.add_argument("--ctrl", default=None)
    p.add_argument("--rooms", type=int, choices=(4, 6), default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--host", default=None)
    p.add_argument("--console", default=None, help="directory of built console assets")
    _add_common(p)

    return parser


DEFAULTS = {
    "gen-demos": {"rooms": 4, "episodes": 100, "seed": 0, "out": "demos.jsonl"},
    "train-generator": {
        "demos": None,
        "take": None,
        "arch_scale": 0.25,
        "epochs": None,
        "batch_size": None,
        "learning_rate": None,
        "seed": 0,
        "out": "generator-run",
    },
    "train-controller": {
        "rooms": 4,
        "steps": 1_000_000,
        "arch_scale": 0.25,
        "eval_every": 100_000,
        "target_success": None,
        "seed": 0,
        "out": "controller-run",
    },
    "train-baseline": {
        "reward": "sparse",
        "rooms": 4,
        "steps": 1_000_000,
        "arch_scale": 0.25,
        "seed": 0,
        "out": "baseline-run",
    },
    "evaluate": {
        "gen": "expert",
        "ctrl": "expert",
        "rooms": 4,
        "episodes": 50,
        "intervention": "none",
        "h_l": 10,
        "seed": 0,
        "out": "report.json",
    },
    "serve": {
        "gen": "expert",
        "ctrl": "expert",
        "rooms": 4,
        "port": 8321,
        "host": "127.0.0.1",
        "console": None,
        "seed": 0,
    },
}


def _usage_error(message: str) -> SystemExit:
    print(f"gridcmd: error: {message}", file=sys.stderr)
    return SystemExit(USAGE_EXIT)


def merge_config(args: argparse.Namespace) -> dict:
    """built-in defaults < --config file < explicit flags."""
    merged = dict(DEFAULTS[args.command])
    if getattr(args, "config", None):
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise _usage_error(f"unreadable --config: {e}")
        unknown = set(overrides) - set(merged)
        if unknown:
            raise _usage_error(f"unknown config keys: {sorted(unknown)}")
        merged.update(overrides)
    for key in merged:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _load_store(ref: str):
    from .models import load_checkpoint

    if ref in (None, "expert"):
        return None
    return load_checkpoint(ref)


def cmd_gen_demos(cfg: dict) -> int:
    from .expert import generate_demos, save_demos
    from .world import EnvConfig

    if cfg["episodes"] <= 0:
        raise _usage_error("--episodes must be positive")
    out = resolve_out(cfg["out"])
    manifest = RunManifest("gen-demos", cfg, cfg["seed"], [out]).write(out)
    demos = generate_demos(EnvConfig(n_rooms=cfg["rooms"], seed=cfg["seed"]), cfg["episodes"], cfg["seed"])
    save_demos(demos, out)
    manifest.finish()
    print(f"wrote {len(demos.records)} records over {demos.count_episodes} episodes to {out}")
    return 0


def cmd_train_generator(cfg: dict) -> int:
    from .expert import load_demos
    from .models import ArchConfig, save_checkpoint
    from .supervised import SupervisedConfig, train_generator

    if not cfg["demos"]:
        raise _usage_error("--demos is required")
    demos = load_demos(cfg["demos"])
    if cfg["take"]:
        demos = demos.take(cfg["take"])
    out = resolve_out(cfg["out"])
    manifest = RunManifest("train-generator", cfg, cfg["seed"], [out]).write(out)
    arch = ArchConfig(
        scale=cfg["arch_scale"],
        obs_width=demos.config.width,
        obs_height=demos.config.height,
    )
    sup = SupervisedConfig(seed=cfg["seed"])
    for key, field in (("epochs", "epochs"), ("batch_size", "batch_size"), ("learning_rate", "learning_rate")):
        if cfg[key] is not None:
            from dataclasses import replace

            sup = replace(sup, **{field: cfg[key]})
    with (out / "metrics.jsonl").open("w") as sink:
        store, metrics = train_generator(
            demos, arch, sup, on_epoch=lambda e: (sink.write(json.dumps(e.to_json()) + "\n"), sink.flush())
        )
    save_checkpoint(store, out / "ckpt-best")
    manifest.finish()
    best = metrics.epochs[metrics.best_epoch]
    print(
        f"trained on {len(demos.records)} records ({demos.count_episodes} episodes); "
        f"best epoch {best.epoch}: val exact-match {best.val_exact_match:.3f}"
    )
    return 0


def cmd_train_controller(cfg: dict) -> int:
    from .models import ArchConfig
    from .rl import PPOConfig, train_controller
    from .world import EnvConfig

    out = resolve_out(cfg["out"])
    manifest = RunManifest("train-controller", cfg, cfg["seed"], [out]).write(out)
    env_cfg = EnvConfig(n_rooms=cfg["rooms"], seed=cfg["seed"])
    arch = ArchConfig(scale=cfg["arch_scale"], obs_width=env_cfg.width, obs_height=env_cfg.height)
    ppo = PPOConfig(total_steps=cfg["steps"], seed=cfg["seed"])
    _, curves = train_controller(
        arch,
        ppo,
        env_cfg,
        run_dir=out,
        eval_every=cfg["eval_every"],
        target_success=cfg["target_success"],
    )
    manifest.finish()
    final = [r for r in curves if "eval_success" in r]
    if final:
        rates = final[-1]["eval_success"]
        print(f"final per-sub-goal success: min {min(rates.values()):.2f} over {len(rates)} goals")
    print(f"run artifacts in {out}")
    return 0


def cmd_train_baseline(cfg: dict) -> int:
    from .models import ArchConfig
    from .rl import PPOConfig, evaluate_flat_success, train_flat_baseline
    from .world import EnvConfig

    out = resolve_out(cfg["out"])
    manifest = RunManifest("train-baseline", cfg, cfg["seed"], [out]).write(out)
    env_cfg = EnvConfig(n_rooms=cfg["rooms"], seed=cfg["seed"])
    arch = ArchConfig(scale=cfg["arch_scale"], obs_width=env_cfg.width, obs_height=env_cfg.height)
    ppo = PPOConfig(total_steps=cfg["steps"], seed=cfg["seed"])
    ctrl, _ = train_flat_baseline(arch, ppo, env_cfg, cfg["reward"], run_dir=out)
    tc = evaluate_flat_success(ctrl, env_cfg, n_episodes=50, seed=cfg["seed"] + 20_000_000)
    manifest.finish()
    print(f"flat {cfg['reward']} baseline TC over 50 greedy episodes: {tc:.2f}")
    return 0


def cmd_evaluate(cfg: dict) -> int:
    from .runtime import RuntimeConfig, evaluate
    from .world import EnvConfig

    out = resolve_out(cfg["out"])
    manifest = RunManifest("evaluate", cfg, cfg["seed"], [out]).write(out)
    rt = RuntimeConfig(
        env_cfg=EnvConfig(n_rooms=cfg["rooms"], seed=cfg["seed"]),
        H_l=cfg["h_l"],
        intervention=cfg["intervention"],
        n_episodes=cfg["episodes"],
    )
    report = evaluate(_load_store(cfg["gen"]), _load_store(cfg["ctrl"]), rt)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_json(), indent=1))
    manifest.finish()
    print(f"TC% {report.tc_percent:.3f}  Avg-HI {report.avg_hi:.3f}  ({report.n_episodes} episodes) -> {out}")
    return 0


def cmd_serve(cfg: dict) -> int:
    import uvicorn

    from .runtime import RuntimeConfig
    from .service import create_app
    from .world import EnvConfig

    app = create_app(
        generator=_load_store(cfg["gen"]),
        controller=_load_store(cfg["ctrl"]),
        default_runtime=RuntimeConfig(
            env_cfg=EnvConfig(n_rooms=cfg["rooms"], seed=cfg["seed"]), intervention="interactive", n_episodes=1
        ),
        console_dir=cfg["console"],
    )
    print(f"session service on http://{cfg['host']}:{cfg['port']}")
    uvicorn.run(app, host=cfg["host"], port=cfg["port"], log_level="warning")
    return 0


COMMANDS = {
    "gen-demos": cmd_gen_demos,
    "train-generator": cmd_train_generator,
    "train-controller": cmd_train_controller,
    "train-baseline": cmd_train_baseline,
    "evaluate": cmd_evaluate,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = merge_config(args)
        return COMMANDS[args.command](cfg)
    except SystemExit:
        raise
    except KeyboardInterrupt:
        return 0
    except Exception as e:  # noqa: BLE001 - single CLI failure funnel
        print(f"gridcmd: {type(e).__name__}: {e}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
