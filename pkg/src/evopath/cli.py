"""Command line entry point: ``evopath <verb> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 timeout with partial results.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .envs import evaluate_success, make_family
from .envs.landscape import LandscapeConfig, landscape_oracle
from .harness import ConfigError, ExperimentConfig, parse_config, ratio_check, run_experiment, train_expert
from .policy import load_policy, save_policy
from .seeding import Streams

log = logging.getLogger("evopath")


def _load(args, **extra) -> ExperimentConfig:
    overrides = dict(extra)
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    if args.out is not None:
        overrides["out"] = args.out
    if getattr(args, "env", None) is not None:
        overrides["env"] = args.env
    if args.config is None:
        if overrides.get("env") is None:
            raise ConfigError("either --config or --env is required")
        return ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
    return parse_config(args.config, overrides)


def _report(result):
    for method, stats in result.summary["methods"].items():
        it = stats["train_iters"]
        std = "n/a" if it["std"] is None else f"{it['std']:.1f}"
        print(f"{method:7s} reached {stats['reached']}/{len(stats['seeds'])}  "
              f"train_iters {it['mean']:.1f} +- {std} (median {it['median']:.1f})  "
              f"sim_epochs {stats['sim_epochs_total']['mean']:.0f}")
    print(f"results in {result.out_dir}")


def cmd_transfer(args):
    method = args.method
    cfg = _load(args, methods=(method,) if method else None)
    if len(cfg.methods) != 1:
        raise ConfigError("transfer runs one method; pass --method deps|linear")
    result = run_experiment(cfg)
    _report(result)
    return result.exit_code


def cmd_compare(args):
    cfg = _load(args, methods=("deps", "linear"))
    result = run_experiment(cfg)
    _report(result)
    check = ratio_check(result.rows)
    if check["seeds"]:
        print(f"median train_iters deps/linear = {check['ratio']:.3f}; "
              f"linear failed or slower on {check['linear_worse']}/{len(check['seeds'])} seeds")
    return result.exit_code


def cmd_train_expert(args):
    cfg = _load(args)
    family = cfg.family()
    if not family.trainable:
        raise ConfigError(f"{cfg.env} has no trainable policy")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0]
    policy, history, demo = train_expert(family, seed, cfg.curriculum, cfg.transfer.rl, cfg.workers)
    save_policy(policy, out / "expert_policy.json")
    (out / "curriculum_log.json").write_text(json.dumps({
        "success": history.success, "furthest_index": history.furthest_index,
        "final_success_rate": history.final_success_rate, "promotions": history.promotions,
        "evaluations": history.evaluations, "indices": history.indices}, indent=1) + "\n")
    print(f"expert success={history.success} rate={history.final_success_rate:.3f} "
          f"iters={len(history.indices)} -> {out / 'expert_policy.json'}")
    return 0 if history.success else 1


def _parse_alpha(text, dim):
    if text is None:
        return np.zeros(dim)
    vals = [float(v) for v in text.split(",")]
    if len(vals) == 1:
        vals = vals * dim
    if len(vals) != dim or not all(0.0 <= v <= 1.0 for v in vals):
        raise ConfigError(f"--alpha needs 1 or {dim} values in [0, 1]")
    return np.array(vals)


def cmd_eval(args):
    cfg = _load(args)
    family = cfg.family()
    alpha = _parse_alpha(args.alpha, family.dim)
    policy = None
    if family.trainable:
        if args.policy is None:
            raise ConfigError("--policy is required for a trainable family")
        policy = load_policy(args.policy, obs_dim=family.obs_dim, act_dim=family.act_dim)
    streams = Streams(cfg.seeds[0])
    rate, used = evaluate_success(policy, family, alpha, args.episodes, lambda i: streams("cli.eval", i),
                                  deterministic=args.deterministic)
    print(json.dumps({"env": cfg.env, "alpha": alpha.tolist(), "episodes": used, "success_rate": rate}))
    return 0


def cmd_oracle(args):
    cfg = _load(args)
    if cfg.env != "landscape":
        raise ConfigError("the oracle is defined for the landscape family only")
    lcfg = LandscapeConfig(**cfg.env_config)
    try:
        path, value = landscape_oracle(lcfg, args.resolution, min_progress=args.min_progress)
    except NotImplementedError as exc:
        raise ConfigError(str(exc)) from None
    doc = {"maximin": value, "resolution": args.resolution, "path": [p.tolist() for p in path]}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle.json").write_text(json.dumps(doc, indent=1) + "\n")
    print(f"maximin {value:.6f} over {len(path)} grid nodes")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="evopath", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="single seed, overrides the config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--env", help="environment family id, overrides the config")
        return p

    p = common(sub.add_parser("transfer", help="run one transfer method over the configured seeds"))
    p.add_argument("--method", choices=("deps", "linear"))
    p.set_defaults(func=cmd_transfer)
    p = common(sub.add_parser("compare", help="run both methods over the configured seeds"))
    p.set_defaults(func=cmd_compare)
    p = common(sub.add_parser("train-expert", help="reverse-curriculum expert at alpha = 0"))
    p.set_defaults(func=cmd_train_expert)
    p = common(sub.add_parser("eval", help="success rate of a policy at one alpha"))
    p.add_argument("--policy", help="policy document")
    p.add_argument("--alpha", help="comma separated alpha, or one value for all dimensions")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_eval)
    p = common(sub.add_parser("oracle", help="grid maximin path on the landscape"))
    p.add_argument("--resolution", type=int, default=21)
    p.add_argument("--min-progress", type=float, default=0.0)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
