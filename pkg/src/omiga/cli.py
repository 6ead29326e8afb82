"""Command-line entry point: ``omiga <command> [flags]``.

Exit codes: 0 on success, 1 on validation errors (bad flags, bad files, failed
verification), 2 on numeric failures (divergent training, non-convergence).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as data
from . import oracle, verification
from .envs import load_env_config, make_behavior_policy, make_env, QUALITIES
from .errors import NumericError, OmigaError, ParameterError, UsageError
from .trainer import EVAL_MODES, VARIANTS, Checkpoint, TrainConfig, bc_train, evaluate, read_metrics, train, write_metrics

PROTOCOL_DEFAULTS = {"matrix": {"alpha": 1.0, "steps": 20_000}, "coopgrid": {"alpha": 2.0, "steps": 5000}}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _env_config(path, args) -> dict:
    config = load_env_config(path)
    if getattr(args, "gamma", None) is not None:
        config["gamma"] = args.gamma
    make_env(config)
    return config


def _train_config(args) -> TrainConfig:
    overrides = {
        "alpha": args.alpha, "gamma": args.gamma, "tau": args.tau, "steps": args.steps, "batch_size": args.batch,
        "seed": args.seed, "variant": args.variant, "eval_mode": args.mode, "hidden": args.hidden,
        "mixer_hidden": args.mixer_hidden, "eval_every": args.eval_every, "eval_episodes": args.eval_episodes,
    }
    return TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = _env_config(args.env, args)
    env = make_env(config)
    policy = make_behavior_policy(env, args.quality, args.seed)
    out = data.generate(env, policy, args.episodes, args.seed, args.out)
    print(f"wrote {args.episodes} episodes to {out}")
    return 0


def cmd_mix_data(args) -> int:
    if not args.proportions:
        args.proportions = [1.0 / len(args.dataset)] * len(args.dataset)
    mixed = data.mix([data.load(p) for p in args.dataset], args.proportions, args.seed)
    data.save(mixed, args.out)
    print(f"wrote {mixed.manifest.n_episodes} episodes to {args.out}")
    return 0


def _train_common(args, algo: str) -> int:
    ds = data.load(args.dataset)
    env = make_env(_env_config(args.env, args) if args.env else ds.manifest.env)
    cfg = _train_config(args)
    if algo == "bc":
        ckpt, metrics = bc_train(ds, cfg, env)
    else:
        ckpt, metrics = train(ds, env, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(metrics, out / "metrics.csv")
    ckpt.save(out / "checkpoint.json")
    last = metrics[-1]["eval_return"] if metrics else None
    print(f"{algo}: {cfg.steps} steps, final eval_return {last}; wrote {out}")
    return 0


def cmd_train(args) -> int:
    return _train_common(args, "omiga")


def cmd_bc_train(args) -> int:
    return _train_common(args, "bc")


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    env = make_env(_env_config(args.env, args) if args.env else ckpt.meta["env"])
    mean, std = evaluate(ckpt, env, args.episodes, args.seed, args.mode)
    doc = {"mean": mean, "std": std, "episodes": args.episodes, "mode": args.mode, "seed": args.seed}
    text = _dump(doc)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_oracle_solve(args) -> int:
    env = make_env(_env_config(args.env, args))
    mdp = env.tabular_export()
    mu = make_behavior_policy(env, args.quality, args.seed or 0).joint()
    sol = oracle.solve(mdp, mu, args.alpha, tol=args.tol)
    text = _dump(sol.to_json())
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def run_verify(config: dict, alpha: float | None, seed: int, steps: int | None, out, hidden: int | None = None) -> dict:
    """Run every suite plus the env's training protocol; writes report.json and per-run metrics CSVs."""
    env = make_env(config)
    defaults = PROTOCOL_DEFAULTS[env.name]
    alpha = defaults["alpha"] if alpha is None else alpha
    steps = defaults["steps"] if steps is None else steps
    kw = {"hidden": hidden, "mixer_hidden": hidden} if hidden else {}
    criteria = {
        "contraction": verification.contraction_suite(seed),
        "optimality": verification.optimality_suite(seed),
        "decomposition": verification.decomposition_suite(seed),
        "gradients": verification.gradient_suite(seed),
        "alpha_monotonicity": verification.alpha_monotonicity_suite(seed),
    }
    if env.name == "matrix":
        criteria["end_to_end"], metrics = verification.matrix_protocol(env, alpha, seed, steps, **kw)
    else:
        criteria["directional"], metrics = verification.directional_protocol(env, alpha, seed, steps, **kw)
    report = {"env": config, "alpha": alpha, "seed": seed, "steps": steps, "criteria": criteria,
              "pass": all(c["pass"] for c in criteria.values())}
    out = Path(out)
    (out / "metrics").mkdir(parents=True, exist_ok=True)
    for label, rows in sorted(metrics.items()):
        write_metrics(rows, out / "metrics" / f"{label}.csv")
    (out / "report.json").write_text(_dump(_plain(report)))
    return report


def _plain(obj):
    """Convert numpy scalars so the report serializes identically on every run."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def cmd_verify(args) -> int:
    config = _env_config(args.env, args)
    report = run_verify(config, args.alpha, args.seed, args.steps, args.out, args.hidden)
    for name, result in report["criteria"].items():
        print(f"{'PASS' if result['pass'] else 'FAIL'} {name}")
    print(f"report: {Path(args.out) / 'report.json'}")
    return 0 if report["pass"] else 1


def _run_label(ckpt: Checkpoint) -> str:
    cfg, meta = ckpt.config, ckpt.meta
    if meta["algo"] == "bc":
        return f"bc data={meta['dataset_quality']}"
    return f"omiga-{meta['variant']} alpha={cfg['alpha']:g} data={meta['dataset_quality']}"


def report(run_dirs, out=None) -> tuple[str, str]:
    """Aggregate final eval_return over runs sharing a configuration; returns (table text, CSV text)."""
    if not run_dirs:
        raise ParameterError("report needs at least one run directory")
    groups: dict[str, list[tuple[int, float]]] = {}
    envs = set()
    for d in map(Path, run_dirs):
        if not (d / "metrics.csv").is_file():
            raise ParameterError(f"{d}: no metrics.csv")
        if not (d / "checkpoint.json").is_file():
            raise ParameterError(f"{d}: no checkpoint.json")
        rows = read_metrics(d / "metrics.csv")
        if not rows or rows[-1]["eval_return"] is None:
            raise ParameterError(f"{d}: metrics have no final eval_return")
        ckpt = Checkpoint.load(d / "checkpoint.json")
        envs.add(ckpt.meta["env_name"])
        groups.setdefault(_run_label(ckpt), []).append((int(ckpt.config["seed"]), rows[-1]["eval_return"]))
    if len(envs) > 1:
        raise ParameterError(f"runs come from different environments: {sorted(envs)}")
    env_name = envs.pop()
    lines = [f"env: {env_name}", f"{'configuration':<40} {'runs':>4}  final eval_return"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["env", "configuration", "runs", "mean", "std", "seeds", "values"])
    for label in sorted(groups):
        seeds, values = zip(*sorted(groups[label]))
        mean, std = float(np.mean(values)), float(np.std(values))
        lines.append(f"{label:<40} {len(values):>4}  {mean:.4f} ± {std:.4f}")
        writer.writerow([env_name, label, len(values), repr(mean), repr(std),
                         " ".join(map(str, seeds)), " ".join(repr(float(v)) for v in values)])
    table = "\n".join(lines) + "\n"
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table)
        (out / "report.csv").write_text(buf.getvalue())
    return table, buf.getvalue()


def cmd_report(args) -> int:
    table, _ = report(args.runs, args.out)
    sys.stdout.write(table)
    return 0


# -- parser ------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="omiga", description="Offline multi-agent RL with global-to-local value regularization.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def training_flags(p):
        p.add_argument("--dataset", required=True)
        p.add_argument("--env", help="env config; defaults to the one recorded in the dataset")
        p.add_argument("--alpha", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--tau", type=float)
        p.add_argument("--steps", type=int)
        p.add_argument("--batch", type=_positive_int)
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--mode", choices=EVAL_MODES)
        p.add_argument("--hidden", type=_positive_int)
        p.add_argument("--mixer-hidden", type=_positive_int)
        p.add_argument("--eval-every", type=_positive_int)
        p.add_argument("--eval-episodes", type=_positive_int)

    p = sub.add_parser("gen-data", help="roll out a behavior policy into a dataset directory")
    p.add_argument("--env", required=True)
    p.add_argument("--quality", choices=QUALITIES, required=True)
    p.add_argument("--episodes", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--gamma", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("mix-data", help="blend datasets episode-wise")
    p.add_argument("--dataset", action="append", required=True)
    p.add_argument("--proportions", type=float, nargs="+")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mix_data)

    p = sub.add_parser("train", help="train OMIGA on a dataset")
    training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bc-train", help="train the behavior-cloning baseline")
    training_flags(p)
    p.set_defaults(func=cmd_bc_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with decentralized execution")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env")
    p.add_argument("--gamma", type=float)
    p.add_argument("--episodes", type=_positive_int, default=32)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--mode", choices=EVAL_MODES, default="stochastic")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle-solve", help="exact regularized solution of a tabular env")
    p.add_argument("--env", required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--gamma", type=float)
    p.add_argument("--quality", choices=QUALITIES, default="uniform")
    p.add_argument("--seed", type=int, help="tie-breaking seed for non-uniform behavior policies")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle_solve)

    p = sub.add_parser("verify", help="run the verification suites and the training protocol")
    p.add_argument("--env", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--hidden", type=_positive_int)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default="verify_out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="aggregate final eval returns across run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (OmigaError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
