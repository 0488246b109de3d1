"""Command-line driver.

    cascaded-vfl run CONFIG             train, write OUT/metrics.csv
    cascaded-vfl attack CONFIG          label-inference table, OUT/attack.csv
    cascaded-vfl verify                 estimator checks, OUT/verify.csv
    cascaded-vfl sweep CONFIG --grid G  iterations to a loss threshold, OUT/sweep.csv
    cascaded-vfl compare A B            paired runs, OUT/compare.csv

Exit status: 0 success, 1 bad configuration or input, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import METRICS_HEADER, RunConfig, parse_config
from .errors import ConfigError, InputError, UsageError, VFLError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; ours are configuration errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _say(args, *parts):
    if not args.quiet:
        print(*parts)


def _load(args, path) -> RunConfig:
    cfg = parse_config(path)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def train_to_csv(cfg: RunConfig, path: Path, echo=None):
    """Run one config and stream its metrics rows to ``path``; returns the records."""
    from .protocol import datasets_from_config, make_trainer

    train, test = datasets_from_config(cfg)
    trainer = make_trainer(cfg, train, test)
    records = []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for rec in trainer.run():
            writer.writerow(rec.as_row())
            fh.flush()
            records.append(rec)
            if echo is not None:
                echo(rec)
    return records


def _echo(args):
    def show(rec):
        _say(args, f"iter {rec.iteration:>7d}  loss {rec.train_loss:.4f}  train {rec.train_acc:.4f}  test {rec.test_acc:.4f}")

    return show


def cmd_run(args) -> int:
    cfg = _load(args, args.config)
    path = _out_dir(args) / "metrics.csv"
    records = train_to_csv(cfg, path, _echo(args))
    _say(args, f"wrote {path} ({len(records)} rows)")
    return EXIT_OK


def cmd_attack(args) -> int:
    from .attack import all_scenarios, attack_csv, run_attack
    from .protocol import datasets_from_config

    cfg = _load(args, args.config)
    train, _ = datasets_from_config(cfg)
    streams = np.random.SeedSequence(cfg.seed).spawn(4)
    results = [
        run_attack(s, train, np.random.default_rng(seed))
        for s, seed in zip(all_scenarios(train.num_classes, args.trials, args.mu), streams)
    ]
    text = attack_csv(results)
    (_out_dir(args) / "attack.csv").write_text(text)
    _say(args, text.rstrip())
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import report_csv, run_lemma_suite

    results = run_lemma_suite(mu=args.mu, n=args.samples, seed=0 if args.seed is None else args.seed)
    text = report_csv(results)
    (_out_dir(args) / "verify.csv").write_text(text)
    _say(args, text.rstrip())
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def parse_grid(spec: str) -> dict[str, list[int]]:
    """``server_width=128,256;client_width=16,32`` -> lists per axis."""
    axes = {"server_width": [], "client_width": []}
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        if "=" not in part:
            raise ConfigError(f"grid: expected axis=values, got {part!r}")
        key, values = (s.strip() for s in part.split("=", 1))
        if key not in axes:
            raise ConfigError(f"grid: unknown axis {key!r} (server_width, client_width)")
        try:
            axes[key] = [int(v) for v in values.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"grid: {key} needs integer widths, got {values!r}") from None
        if any(v < 1 for v in axes[key]):
            raise ConfigError(f"grid: {key} widths must be positive")
    if not axes["server_width"]:
        raise ConfigError("grid: server_width is required")
    return axes


def cmd_sweep(args) -> int:
    from .verify import DEFAULT_ETAS, scaling_experiment, summarize_sweep, sweep_csv

    cfg = _load(args, args.config)
    axes = parse_grid(args.grid)
    seeds = [cfg.seed + k for k in range(args.seeds)]
    rows = scaling_experiment(
        cfg,
        axes["server_width"],
        axes["client_width"] or [None],
        T=cfg.T,
        threshold=args.threshold,
        check_every=args.check_every,
        frameworks=args.frameworks.split(","),
        seeds=seeds,
        etas=None if args.fixed_rate else DEFAULT_ETAS,
    )
    text = sweep_csv(rows)
    (_out_dir(args) / "sweep.csv").write_text(text)
    _say(args, text.rstrip())
    for (fw, sw, cw), mean in sorted(summarize_sweep(rows).items()):
        _say(args, f"mean {fw:>9s} server={sw:<5d} client={cw:<5d} {mean:g}")
    return EXIT_OK


def cmd_compare(args) -> int:
    a = _load(args, args.config_a)
    b = _load(args, args.config_b)
    if a.seed != b.seed:
        b = b.replace(seed=a.seed)
        _say(args, f"using seed {a.seed} for both runs")
    out = _out_dir(args)
    rows = []
    for tag, cfg in (("a", a), ("b", b)):
        recs = train_to_csv(cfg, out / f"metrics_{tag}.csv")
        last = recs[-1] if recs else None
        rows.append((tag, cfg.framework, last))
    lines = ["run,framework,iteration,train_loss,train_acc,test_acc"]
    for tag, fw, last in rows:
        if last is None:
            lines.append(f"{tag},{fw},0,,,")
        else:
            lines.append(f"{tag},{fw},{last.iteration},{last.train_loss:.6g},{last.train_acc:.6g},{last.test_acc:.6g}")
    if rows[0][2] is not None and rows[1][2] is not None:
        gap = rows[0][2].test_acc - rows[1][2].test_acc
        lines.append(f"gap,a-b,,,{rows[0][2].train_acc - rows[1][2].train_acc:.6g},{gap:.6g}")
    text = "\n".join(lines) + "\n"
    (out / "compare.csv").write_text(text)
    _say(args, text.rstrip())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cascaded-vfl", description="Asynchronous vertical federated learning experiments.")
    parser.add_argument("--out", default="./out", help="output directory (default ./out)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--quiet", action="store_true", help="print nothing on success")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="train one configuration")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("attack", help="label-inference success table")
    p.add_argument("config")
    p.add_argument("--trials", type=int, default=None, help="samples per scenario (default: one pass)")
    p.add_argument("--mu", type=float, default=1e-3, help="output perturbation radius")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("verify", help="numerical checks of the gradient estimator")
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--mu", type=float, default=1e-3)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="iterations to a loss threshold over model widths")
    p.add_argument("config")
    p.add_argument("--grid", required=True, help="e.g. 'server_width=128,256,512,1024'")
    p.add_argument("--frameworks", default="cascaded,zoo")
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--check-every", type=int, default=25)
    p.add_argument("--seeds", type=int, default=3, help="consecutive seeds starting at the config seed")
    p.add_argument("--fixed-rate", action="store_true", help="use the config rates instead of tuning")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="two configs on the same seed")
    p.add_argument("config_a")
    p.add_argument("config_b")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, UsageError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VFLError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
