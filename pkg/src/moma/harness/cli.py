"""Command-line entry point: ``moma <subcommand>``.

Subcommands: train, eval, ablate, bench, gradcheck, oracle. Exit status is 0
on success, 1 when a check fails or a run errors, 2 on usage and
configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from moma.errors import ConfigError, MomaError
from moma.harness import ablation, bench, gradsuite, oracle
from moma.harness.config import load_checkpoint, load_config, save_checkpoint
from moma.harness.data import gen_task
from moma.model import MoMaModel
from moma.train import accuracy, fit

METRICS_SCHEMA = "# moma-metrics v1"
METRIC_COLUMNS = ("epoch", "loss", "ce", "distill", "grad_norm", "val_acc")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(METRICS_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"], *(repr(float(r[k])) for k in METRIC_COLUMNS[1:])])
    return buf.getvalue()


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    if args.epochs is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    train, val = gen_task(cfg.task()).split()
    model = MoMaModel(cfg.model, seed=cfg.train.seed)
    out = Path(args.out)
    log = (lambda r: print(f"epoch {r['epoch']}: loss {r['loss']:.4f} val_acc {r['val_acc']:.4f}",
                           file=sys.stderr)) if not args.quiet else None
    hist = fit(model, train.as_pair(), val.as_pair(), cfg.train, log=log, dump_dir=out / "diverged")
    save_checkpoint(out / "checkpoint", model, cfg)
    metrics = Path(args.metrics) if args.metrics else out / "metrics.csv"
    _emit(metrics_csv(hist.rows), str(metrics))
    print(f"val_acc {hist.last().get('val_acc', float('nan')):.4f}; checkpoint {out / 'checkpoint'}; metrics {metrics}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    if args.config:
        cfg.data = load_config(args.config).data
    train, val = gen_task(cfg.task()).split()
    ds = {"train": train, "val": val}[args.split]
    print(f"{args.split}_acc {accuracy(model, ds.pixels, ds.labels):.4f} ({len(ds)} samples)")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    progress = None if args.quiet else (
        lambda r: print(f"{r.matrix}/{r.cell} seed {r.seed}: {r.status} val_acc {r.val_acc:.4f}", file=sys.stderr))
    report = ablation.run_ablation(args.matrix, cfg, seeds=args.seeds, cells=args.cells, progress=progress)
    _emit(report.to_csv(), args.out)
    return 0 if all(r.status == "ok" for r in report.rows) else 1


def cmd_bench(args) -> int:
    methods = [bench.canonical_method(m) for m in args.methods]
    setup = bench.BenchSetup(grid=args.grid, dim=args.dim, heads=args.heads, window=args.window,
                             repeats=args.repeats, memory_limit=int(args.memory_limit * 1024 ** 2))
    report = bench.bench_scaling(methods, args.frames, setup)
    _emit(report.to_csv(include_time=not args.no_time), args.out)
    for m in methods:
        print(f"# slope {m}: time {report.slope(m):.3f} memory {report.slope(m, 'peak_bytes'):.3f} "
              f"flops {report.slope(m, 'flops'):.3f}", file=sys.stderr)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradsuite.run_suite(args.seed, args.eps, args.ops)
    ok = True
    for name, err in results.items():
        passed = err < args.tol
        ok &= passed
        print(f"{name:18s} max_rel_err {err:.3e} {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_oracle(args) -> int:
    cases = oracle.run_oracle(args.seed, args.cases)
    worst = max(c.rel_err for c in cases)
    failed = [c for c in cases if not c.passed]
    for c in failed:
        print(f"FAIL L={c.L} E={c.E} S={c.S} chunk={c.chunk} rel_err {c.rel_err:.3e}")
    print(f"oracle: {len(cases) - len(failed)}/{len(cases)} cases pass, max rel err {worst:.3e} "
          f"{'PASS' if not failed else 'FAIL'}")
    return 0 if not failed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moma", description="Divide-and-Modulate video adapter toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train adapters from a config; writes checkpoint and metrics CSV")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="run", help="output directory")
    t.add_argument("--metrics", help="metrics CSV path (default OUT/metrics.csv)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="accuracy of a checkpoint on its synthetic task")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="take the [data] section from this config instead")
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation matrix; writes CSV")
    a.add_argument("--config", required=True)
    a.add_argument("--matrix", choices=ablation.MATRICES, required=True)
    a.add_argument("--seeds", type=_ints, default=[0])
    a.add_argument("--cells", type=_names, help="subset of cell names")
    a.add_argument("--epochs", type=int)
    a.add_argument("--out")
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(fn=cmd_ablate)

    b = sub.add_parser("bench", help="cost-versus-frames benchmark; writes CSV")
    b.add_argument("--methods", type=_names, default=list(bench.METHODS))
    b.add_argument("--frames", type=_ints, default=[2, 4, 8, 16])
    b.add_argument("--grid", type=int, default=8)
    b.add_argument("--dim", type=int, default=16)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--window", default="4x4")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--memory-limit", type=float, default=2048, help="MiB of attention scores before a row is OOM")
    b.add_argument("--no-time", action="store_true", help="leave the wall-clock column empty")
    b.add_argument("--out")
    b.set_defaults(fn=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=gradsuite.TOLERANCE)
    g.add_argument("--ops", type=_names, help=f"subset of: {', '.join(gradsuite.CASES)}")
    g.set_defaults(fn=cmd_gradcheck)

    o = sub.add_parser("oracle", help="chunked scan against the sequential recurrence")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--cases", type=int, default=100)
    o.set_defaults(fn=cmd_oracle)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with threadpool_limits(limits=1):
            return args.fn(args)
    except ConfigError as e:
        print(f"moma {args.command}: {e}", file=sys.stderr)
        return 2
    except MomaError as e:
        print(f"moma {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
