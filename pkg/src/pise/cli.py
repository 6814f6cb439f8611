"""``pise`` command line: one entry point, one subcommand per workflow step.

Every command writes ``manifest.json`` into its output location before it
starts (status ``running``) and finalizes it afterwards. ``pise replay
MANIFEST`` re-executes the recorded argument vector.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

log = logging.getLogger("pise")

DEFAULT_CONFIG_HELP = "key=value config file (see README for keys)"


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# manifest handling

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Manifest:
    def __init__(self, path: Path, command: str, argv: list[str], config=None, seeds=None,
                 inputs=None, outputs=None):
        self.path = path
        self.doc = {"command": command, "argv": argv, "config": config, "seeds": seeds,
                    "inputs": inputs or {}, "outputs": outputs or {}, "version": __version__,
                    "started": _now(), "finished": None, "status": "running"}

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.doc, indent=2, default=str))

    def finish(self, status="ok", **extra):
        self.doc.update(finished=_now(), status=status, **extra)
        self.write()


def _run_with_manifest(args, out_dir: Path, body, *, config=None, seeds=None, inputs=None,
                       created: list[Path] | None = None):
    """Run ``body()`` with manifest bookkeeping; on failure remove what it created."""
    fresh = not out_dir.exists()
    manifest = Manifest(out_dir / "manifest.json", args.command, args.argv,
                        config=config, seeds=seeds, inputs=inputs)
    manifest.write()
    try:
        outputs = body() or {}
    except BaseException as e:
        for p in created or []:
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            else:
                p.unlink(missing_ok=True)
        if fresh:
            shutil.rmtree(out_dir, ignore_errors=True)
        else:
            manifest.finish("failed", error=str(e))
        raise
    manifest.finish(outputs={k: str(v) for k, v in outputs.items()})
    return outputs


def _config(args, require=()):
    from .training import TrainConfig, load_config, parse_config_text
    if args.config:
        cfg = load_config(args.config, args.set or [], require)
    else:
        cfg = parse_config_text("", args.set or [], require)
    if getattr(args, "out", None):
        cfg = cfg.replace(output_dir=str(args.out))
    return cfg


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise CommandError(f"bad seed list {text!r}") from e


# ---------------------------------------------------------------------------
# commands

def cmd_ingest(args):
    from .data import cache_root, ingest
    root = cache_root(args.cache)

    def body():
        return {"store": ingest(args.dataset, root, args.source)}

    # the store directory is replaced atomically, so the manifest sits beside it
    _run_with_manifest(args, root / "manifests" / args.dataset, body,
                       inputs={"source": args.source, "cache": str(root)})
    print(root / args.dataset)


def cmd_gen_operator(args):
    from .sensing import make_operator
    out = Path(args.out)
    if out.exists() and not args.force:
        raise CommandError(f"{out} exists; pass --force to overwrite")
    op = make_operator(args.rate, args.size, args.width or args.size, args.pattern, args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_bytes(op.to_bytes())
    tmp.replace(out)
    if args.manifest:
        m = Manifest(Path(args.manifest), args.command, args.argv, seeds=[args.seed],
                     outputs={"operator": str(out)})
        m.finish()
    print(f"{out}: M={op.rows} N={op.cols} ({op.height}x{op.width}, {op.pattern_kind}, seed {op.seed})")


def cmd_train(args):
    from .training import format_config, train_reconstructor
    cfg = _config(args)
    out = Path(cfg.output_dir)

    def body():
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(format_config(cfg))
        r = train_reconstructor(cfg)
        print(json.dumps({"final_val_loss": r.final_val_loss, "grad_index": r.grad_index,
                          "psnr": r.psnr, "accuracy": r.accuracy}, indent=2))
        return {"run": out / "run.json", "grad": out / "grad.csv"}

    _run_with_manifest(args, out, body, config=format_config(cfg), seeds=[cfg.param_seed])


def cmd_ablate(args):
    from .training import ARMS, format_config, run_ablation, write_ablation
    cfg = _config(args)
    seeds = _seeds(args.seeds)
    arms = {k: ARMS[k] for k in args.arms.split(",")} if args.arms else ARMS
    out = Path(cfg.output_dir)

    def body():
        table = run_ablation(cfg, arms, seeds, parallel=args.parallel)
        write_ablation(table, out / "ablation.csv")
        for arm, s in table["arms"].items():
            acc = s.get("acc_resnet") or next(v for k, v in s.items() if k.startswith("acc_"))
            print(f"({arm}) {s['label']:10s} acc {100 * acc['mean']:.2f} +- {100 * acc['std']:.2f}"
                  f"  grad index {s['grad_index']['mean']:.3f} +- {s['grad_index']['std']:.3f}")
        return {"table": out / "ablation.csv", "summary": out / "ablation.json"}

    _run_with_manifest(args, out, body, config=format_config(cfg), seeds=seeds)


def cmd_sweep(args):
    from .training import format_config, sampling_sweep
    cfg = _config(args)
    rates = [float(r) for r in args.rates.split(",")]
    out = Path(cfg.output_dir)

    def body():
        rows = sampling_sweep(cfg, rates, parallel=args.parallel)
        _write_csv(out / "sweep.csv", rows)
        (out / "sweep.json").write_text(json.dumps(rows, indent=2))
        return {"table": out / "sweep.csv"}

    _run_with_manifest(args, out, body, config=format_config(cfg), seeds=[cfg.param_seed])


def _load_run_models(run_dirs):
    from .models import load_reconstructor
    from .training import RunResult, TrainConfig
    runs = []
    for d in run_dirs:
        d = Path(d)
        found = [d] if (d / "run.json").exists() else sorted(p.parent for p in d.rglob("run.json"))
        for rd in found:
            r = RunResult.from_json(rd / "run.json")
            runs.append((r, TrainConfig(**r.config), load_reconstructor(rd / "reconstructor.pt")))
    if not runs:
        raise CommandError(f"no trained runs found under {run_dirs}")
    return runs


def robustness_for_runs(run_dirs, sigmas, method: str, seed: int = 0):
    """Mean robustness curve over the trained runs found under ``run_dirs``."""
    from . import data as datasets
    from .evaluation import average_curves, robustness_sweep
    from .sensing import make_operator
    from .training import get_classifiers, make_splits
    runs = _load_run_models(run_dirs)
    curves = []
    cache = {}
    for r, cfg, model in runs:
        key = (cfg.dataset, cfg.data_root)
        if key not in cache:
            cache[key] = datasets.load(cfg.dataset, cfg.data_root or None)
        ds = cache[key]
        splits = make_splits(ds, cfg)
        op = make_operator(cfg.rate, *ds.shape, cfg.pattern, cfg.operator_seed)
        clfs = get_classifiers(cfg, ds)
        curves.append(robustness_sweep(model, op, splits.test, splits.test_labels, clfs, sigmas,
                                       seed=seed, method=method))
    return average_curves(curves, method), curves


def cmd_robustness(args):
    from .evaluation import DEFAULT_SIGMAS, check_sigma_grid
    sigmas = check_sigma_grid([float(s) for s in args.sigmas.split(",")] if args.sigmas
                              else DEFAULT_SIGMAS)
    out = Path(args.out)
    methods = [("method", args.runs)] + ([("baseline", args.baseline)] if args.baseline else [])

    def body():
        rows, summary = [], {}
        for name, dirs in methods:
            curve, _ = robustness_for_runs(dirs, sigmas, name, args.seed)
            rows += list(curve.rows())
            summary[name] = {"psnr": curve.psnr, "accuracy": curve.accuracy,
                             "psnr_drop": curve.psnr_drop, "sigmas": curve.sigmas}
        _write_csv(out / "robustness.csv", rows)
        (out / "robustness.json").write_text(json.dumps(summary, indent=2))
        for name, s in summary.items():
            print(f"{name}: PSNR {s['psnr'][0]:.2f} -> {s['psnr'][-1]:.2f} dB "
                  f"(drop {s['psnr_drop']:.3f} dB)")
        return {"table": out / "robustness.csv", "summary": out / "robustness.json"}

    _run_with_manifest(args, out, body, seeds=[args.seed],
                       inputs={"runs": args.runs, "baseline": args.baseline})


def _collect_results(dirs):
    from .training import RunResult
    results = []
    for d in dirs:
        d = Path(d)
        paths = [d / "run.json"] if (d / "run.json").exists() else sorted(d.rglob("run.json"))
        results += [RunResult.from_json(p) for p in paths]
    if not results:
        raise CommandError(f"no run.json found under {dirs}")
    return results


def cmd_stats(args):
    from dataclasses import asdict
    from .evaluation import multi_run_stats
    from .training import metric_table
    out = Path(args.out)

    def body():
        method = metric_table(_collect_results(args.runs))
        baseline = metric_table(_collect_results(args.baseline))
        stats = multi_run_stats(method, baseline)
        doc = stats.to_dict()
        (out / "stats.json").write_text(json.dumps(doc, indent=2))
        rows = [{"metric": k, **{f: v for f, v in asdict(s).items() if f != "values"}}
                for k, s in stats.metrics.items()]
        _write_csv(out / "stats.csv", rows)
        print(json.dumps(doc, indent=2))
        return {"summary": out / "stats.json"}

    _run_with_manifest(args, out, body, inputs={"runs": args.runs, "baseline": args.baseline})


def cmd_bench(args):
    import torch
    from dataclasses import asdict
    from .evaluation import model_cost
    from .models import ReconstructorSpec, build_reconstructor, load_reconstructor
    from .sensing import num_measurements
    out = Path(args.out)

    def body():
        if args.checkpoint:
            model = load_reconstructor(args.checkpoint)
        else:
            m = num_measurements(args.rate, args.size * args.size)
            model = build_reconstructor(ReconstructorSpec(args.init_mode, args.depth, args.width),
                                        m, args.size, args.size)
        example = torch.rand(1, model.height, model.width)
        report = model_cost(model, example, batch_size=args.batch_size)
        doc = {"init_mode": model.spec.init_mode, "depth": model.spec.depth,
               "width": model.spec.width, "measurements": model.m, **asdict(report)}
        (out / "cost.json").write_text(json.dumps(doc, indent=2))
        print(json.dumps(doc, indent=2))
        return {"report": out / "cost.json"}

    _run_with_manifest(args, out, body)


def cmd_plot(args):
    from .plotting import plot_robustness, plot_trace
    written = []
    try:
        for trace in args.trace or []:
            written.append(plot_trace(trace, args.out_format))
        for table in args.robustness or []:
            written.append(plot_robustness(table, args.out_format))
    except BaseException:
        for p in written:
            Path(p).unlink(missing_ok=True)
        raise
    if not written:
        raise CommandError("nothing to plot: pass --trace and/or --robustness")
    for p in written:
        print(p)


def cmd_replay(args):
    doc = json.loads(Path(args.manifest).read_text())
    argv = list(doc["argv"])
    if args.out:
        argv = _override_out(argv, args.out)
    return main(argv)


def _override_out(argv, out):
    argv = list(argv)
    if "--out" in argv:
        argv[argv.index("--out") + 1] = out
    else:
        argv += ["--out", out]
    return argv


def _write_csv(path: Path, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else [])
        wr.writeheader()
        wr.writerows(rows)


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pise", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help=DEFAULT_CONFIG_HELP)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", help="output directory (overrides output_dir)")

    sp = sub.add_parser("ingest", help="parse dataset archives into the local store")
    sp.add_argument("dataset", choices=["fashion-mnist", "cifar10-gray"])
    sp.add_argument("--cache", help="cache root (default $PISE_CACHE or ~/.cache/pise)")
    sp.add_argument("--source", help="directory holding pre-placed archives (skip download)")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("gen-operator", help="write a sensing operator file")
    sp.add_argument("--rate", type=float, required=True)
    sp.add_argument("--size", type=int, required=True, help="image height (and width)")
    sp.add_argument("--width", type=int, help="image width if not square")
    sp.add_argument("--pattern", choices=["gaussian", "binary"], default="gaussian")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--manifest", help="also write a manifest to this path")
    sp.set_defaults(func=cmd_gen_operator)

    sp = sub.add_parser("train", help="train one reconstructor configuration")
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("ablate", help="four-arm ablation grid over seeds")
    with_config(sp)
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--arms", help="comma list out of A,B,C,D (default all)")
    sp.add_argument("--parallel", type=int, default=1)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("sweep", help="sampling-rate sensitivity sweep")
    with_config(sp)
    sp.add_argument("--rates", default="0.02,0.05,0.1,0.2")
    sp.add_argument("--parallel", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("robustness", help="PSNR/accuracy versus AWGN level for trained runs")
    sp.add_argument("--runs", nargs="+", required=True, help="run directories of the method")
    sp.add_argument("--baseline", nargs="+", help="run directories of the baseline")
    sp.add_argument("--sigmas", help="comma list starting at 0 (default 0,0.05,0.1,0.15,0.2)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_robustness)

    sp = sub.add_parser("stats", help="multi-run mean +- std and std-ratio")
    sp.add_argument("--runs", nargs="+", required=True)
    sp.add_argument("--baseline", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("bench", help="parameter / MAC / throughput report")
    sp.add_argument("--checkpoint", help="reconstructor.pt to measure (else build from flags)")
    sp.add_argument("--rate", type=float, default=0.05)
    sp.add_argument("--size", type=int, default=28)
    sp.add_argument("--init-mode", default="adjoint", choices=["adjoint", "learned_random"])
    sp.add_argument("--depth", type=int, default=3)
    sp.add_argument("--width", type=int, default=32)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("plot", help="render CSV traces / robustness tables to vector plots")
    sp.add_argument("--trace", action="append", help="grad.csv from a run")
    sp.add_argument("--robustness", action="append", help="robustness.csv")
    sp.add_argument("--out-format", default="svg", choices=["svg", "pdf"])
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out", help="write to a different output directory")
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command in ("train", "ablate", "sweep"):
        logging.getLogger("pise").setLevel(logging.INFO)
    from .data import DatasetError
    from .training import ConfigError
    try:
        rv = args.func(args)
    except (CommandError, ConfigError, DatasetError, ValueError, FileNotFoundError) as e:
        parser.print_usage(sys.stderr)
        parser.exit(2, f"pise {args.command}: error: {e}\n")
    return rv or 0


if __name__ == "__main__":
    sys.exit(main())
