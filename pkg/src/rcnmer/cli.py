"""Command-line entry point: ``rcnmer <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` with ``key=value`` lines whose keys
are option names (``feature-maps`` or ``feature_maps``); explicit flags win
over the file.  Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import DataError, FlowCache, FlowDataset, attention_favoring_maps, generate_dataset, load_dataset
from .data import load_manifest, precompute_flows
from .engine import NumericError
from .evaluation import (
    MetricError,
    TrainConfig,
    complexity_sweep,
    export_cam,
    load_checkpoint,
    run_loso,
    save_checkpoint,
    sweep_summary,
    train_single,
    write_csv,
)
from .flow import FlowError, FlowSolverConfig
from .models import NAMED_KINDS, ArchDescriptor, DescriptorError, named_descriptor
from .search import SearchConfig, SearchError, search

log = logging.getLogger("rcnmer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


# -- shared option groups -----------------------------------------------------

def _common(p):
    p.add_argument("--config", type=Path, help="key=value file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", type=Path, help="manifest.jsonl of the dataset")
    p.add_argument("--out", type=Path, help="output path")
    p.add_argument("--flows", type=Path, help="flow cache directory (default: <manifest dir>/flows)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")


def _model(p):
    g = p.add_argument_group("model")
    g.add_argument("--model", choices=NAMED_KINDS, default="rcn")
    g.add_argument("--descriptor", help="explicit descriptor string, overrides --model")
    g.add_argument("--feature-maps", type=int, default=16)
    g.add_argument("--pool", type=int, default=5)
    g.add_argument("--resolution", type=int, default=60)


def _solver(p):
    d = FlowSolverConfig()
    g = p.add_argument_group("flow solver")
    g.add_argument("--pyramid-levels", type=int, default=d.pyramid_levels)
    g.add_argument("--pyramid-scale", type=float, default=d.pyramid_scale)
    g.add_argument("--warps", type=int, default=d.outer_warps)
    g.add_argument("--irls-iters", type=int, default=d.irls_iters)
    g.add_argument("--lorentzian-sigma", type=float, default=d.lorentzian_sigma)
    g.add_argument("--smoothness", type=float, default=d.smoothness_lambda)
    g.add_argument("--median-radius", type=int, default=d.median_filter_radius)
    g.add_argument("--jacobi-sweeps", type=int, default=d.jacobi_sweeps)


def _training(p):
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=d.lr)
    g.add_argument("--momentum", type=float, default=d.momentum)
    g.add_argument("--weight-decay", type=float, default=d.weight_decay)
    g.add_argument("--dropout", type=float, default=d.dropout)
    g.add_argument("--max-epochs", type=int, default=d.max_epochs)
    g.add_argument("--loss-stop", type=float, default=d.loss_stop)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--loss", choices=("classwise_bce", "softmax_ce"), default=d.loss)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rcnmer", description="Recurrent convolutional networks for micro-expression flow maps")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write a synthetic composite dataset")
    _common(p)
    p.add_argument("--subjects", type=int, default=12)
    p.add_argument("--samples", type=int, default=9, help="samples per subject")
    p.add_argument("--domains", type=int, default=3)
    p.add_argument("--shift-scale", type=float, default=1.0)
    p.add_argument("--clean", action="store_true", help="no noise, no jitter")

    p = sub.add_parser("extract-flow", help="precompute flow maps into the cache")
    _common(p)
    _solver(p)
    p.add_argument("--resolutions", type=int_list, default=[60])

    p = sub.add_parser("train", help="train one model on the whole manifest")
    _common(p)
    _model(p)
    _training(p)

    p = sub.add_parser("eval-loso", help="leave-one-subject-out evaluation")
    _common(p)
    _model(p)
    _training(p)
    p.add_argument("--no-timings", action="store_true", help="omit wall-clock fields from the report")

    p = sub.add_parser("sweep", help="model x resolution complexity sweep")
    _common(p)
    _model(p)
    _training(p)
    p.add_argument("--models", type=str_list, default=["model1", "model2", "model3", "model4"])
    p.add_argument("--resolutions", type=int_list, default=[20, 40, 60, 80, 100, 150, 200, 250, 300])
    p.add_argument("--seeds", type=int_list, default=[0])

    p = sub.add_parser("search", help="differentiable module search")
    _common(p)
    _model(p)
    d = SearchConfig()
    p.add_argument("--contrived", action="store_true", help="search on the built-in attention-favoring maps")
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--arch-lr", type=float, default=d.arch_lr)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--val-fraction", type=float, default=d.val_fraction)

    p = sub.add_parser("cam", help="export class activation maps as P5 images")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--samples", type=str_list, help="sample ids (default: all)")
    p.add_argument("--classes", choices=("predicted", "all"), default="predicted")
    return parser


# -- config files -------------------------------------------------------------

def read_config(path: Path) -> dict[str, str]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in read_config(args.config).items():
        a = actions.get(key)
        if a is None or key in ("config", "help"):
            raise UsageError(f"{args.config}: unknown option {key!r} for {args.command}")
        if isinstance(a, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            continue
        try:
            value = a.type(raw) if a.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{args.config}: bad value for {key}: {exc}") from None
        if a.choices is not None and value not in a.choices:
            raise UsageError(f"{args.config}: {key} must be one of {list(a.choices)}")
        defaults[key] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# -- helpers ------------------------------------------------------------------

def _need(args, name):
    if getattr(args, name) is None:
        raise UsageError(f"{args.command}: --{name} is required")
    return getattr(args, name)


def solver_config(args) -> FlowSolverConfig:
    return FlowSolverConfig(
        pyramid_levels=args.pyramid_levels, pyramid_scale=args.pyramid_scale, outer_warps=args.warps,
        irls_iters=args.irls_iters, lorentzian_sigma=args.lorentzian_sigma, smoothness_lambda=args.smoothness,
        median_filter_radius=args.median_radius, jacobi_sweeps=args.jacobi_sweeps,
    )


def train_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay, dropout=args.dropout,
                       max_epochs=args.max_epochs, loss_stop=args.loss_stop, batch_size=args.batch_size,
                       seed=args.seed, loss=args.loss)


def descriptor(args, resolution=None) -> ArchDescriptor:
    if args.descriptor:
        d = ArchDescriptor.from_string(args.descriptor)
        return d if resolution is None else replace(d, input_resolution=resolution)
    return named_descriptor(args.model, args.feature_maps, args.pool, 3, resolution or args.resolution)


def _flow_dir(args, manifest_path: Path) -> Path:
    return args.flows or manifest_path.parent / "flows"


def load_data(args, resolution: int, with_masks: bool = False) -> FlowDataset:
    mpath = _need(args, "manifest")
    manifest = load_manifest(mpath)
    return load_dataset(manifest, FlowCache(_flow_dir(args, mpath)), resolution, with_masks)


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- subcommands --------------------------------------------------------------

def cmd_gen_synth(args) -> None:
    out = _need(args, "out")
    m = generate_dataset(out, args.subjects, args.samples, args.domains, args.seed, args.shift_scale, args.clean)
    _print({"manifest": str(Path(out) / "manifest.jsonl"), "samples": len(m.records), "subjects": len(m.subjects)})


def cmd_extract_flow(args) -> None:
    mpath = _need(args, "manifest")
    out = args.out or _flow_dir(args, mpath)
    _, stats = precompute_flows(load_manifest(mpath), solver_config(args), args.resolutions, out)
    _print({"cache": str(out), "computed": stats.computed, "written": stats.written, "reused": stats.reused})


def cmd_train(args) -> None:
    out = _need(args, "out")
    desc = descriptor(args)
    data = load_data(args, desc.input_resolution)
    cfg = train_config(args)
    model, tlog = train_single(data, desc, cfg)
    save_checkpoint(model, out, cfg.to_dict())
    _print({"checkpoint": str(out), "epochs": tlog.epochs, "final_loss": tlog.epoch_losses[-1],
            "stopped_early": tlog.stopped_early})


def cmd_eval_loso(args) -> None:
    desc = descriptor(args)
    rep = run_loso(load_data(args, desc.input_resolution), desc, train_config(args), args.workers)
    if args.out:
        rep.write_jsonl(args.out, timings=not args.no_timings)
    _print({"descriptor": rep.descriptor, "uar": rep.uar, "uf1": rep.uf1, "report": str(args.out)})


def cmd_sweep(args) -> None:
    out = _need(args, "out")
    bad = sorted(set(args.models) - set(NAMED_KINDS))
    if bad:
        raise UsageError(f"unknown models {bad}")
    rows = complexity_sweep(lambda r: load_data(args, r), args.models, args.resolutions, args.seeds,
                            train_config(args), args.feature_maps, args.pool, args.workers,
                            progress=lambda row: log.info("%s R=%d seed=%d UAR=%.4f", row["model"],
                                                          row["resolution"], row["seed"], row["uar"]))
    write_csv(rows, out)
    summary_path = Path(out).with_name(Path(out).stem + "_summary.csv")
    write_csv(sweep_summary(rows), summary_path)
    _print({"rows": len(rows), "csv": str(out), "summary": str(summary_path)})


def cmd_search(args) -> None:
    out = _need(args, "out")
    if args.contrived:
        x, y, s = attention_favoring_maps(seed=args.seed)
        data = FlowDataset(x, y, s, np.array(["contrived"] * len(y)), np.array([f"c{i:03d}" for i in range(len(y))]))
    else:
        data = load_data(args, args.resolution)
    cfg = SearchConfig(epochs=args.epochs, lr=args.lr, arch_lr=args.arch_lr, batch_size=args.batch_size,
                       val_fraction=args.val_fraction, seed=args.seed, feature_maps=args.feature_maps,
                       pool_size=args.pool)
    res = search(data, cfg=cfg)
    res.write_jsonl(out)
    _print({"log": str(out), "top3": [r.descriptor.to_string() for r in res.ranking[:3]]})


def cmd_cam(args) -> None:
    out = Path(_need(args, "out"))
    model, _ = load_checkpoint(args.checkpoint)
    data = load_data(args, model.descriptor.input_resolution)
    ids = [str(i) for i in data.sample_ids]
    wanted = args.samples or ids
    missing = sorted(set(wanted) - set(ids))
    if missing:
        raise DataError(f"unknown sample ids {missing[:5]}")
    out.mkdir(parents=True, exist_ok=True)
    for sid in wanted:
        export_cam(model, data.x[ids.index(sid)], out / f"{sid}_cam.pgm", args.classes)
    _print({"written": len(wanted), "dir": str(out)})


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "extract-flow": cmd_extract_flow,
    "train": cmd_train,
    "eval-loso": cmd_eval_loso,
    "sweep": cmd_sweep,
    "search": cmd_search,
    "cam": cmd_cam,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    try:
        COMMANDS[args.command](args)
    except (UsageError, DescriptorError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FlowError, SearchError, MetricError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # remaining ValueErrors come from invalid option values (config checks, shapes)
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
