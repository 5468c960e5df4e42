"""Command line entry point: gen-data, train, eval, upscale and cost."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import evaluator as ev
from . import fieldgen as fg
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigurationError, DataError, SuperMeshingError, TrainingError
from .smnet import VARIANTS, ModelConfig
from .trainer import TrainConfig, Trainer

log = logging.getLogger("supermeshing")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _print_config(name: str, config: dict) -> None:
    print(f"[{name}] configuration:")
    print(json.dumps(config, indent=2, sort_keys=True, default=str))
    sys.stdout.flush()


def _args_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    _print_config("gen-data", _args_dict(args))
    if args.import_dir:
        pairs = fg.import_csv_pairs(args.import_dir, args.scale)
        if not pairs:
            raise DataError(f"no <case>_lr.csv / <case>_hr.csv pairs found in {args.import_dir}")
        pairs, (lo, hi) = fg.normalize(pairs)
        for p in pairs:
            p.source = {}
        h, w = pairs[0].lr.shape
        dataset = fg.Dataset(pairs, (h, w), args.scale, lo, hi, {"generator": "csv"})
    else:
        dataset = fg.build_dataset(args.generator, args.count, args.hr, args.scale, args.mode,
                                   args.seed)
    fg.write_dataset(args.out, dataset)
    h, w = dataset.lr_shape
    H, W = dataset.hr_shape
    print(f"wrote {len(dataset)} pairs to {args.out}: lr {h}x{w}, hr {H}x{W}, scale {dataset.scale}")
    print(f"normalization min {dataset.norm_min!r} max {dataset.norm_max!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def resolve_train_config(args, dataset) -> TrainConfig:
    raw = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    model = dict(raw.pop("model", {}) or {})
    if args.variant:
        skip, att, perc, geo = VARIANTS[args.variant]
        model.update(use_skip=skip, use_attention=att, use_perceptual=perc, use_geometric=geo)
    if "scale" in model and model["scale"] != dataset.scale:
        raise ConfigurationError(
            f"config scale {model['scale']} does not match dataset scale {dataset.scale}")
    model["scale"] = dataset.scale
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    if args.seed is not None:
        raw["seed"] = args.seed
        model.setdefault("seed", args.seed)
    raw["model"] = ModelConfig.from_dict(model)
    return TrainConfig.from_dict(raw)


def cmd_train(args) -> int:
    dataset = fg.read_dataset(args.data)
    config = resolve_train_config(args, dataset)
    _print_config("train", {"data": args.data, "out": args.out, "train_config": config.to_dict()})
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    record_path = Path(args.record) if args.record else out.with_suffix(".run.json")

    def progress(epoch, tr, val_mae):
        print(f"epoch {epoch:4d}  train total {tr[3]:.4e}  val mae {val_mae:.4e}", flush=True)

    trainer = Trainer(config, dataset, progress)
    print(f"model {config.model.label}: {trainer.model.parameter_count()} parameters; "
          f"split train {len(trainer.split['train'])} val {len(trainer.split['val'])} "
          f"test {len(trainer.split['test'])}", flush=True)
    try:
        checkpoint, record = trainer.run()
    except TrainingError as exc:
        if exc.checkpoint is not None:
            save_checkpoint(out, exc.checkpoint)
            print(f"saved last good checkpoint to {out}", file=sys.stderr)
        if exc.record is not None:
            exc.record.write_log_csv(log_path)
        raise
    save_checkpoint(out, checkpoint)
    record.write_log_csv(log_path)
    record_path.write_text(json.dumps(record.to_dict(), indent=2) + "\n")
    if args.plot:
        from .plotting import plot_loss_curves
        plot_loss_curves(out.with_suffix(".loss.png"), record)
    print(f"best epoch {record.best_epoch} val mae {record.best_val_mae:.4e} "
          f"({record.train_seconds:.1f} s); checkpoint {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _split_indices(checkpoint, dataset, split: str) -> list[int]:
    if not checkpoint.split:
        return list(range(len(dataset)))
    idx = checkpoint.split.get(split)
    if idx is None:
        raise DataError(f"checkpoint has no {split!r} split")
    if idx and max(idx) >= len(dataset):
        raise DataError(f"checkpoint {split} split refers to case {max(idx)} but the dataset "
                        f"has {len(dataset)} cases")
    return list(idx)


def cmd_eval(args) -> int:
    _print_config("eval", _args_dict(args))
    datasets = {}
    for path in args.data:
        ds = fg.read_dataset(path)
        if ds.scale in datasets:
            raise ConfigurationError(f"two datasets given for scale {ds.scale}")
        datasets[ds.scale] = ds
    checkpoints = [(path, load_checkpoint(path)) for path in args.model]

    splits = ["test", "train"] if args.train_split else ["test"]
    per_scale_idx: dict[tuple[int, str], list[int]] = {}
    test_reports, all_reports = [], []
    predictions = {}
    for path, ckpt in checkpoints:
        scale = ckpt.config.scale
        if scale not in datasets:
            raise ConfigurationError(
                f"checkpoint {path} has scale {scale} but dataset scale(s) are {sorted(datasets)}")
        ds = datasets[scale]
        model = ckpt.build_model()
        for split in splits:
            idx = _split_indices(ckpt, ds, split)
            prev = per_scale_idx.setdefault((scale, split), idx)
            if prev != idx:
                raise DataError(f"checkpoint {path} uses a different {split} split from the other "
                                f"{scale}x checkpoints")
            report, pred = ev.evaluate_model(ckpt, ds, idx, split, model=model)
            all_reports.append(report)
            if split == "test":
                test_reports.append(report)
                predictions[(report.variant, scale)] = pred
            print(f"{report.variant:8s} {scale}x {split:5s} mae {report.mae:.4e} mse {report.mse:.4e}",
                  flush=True)

    extras = []
    if args.baseline:
        extras.append(ev.evaluate_baseline)
    if args.truth:
        extras.append(ev.evaluate_truth)
    for fn in extras:
        for (scale, split), idx in sorted(per_scale_idx.items()):
            report, pred = fn(datasets[scale], idx, split)
            all_reports.append(report)
            if split == "test":
                test_reports.append(report)
                predictions[(report.variant, scale)] = pred

    cost_inputs = ev.CostInputs()
    tables = ev.write_report(args.report_dir, test_reports, all_reports, cost_inputs, args.attribution)
    print(tables["table1"].to_text())
    if args.train_split:
        print(tables["table2"].to_text())

    if args.plots or args.panels:
        from .plotting import plot_case_panel, plot_histograms
        out = Path(args.report_dir)
        plot_histograms(out / "histogram.png", test_reports)
        for (variant, scale), pred in sorted(predictions.items()):
            ds = datasets[scale]
            idx = per_scale_idx[(scale, "test")]
            for k, case in enumerate(idx[:args.panels]):
                name = f"panel_{variant.replace('+', '_')}_{scale}x_case{case}.png"
                plot_case_panel(out / name, ds.pairs[case].lr, pred[k], ds.pairs[case].hr,
                                f"{variant} {scale}x case {case}")
    print(f"report written to {args.report_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# upscale
# ---------------------------------------------------------------------------

def cmd_upscale(args) -> int:
    _print_config("upscale", _args_dict(args))
    ckpt = load_checkpoint(args.model)
    grid = fg.read_grid_csv(args.input)
    model = ckpt.build_model()
    norm = (ckpt.norm_min, ckpt.norm_max)
    lr = grid.astype(np.float32) if args.normalized else fg.normalize_array(grid, *norm)
    lr = lr[None, None]
    model.check_input(lr.shape)
    start = time.perf_counter()
    pred = ev.predict_cases(model, lr, norm, norm)[0, 0]
    t_r = time.perf_counter() - start
    out = pred if args.normalized else fg.denormalize_array(pred, *norm)
    fg.write_grid_csv(args.output, out)
    print(f"wrote {out.shape[0]}x{out.shape[1]} grid to {args.output}")
    print(f"reconstruction time T_r = {t_r:.4f} s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------

def cmd_cost(args) -> int:
    inputs = ev.CostInputs(args.t_train, args.t_r, args.t_f32, args.t_f256, args.workload,
                           args.cpu_price, args.gpu_price)
    _print_config("cost", _args_dict(args))
    res = ev.cost_model(inputs, args.attribution)
    print(f"workload N      = {args.workload:g}")
    print(f"T_S (surrogate) = {res.t_s:.2f} s")
    print(f"T_F (fine FEA)  = {res.t_f:.2f} s")
    print(f"Cost_S          = ${res.cost_s:.4f}")
    print(f"Cost_F          = ${res.cost_f:.4f}")
    cases = ev.break_even_cases(inputs)
    if cases is None:
        print("break-even      : never (surrogate per-case time is not below fine FEA)")
    else:
        print(f"break-even      : {cases} cases (N* = {ev.break_even(inputs):.2f})")
    if args.table:
        print("workload,t_s,t_f,cost_s,cost_f")
        for r in ev.cost_table(inputs, attribution=args.attribution):
            print(f"{r.workload:g},{r.t_s:.2f},{r.t_f:.2f},{r.cost_s:.4f},{r.cost_f:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _nonneg(text: str) -> float:
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="supermesh", formatter_class=fmt,
                                     description="Super-resolution of 2D stress fields.")
    parser.add_argument("--threads", type=int, default=1, help="BLAS thread count")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset file", formatter_class=fmt)
    p.add_argument("--generator", choices=fg.GENERATORS, default="poisson")
    p.add_argument("--mode", choices=fg.MODES, default="sample")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--hr", type=int, default=64, help="high-density grid size")
    p.add_argument("--scale", type=int, choices=fg.VALID_SCALES, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--import-dir", default=None,
                   help="read <case>_lr.csv/<case>_hr.csv pairs instead of generating")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="TrainConfig JSON file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--variant", choices=sorted(VARIANTS), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log", default=None, help="training-log CSV (default <out>.log.csv)")
    p.add_argument("--record", default=None, help="run record JSON (default <out>.run.json)")
    p.add_argument("--plot", action="store_true", help="also write a loss-curve PNG")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints and write a report", formatter_class=fmt)
    p.add_argument("--model", action="append", required=True, help="checkpoint (repeatable)")
    p.add_argument("--data", action="append", required=True, help="dataset, one per scale (repeatable)")
    p.add_argument("--report-dir", required=True)
    p.add_argument("--baseline", action="store_true", help="add the bilinear baseline row")
    p.add_argument("--truth", action="store_true", help="debug: add truth-vs-truth row")
    p.add_argument("--train-split", action="store_true", help="also score the train split")
    p.add_argument("--attribution", choices=sorted(ev.ATTRIBUTIONS), default="default")
    p.add_argument("--plots", action="store_true", help="write histogram PNG")
    p.add_argument("--panels", type=int, default=0, help="case panels per model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("upscale", help="reconstruct one grid", formatter_class=fmt)
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True, help="low-density grid CSV")
    p.add_argument("--out", dest="output", required=True, help="high-density grid CSV")
    p.add_argument("--normalized", action="store_true",
                   help="input is already normalised; write normalised output")
    p.set_defaults(func=cmd_upscale)

    p = sub.add_parser("cost", help="time/cost model and break-even", formatter_class=fmt)
    p.add_argument("--workload", type=_nonneg, default=100.0)
    p.add_argument("--t-train", type=_nonneg, default=ev.REFERENCE_T_TRAIN)
    p.add_argument("--t-r", type=_nonneg, default=ev.REFERENCE_T_R)
    p.add_argument("--t-f32", type=_nonneg, default=ev.REFERENCE_T_F32)
    p.add_argument("--t-f256", type=_nonneg, default=ev.REFERENCE_T_F256)
    p.add_argument("--cpu-price", type=_nonneg, default=ev.CPU_PRICE, help="per hour")
    p.add_argument("--gpu-price", type=_nonneg, default=ev.GPU_PRICE, help="per hour")
    p.add_argument("--attribution", choices=sorted(ev.ATTRIBUTIONS), default="default")
    p.add_argument("--table", action="store_true", help="also print the standard workload rows")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except SuperMeshingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code if exc.exit_code in (EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC) else EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except json.JSONDecodeError as exc:
        print(f"error: bad JSON config: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
