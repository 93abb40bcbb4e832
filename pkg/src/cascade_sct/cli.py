"""Command line entry point: generate, train, finetune, synthesize, evaluate, compare."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import yaml

from .errors import ConfigError, DataError, NumericalError, TrainingDivergedError
from .inference import Predictor, synthesize_sct
from .metrics import compute_metrics
from .models import Checkpoint
from .phantom import SPLIT_RULE, PhantomSpec, ShiftParams, generate_cohort, load_cohort, save_cohort, shift_cohort
from .reporting import (
    compare_records,
    plot_boxplots,
    plot_gains,
    read_metrics_table,
    write_comparison_table,
    write_metrics_table,
)
from .training import TrainConfig, finetune, train
from .volume import save_mask, save_volume

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

DEFAULTS = {
    "cohort": {"n": 12, "spec": {}, "max_rotation": 0.3, "shift": False, "shift_params": {}},
    "train": {},
    "inference": {"patch": None, "stride": None, "batch_size": 8},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid config: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"{p}: unknown config sections {sorted(unknown)}")
    return _merge(DEFAULTS, raw)


def _prepare_out(out: str | None, overwrite: bool) -> Path:
    if not out:
        raise ConfigError("--out is required")
    d = Path(out)
    if d.exists() and any(d.iterdir()) and not overwrite:
        raise ConfigError(f"output directory {d} is not empty (use --overwrite)")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_resolved(out: Path, cfg: dict, args) -> None:
    resolved = copy.deepcopy(cfg)
    resolved["command"] = args.command
    resolved["seed"] = args.seed
    (out / "config.resolved.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))


def _need(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _phantom_spec(cfg: dict) -> PhantomSpec:
    spec = dict(cfg["cohort"]["spec"])
    for k in ("dims", "voxel_size_mm"):
        if k in spec:
            spec[k] = tuple(spec[k])
    try:
        return PhantomSpec(**spec)
    except TypeError as exc:
        raise ConfigError(f"cohort.spec: {exc}") from None


def _train_config(cfg: dict, seed: int, mode: str | None) -> TrainConfig:
    t = dict(cfg["train"])
    if mode:
        t["mode"] = mode
    t["seed"] = seed
    if "betas" in t:
        t["betas"] = tuple(t["betas"])
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(t) - names
    if unknown:
        raise ConfigError(f"train: unknown keys {sorted(unknown)}")
    try:
        return TrainConfig(**t)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None


def _inference_opts(cfg: dict, ckpt: Checkpoint) -> tuple[int, int, int]:
    inf = cfg["inference"]
    patch = inf.get("patch") or ckpt.backbone.patch_size
    stride = inf.get("stride") or max(1, patch // 2)
    return int(patch), int(stride), int(inf.get("batch_size", 8))


def cmd_generate(args, cfg) -> int:
    spec = _phantom_spec(cfg)
    out = _prepare_out(args.out, args.overwrite)
    c = cfg["cohort"]
    cohort = generate_cohort(spec, int(c["n"]), args.seed, max_rotation=float(c["max_rotation"]))
    if c.get("shift"):
        cohort = shift_cohort(cohort, args.seed, ShiftParams(**c.get("shift_params", {})))
    save_cohort(cohort, out)
    _write_resolved(out, cfg, args)
    tr, va, te = cohort.sizes()
    print(f"split rule: {SPLIT_RULE}")
    print(f"split: train={tr} val={va} test={te}")
    return EXIT_OK


def _save_training(out: Path, ckpt: Checkpoint, history, tcfg: TrainConfig, cfg: dict, args) -> None:
    ckpt.save(out / "checkpoint")
    (out / "history.tsv").write_text("\n".join(history.epoch_lines()) + "\n")
    (out / "train_config.json").write_text(json.dumps(tcfg.to_dict(), indent=2, sort_keys=True))
    _write_resolved(out, cfg, args)
    print(f"best epoch {history.best_epoch} (val {history.best_val:.6g}), stopped at {history.stopped_epoch}")


def _step_logger(path: Path):
    fh = path.open("w")
    fh.write("epoch\tstep\tdice\tbce\tmse_bone\tmse_soft\ttotal\tregion_size\n")

    def on_step(s):
        fh.write(
            f"{s['epoch']}\t{s['step']}\t{s['dice']:.6g}\t{s['bce']:.6g}\t{s['mse_bone']:.6g}"
            f"\t{s['mse_soft']:.6g}\t{s['total']:.6g}\t{s['region_size']}\n"
        )
        fh.flush()

    return fh, on_step


def _run_training(args, cfg, runner) -> int:
    cohort = load_cohort(_need(args.cohort, "cohort"))
    out = _prepare_out(args.out, args.overwrite)
    fh, on_step = _step_logger(out / "steps.tsv")
    try:
        ckpt, history, tcfg = runner(cohort, on_step)
    except TrainingDivergedError as exc:
        (out / "history.tsv").write_text("\n".join(exc.history.epoch_lines()) + "\n")
        raise
    finally:
        fh.close()
    _save_training(out, ckpt, history, tcfg, cfg, args)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    tcfg = _train_config(cfg, args.seed, args.mode)

    def runner(cohort, on_step):
        ckpt, hist = train(tcfg, cohort, on_step=on_step)
        return ckpt, hist, tcfg

    return _run_training(args, cfg, runner)


def cmd_finetune(args, cfg) -> int:
    ckpt = Checkpoint.load(_need(args.checkpoint, "checkpoint"))
    tcfg = _train_config(cfg, args.seed, args.mode or ckpt.mode.value)
    if tcfg.backbone != ckpt.backbone and not cfg["train"].get("backbone"):
        tcfg = replace(tcfg, backbone=ckpt.backbone, patch_size=ckpt.backbone.patch_size)

    def runner(cohort, on_step):
        tuned, hist = finetune(ckpt, cohort, tcfg, on_step=on_step)
        return tuned, hist, tcfg

    return _run_training(args, cfg, runner)


def _cases(cohort, split: str):
    if split == "all":
        return cohort.all_cases()
    if split not in ("train", "val", "test"):
        raise ConfigError(f"unknown split {split!r}")
    return getattr(cohort, split)


def _synthesize_all(args, cfg, gt_reference: bool):
    ckpt = Checkpoint.load(_need(args.checkpoint, "checkpoint"))
    cohort = load_cohort(_need(args.cohort, "cohort"))
    cases = _cases(cohort, args.split)
    if not cases:
        raise DataError(f"split {args.split!r} is empty")
    patch, stride, batch = _inference_opts(cfg, ckpt)
    predictor = Predictor.from_checkpoint(ckpt)

    def one(case):
        ref = case.skull_label if gt_reference else None
        sct, skull = synthesize_sct(predictor, case, patch, stride, batch, reference_mask=ref)
        return case, sct, skull

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            return list(pool.map(one, cases))
    return [one(c) for c in cases]


def cmd_synthesize(args, cfg) -> int:
    results = _synthesize_all(args, cfg, args.gt_mask_reference)
    out = _prepare_out(args.out, args.overwrite)
    for case, sct, skull in results:
        save_volume(sct, out / f"{case.subject_id}_sct.cvf")
        save_mask(skull, out / f"{case.subject_id}_skull.cvf", sct.voxel_size_mm)
    _write_resolved(out, cfg, args)
    print(f"synthesized {len(results)} subject(s)")
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    results = _synthesize_all(args, cfg, args.gt_mask_reference)
    out = _prepare_out(args.out, args.overwrite)
    records = [compute_metrics(c.subject_id, sct, c.ct, skull, c.skull_label) for c, sct, skull in results]
    write_metrics_table(records, out / "metrics.tsv")
    _write_resolved(out, cfg, args)
    for r in records:
        print(f"{r.subject_id}\tdice={r.dice:.4f}\tmae_bone={r.mae_bone_hu:.1f}")
    return EXIT_OK


def _metrics_path(p: str | None, what: str) -> Path:
    path = _need(p, what)
    return path / "metrics.tsv" if path.is_dir() else path


def cmd_compare(args, cfg) -> int:
    single = read_metrics_table(_metrics_path(args.single, "single"))
    multi = read_metrics_table(_metrics_path(args.multi, "multi"))
    out = _prepare_out(args.out, args.overwrite)
    reports = compare_records(single, multi)
    write_metrics_table(single, out / "table_single.tsv")
    write_metrics_table(multi, out / "table_multi.tsv")
    write_comparison_table(reports, out / "comparison.tsv")
    plot_boxplots(single, multi, out / "boxplots.png")
    plot_gains(reports, out / "gains.png")
    _write_resolved(out, cfg, args)
    for r in reports:
        for note in r.warnings:
            print(f"warning: {note}", file=sys.stderr)
        print(f"{r.metric}\tgain={r.relative_gain_pct:.3f}%\tp={r.p_value:.4g}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel subjects during synthesis/evaluation")
    common.add_argument("--overwrite", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cascade-sct", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="generate a phantom cohort")
    for name in ("train", "finetune"):
        sp = sub.add_parser(name, parents=[common], help=f"{name} a model")
        sp.add_argument("--cohort", help="cohort directory")
        sp.add_argument("--mode", choices=["single_task", "multitask"])
        if name == "finetune":
            sp.add_argument("--checkpoint", help="source checkpoint directory")
    for name in ("synthesize", "evaluate"):
        sp = sub.add_parser(name, parents=[common], help=f"{name} on a cohort split")
        sp.add_argument("--checkpoint")
        sp.add_argument("--cohort")
        sp.add_argument("--split", default="test")
        sp.add_argument("--gt-mask-reference", action="store_true", help="use ground-truth skull masks in the HU path")
    sp = sub.add_parser("compare", parents=[common], help="compare two evaluation tables")
    sp.add_argument("--single", help="single-task metrics.tsv or evaluation directory")
    sp.add_argument("--multi", help="multitask metrics.tsv or evaluation directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
