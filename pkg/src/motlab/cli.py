"""Command-line entry point: world generation, detector simulation, training, inference and reports.

Exit codes: 0 success, 2 usage error (bad flags, missing input files), 1 runtime error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import analytics, rng as rngmod
from .config import FIELD_TYPES, SECTIONS, ConfigError, TrainConfig, load_config, parse_bool
from .pld import PseudoLabelSet, load_detections, write_detections
from .tgd import GroupLayout, build_attention_mask, mask_to_text
from .world import (
    DetectorParams,
    generate_scenario,
    load_scenario_config,
    read_gt,
    render_all,
    simulate_detector,
    write_gt,
)

logger = logging.getLogger("motlab")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
FLAG_ALIASES = {"rfs": "enable_rfs", "pld": "enable_pld", "tgd": "enable_tgd"}

# (rfs, pld, tgd) rows of the ablation grid
ABLATION_GRID = {
    "base": (False, False, False),
    "rfs": (True, False, False),
    "pld": (False, True, False),
    "tgd": (False, False, True),
    "rfs_pld": (True, True, False),
    "rfs_pld_tgd": (True, True, True),
}


class UsageError(Exception):
    pass


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _bool(text: str) -> bool:
    try:
        return parse_bool(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_world(args) -> int:
    cfg = load_scenario_config(_existing(args.config))
    scenario = generate_scenario(cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_gt(out / "gt.txt", render_all(scenario))
    (out / "scenario.json").write_text(scenario.to_json() + "\n")
    logger.info("wrote %s (%d targets, %d frames)", out, len(scenario.targets), scenario.num_frames)
    return EXIT_OK


def cmd_detect_sim(args) -> int:
    frames = read_gt(_existing(args.gt))
    params = DetectorParams(noise=args.noise, fn_rate=args.fn, fp_rate=args.fp, kappa=args.kappa)
    stream = rngmod.stream(args.seed, "detector")
    dets = {t + 1: tuple(simulate_detector(labels, params, stream)) for t, labels in enumerate(frames)}
    write_detections(args.out, PseudoLabelSet({k: v for k, v in dets.items() if v}))
    return EXIT_OK


def _config_from_args(args) -> TrainConfig:
    overrides = {key: getattr(args, key, None) for key in FIELD_TYPES}
    for alias, key in FLAG_ALIASES.items():
        if getattr(args, alias, None) is not None:
            overrides[key] = getattr(args, alias)
    path = _existing(args.config) if args.config else None
    return load_config(path, overrides)


def build_manifest(cfg: TrainConfig, gts: list[Path], dets: list[Path], out: Path) -> dict:
    inputs = {
        "gt": [{"path": str(p), "sha256": _sha256(p)} for p in gts],
        "det": [{"path": str(p), "sha256": _sha256(p)} for p in dets],
    }
    body = json.dumps({"config": cfg.to_dict(), "inputs": inputs}, sort_keys=True)
    return {
        "run_id": hashlib.sha256(body.encode()).hexdigest()[:16],
        "config": cfg.to_dict(),
        "inputs": inputs,
        "output_dir": str(out),
        "seed": cfg.seed,
        "versions": {"motlab": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }


def run_training(cfg: TrainConfig, gts: list[Path], dets: list[Path], out: Path):
    """Train on the given GT (and detection) files, writing manifest, log and parameters into ``out``."""
    from .engine import Trainer, TrainSequence

    if cfg.enable_pld and not dets:
        raise UsageError("PLD is enabled: pass one --det file per --gt file")
    if dets and len(dets) != len(gts):
        raise UsageError(f"{len(gts)} --gt files but {len(dets)} --det files")
    out.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(cfg, gts, dets, out)
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    seqs = []
    for i, gt in enumerate(gts):
        pseudo = load_detections(dets[i], sequence=f"seq{i}") if dets else None
        seqs.append(TrainSequence(f"seq{i}", read_gt(gt), pseudo))
    trainer = Trainer(cfg, seqs)
    with open(out / "train_log.jsonl", "w") as log:
        trainer.train(log=log)
    (out / "params.json").write_text(trainer.params.to_json() + "\n")
    return trainer.params


def cmd_train(args) -> int:
    if args.manifest:
        manifest = json.loads(_existing(args.manifest).read_text())
        cfg = TrainConfig(**manifest["config"])
        gts = [_existing(item["path"]) for item in manifest["inputs"]["gt"]]
        dets = [_existing(item["path"]) for item in manifest["inputs"]["det"]]
        for item, p in zip(manifest["inputs"]["gt"] + manifest["inputs"]["det"], gts + dets):
            if _sha256(p) != item["sha256"]:
                raise UsageError(f"{p} changed since the manifest was written")
    else:
        if not args.gt:
            raise UsageError("train needs --gt (or --manifest)")
        cfg = _config_from_args(args)
        gts = [_existing(p) for p in args.gt]
        dets = [_existing(p) for p in (args.det or [])]
    run_training(cfg, gts, dets, Path(args.out))
    return EXIT_OK


def _load_params(path):
    from .engine import ModelParams

    return ModelParams.from_json(_existing(path).read_text())


def cmd_infer(args) -> int:
    from .engine import run_inference, write_tracks

    cfg = _config_from_args(args)
    params = _load_params(args.params)
    outputs = run_inference(params, read_gt(_existing(args.gt)), cfg, sequence="infer")
    write_tracks(args.out, outputs)
    return EXIT_OK


def cmd_analyze(args) -> int:
    records = analytics.read_log(_existing(args.log))
    astats = analytics.assignment_stats(records, stages=args.stages)
    mstats = analytics.misalignment_stats(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    analytics.write_epoch_csv(out / "epochs.csv", astats, mstats)
    analytics.write_activation_csv(out / "activation.csv", astats)
    return EXIT_OK


def cmd_eval(args) -> int:
    gt = read_gt(_existing(args.gt))
    pred = read_gt(_existing(args.pred), num_frames=len(gt))
    metrics = analytics.evaluate(pred, gt, args.iou)
    analytics.write_report(args.out, metrics, {"iou_threshold": args.iou})
    print(json.dumps(metrics.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_mask_dump(args) -> int:
    if min(args.M, args.N) < 0 or args.G < 1:
        raise UsageError("need M >= 0, N >= 0, G >= 1")
    text = mask_to_text(build_attention_mask(GroupLayout(args.M, args.N, args.G), literal=args.literal))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _ablation_row(job):
    name, cfg, gts, dets, test_gts, out = job
    from .engine import run_inference, write_tracks

    params = run_training(cfg, gts, dets if cfg.enable_pld else [], out)
    pred_frames, gt_frames = [], []
    for i, path in enumerate(test_gts):
        frames = read_gt(path)
        outputs = run_inference(params, frames, cfg, sequence=f"test{i}")
        write_tracks(out / f"pred_{i}.txt", outputs)
        # identities are made unique per test sequence before pooling
        pred_frames += [[_Item(o.box, (i, o.identity)) for o in fr] for fr in outputs]
        gt_frames += [[_Item(g.box, (i, g.identity)) for g in fr] for fr in frames]
    metrics = analytics.evaluate(pred_frames, gt_frames)
    analytics.write_report(out / "metrics.json", metrics)
    return name, metrics


class _Item:
    __slots__ = ("box", "identity")

    def __init__(self, box, identity):
        self.box, self.identity = box, identity


def cmd_ablate(args) -> int:
    base = _config_from_args(args)
    gts = [_existing(p) for p in args.gt]
    dets = [_existing(p) for p in (args.det or [])]
    if not dets:
        raise UsageError("the ablation grid includes PLD rows: pass --det files")
    test_gts = [_existing(p) for p in args.test_gt]
    out = Path(args.out)
    jobs = [
        (name, base.replace(enable_rfs=r, enable_pld=p, enable_tgd=t), gts, dets, test_gts, out / name)
        for name, (r, p, t) in ABLATION_GRID.items()
    ]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_ablation_row, jobs))
    else:
        results = [_ablation_row(job) for job in jobs]
    lines = ["run,rfs,pld,tgd,MOTA,IDS,IDF1_lite,FP,FN\n"]
    for name, m in results:
        r, p, t = ABLATION_GRID[name]
        lines.append(f"{name},{int(r)},{int(p)},{int(t)},{m.MOTA!r},{m.IDS},{m.IDF1_lite!r},{m.FP},{m.FN}\n")
    (out / "ablation.csv").write_text("".join(lines))
    sys.stdout.write("".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file with section headers")
    group = p.add_argument_group("config overrides (flags override the file)")
    for f in fields(TrainConfig):
        kind = FIELD_TYPES[f.name]
        conv = {"bool": _bool, "int": int}.get(kind, float)
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=conv, default=None,
                           metavar=kind.upper())
    for alias, key in FLAG_ALIASES.items():
        group.add_argument(f"--{alias}", type=_bool, default=None, metavar="BOOL", help=f"same as --{key.replace('_', '-')}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"motlab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate a synthetic scenario")
    p.add_argument("--config", required=True, help="file with a [scenario] section")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("detect-sim", help="simulate a noisy offline detector on a GT file")
    p.add_argument("--gt", required=True)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--fn", type=float, default=0.1)
    p.add_argument("--fp", type=float, default=0.1)
    p.add_argument("--kappa", type=float, default=5.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect_sim)

    p = sub.add_parser("train", help="train the query model")
    p.add_argument("--gt", action="append", help="GT file (repeatable, one per sequence)")
    p.add_argument("--det", action="append", help="detection file matching each --gt")
    p.add_argument("--manifest", help="re-run exactly from a run_manifest.json")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run the tracker with trained parameters")
    p.add_argument("--params", required=True)
    p.add_argument("--gt", required=True, help="scene to track (rendered into observations)")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("analyze", help="label-routing and misalignment CSVs from a training log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stages", choices=analytics.STAGE_MODES, default="all")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("eval", help="MOTA / IDS / IDF1_lite of a tracker output")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mask-dump", help="print the attention mask grid")
    p.add_argument("--M", type=int, required=True)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--G", type=int, required=True)
    p.add_argument("--literal", action="store_true", help="use the literal formula variant")
    p.add_argument("--out")
    p.set_defaults(func=cmd_mask_dump)

    p = sub.add_parser("ablate", help="train, track and evaluate the strategy grid")
    p.add_argument("--gt", action="append", required=True)
    p.add_argument("--det", action="append")
    p.add_argument("--test-gt", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"motlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"motlab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
