"""Command-line front end: prepare, train, transmit, evaluate, ablate.

Exit codes: 0 success, 1 runtime failure, 2 configuration or precondition
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from stereosc.channel import ChannelConfig, ChannelKind
from stereosc.config import ExperimentConfig, dump_config, load_config, load_pairs, split_pairs
from stereosc.data import (BBox2D, DetectionSet, DifficultyRegime, classify_difficulty,
                           read_kitti_labels, read_png, write_png)
from stereosc.encoder import KittiFileDetector, OracleDetector, box_mask
from stereosc.errors import (ConfigError, DivergenceError, PreconditionError, StateError,
                             StereoSCError)
from stereosc.metrics import MetricReport, ap_2d, effective_compression_ratio, frame_metrics
from stereosc.model import SemanticSystem
from stereosc.pipeline import ABLATIONS, transmit_frame
from stereosc.plotting import plot_metric_vs_snr
from stereosc.training import (TrainState, default_schedules, load_checkpoint, prepare_frames,
                               run_stage, save_checkpoint, train_flow_on_shifts)
from stereosc.utils import canonical_json, sha256_hex

logger = logging.getLogger("stereosc")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
METRIC_FIELDS = ("frame_id", "view", "channel", "snr", "metric", "region", "value")


# -- small output helpers ---------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[k]) if isinstance(row, dict) else _fmt(row[i])
                        for i, k in enumerate(header)])
    return path


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def _clean(v: float):
    """JSON-safe float: infinities and NaN become strings."""
    return v if math.isfinite(v) else str(v)


def _snr_label(ch: ChannelConfig) -> str:
    return "inf" if ch.kind is ChannelKind.NOISELESS else _fmt(float(ch.snr_db))


def _write_run_manifest(cfg: ExperimentConfig, command: str, files: list, started: float,
                        extra: Optional[dict] = None) -> Path:
    out = Path(cfg.out_dir)
    cfg_path = out / command / "config.yaml"
    cfg_path.parent.mkdir(parents=True, exist_ok=True)
    cfg_path.write_text(dump_config(cfg))
    listed = sorted({str(Path(f).relative_to(out)) for f in [*files, cfg_path]})
    missing = [f for f in listed if not (out / f).exists()]
    if missing:
        raise RuntimeError(f"run manifest lists missing files: {missing}")
    body = {"command": command, "config_hash": cfg.config_hash(), "files": listed,
            "wall_seconds": round(time.perf_counter() - started, 3)}
    body.update(extra or {})
    return _write_json(out / command / "run_manifest.json", body)


def _relative(path: Path, root) -> str:
    """``path`` relative to ``root`` when inside it, so outputs do not depend on the run location."""
    try:
        return str(Path(path).resolve().relative_to(Path(root).resolve()))
    except ValueError:
        return str(path)


def _boxes_json(ds: DetectionSet) -> list:
    return [[b.u1, b.v1, b.u2, b.v2, b.c] for b in ds.boxes]


def _boxes_from_json(raw: list) -> list:
    return [BBox2D(*b) for b in raw]


def _detector(cfg: ExperimentConfig):
    if cfg.detection.detector == "files":
        return KittiFileDetector(cfg.detection.directory)
    return OracleDetector()


# -- prepare ----------------------------------------------------------------


def _regime_counts(pairs) -> dict:
    counts = {r.name.lower(): 0 for r in DifficultyRegime}
    for p in pairs:
        for b in (p.gt_left.boxes if p.gt_left is not None else ()):
            counts[classify_difficulty(b).name.lower()] += 1
    return counts


def cmd_prepare(cfg: ExperimentConfig, args) -> int:
    started = time.perf_counter()
    pairs = load_pairs(cfg)
    if not pairs:
        raise ConfigError("dataset is empty")
    splits = split_pairs(cfg, pairs)
    manifest = {
        "config_hash": cfg.config_hash(),
        "dataset": cfg.dataset.kind,
        "frames": len(pairs),
        "splits": {k: [p.frame_id for p in v] for k, v in splits.items()},
        "counts": {k: _regime_counts(v) for k, v in splits.items()},
    }
    out = Path(cfg.out_dir) / "prepare"
    man_path = _write_json(out / "split_manifest.json", manifest)
    rows = [(fid, name) for name, ids in manifest["splits"].items() for fid in ids]
    csv_path = _write_csv(out / "splits.csv", ("frame_id", "split"), sorted(rows))
    print(f"{len(pairs)} frames ({cfg.dataset.kind})")
    print(f"{'split':<6} {'frames':>6} " + " ".join(f"{r.name.lower():>9}" for r in DifficultyRegime))
    for name, ids in manifest["splits"].items():
        c = manifest["counts"][name]
        print(f"{name:<6} {len(ids):>6} " + " ".join(f"{c[r.name.lower()]:>9}" for r in DifficultyRegime))
    digest = sha256_hex(canonical_json(manifest))
    print(f"manifest sha256 {digest}")
    _write_run_manifest(cfg, "prepare", [man_path, csv_path], started, {"manifest_sha256": digest})
    return EXIT_OK


# -- train ------------------------------------------------------------------


def parse_stages(text: Optional[str]) -> list[int]:
    if not text:
        return [1, 2, 3, 4, 5]
    stages = set()
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = (int(x) for x in part.split("-", 1))
            stages.update(range(a, b + 1))
        elif part:
            stages.add(int(part))
    if not stages or min(stages) < 1 or max(stages) > 5:
        raise ConfigError(f"stages must lie in 1..5, got {text!r}")
    ordered = sorted(stages)
    if ordered != list(range(ordered[0], ordered[-1] + 1)):
        raise ConfigError(f"stages must be contiguous, got {text!r}")
    return ordered


def _checkpoint_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / "checkpoints"


def latest_checkpoint(cfg: ExperimentConfig) -> Optional[Path]:
    for k in range(5, 0, -1):
        p = _checkpoint_dir(cfg) / f"stage{k}.pt"
        if p.exists():
            return p
    return None


def _initial_state(cfg: ExperimentConfig, first: int, progress: Path) -> TrainState:
    if progress.exists():
        state = load_checkpoint(progress, cfg.codec)
        if state.position is not None and state.position["stage"] == first:
            logger.info("resuming stage %d from %s", first, progress)
            return state
    if first == 1:
        state = TrainState(SemanticSystem(cfg.codec), cfg.seed)
        if cfg.codec.flow == "pyramid" and cfg.train.flow_pretrain_steps > 0:
            hist = train_flow_on_shifts(state.system.flow, cfg.train.flow_pretrain_steps,
                                        seed=cfg.seed)
            logger.info("flow pre-training: final end-point error %.4f", hist[-1])
        return state
    prev = _checkpoint_dir(cfg) / f"stage{first - 1}.pt"
    if not prev.exists():
        raise PreconditionError(f"stage {first} needs the stage-{first - 1} checkpoint {prev}")
    state = load_checkpoint(prev, cfg.codec)
    state.seed = cfg.seed
    return state


def cmd_train(cfg: ExperimentConfig, args) -> int:
    started = time.perf_counter()
    stages = parse_stages(args.stages)
    splits = split_pairs(cfg, load_pairs(cfg))
    if not splits["train"]:
        raise ConfigError("training split is empty")
    frames = prepare_frames(splits["train"], _detector(cfg), cfg.detection.confidence_floor)
    ckpt_dir = _checkpoint_dir(cfg)
    progress = ckpt_dir / "progress.pt"
    state = _initial_state(cfg, stages[0], progress)
    schedules = default_schedules(cfg.train.epochs_per_phase)
    train_dir = Path(cfg.out_dir) / "train"
    written = []
    budget = args.max_epochs
    for sid in stages:
        before = len(state.history)
        try:
            run_stage(schedules[sid], state, frames, cfg.train.options, checkpoint_path=progress,
                      max_epochs=budget, diagnostics_path=train_dir / "divergence.json")
        finally:
            loss_csv = _write_csv(train_dir / "loss.csv", ("stage", "phase", "epoch", "loss"),
                                  state.history)
        if budget is not None:
            budget -= len(state.history) - before
        if state.position is not None:
            print(f"stage {sid} interrupted after epoch budget; rerun to resume")
            _write_run_manifest(cfg, "train", [loss_csv, progress], started,
                                {"interrupted_stage": sid})
            return EXIT_OK
        path = ckpt_dir / f"stage{sid}.pt"
        save_checkpoint(path, state)
        written.append(path)
        last = [h["loss"] for h in state.history if h["stage"] == sid]
        print(f"stage {sid}: {len(last)} epochs, final loss {last[-1]:.6f}")
    if progress.exists():
        progress.unlink()
    _write_run_manifest(cfg, "train", [loss_csv, *written], started,
                        {"checkpoints": [str(p.relative_to(cfg.out_dir)) for p in written]})
    return EXIT_OK


# -- transmit / ablate --------------------------------------------------------


def _load_system(cfg: ExperimentConfig, checkpoint: Optional[str]) -> tuple[SemanticSystem, Path]:
    path = Path(checkpoint) if checkpoint else latest_checkpoint(cfg)
    if path is None or not path.exists():
        raise PreconditionError(f"no trained checkpoint found (looked in {_checkpoint_dir(cfg)})")
    return load_checkpoint(path, cfg.codec).system, path


def _channel_runs(cfg: ExperimentConfig):
    """``(label, kind, snr, ChannelConfig, quant)`` for every sweep point."""
    runs = [(ch.label, ch.kind.value, _snr_label(ch), ch, None)
            for ch in cfg.channels.configs(cfg.seed)]
    if cfg.quant is not None:
        runs.append((f"quant{cfg.quant.bits}", "digital", "inf", ChannelConfig(), cfg.quant))
    return runs


def cmd_transmit(cfg: ExperimentConfig, args) -> int:
    started = time.perf_counter()
    system, ckpt = _load_system(cfg, args.checkpoint)
    test = split_pairs(cfg, load_pairs(cfg))["test"]
    if not test:
        raise ConfigError("test split is empty")
    out = Path(cfg.out_dir) / "transmit"
    img_dir = out / "images"
    detector = _detector(cfg)
    rows, entries, files = [], [], []
    for pair in test:
        for view, img in (("left", pair.left), ("right", pair.right)):
            p = img_dir / "original" / f"{pair.frame_id}_{view}.png"
            p.parent.mkdir(parents=True, exist_ok=True)
            write_png(p, img)
            files.append(p)
    for label, kind, snr, ch, quant in _channel_runs(cfg):
        for pair in test:
            res = transmit_frame(system, pair, ch, detector=detector, quant=quant,
                                 confidence_floor=cfg.detection.confidence_floor, seed=cfg.seed)
            report = MetricReport()
            entry = {"frame_id": pair.frame_id, "channel": kind, "snr": snr, "label": label,
                     "erasures": res.erasures}
            for view, rec, orig, boxes in (("left", res.left, pair.left, res.boxes_left),
                                           ("right", res.right, pair.right, res.boxes_right)):
                p = img_dir / label / f"{pair.frame_id}_{view}.png"
                p.parent.mkdir(parents=True, exist_ok=True)
                write_png(p, rec)
                files.append(p)
                entry[view] = str(p.relative_to(cfg.out_dir))
                entry[f"original_{view}"] = f"transmit/images/original/{pair.frame_id}_{view}.png"
                entry[f"boxes_{view}"] = _boxes_json(boxes)
                mask = box_mask(boxes.boxes, pair.height, pair.width)
                frame_metrics(report, pair.frame_id, view, orig, rec, mask,
                              cfg.evaluation.ssim_block)
            report.add(pair.frame_id, "stereo", "ratio", "payload",
                       effective_compression_ratio(res.payload, pair))
            rows.extend({**r, "channel": kind, "snr": snr} for r in report.rows)
            entries.append(entry)
    metrics_csv = _write_csv(out / "metrics.csv", METRIC_FIELDS, rows)
    summary = _summaries(rows)
    summary_json = _write_json(out / "summary.json", summary)
    recovered = _write_json(out / "recovered.json", {
        "config_hash": cfg.config_hash(), "checkpoint": _relative(ckpt, cfg.out_dir),
        "entries": entries})
    _print_summary(summary)
    _write_run_manifest(cfg, "transmit", [metrics_csv, summary_json, recovered, *files], started)
    return EXIT_OK


def _summaries(rows: list, keys=("channel", "snr")) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), MetricReport()).add(
            r["frame_id"], r["view"], r["metric"], r["region"], r["value"])
    return {"/".join(k): {m: {kk: _clean(vv) if isinstance(vv, float) else vv
                              for kk, vv in v.items()}
                          for m, v in rep.aggregate().items()}
            for k, rep in sorted(groups.items())}


def _sweep_order(key: str):
    kind, _, snr = key.partition("/")
    try:
        return kind, float(snr)
    except ValueError:
        return kind, math.inf


def _print_summary(summary: dict) -> None:
    for key, metrics in sorted(summary.items(), key=lambda kv: _sweep_order(kv[0])):
        parts = []
        for m, v in metrics.items():
            v = v["mean"] if isinstance(v, dict) else v
            parts.append(f"{m}={v:.4f}" if isinstance(v, float) else f"{m}={v}")
        print(f"{key:<22} " + " ".join(parts))


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    started = time.perf_counter()
    system, _ = _load_system(cfg, args.checkpoint)
    test = split_pairs(cfg, load_pairs(cfg))["test"]
    if not test:
        raise ConfigError("test split is empty")
    detector = _detector(cfg)
    rows = []
    for ablation in ABLATIONS:
        for label, kind, snr, ch, quant in _channel_runs(cfg):
            report = MetricReport()
            for pair in test:
                res = transmit_frame(system, pair, ch, detector=detector, quant=quant,
                                     ablation=ablation, seed=cfg.seed,
                                     confidence_floor=cfg.detection.confidence_floor)
                for view, rec, orig, boxes in (("left", res.left, pair.left, res.boxes_left),
                                               ("right", res.right, pair.right, res.boxes_right)):
                    frame_metrics(report, pair.frame_id, view, orig, rec,
                                  box_mask(boxes.boxes, pair.height, pair.width),
                                  cfg.evaluation.ssim_block)
            for name, agg in report.aggregate().items():
                metric, region = name.split("_", 1)
                rows.append({"ablation": ablation, "channel": kind, "snr": snr, "metric": metric,
                             "region": region, "mean": agg["mean"], "count": agg["count"]})
    out = Path(cfg.out_dir) / "ablate"
    path = _write_csv(out / "ablation.csv",
                      ("ablation", "channel", "snr", "metric", "region", "mean", "count"), rows)
    for r in rows:
        if r["region"] == "global":
            print(f"{r['ablation']:<12} {r['channel']:<10} {r['snr']:>5} "
                  f"{r['metric']:<5} {r['mean']:.4f}")
    _write_run_manifest(cfg, "ablate", [path], started)
    return EXIT_OK


# -- evaluate ---------------------------------------------------------------


def _ap_rows(cfg: ExperimentConfig, entries: list, det_root: Path, missing: list) -> list:
    gts = {p.frame_id: p for p in load_pairs(cfg)}
    regimes = [DifficultyRegime[r.upper()] for r in cfg.evaluation.regimes]
    grouped: dict = {}
    for e in entries:
        grouped.setdefault((e["label"], e["channel"], e["snr"]), []).append(e["frame_id"])
    rows = []
    for (label, kind, snr), fids in sorted(grouped.items()):
        dets, gt = {}, {}
        for fid in sorted(fids):
            path = det_root / label / f"{fid}.txt"
            if not path.exists():
                missing.append(str(path))
                continue
            pair = gts.get(fid)
            if pair is None or pair.gt_left is None:
                missing.append(f"ground truth for {fid}")
                continue
            dets[fid] = read_kitti_labels(path, pair.width, pair.height, None)[0].boxes
            gt[fid] = pair.gt_left.boxes
        if not dets:
            continue
        order = sorted(dets)
        for regime in regimes:
            ap, _ = ap_2d([dets[f] for f in order], [gt[f] for f in order],
                          cfg.evaluation.iou_threshold, regime, cfg.evaluation.ap_points)
            rows.append({"channel": kind, "snr": snr, "view": "left",
                         "regime": regime.name.lower(), "ap": ap, "frames": len(dets)})
    return rows


def _plots(cfg: ExperimentConfig, rows: list, out: Path) -> list:
    means: dict = {}
    for r in rows:
        if r["metric"] not in ("psnr", "ssim") or not math.isfinite(r["value"]):
            continue
        means.setdefault((r["metric"], r["channel"], r["snr"], r["region"]), []).append(r["value"])
    avg = {k: float(np.mean(v)) for k, v in means.items()}
    kinds = sorted({k[1] for k in avg} - {"digital", "noiseless"})
    files = []
    for metric in ("psnr", "ssim"):
        reference = {k[3]: v for k, v in avg.items() if k[0] == metric and k[1] == "noiseless"}
        for kind in kinds:
            points: dict = {}
            for (m, c, snr, region), v in sorted(avg.items()):
                if m == metric and c == kind and snr != "inf":
                    points.setdefault(region, []).append((float(snr), v))
            files.append(plot_metric_vs_snr(points, metric, kind, out / f"{metric}_{kind}.png",
                                            reference=reference))
    return files


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    started = time.perf_counter()
    root = Path(cfg.out_dir)
    man_path = Path(args.manifest) if args.manifest else root / "transmit" / "recovered.json"
    if not man_path.exists():
        raise PreconditionError(f"recovered manifest not found: {man_path}")
    manifest = json.loads(man_path.read_text())
    base = man_path.parent.parent
    missing, rows, usable = [], [], []
    for e in manifest["entries"]:
        report = MetricReport()
        ok = True
        for view in ("left", "right"):
            rec_p, org_p = base / e[view], base / e[f"original_{view}"]
            absent = [str(p) for p in (rec_p, org_p) if not p.exists()]
            if absent:
                missing.extend(absent)
                ok = False
                continue
            org, rec = read_png(org_p), read_png(rec_p)
            mask = box_mask(_boxes_from_json(e[f"boxes_{view}"]), org.shape[0], org.shape[1])
            frame_metrics(report, e["frame_id"], view, org, rec, mask, cfg.evaluation.ssim_block)
        if ok:
            usable.append(e)
        rows.extend({**r, "channel": e["channel"], "snr": e["snr"]} for r in report.rows)
    out = root / "evaluate"
    files = []
    if missing:
        for m in sorted(set(missing)):
            print(f"missing: {m}", file=sys.stderr)
    if not rows:
        print("no recovered images could be evaluated", file=sys.stderr)
        return EXIT_RUNTIME
    files.append(_write_csv(out / "metrics.csv", METRIC_FIELDS, rows))
    summary = _summaries(rows)
    if args.detections:
        ap_missing: list = []
        ap_rows = _ap_rows(cfg, usable, Path(args.detections), ap_missing)
        for m in ap_missing:
            print(f"missing: {m}", file=sys.stderr)
        if not ap_rows:
            print("no detection files found", file=sys.stderr)
            return EXIT_RUNTIME
        files.append(_write_csv(out / "ap.csv", ("channel", "snr", "view", "regime", "ap", "frames"),
                                ap_rows))
        for r in ap_rows:
            summary.setdefault(f"{r['channel']}/{r['snr']}", {})[f"ap_{r['regime']}"] = _clean(r["ap"])
    files.append(_write_json(out / "summary.json", summary))
    files.extend(_plots(cfg, rows, out / "plots"))
    _print_summary(summary)
    _write_run_manifest(cfg, "evaluate", files, started, {"missing": sorted(set(missing))})
    return EXIT_OK


# -- entry point --------------------------------------------------------------


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "transmit": cmd_transmit,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stereosc",
                                     description="Stereo semantic communication experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment YAML file")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--out", help="override the output directory")
        if name == "train":
            p.add_argument("--stages", help="e.g. 1-5, 1,2 or 3")
            p.add_argument("--max-epochs", type=int, help="stop after this many epochs (resumable)")
        if name in ("transmit", "ablate"):
            p.add_argument("--snr", type=float, nargs="+", help="SNR grid in dB")
            p.add_argument("--channel", nargs="+", choices=[k.value for k in ChannelKind],
                           help="channel kinds")
            p.add_argument("--checkpoint", help="checkpoint file (default: latest stage)")
        if name == "evaluate":
            p.add_argument("--manifest", help="recovered-image manifest (default: from transmit)")
            p.add_argument("--detections",
                           help="directory of KITTI-format detections, one subdirectory per channel run")
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)  # bitwise-reproducible reductions
    try:
        cfg = load_config(args.config).with_overrides(
            seed=args.seed, out_dir=args.out, snr=getattr(args, "snr", None),
            channels=getattr(args, "channel", None))
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, PreconditionError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (StereoSCError, OSError, RuntimeError, ValueError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
