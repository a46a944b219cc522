"""Batch driver: augment -> correct -> debias -> evaluate, plus validate and resample.

Exit codes: 0 success, 1 fatal processing error, 2 configuration/usage error.
Per-file soft failures (for example a diverging simulation) are reported but
do not change the exit status.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import plotting
from .bvh_io import BvhError, Motion, Skeleton, load_manifest, read_bvh, resample, save_bvh, time_warp
from .config import ConfigError, PipelineConfig, load_config
from .debias import (
    TrainingPair,
    apply_debias,
    fit_debias,
    fit_debias_per_class,
    mean_frame_error,
)
from .ik_augment import synthesize_ik_motion
from .kinematics import IkChain
from .latent_sampler import LinearDecoder, generate_batch, load_embeddings
from .metrics import evaluate_sets
from .physics_correct import SimCharacter, SimulationDiverged, track_motion, validate_plausibility

log = logging.getLogger("motionaug")

EXIT_OK, EXIT_FATAL, EXIT_CONFIG = 0, 1, 2


class FatalError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers

def _bvh_files(d: Path) -> list[Path]:
    if not d.is_dir():
        raise ConfigError(f"directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".bvh")


def _out_dir(cfg: PipelineConfig) -> Path:
    out = cfg.raw.get("output_dir")
    if out is None:
        raise ConfigError("no output directory (config 'output_dir' or --out)")
    p = Path(out)
    p = p if p.is_absolute() else cfg.base_dir / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def _pool_map(fn: Callable, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _timed(label: str, t0: float) -> None:
    log.info("%s (%.2fs)", label, time.perf_counter() - t0)


def _read(path: Path, label: str | None = None) -> tuple[Skeleton, Motion]:
    try:
        return read_bvh(path, label)
    except (BvhError, OSError) as e:
        raise FatalError(str(e)) from None


# ---------------------------------------------------------------------------
# augment

def _augment_ik_one(args) -> list[dict]:
    cfg, idx, entry = args
    t0 = time.perf_counter()
    skel, motion = _read(entry.path, entry.label)
    chain_cfg = cfg.raw.get("chain")
    try:
        chain = IkChain.from_names(skel, chain_cfg["base"], chain_cfg["end"])
    except (KeyError, ValueError) as e:
        raise FatalError(f"{entry.path}: bad IK chain ({e})") from None
    space = cfg.sampling_space(entry.label)
    tol, iters = cfg["fabrik"]["tolerance"], cfg["fabrik"]["max_iters"]
    tw = cfg["time_warp"]
    thresholds = cfg.thresholds()
    out_dir = _out_dir(cfg)
    records = []
    for k in range(cfg.multiplier):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, idx, k]))
        try:
            res = synthesize_ik_motion(skel, motion, chain, space, rng, tol, iters)
        except ValueError as e:
            raise FatalError(f"{entry.path}: {e}") from None
        out = res.motion
        scale = 1.0
        if tw["enabled"]:
            scale = float(rng.uniform(*tw["range"]))
            out = time_warp(out, scale, skel.rotation_mask(), tuple(tw["range"]))
        name = f"{entry.id}_ik{k:03d}.bvh"
        save_bvh(out_dir / name, skel, out)
        records.append({
            "file": name,
            "source_id": entry.id,
            "method": "ik",
            "label": entry.label,
            "t_key": res.t_key,
            "target": res.target.tolist(),
            "reachable": res.reachable,
            "unreachable_frames": len(res.unreachable_frames),
            "time_scale": scale,
            "diagnostics": [d.to_dict() for d in validate_plausibility(skel, out, thresholds)],
        })
    _timed(f"augment {entry.id}: {len(records)} IK motions", t0)
    return records


def cmd_augment(cfg: PipelineConfig, args) -> int:
    corpus = cfg.path("corpus")
    if corpus is None:
        raise ConfigError("augment needs a corpus manifest ('corpus')")
    entries = sorted((e for e in load_manifest(corpus) if e.split == "train"), key=lambda e: e.id)
    for e in entries:
        if not e.path.exists():
            raise ConfigError(f"corpus file not found: {e.path}")
    synth = cfg["synthesis"]
    if synth["ik"] and "chain" not in cfg.raw and cfg.multiplier > 0:
        raise ConfigError("IK synthesis needs a 'chain' with base and end joint names")
    out_dir = _out_dir(cfg)
    records: list[dict] = []
    if synth["ik"] and cfg.multiplier > 0:
        for recs in _pool_map(_augment_ik_one, [(cfg, i, e) for i, e in enumerate(entries)], args.jobs):
            records.extend(recs)
    if synth["latent"] and cfg.multiplier > 0 and entries:
        emb_path, dec_path = cfg.path("embeddings", "latent"), cfg.path("decoder", "latent")
        if emb_path is None or dec_path is None:
            raise ConfigError("latent synthesis needs latent.embeddings and latent.decoder files")
        t0 = time.perf_counter()
        embeddings = load_embeddings(emb_path)
        decoder = LinearDecoder.load(dec_path)
        skel, _ = _read(entries[0].path)
        lat = cfg["latent"]
        count = cfg.multiplier * len(entries)
        try:
            draws = generate_batch(embeddings, decoder, lat["n_c"], lat["n_s"], count, cfg.seed,
                                   lat["reuse_gaussian"])
        except ValueError as e:
            raise FatalError(f"latent synthesis: {e}") from None
        for k, draw in enumerate(draws):
            name = f"latent{k:04d}.bvh"
            try:
                save_bvh(out_dir / name, skel, draw.motion)
            except BvhError as e:
                raise FatalError(f"{dec_path}: decoded motion does not fit skeleton ({e})") from None
            records.append({
                "file": name,
                "source_id": None,
                "method": "latent",
                "label": draw.motion.action_label,
                "cluster": draw.cluster,
                "z": draw.z.tolist(),
                "diagnostics": [d.to_dict() for d in validate_plausibility(skel, draw.motion, cfg.thresholds())],
            })
        _timed(f"augment latent: {len(draws)} motions", t0)
    records.sort(key=lambda r: r["file"])
    _dump_json(out_dir / "run_manifest.json", {
        "command": "augment",
        "seed": cfg.seed,
        "multiplier": cfg.multiplier,
        "train_ids": [e.id for e in entries],
        "outputs": records,
    })
    log.info("augment: wrote %d motions to %s", len(records), out_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# correct

def _correct_one(args) -> dict:
    cfg, path = args
    t0 = time.perf_counter()
    skel, goal = _read(path)
    c = cfg["controller"]
    substeps, dt = int(c["substeps"]), float(c["dt"])
    if abs(dt * substeps - goal.frame_time) > 1e-9:
        substeps = max(substeps, math.ceil(goal.frame_time / dt - 1e-9))
        dt = goal.frame_time / substeps
    rec = {"motion_id": path.stem, "frames": goal.n_frames}
    try:
        char = SimCharacter.for_skeleton(skel, **cfg.controller_kwargs())
        res = track_motion(char, skel, goal, dt, substeps, cfg.reward_weights(), c["use_residual"])
    except SimulationDiverged as e:
        rec.update(status="diverged", message=str(e), r_norm=None, trace=None, diagnostics=[])
        log.warning("correct %s: diverged (%s)", path.name, e)
        return rec
    save_bvh(_out_dir(cfg) / path.name, skel, res.motion)
    diags = validate_plausibility(skel, res.motion, cfg.thresholds())
    rec.update(
        status="ok",
        message="",
        r_norm=res.r_norm,
        max_residual_force=res.diagnostics["max_residual_force"],
        ground_lifts=res.diagnostics["ground_lifts"],
        trace=res.trace.r_im.tolist(),
        frame_time=goal.frame_time,
        diagnostics=[d.to_dict() for d in diags],
    )
    _timed(f"correct {path.name}: R_norm={res.r_norm:.4f}", t0)
    return rec


def cmd_correct(cfg: PipelineConfig, args) -> int:
    files = _bvh_files(Path(args.input))
    out_dir = _out_dir(cfg)
    recs = sorted(_pool_map(_correct_one, [(cfg, p) for p in files], args.jobs), key=lambda r: r["motion_id"])
    _write_csv(
        out_dir / "correct_report.csv",
        ["motion_id", "frames", "status", "r_norm", "max_residual_force", "ground_lifts", "n_diagnostics", "message"],
        ([r["motion_id"], r["frames"], r["status"], r["r_norm"], r.get("max_residual_force"),
          r.get("ground_lifts"), len(r["diagnostics"]), r["message"]] for r in recs),
    )
    _dump_json(out_dir / "correct_report.json", {
        "command": "correct",
        "motions": [{k: v for k, v in r.items() if k not in ("trace", "frame_time")} for r in recs],
    })
    ok = [r for r in recs if r["status"] == "ok"]
    if cfg["figures"] and ok:
        plotting.plot_reward_traces({r["motion_id"]: r["trace"] for r in ok}, ok[0]["frame_time"],
                                    out_dir / "reward_traces.png")
    log.info("correct: %d ok, %d diverged", len(ok), len(recs) - len(ok))
    return EXIT_OK


# ---------------------------------------------------------------------------
# debias

def _load_pairs(pairs_dir: Path) -> list[tuple[str, Skeleton, TrainingPair]]:
    bdir, udir = pairs_dir / "biased", pairs_dir / "unbiased"
    if not bdir.is_dir() or not udir.is_dir():
        raise ConfigError(f"pairs directory must contain biased/ and unbiased/: {pairs_dir}")
    biased = {p.name: p for p in _bvh_files(bdir)}
    unbiased = {p.name: p for p in _bvh_files(udir)}
    if set(biased) != set(unbiased):
        missing = sorted(set(biased) ^ set(unbiased))
        raise ConfigError(f"unmatched pair files: {', '.join(missing)}")
    if not biased:
        raise ConfigError(f"no training pairs in {pairs_dir}")
    out = []
    for name in sorted(biased):
        sb, mb = _read(biased[name])
        su, mu = _read(unbiased[name])
        if not sb.same_structure(su):
            raise FatalError(f"{name}: biased and unbiased skeletons differ")
        try:
            out.append((name, sb, TrainingPair(mb, mu)))
        except ValueError as e:
            raise FatalError(f"{name}: {e}") from None
    return out


def cmd_debias(cfg: PipelineConfig, args) -> int:
    pairs = _load_pairs(Path(args.pairs))
    files = _bvh_files(Path(args.input))
    out_dir = _out_dir(cfg)
    d = cfg["debias"]
    kw = dict(kind=d["kind"], lam=d["lambda"], seed=cfg.seed, hidden=d["hidden"], epochs=d["epochs"])
    skel0 = pairs[0][1]
    width = {p.biased.width for _, _, p in pairs}
    if len(width) != 1:
        raise FatalError("training pairs differ in pose width")
    report: dict = {"command": "debias", "kind": d["kind"], "lambda": d["lambda"], "pairs": [n for n, _, _ in pairs]}
    t0 = time.perf_counter()
    tp = [p for _, _, p in pairs]
    if len(tp) >= 2:
        held = tp[-1]
        m = fit_debias(tp[:-1], **kw)
        before, after = mean_frame_error(held.biased, held.unbiased), mean_frame_error(apply_debias(m, held.biased), held.unbiased)
        report["holdout"] = {"pair": pairs[-1][0], "error_before": before, "error_after": after}
        log.info("debias holdout %s: mean frame error %.6g -> %.6g", pairs[-1][0], before, after)
    if d["per_class"]:
        models = fit_debias_per_class(tp, **kw)
    else:
        models = {None: fit_debias(tp, **kw)}
    train_before = float(np.mean([mean_frame_error(p.biased, p.unbiased) for p in tp]))
    train_after = float(np.mean([
        mean_frame_error(apply_debias(models.get(p.unbiased.action_label, next(iter(models.values()))), p.biased), p.unbiased)
        for p in tp
    ]))
    report["training"] = {"error_before": train_before, "error_after": train_after}
    _timed(f"debias fit on {len(tp)} pairs: training error {train_before:.6g} -> {train_after:.6g}", t0)
    if len(models) == 1:
        next(iter(models.values())).save(out_dir / "debias_model.json")
    else:
        _dump_json(out_dir / "debias_model.json", {"per_class": {str(k): m.to_dict() for k, m in models.items()}})
    outputs = []
    for path in files:
        skel, motion = _read(path)
        if not skel.same_structure(skel0):
            raise FatalError(f"{path}: skeleton differs from the training pairs")
        model = models.get(motion.action_label) or next(iter(models.values()))
        try:
            out = apply_debias(model, motion)
        except ValueError as e:
            raise FatalError(f"{path}: {e}") from None
        save_bvh(out_dir / path.name, skel, out)
        outputs.append(path.name)
        log.info("debias %s", path.name)
    report["outputs"] = outputs
    _dump_json(out_dir / "debias_report.json", report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate

def _load_set(d: Path) -> tuple[list[str], list[Motion], Skeleton]:
    files = _bvh_files(d)
    if not files:
        raise ConfigError(f"no BVH files in {d}")
    ids, motions, skel0 = [], [], None
    for p in files:
        skel, m = _read(p)
        if skel0 is None:
            skel0 = skel
        elif not skel.same_structure(skel0):
            raise FatalError(f"{p}: skeleton differs from {files[0].name}")
        ids.append(p.stem)
        motions.append(m)
    return ids, motions, skel0


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    t0 = time.perf_counter()
    test_ids, tests, skel = _load_set(Path(args.test))
    cand_ids, cands, skel_c = _load_set(Path(args.candidates))
    if not skel.same_structure(skel_c):
        raise FatalError("test and candidate skeletons differ")
    out_dir = _out_dir(cfg)
    try:
        report, table = evaluate_sets(tests, cands, skel, test_ids, cand_ids, cfg["metrics"]["bandwidth"])
    except ValueError as e:
        raise FatalError(str(e)) from None
    doc = report.to_dict()
    doc["n_test"], doc["n_candidates"] = len(tests), len(cands)
    doc["candidate_ids"] = cand_ids
    doc["dtw_table"] = table.tolist()
    _dump_json(out_dir / "metrics.json", doc)
    _write_csv(out_dir / "metrics_summary.csv", ["metric", "value"],
               [["min_dtw", report.min_dtw], ["mmd", report.mmd], ["bandwidth", report.bandwidth],
                ["n_test", len(tests)], ["n_candidates", len(cands)]])
    _write_csv(out_dir / "metrics_nearest.csv", ["test_id", "nearest_id", "dtw"],
               zip(report.test_ids, report.nearest_ids, report.nearest_dtw))
    if cfg["figures"]:
        plotting.plot_dtw_table(table, test_ids, cand_ids, out_dir / "dtw_table.png")
        plotting.plot_nearest_dtw(report.test_ids, report.nearest_dtw, out_dir / "nearest_dtw.png")
    _timed(f"evaluate: min_dtw={report.min_dtw:.6g} mmd={report.mmd:.6g}", t0)
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate / resample

def _validate_one(args) -> tuple[str, list[dict]]:
    cfg, path = args
    skel, m = _read(path)
    return path.stem, [d.to_dict() for d in validate_plausibility(skel, m, cfg.thresholds())]


def cmd_validate(cfg: PipelineConfig, args) -> int:
    files = _bvh_files(Path(args.input))
    out_dir = _out_dir(cfg)
    results = sorted(_pool_map(_validate_one, [(cfg, p) for p in files], args.jobs))
    _dump_json(out_dir / "validation.json", {mid: diags for mid, diags in results})
    _write_csv(out_dir / "validation.csv", ["motion_id", "type", "start_frame", "end_frame", "magnitude"],
               ([mid, d["type"], d["start_frame"], d["end_frame"], d["magnitude"]] for mid, diags in results for d in diags))
    for mid, diags in results:
        log.info("validate %s: %d flag(s)", mid, len(diags))
    return EXIT_OK


def cmd_resample(cfg: PipelineConfig, args) -> int:
    files = _bvh_files(Path(args.input))
    out_dir = _out_dir(cfg)
    hz = args.hz if args.hz is not None else cfg["resample_hz"]
    for p in files:
        skel, m = _read(p)
        try:
            out = resample(m, hz, skel.rotation_mask())
        except ValueError as e:
            raise FatalError(f"{p}: {e}") from None
        save_bvh(out_dir / p.name, skel, out)
        log.info("resample %s: %d -> %d frames", p.name, m.n_frames, out.n_frames)
    return EXIT_OK


# ---------------------------------------------------------------------------

COMMANDS = {
    "augment": cmd_augment,
    "correct": cmd_correct,
    "debias": cmd_debias,
    "evaluate": cmd_evaluate,
    "validate": cmd_validate,
    "resample": cmd_resample,
}


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="pipeline config (JSON)")
    p.add_argument("--seed", type=int, default=d, help="master seed (overrides config)")
    p.add_argument("--out", default=d, help="output directory (overrides config)")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS if suppress else 1, help="worker processes")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motionaug", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("augment", help="IK / latent synthesis from the train split")
    _global_flags(p, True)
    p = sub.add_parser("correct", help="PD-residual tracking of every motion in a directory")
    p.add_argument("--input", required=True)
    _global_flags(p, True)
    p = sub.add_parser("debias", help="fit a framewise debiasing map and apply it")
    p.add_argument("--pairs", required=True, help="directory with biased/ and unbiased/ subdirectories")
    p.add_argument("--input", required=True)
    _global_flags(p, True)
    p = sub.add_parser("evaluate", help="minimum DTW and MMD between two motion sets")
    p.add_argument("--test", required=True)
    p.add_argument("--candidates", required=True)
    _global_flags(p, True)
    p = sub.add_parser("validate", help="physical plausibility flags")
    p.add_argument("--input", required=True)
    _global_flags(p, True)
    p = sub.add_parser("resample", help="resample motions to a new frame rate")
    p.add_argument("--input", required=True)
    p.add_argument("--hz", type=float, default=None)
    _global_flags(p, True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", force=True)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except (FatalError, BvhError, ValueError, OSError, KeyError) as e:
        log.error("%s", e)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
