"""Command-line workflows: simulate, track, train, eval, comm-cost, ablate."""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import io as cio
from . import metrics, sim, training
from .association import LifecycleConfig
from .covnet import CovNetParams
from .pipeline import (ConstantCovariance, CoopTracker, FramePacket, LearnedCovariance,
                       run_sequence)
from .sim import Detection, SimFrame

DETECTIONS_FILE = "detections.jsonl"
TENSORS_FILE = "tensors.bin"
GT_FILE = "gt.jsonl"
TRACKS_FILE = "tracks.jsonl"
COMM_FILE = "comm.json"


# --- shared glue ---------------------------------------------------------------


def build_scenario(cfg: cio.RunConfig) -> sim.Scenario:
    sc = cfg.scenario
    return sim.preset_v2v_mini(seed=cfg.seed, duration=sc.duration,
                               noise_multiplier=sc.noise_multiplier,
                               miss_multiplier=sc.miss_multiplier,
                               fp_multiplier=sc.fp_multiplier)


def write_sim_output(frames, out_dir: str, app_shape) -> None:
    """Persist generated frames as gt / detection logs plus a tensor store."""
    os.makedirs(out_dir, exist_ok=True)
    gt_records = []
    det_records = []
    with cio.TensorStore.create(os.path.join(out_dir, TENSORS_FILE), app_shape) as store:
        for frame in frames:
            for obj_id, box in frame.gt:
                gt_records.append(cio.gt_record(frame.timestep, obj_id, box))
            for cav_id in sorted(frame.detections):
                pose = frame.poses[cav_id]
                for det in frame.detections[cav_id]:
                    idx = store.append(det.appearance)
                    det_records.append(cio.detection_record(
                        frame.timestep, cav_id, det.box, det.confidence, pose,
                        app_index=idx))
    cio.write_log(os.path.join(out_dir, GT_FILE), cio.FORMAT_GROUNDTRUTH, gt_records)
    cio.write_log(os.path.join(out_dir, DETECTIONS_FILE), cio.FORMAT_DETECTIONS,
                  det_records)


def load_sim_frames(data_dir: str):
    """Rebuild per-frame ground truth + detections from a simulate output dir."""
    _, gt_records = cio.read_log(os.path.join(data_dir, GT_FILE), cio.FORMAT_GROUNDTRUTH)
    _, det_records = cio.read_log(os.path.join(data_dir, DETECTIONS_FILE),
                                  cio.FORMAT_DETECTIONS)
    tensor_path = os.path.join(data_dir, TENSORS_FILE)
    store = cio.TensorStore.open(tensor_path) if os.path.exists(tensor_path) else None
    try:
        gt_by_t = {}
        for rec in gt_records:
            gt_by_t.setdefault(rec["t"], []).append((rec["obj"], cio.record_box(rec)))
        dets_by_t = {}
        poses_by_t = {}
        for rec in det_records:
            app = None
            if rec.get("app") is not None and store is not None:
                app = store.read(rec["app"])
            det = Detection(box=cio.record_box(rec), confidence=rec["conf"],
                            appearance=app)
            dets_by_t.setdefault(rec["t"], {}).setdefault(rec["cav"], []).append(det)
            poses_by_t.setdefault(rec["t"], {})[rec["cav"]] = cio.record_pose(rec)
        timesteps = sorted(set(gt_by_t) | set(dets_by_t))
        frames = []
        for t in timesteps:
            frames.append(SimFrame(timestep=t, gt=tuple(gt_by_t.get(t, [])),
                                   detections=dets_by_t.get(t, {}),
                                   poses=poses_by_t.get(t, {})))
        return frames, det_records
    finally:
        if store is not None:
            store.close()


def frames_to_packets(frames, cav_filter=None):
    out = []
    for frame in frames:
        packets = []
        for cav_id in sorted(frame.detections):
            if cav_filter is not None and cav_id not in cav_filter:
                continue
            packets.append(FramePacket(timestep=frame.timestep, cav_id=cav_id,
                                       pose=frame.poses[cav_id],
                                       detections=tuple(frame.detections[cav_id])))
        out.append(packets)
    return out


def tracker_from_config(cfg: cio.RunConfig, provider) -> CoopTracker:
    tr = cfg.tracker
    return CoopTracker(cov_provider=provider,
                       q_velocity=tr.process_noise_velocity,
                       assoc_iou_threshold=tr.assoc_iou_threshold,
                       lifecycle=LifecycleConfig(min_hits=tr.min_hits,
                                                 max_age=tr.max_age,
                                                 score_decay=tr.score_decay))


def run_tracking(cfg: cio.RunConfig, frames, checkpoint_path=None, cav_filter=None):
    """Track a loaded sequence; returns (per-frame reports, comm bytes list)."""
    if checkpoint_path:
        ckpt = cio.load_checkpoint(checkpoint_path, expect_config=cfg)
        provider = LearnedCovariance(ckpt.params_by_cav,
                                     bounds=cfg.normalization_bounds)
    else:
        provider = ConstantCovariance()
    tracker = tracker_from_config(cfg, provider)
    packets = frames_to_packets(frames, cav_filter)
    if cav_filter is not None:
        # a solo or subset run hosts the fusion on its lowest-id vehicle, so
        # only the other selected vehicles pay communication cost
        local_ego = min(cav_filter) if cav_filter else 0
        reports, _ = run_sequence(packets, tracker)
        comm = [sum(len(p.detections) for p in pk if p.cav_id != local_ego)
                * metrics.SHARED_REALS * metrics.BYTES_PER_REAL for pk in packets]
        return reports, comm
    return run_sequence(packets, tracker)


def reports_to_records(reports):
    records = []
    for t, frame_reports in enumerate(reports):
        for rt in frame_reports:
            records.append(cio.track_record(t, rt.track_id, rt.box, rt.score))
    return records


# --- subcommands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = cio.load_config(args.config)
    frames = sim.generate(build_scenario(cfg))
    write_sim_output(frames, args.out, tuple(cfg.covnet.app_shape))
    cio.write_run_metadata(args.out, cfg, {"command": "simulate"})
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def cmd_track(args) -> int:
    cfg = cio.load_config(args.config)
    frames, det_records = load_sim_frames(args.detections)
    cav_filter = None
    if args.cavs:
        cav_filter = sorted({int(c) for c in args.cavs.split(",")})
    reports, comm = run_tracking(cfg, frames, args.checkpoint, cav_filter)
    os.makedirs(args.out, exist_ok=True)
    cio.write_log(os.path.join(args.out, TRACKS_FILE), cio.FORMAT_TRACKS,
                  reports_to_records(reports))
    reals = metrics.SHARED_REALS if args.checkpoint else metrics.BOX_REALS
    shared = sum(comm) // (metrics.SHARED_REALS * metrics.BYTES_PER_REAL)
    bytes_total = shared * reals * metrics.BYTES_PER_REAL
    comm_summary = {"num_shared_detections": int(shared),
                    "reals_per_detection": reals,
                    "bytes_total": int(bytes_total),
                    "mb_total": bytes_total / metrics.MEGABYTE,
                    "mb_per_frame": (bytes_total / metrics.MEGABYTE / len(frames)
                                     if frames else 0.0),
                    "ratio_vs_box_only": reals / metrics.BOX_REALS}
    with open(os.path.join(args.out, COMM_FILE), "w", encoding="utf-8") as fh:
        fh.write(cio.canonical_json(comm_summary) + "\n")
    cio.write_run_metadata(args.out, cfg, {"command": "track"})
    print(f"wrote {sum(len(r) for r in reports)} track records to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = cio.load_config(args.config)
    frames, _ = load_sim_frames(args.scenarios)
    if args.resume:
        ckpt = cio.load_checkpoint(args.resume, expect_config=cfg)
        params_by_cav = ckpt.params_by_cav
        adam = None
        if ckpt.adam_state is not None:
            adam = training.AdamState(step=ckpt.adam_state["step"],
                                      m=ckpt.adam_state["m"], v=ckpt.adam_state["v"])
        epochs_done = ckpt.epochs_done
    else:
        params_by_cav = training.init_params_for_run(cfg, np.random.default_rng(cfg.seed))
        adam = None
        epochs_done = 0
    result = training.train(frames, params_by_cav, cfg.train, cfg.tracker,
                            bounds=cfg.normalization_bounds, adam=adam,
                            epochs_done=epochs_done)
    ckpt = cio.Checkpoint(params_by_cav=result.params_by_cav, config=cfg,
                          seed=cfg.seed, epochs_done=result.epochs_done,
                          adam_state={"step": result.adam.step, "m": result.adam.m,
                                      "v": result.adam.v})
    cio.save_checkpoint(args.out, ckpt)
    curve_path = args.out + ".losscurve.jsonl"
    cio.write_log(curve_path, cio.FORMAT_LOSSCURVE, result.loss_curve)
    print(f"trained {result.epochs_done - epochs_done} epoch(s); "
          f"checkpoint at {args.out}")
    return 0


def cmd_eval(args) -> int:
    _, track_records = cio.read_log(os.path.join(args.tracks, TRACKS_FILE),
                                    cio.FORMAT_TRACKS)
    _, gt_records = cio.read_log(os.path.join(args.gt, GT_FILE),
                                 cio.FORMAT_GROUNDTRUTH)
    report = metrics.evaluate(metrics.track_frames_from_records(track_records),
                              metrics.gt_frames_from_records(gt_records))
    comm_mb = 0.0
    comm_path = os.path.join(args.tracks, COMM_FILE)
    if os.path.exists(comm_path):
        import json
        with open(comm_path, "r", encoding="utf-8") as fh:
            comm_mb = json.load(fh)["mb_total"]
    metrics.write_summary_csv(args.out, [("run", report, comm_mb)])
    base, ext = os.path.splitext(args.out)
    metrics.write_recall_table_csv(f"{base}_levels{ext or '.csv'}", report)
    print(f"AMOTA {report.amota:.2f}  sAMOTA {report.samota:.2f}  "
          f"AMOTP {report.amotp:.2f}  MOTA {report.mota:.2f}  "
          f"MT {report.mt:.2f}  ML {report.ml:.2f}  IDS {report.ids}")
    return 0


def cmd_comm_cost(args) -> int:
    _, det_records = cio.read_log(os.path.join(args.detections, DETECTIONS_FILE),
                                  cio.FORMAT_DETECTIONS)
    cost = metrics.comm_cost_from_records(det_records)
    print(f"shared detections: {cost.num_shared_detections}")
    print(f"bytes total: {cost.bytes_total}")
    print(f"MB total: {cost.mb_total:.6f}")
    print(f"MB per frame: {cost.mb_per_frame:.8f}")
    print(f"payload ratio vs box-only: {cost.ratio_vs_box_only:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = cio.load_config(args.config)
    work = args.workdir or (os.path.splitext(args.out)[0] + "_work")
    os.makedirs(work, exist_ok=True)

    train_cfg = cfg
    eval_cfg = dataclasses.replace(cfg, seed=cfg.seed + 1)
    train_frames = sim.generate(build_scenario(train_cfg))
    eval_frames = sim.generate(build_scenario(eval_cfg))
    gt_frames = {f.timestep: list(f.gt) for f in eval_frames}

    variants = [("constant", None),
                ("appearance_only", {"use_appearance": True, "use_positional": False}),
                ("positional_only", {"use_appearance": False, "use_positional": True}),
                ("both", {"use_appearance": True, "use_positional": True})]
    rows = []
    for label, net_flags in variants:
        if net_flags is None:
            run_cfg = cfg
            provider = ConstantCovariance()
            reals = metrics.BOX_REALS
        else:
            run_cfg = dataclasses.replace(
                cfg, covnet=dataclasses.replace(cfg.covnet, **net_flags))
            params = training.init_params_for_run(run_cfg,
                                                  np.random.default_rng(run_cfg.seed))
            result = training.train(train_frames, params, run_cfg.train,
                                    run_cfg.tracker, bounds=run_cfg.normalization_bounds)
            provider = LearnedCovariance(result.params_by_cav,
                                         bounds=run_cfg.normalization_bounds)
            reals = metrics.SHARED_REALS
        tracker = tracker_from_config(run_cfg, provider)
        packets = frames_to_packets(eval_frames)
        reports, _ = run_sequence(packets, tracker)
        track_frames = {}
        for t, frame_reports in enumerate(reports):
            track_frames[t] = [(rt.track_id, rt.box, rt.score) for rt in frame_reports]
        report = metrics.evaluate(track_frames, gt_frames,
                                  iou_threshold=run_cfg.eval_iou_threshold)
        shared = sum(len(p.detections) for pk in packets for p in pk if p.cav_id != 0)
        cost_mb = shared * reals * metrics.BYTES_PER_REAL / metrics.MEGABYTE
        rows.append((label, report, cost_mb))
    metrics.write_summary_csv(args.out, rows)
    print(f"wrote {len(rows)} ablation rows to {args.out}")
    return 0


# --- argument parsing -----------------------------------------------------------


def _config_keys_help() -> str:
    lines = ["configuration file keys (JSON; every key optional, defaults shown):"]

    def walk(cls, prefix):
        for f in dataclasses.fields(cls):
            name = f"{prefix}{f.name}"
            if f.name in cio._SECTION_TYPES:
                walk(cio._SECTION_TYPES[f.name], name + ".")
                continue
            if f.default is not dataclasses.MISSING:
                default = f.default
            elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
                default = f.default_factory()  # type: ignore[misc]
            else:
                default = "?"
            if f.name == "normalization_bounds":
                default = "18 (min,max) pairs; see README"
            lines.append(f"  {name} (default: {default})")

    walk(cio.RunConfig, "")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cooptrack",
        description="Cooperative multi-vehicle 3D multi-object tracking.",
        epilog=_config_keys_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a scenario and detection logs")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", help="run the tracker over a detection log")
    p.add_argument("--config", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--checkpoint", default=None,
                   help="trained covariance network; omit for constant covariance")
    p.add_argument("--cavs", default=None,
                   help="comma-separated vehicle ids to use (default: all)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("train", help="train the covariance networks")
    p.add_argument("--config", required=True)
    p.add_argument("--scenarios", required=True,
                   help="directory produced by `simulate` (needs ground truth)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a track log against ground truth")
    p.add_argument("--tracks", required=True, help="directory with tracks.jsonl")
    p.add_argument("--gt", required=True, help="directory with gt.jsonl")
    p.add_argument("--out", required=True, help="summary CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("comm-cost", help="communication cost of a detection log")
    p.add_argument("--detections", required=True)
    p.set_defaults(func=cmd_comm_cost)

    p = sub.add_parser("ablate", help="run the four-variant ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="CSV path for the grid")
    p.add_argument("--workdir", default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (cio.ConfigError, cio.LogFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
