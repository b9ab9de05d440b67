"""End-to-end tracking runs with optional attacks, plus the accuracy metrics.

One-pass evaluation: the tracker is initialized on the first frame's ground
truth and never corrected afterwards; each later frame is cropped at the
previous prediction. Attacks replace the cropped search region according to
their schedule. Precision is the fraction of frames whose center error
stays under a pixel threshold (20 px headline); success AUC averages the
IoU success rate over 101 uniform thresholds. Attack efficacy is reported
as baseline-minus-attacked drops.
"""

import csv
import logging
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import tracker as trk
from .attack_op import (AttackStats, OpAttackConfig, ablation_variant,
                        attack_frame, skipped_stats)
from .blur import norm_blur
from .flow import estimate_flow
from .images import Frame, read_image, write_image

log = logging.getLogger("advblur.bench")

ATTACK_KINDS = ("none", "norm-blur", "op-aba", "op-aba-wo-W", "op-aba-wo-A",
                "os-aba", "transfer")


@dataclass(frozen=True)
class Sequence:
    frames: list
    gt_boxes: list
    gt_flow: list | None
    name: str
    seed: int | None = None

    def validate(self):
        if len(self.frames) < 10:
            raise ValueError(f"sequence {self.name} has under 10 frames")
        if len(self.gt_boxes) != len(self.frames):
            raise ValueError(f"sequence {self.name}: box/frame count mismatch")
        if self.gt_flow is not None and len(self.gt_flow) != len(self.frames) - 1:
            raise ValueError(f"sequence {self.name}: flow count mismatch")
        h, w = self.frames[0].height, self.frames[0].width
        for b in self.gt_boxes:
            if not (0 <= b.cx <= w - 1 and 0 <= b.cy <= h - 1):
                raise ValueError(f"sequence {self.name}: gt box outside frame")
        return self


@dataclass
class Trajectory:
    boxes: list
    attack: str
    stats: list  # AttackStats per frame
    name: str

    def attacked_frames(self):
        return [i for i, s in enumerate(self.stats) if s.attacked]


@dataclass(frozen=True)
class MetricsReport:
    precision20: float
    success_auc: float
    ms_per_frame: float = 0.0
    prec_drop: float | None = None
    succ_drop: float | None = None
    baseline: str | None = None
    sequences: tuple = ()


def _scheduled(attack_kind, t, every):
    if attack_kind == "none" or t < 1:
        return False
    if attack_kind == "os-aba":
        return True
    return (t - 1) % every == 0


def _paste_region(frame, region, tf):
    """Composite a blurred region back into a frame copy (integer-aligned)."""
    data = frame.data.copy()
    h, w = data.shape[1:]
    top, left = int(round(tf.top)), int(round(tf.left))
    y0, x0 = max(0, top), max(0, left)
    y1, x1 = min(h, top + tf.side), min(w, left + tf.side)
    if y1 > y0 and x1 > x0:
        data[:, y0:y1, x0:x1] = region.data[:, y0 - top : y1 - top,
                                            x0 - left : x1 - left]
    return Frame(data)


def run_tracking(tracker_kind, sequence, attack_kind, op_config=None, net=None,
                 timing=False):
    """Track one sequence, optionally attacking the search regions.

    White-box attacks are guided by the running tracker's own model; the
    transfer mode crafts the blur against an intensity-feature model and
    feeds the result to the (different) victim.
    """
    if attack_kind not in ATTACK_KINDS:
        raise ValueError(f"unknown attack kind {attack_kind!r}")
    op_config = (op_config or OpAttackConfig()).validate()
    if attack_kind == "op-aba-wo-W":
        op_config = ablation_variant(op_config, "freeze_ratios")
    elif attack_kind == "op-aba-wo-A":
        op_config = ablation_variant(op_config, "freeze_accum")
    if attack_kind == "os-aba" and net is None:
        raise ValueError("os-aba needs a trained predictor net")

    frames = sequence.frames
    model = trk.init(frames[0], sequence.gt_boxes[0], tracker_kind)
    guidance = model
    if attack_kind == "transfer":
        guidance = trk.init(frames[0], sequence.gt_boxes[0], "intensity")

    boxes = [sequence.gt_boxes[0]]
    stats = [skipped_stats()]
    chained = None
    for t in range(1, len(frames)):
        prev_box = boxes[-1]
        cur = frames[t]
        prev = frames[t - 1]
        if op_config.chain_prev_blurred and chained is not None:
            prev = chained
        region, tf = trk.crop_search_region(cur, prev_box, op_config.context)
        fstats = skipped_stats()
        if _scheduled(attack_kind, t, op_config.attack_every):
            t0 = time.perf_counter()
            if attack_kind == "norm-blur":
                region_prev = trk.crop_at(prev, tf)
                flowfield = estimate_flow(region_prev, region, op_config.flow)
                region = norm_blur(region, region_prev, flowfield,
                                   op_config.n_instants)
                fstats = AttackStats([], [], 0.0)
            elif attack_kind == "os-aba":
                from .attack_os import os_attack_frame

                region, fstats = os_attack_frame(net, guidance, cur, prev,
                                                 prev_box, op_config.context,
                                                 op_config.flow)
            else:
                region, fstats = attack_frame(guidance, cur, prev, prev_box,
                                              op_config)
            fstats.elapsed_ms = (time.perf_counter() - t0) * 1000.0 if timing else 0.0
            if op_config.chain_prev_blurred:
                chained = _paste_region(cur, region, tf)
        elif op_config.chain_prev_blurred:
            chained = None
        resp = trk.respond(model, region, tf)
        boxes.append(trk.locate(resp))
        stats.append(fstats)
    return Trajectory(boxes, attack_kind, stats, sequence.name)


# ---------------------------------------------------------------------------
# metrics


def center_errors(boxes, gt_boxes):
    if len(boxes) != len(gt_boxes):
        raise ValueError("trajectory/ground-truth length mismatch")
    return np.array([np.hypot(b.cx - g.cx, b.cy - g.cy)
                     for b, g in zip(boxes, gt_boxes)])


def ious(boxes, gt_boxes):
    if len(boxes) != len(gt_boxes):
        raise ValueError("trajectory/ground-truth length mismatch")
    return np.array([trk.iou(b, g) for b, g in zip(boxes, gt_boxes)])


def precision(trajectory, gt_boxes, threshold_px=20.0):
    boxes = trajectory.boxes if isinstance(trajectory, Trajectory) else trajectory
    cle = center_errors(boxes, gt_boxes)
    return float((cle <= threshold_px).mean())


def success_auc(trajectory, gt_boxes):
    boxes = trajectory.boxes if isinstance(trajectory, Trajectory) else trajectory
    overlap = ious(boxes, gt_boxes)
    taus = np.linspace(0.0, 1.0, 101)
    return float(np.mean([(overlap > tau).mean() for tau in taus]))


def measure(trajectory, gt_boxes, sequences=()):
    atk = trajectory.attacked_frames()
    ms = float(np.mean([trajectory.stats[i].elapsed_ms for i in atk])) if atk else 0.0
    return MetricsReport(precision(trajectory, gt_boxes),
                         success_auc(trajectory, gt_boxes),
                         ms_per_frame=ms, sequences=tuple(sequences))


def report_drops(baseline, attacked):
    """Drops are baseline minus attacked (may be negative)."""
    if baseline.sequences != attacked.sequences:
        raise ValueError("reports cover different sequence sets")
    return replace(attacked,
                   prec_drop=baseline.precision20 - attacked.precision20,
                   succ_drop=baseline.success_auc - attacked.success_auc,
                   baseline="none")


# ---------------------------------------------------------------------------
# disk sequences


def load_sequence(directory):
    """Frames 000001.png... plus groundtruth.txt of x,y,w,h lines (top-left)."""
    gt_path = os.path.join(directory, "groundtruth.txt")
    if not os.path.isfile(gt_path):
        raise FileNotFoundError(f"missing {gt_path}")
    boxes = []
    with open(gt_path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            try:
                x, y, w, h = (float(p) for p in parts)
            except ValueError as exc:
                raise ValueError(f"{gt_path}:{ln}: unparsable box {line!r}") from exc
            boxes.append(trk.BBox.from_topleft(x, y, w, h))
    frames = []
    for i in range(1, len(boxes) + 1):
        path = os.path.join(directory, f"{i:06d}.png")
        if not os.path.isfile(path):
            for ext in (".ppm", ".pgm"):
                alt = os.path.join(directory, f"{i:06d}{ext}")
                if os.path.isfile(alt):
                    path = alt
                    break
            else:
                raise FileNotFoundError(
                    f"{directory}: frame {i:06d} missing but groundtruth.txt "
                    f"has {len(boxes)} lines")
        frames.append(read_image(path))
    extra = os.path.join(directory, f"{len(boxes) + 1:06d}.png")
    if os.path.isfile(extra):
        raise ValueError(
            f"{directory}: more frames than the {len(boxes)} lines in groundtruth.txt")
    name = os.path.basename(os.path.normpath(directory))
    return Sequence(frames, boxes, None, name).validate()


def write_sequence(directory, sequence):
    os.makedirs(directory, exist_ok=True)
    for i, frame in enumerate(sequence.frames, 1):
        write_image(os.path.join(directory, f"{i:06d}.png"), frame)
    with open(os.path.join(directory, "groundtruth.txt"), "w") as fh:
        for b in sequence.gt_boxes:
            fh.write(f"{b.cx - (b.w - 1) / 2:.3f},{b.cy - (b.h - 1) / 2:.3f},"
                     f"{b.w:.3f},{b.h:.3f}\n")


# ---------------------------------------------------------------------------
# suite orchestration


def evaluate_sequence(sequence, attacks, tracker_kind="intensity",
                      op_config=None, net=None, timing=False):
    """Run the requested attack kinds on one sequence.

    Returns {attack: (MetricsReport, per-frame rows, attack stat rows)} with
    drops filled in against the clean run.
    """
    op_config = op_config or OpAttackConfig()
    wanted = list(attacks)
    if "none" not in wanted:
        wanted.insert(0, "none")
    results = {}
    for kind in wanted:
        victim = "gradient-magnitude" if kind == "transfer" else tracker_kind
        traj = run_tracking(victim, sequence, kind, op_config, net, timing)
        gt = sequence.gt_boxes
        if kind == "transfer" and "transfer-baseline" not in results:
            base_traj = run_tracking(victim, sequence, "none", op_config)
            results["transfer-baseline"] = (measure(base_traj, gt,
                                                    (sequence.name,)), [], [])
        report = measure(traj, gt, (sequence.name,))
        cle = center_errors(traj.boxes, gt)
        overlap = ious(traj.boxes, gt)
        frame_rows = [(sequence.name, kind, i, float(cle[i]), float(overlap[i]))
                      for i in range(len(gt))]
        stat_rows = []
        for i, s in enumerate(traj.stats):
            for it, (loss, peak) in enumerate(zip(s.losses, s.peaks)):
                stat_rows.append((sequence.name, i, it, loss, peak[0], peak[1]))
        results[kind] = (report, frame_rows, stat_rows)
    base = results[wanted[0]][0]
    for kind in wanted:
        if kind == "none":
            continue
        ref = results["transfer-baseline"][0] if kind == "transfer" else base
        rep, fr, sr = results[kind]
        results[kind] = (report_drops(ref, rep), fr, sr)
    return results


def _csv_float(x):
    return f"{x:.6f}"


def write_metrics_csv(path, rows):
    """rows: (sequence, attack, precision20, success_auc, prec_drop,
    succ_drop, ms_per_frame), drops blank for baselines."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["sequence", "attack", "precision20", "success_auc",
                      "prec_drop", "succ_drop", "ms_per_frame"])
        for seq, attack, rep in rows:
            out.writerow([
                seq, attack, _csv_float(rep.precision20),
                _csv_float(rep.success_auc),
                "" if rep.prec_drop is None else _csv_float(rep.prec_drop),
                "" if rep.succ_drop is None else _csv_float(rep.succ_drop),
                _csv_float(rep.ms_per_frame),
            ])


def write_frames_csv(path, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["sequence", "attack", "frame", "cle", "iou"])
        for seq, attack, i, cle, ov in rows:
            out.writerow([seq, attack, i, _csv_float(cle), _csv_float(ov)])
