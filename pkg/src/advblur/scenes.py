"""Synthetic tracking scenes with exact ground-truth motion.

A value-noise background (optionally panning) with a distinctly textured
rectangular object moving along a commanded program. Both layers are
rendered at sub-pixel positions by bilinear shifting, and the commanded
per-frame displacements are recorded as exact ground-truth flow: object
pixels (mask taken in the earlier frame) carry the object motion, the rest
carries the background motion. Deterministic per seed.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import bilinear_gather
from .images import FlowField, Frame
from .tracker import BBox


@dataclass(frozen=True)
class MotionProgram:
    """Per-frame displacement program; max per-frame step is capped at 4 px.

    kinds: "none", "linear" (constant velocity), "ellipse" (constant-ish
    speed loop), "walk" (seeded random walk, reflected at the bounds).
    """

    kind: str = "none"
    velocity: tuple = (0.0, 0.0)  # linear
    radius: tuple = (8.0, 6.0)  # ellipse semi-axes
    step: float = 2.0  # ellipse/walk/burst speed, px per frame
    turn: float = 0.6  # walk/burst max heading change, radians per frame
    period: int = 5  # burst: one moving transition every `period` frames

    def displacements(self, n_frames, rng):
        """(n_frames-1, 2) array of (dx, dy) per frame transition."""
        if self.kind == "none":
            return np.zeros((n_frames - 1, 2))
        if self.kind == "linear":
            d = np.tile(np.asarray(self.velocity, dtype=np.float64), (n_frames - 1, 1))
        elif self.kind == "burst":
            # saccadic motion: still except for one jump per period
            heading = rng.uniform(0, 2 * np.pi)
            d = np.zeros((n_frames - 1, 2))
            for i in range(0, n_frames - 1, self.period):
                heading += rng.uniform(-self.turn, self.turn)
                d[i] = (self.step * np.cos(heading), self.step * np.sin(heading))
        elif self.kind == "ellipse":
            rx, ry = self.radius
            # angular rate chosen so the largest per-frame step is `step`
            omega = self.step / max(rx, ry)
            t = np.arange(n_frames, dtype=np.float64)
            phase = rng.uniform(0, 2 * np.pi)
            xs = rx * np.cos(omega * t + phase)
            ys = ry * np.sin(omega * t + phase)
            d = np.stack([np.diff(xs), np.diff(ys)], axis=1)
        elif self.kind == "walk":
            heading = rng.uniform(0, 2 * np.pi)
            out = []
            for _ in range(n_frames - 1):
                heading += rng.uniform(-self.turn, self.turn)
                out.append([self.step * np.cos(heading), self.step * np.sin(heading)])
            d = np.asarray(out)
        else:
            raise ValueError(f"unknown motion kind {self.kind!r}")
        if np.abs(d).max() > 4.0 + 1e-9:
            raise ValueError("per-frame step exceeds the 4 px cap")
        return d


@dataclass(frozen=True)
class SceneConfig:
    size: tuple = (96, 96)
    object_size: tuple = (13, 13)  # odd sizes keep the initial template exact
    n_frames: int = 40
    object_motion: MotionProgram = field(default_factory=lambda: MotionProgram("ellipse"))
    background_motion: MotionProgram = field(default_factory=MotionProgram)
    bg_octaves: int = 4
    bg_base_period: int = 24
    bg_contrast: float = 0.9
    obj_contrast: float = 1.0
    name: str = "scene"


def _fold(x, lo, hi):
    span = hi - lo
    y = np.mod(x - lo, 2 * span)
    return lo + np.where(y > span, 2 * span - y, y)


def value_noise(rng, shape, base_period, octaves, channels=3):
    """Sum of bilinearly upsampled random grids with halving amplitudes."""
    h, w = shape
    out = np.zeros((channels, h, w))
    amp = 1.0
    period = base_period
    for _ in range(octaves):
        gh = max(2, int(np.ceil(h / period)) + 1)
        gw = max(2, int(np.ceil(w / period)) + 1)
        grid = rng.random((channels, gh, gw))
        ys = np.linspace(0, gh - 1, h)
        xs = np.linspace(0, gw - 1, w)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        out += amp * bilinear_gather(grid, yy, xx)
        amp *= 0.5
        period = max(2, period // 2)
    out -= out.min()
    peak = out.max()
    if peak > 0:
        out /= peak
    return out


def _normalize_contrast(tex, contrast):
    mid = 0.5
    return np.clip(mid + (tex - tex.mean()) * contrast / max(tex.std() * 4, 1e-6), 0.02, 0.98)


def _shift_with_alpha(tex, fy, fx):
    """Bilinearly shift a texture by a positive sub-pixel offset onto a grid
    one pixel larger, returning the shifted texture and its coverage."""
    c, h, w = tex.shape
    out = np.zeros((c, h + 1, w + 1))
    a = np.zeros((h + 1, w + 1))
    w00, w01 = (1 - fy) * (1 - fx), (1 - fy) * fx
    w10, w11 = fy * (1 - fx), fy * fx
    out[:, : h, : w] += w00 * tex
    out[:, : h, 1 :] += w01 * tex
    out[:, 1 :, : w] += w10 * tex
    out[:, 1 :, 1 :] += w11 * tex
    a[: h, : w] += w00
    a[: h, 1 :] += w01
    a[1 :, : w] += w10
    a[1 :, 1 :] += w11
    safe = np.maximum(a, 1e-12)
    return out / safe, a


def _compose(bg_crop, obj_tex, cy, cx):
    """Render the object at a float center onto a background crop."""
    c, h, w = bg_crop.shape
    oh, ow = obj_tex.shape[1:]
    top = cy - (oh - 1) / 2.0
    left = cx - (ow - 1) / 2.0
    iy, ix = int(np.floor(top)), int(np.floor(left))
    fy, fx = top - iy, left - ix
    shifted, alpha = _shift_with_alpha(obj_tex, fy, fx)
    y0, x0 = iy, ix
    y1, x1 = iy + oh + 1, ix + ow + 1
    sy0, sx0 = max(0, -y0), max(0, -x0)
    y0, x0 = max(0, y0), max(0, x0)
    y1, x1 = min(h, y1), min(w, x1)
    frame = bg_crop.copy()
    sub_a = alpha[sy0 : sy0 + (y1 - y0), sx0 : sx0 + (x1 - x0)]
    sub_t = shifted[:, sy0 : sy0 + (y1 - y0), sx0 : sx0 + (x1 - x0)]
    frame[:, y0:y1, x0:x1] = (1 - sub_a) * frame[:, y0:y1, x0:x1] + sub_a * sub_t
    mask = np.zeros((h, w), dtype=bool)
    mask[y0:y1, x0:x1] = sub_a > 0.5
    return frame, mask


def generate_scene(config, seed):
    """Build a Sequence (frames, gt boxes, exact gt flow) from a config."""
    from .bench import Sequence

    rng = np.random.default_rng(seed)
    h, w = config.size
    oh, ow = config.object_size
    n = config.n_frames

    obj_d = config.object_motion.displacements(n, rng)
    bg_d = config.background_motion.displacements(n, rng)

    # start at an integer center so the first-frame template is exact
    start = np.array([w // 2, h // 2], dtype=np.float64)
    centers = np.concatenate([[np.array([0.0, 0.0])], np.cumsum(obj_d, axis=0)]) + start
    margin_x = ow / 2.0 + 2
    margin_y = oh / 2.0 + 2
    if config.object_motion.kind in ("walk", "burst"):
        # reflect wandering programs back into the frame; reflection never
        # grows a step, so the 4 px cap still holds
        centers[:, 0] = _fold(centers[:, 0], margin_x, w - 1 - margin_x)
        centers[:, 1] = _fold(centers[:, 1], margin_y, h - 1 - margin_y)
        obj_d = np.diff(centers, axis=0)
    if (centers[:, 0].min() < margin_x or centers[:, 0].max() > w - 1 - margin_x
            or centers[:, 1].min() < margin_y or centers[:, 1].max() > h - 1 - margin_y):
        raise ValueError(
            f"object leaves the frame under motion program {config.object_motion.kind}")

    bg_off = np.concatenate([[np.array([0.0, 0.0])], np.cumsum(bg_d, axis=0)])
    pad = int(np.ceil(np.abs(bg_off).max())) + 2
    canvas = value_noise(rng, (h + 2 * pad, w + 2 * pad),
                         config.bg_base_period, config.bg_octaves)
    canvas = _normalize_contrast(canvas, config.bg_contrast)
    obj_tex = value_noise(rng, (oh, ow), max(3, min(oh, ow) // 2), 3)
    obj_tex = _normalize_contrast(obj_tex, config.obj_contrast)

    frames, boxes, masks = [], [], []
    yg, xg = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    for t in range(n):
        # the background scrolls opposite to its commanded motion of content
        oy = pad - bg_off[t, 1]
        ox = pad - bg_off[t, 0]
        bg = bilinear_gather(canvas, yg + oy, xg + ox)
        frame, mask = _compose(bg, obj_tex, centers[t, 1], centers[t, 0])
        frames.append(Frame(np.clip(frame, 0.0, 1.0)))
        boxes.append(BBox(centers[t, 0], centers[t, 1], float(ow), float(oh)))
        masks.append(mask)

    flows = []
    for t in range(1, n):
        dx = np.full((h, w), bg_d[t - 1, 0])
        dy = np.full((h, w), bg_d[t - 1, 1])
        m = masks[t - 1]
        dx[m] = obj_d[t - 1, 0]
        dy[m] = obj_d[t - 1, 1]
        flows.append(FlowField(dx, dy))

    return Sequence(frames=frames, gt_boxes=boxes, gt_flow=flows,
                    name=config.name, seed=seed)
