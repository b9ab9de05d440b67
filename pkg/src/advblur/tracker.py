"""Differentiable template tracker over search regions.

Normalized cross-correlation of a fixed template against a square search
region cropped around the previous prediction. The response map's argmax
locates the object; box size is fixed at the size given at init. Two
feature spaces (plain intensity and gradient magnitude) give a white-box /
transfer pair. The response is differentiable w.r.t. the region pixels,
which is the gradient path the attacks use.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .images import LUMA, Frame


class DegenerateTemplateError(ValueError):
    """Template patch has (near-)zero variance; NCC is undefined."""


FEATURE_KINDS = ("intensity", "gradient-magnitude")


@dataclass(frozen=True)
class BBox:
    """Center/size box in frame coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0 or not np.isfinite([self.cx, self.cy]).all():
            raise ValueError(f"bad bbox {self}")

    @classmethod
    def from_topleft(cls, x, y, w, h):
        return cls(x + (w - 1) / 2.0, y + (h - 1) / 2.0, w, h)

    def corners(self):
        """(x0, y0, x1, y1) inclusive-exclusive extent."""
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)


def iou(a, b):
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class RegionTransform:
    """Maps region pixel coords to frame coords: frame = (left, top) + region."""

    left: float
    top: float
    frame_h: int
    frame_w: int
    side: int


@dataclass(frozen=True)
class TrackerModel:
    template: np.ndarray  # feature-space patch (th, tw)
    feature_kind: str
    bbox_w: float
    bbox_h: float


@dataclass(frozen=True)
class ResponseMap:
    """NCC scores over valid template placements.

    (origin_x, origin_y) are the frame coordinates of the object center when
    the template sits at response cell (0, 0); each cell step is one pixel.
    """

    values: np.ndarray
    origin_x: float
    origin_y: float
    frame_h: int
    frame_w: int
    bbox_w: float
    bbox_h: float

    def argmax(self):
        """Row-major tie-break."""
        idx = int(np.argmax(self.values))
        return np.unravel_index(idx, self.values.shape)


def _feature_weights(channels):
    return LUMA if channels == 3 else np.ones(1)


def features_array(data, kind):
    plane = np.tensordot(_feature_weights(data.shape[0]), data, axes=(0, 0))
    if kind == "gradient-magnitude":
        plane = ad.grad_magnitude_arrays(plane)[0]
    elif kind != "intensity":
        raise ValueError(f"unknown feature kind {kind!r}")
    return plane


def features_node(var, kind):
    plane = ad.channel_dot(var, _feature_weights(var.value.shape[0]))
    if kind == "gradient-magnitude":
        plane = ad.grad_magnitude(plane)
    elif kind != "intensity":
        raise ValueError(f"unknown feature kind {kind!r}")
    return plane


def _crop(data, top, left, rows, cols):
    ys, xs = np.meshgrid(top + np.arange(rows, dtype=np.float64),
                         left + np.arange(cols, dtype=np.float64), indexing="ij")
    return ad.bilinear_gather(data, ys, xs)


def init(frame, bbox, feature_kind="intensity"):
    """Extract the template patch at the given box (feature space applied)."""
    x0, y0, x1, y1 = bbox.corners()
    if x0 < -0.5 or y0 < -0.5 or x1 > frame.width - 0.5 or y1 > frame.height - 0.5:
        raise ValueError(f"bbox {bbox} not inside {frame.width}x{frame.height} frame")
    if bbox.w * bbox.h < 16:
        raise ValueError(f"bbox area below 16 px^2: {bbox}")
    th = int(round(bbox.h))
    tw = int(round(bbox.w))
    patch = _crop(frame.data, bbox.cy - (th - 1) / 2.0, bbox.cx - (tw - 1) / 2.0,
                  th, tw)
    feats = features_array(patch, feature_kind)
    if feats.var() <= 1e-8:
        raise DegenerateTemplateError(
            f"template variance {feats.var():.2e} too low for NCC")
    return TrackerModel(feats, feature_kind, float(bbox.w), float(bbox.h))


def crop_search_region(frame, bbox, context=2.5):
    """Square crop of side round(context * max(w, h)) centered on the box.

    Sub-pixel centers are honored by bilinear sampling; samples beyond the
    frame replicate the border. The returned transform maps region coords
    back to frame coords exactly.
    """
    if context < 1.5:
        raise ValueError(f"context {context} below 1.5")
    side = int(np.floor(context * max(bbox.w, bbox.h) + 0.5))
    tf = RegionTransform(left=bbox.cx - (side - 1) / 2.0,
                         top=bbox.cy - (side - 1) / 2.0,
                         frame_h=frame.height, frame_w=frame.width, side=side)
    return crop_at(frame, tf), tf


def crop_at(frame, tf):
    """Crop `frame` at a previously computed transform (same location)."""
    return Frame(_crop(frame.data, tf.top, tf.left, tf.side, tf.side))


def respond(model, region, tf=None):
    """Dense NCC of the template over the region (valid placements).

    Without a transform the map is anchored in region coordinates (the
    region plays the role of the whole frame).
    """
    feats = features_array(region.data, model.feature_kind)
    th, tw = model.template.shape
    if feats.shape[0] < th or feats.shape[1] < tw:
        raise ValueError(f"region {feats.shape} smaller than template {(th, tw)}")
    values = ad.ncc_arrays(feats, model.template)[0]
    if tf is None:
        ox, oy = (tw - 1) / 2.0, (th - 1) / 2.0
        fh, fw = region.height, region.width
    else:
        ox, oy = tf.left + (tw - 1) / 2.0, tf.top + (th - 1) / 2.0
        fh, fw = tf.frame_h, tf.frame_w
    return ResponseMap(values, ox, oy, fh, fw, model.bbox_w, model.bbox_h)


def respond_node(model, region_var):
    """Taped response (values only), differentiable w.r.t. region pixels."""
    feats = features_node(region_var, model.feature_kind)
    return ad.ncc(feats, model.template)


def locate(resp):
    """Argmax of the response mapped to a frame-coordinate box."""
    r, c = resp.argmax()
    cx = min(max(resp.origin_x + c, 0.0), resp.frame_w - 1.0)
    cy = min(max(resp.origin_y + r, 0.0), resp.frame_h - 1.0)
    return BBox(cx, cy, resp.bbox_w, resp.bbox_h)


def respond_backward(model, region, grad_map):
    """Analytic gradient of the response w.r.t. the region pixels."""
    leaf = ad.Var(region.data, requires_grad=True)
    node = respond_node(model, leaf)
    if np.asarray(grad_map).shape != node.value.shape:
        raise ValueError(
            f"grad map {np.asarray(grad_map).shape} vs response {node.value.shape}")
    ad.run_backward(node, grad_map)
    return leaf.grad if leaf.grad is not None else np.zeros_like(region.data)
