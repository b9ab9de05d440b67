"""Dense optical flow between two frames (classical iterative estimator).

Stands in for a learned flow network: the attacks treat flow as a fixed
input, so any reasonable dense estimate works. Gradients are never
propagated into the estimate. Flow is the displacement of the content at
each pixel from the previous frame toward the current one.
"""

from dataclasses import dataclass

import numpy as np

from .images import FlowField


class FlowUnavailableError(LookupError):
    """No ground-truth flow exists for the requested frame."""


@dataclass(frozen=True)
class FlowConfig:
    """smoothness_alpha is calibrated against 8-bit intensity units (the
    estimator works on 0-255 luma internally)."""

    smoothness_alpha: float = 10.0
    iterations: int = 100
    pyramid_levels: int = 1

    def validate(self):
        if self.smoothness_alpha <= 0 or self.iterations <= 0 or self.pyramid_levels < 1:
            raise ValueError("flow config values must be positive")
        return self


def _neighbor_avg(u):
    # classic weighted 8-neighborhood with replicated borders
    p = np.pad(u, 1, mode="edge")
    return ((p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]) / 6.0
            + (p[:-2, :-2] + p[:-2, 2:] + p[2:, :-2] + p[2:, 2:]) / 12.0)


def _derivatives(a, b):
    avg = 0.5 * (a + b)
    p = np.pad(avg, 1, mode="edge")
    ix = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    iy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return ix, iy, b - a


def _hs_iterate(a, b, u, v, alpha, iterations):
    ix, iy, it = _derivatives(a, b)
    denom = alpha * alpha + ix * ix + iy * iy
    for _ in range(iterations):
        ubar = _neighbor_avg(u)
        vbar = _neighbor_avg(v)
        t = (ix * ubar + iy * vbar + it) / denom
        u = ubar - ix * t
        v = vbar - iy * t
    return u, v


def _downsample(a):
    h, w = a.shape
    h2, w2 = h // 2, w // 2
    return a[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def _upsample(a, shape):
    from .autodiff import resize_bilinear_arrays

    return resize_bilinear_arrays(a, shape)


def _warp_plane(a, dx, dy):
    from .autodiff import warp_arrays

    return warp_arrays(a, dx, dy)


def estimate_flow(prev, cur, config=FlowConfig()):
    """Iterative smoothness-regularized flow, optionally coarse-to-fine.

    Deterministic for fixed inputs and config. Color inputs are reduced to
    luma internally.
    """
    config.validate()
    if prev.data.shape != cur.data.shape:
        raise ValueError("frames differ in shape")
    h, w = prev.height, prev.width
    if h < 8 or w < 8:
        raise ValueError(f"frames smaller than 8x8: {h}x{w}")
    max_levels = int(np.floor(np.log2(min(h, w) / 8.0))) if min(h, w) >= 8 else 0
    if config.pyramid_levels > max(1, max_levels):
        raise ValueError(
            f"pyramid_levels={config.pyramid_levels} too deep for {h}x{w}")

    a = prev.luma() * 255.0
    b = cur.luma() * 255.0

    pyr_a, pyr_b = [a], [b]
    for _ in range(config.pyramid_levels - 1):
        pyr_a.append(_downsample(pyr_a[-1]))
        pyr_b.append(_downsample(pyr_b[-1]))

    u = np.zeros_like(pyr_a[-1])
    v = np.zeros_like(pyr_a[-1])
    for level in range(config.pyramid_levels - 1, -1, -1):
        la, lb = pyr_a[level], pyr_b[level]
        if u.shape != la.shape:
            u = _upsample(u, la.shape) * 2.0
            v = _upsample(v, la.shape) * 2.0
        if np.abs(u).max() > 1e-12 or np.abs(v).max() > 1e-12:
            # refine incrementally against the back-warped current frame
            lb_w = _warp_plane(lb, u, v)
            du, dv = _hs_iterate(la, lb_w, np.zeros_like(u), np.zeros_like(v),
                                 config.smoothness_alpha, config.iterations)
            u, v = u + du, v + dv
        else:
            u, v = _hs_iterate(la, lb, u, v,
                               config.smoothness_alpha, config.iterations)
    return FlowField(u, v)


def ground_truth_flow(sequence, frame_index):
    """Exact commanded flow for the pair (frame_index-1 -> frame_index)."""
    if frame_index < 1:
        raise FlowUnavailableError("frame 0 has no predecessor")
    gt = getattr(sequence, "gt_flow", None)
    if not gt:
        raise FlowUnavailableError(
            f"sequence {getattr(sequence, 'name', '?')} carries no ground-truth flow")
    if frame_index > len(gt):
        raise FlowUnavailableError(f"frame {frame_index} beyond sequence")
    return gt[frame_index - 1]
