"""Motion blur synthesis from two frames and a dense flow field.

The inter-frame flow is split into per-pixel sub-motions by a stack of
motion ratios (N-1 planes summing to one per pixel). Each of the N instant
images is the mean of the previous frame pulled forward by the cumulative
flow and the current frame pulled backward by the remaining flow. A second
stack of per-pixel accumulation weights (N planes, per-pixel convex)
averages the instants into the blurred frame. Uniform stacks reproduce the
plain averaged exposure; the stacks are the decision variables of the
attacks.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .images import Frame, FlowField

SUM_TOL = 1e-5


@dataclass(frozen=True)
class MotionRatios:
    """N-1 planes of per-pixel flow fractions, shape (n-1, height, width)."""

    planes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "planes", np.asarray(self.planes, dtype=np.float64))

    @property
    def n_minus_1(self):
        return self.planes.shape[0]

    def validate(self, tol=SUM_TOL):
        _check_stack(self.planes, "motion ratios", tol)
        return self


@dataclass(frozen=True)
class AccumWeights:
    """N planes of per-pixel accumulation weights, shape (n, height, width)."""

    planes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "planes", np.asarray(self.planes, dtype=np.float64))

    @property
    def n(self):
        return self.planes.shape[0]

    def validate(self, tol=SUM_TOL):
        _check_stack(self.planes, "accumulation weights", tol)
        return self


@dataclass(frozen=True)
class BlurParams:
    """The blur's decision variables for one frame pair."""

    ratios: MotionRatios
    accum: AccumWeights

    def __post_init__(self):
        if self.accum.n != self.ratios.n_minus_1 + 1:
            raise ValueError(
                f"accum has {self.accum.n} planes, ratios {self.ratios.n_minus_1}; "
                "expected n and n-1")
        if self.accum.planes.shape[1:] != self.ratios.planes.shape[1:]:
            raise ValueError("ratio and accumulation stacks differ spatially")

    @property
    def n_instants(self):
        return self.accum.n

    @property
    def spatial(self):
        return self.accum.planes.shape[1:]

    def validate(self, tol=SUM_TOL):
        self.ratios.validate(tol)
        self.accum.validate(tol)
        return self


def _check_stack(planes, what, tol):
    if planes.min() < -tol or planes.max() > 1.0 + tol:
        raise ValueError(f"{what} outside [0, 1]")
    sums = planes.sum(axis=0)
    err = np.abs(sums - 1.0).max()
    if err > tol:
        raise ValueError(f"{what} per-pixel sums off by {err:.2e} (> {tol})")


def uniform_params(n, height, width):
    """Uniform stacks: every ratio 1/(n-1), every accumulation weight 1/n."""
    if n < 2:
        raise ValueError(f"need at least 2 instants, got {n}")
    ratios = MotionRatios(np.full((n - 1, height, width), 1.0 / (n - 1)))
    accum = AccumWeights(np.full((n, height, width), 1.0 / n))
    return BlurParams(ratios, accum)


def _effective(planes, squared):
    # literal reading of the sub-motion sums squares the ratios; the default
    # interpretation keeps the endpoints pinned to the two input frames
    return planes * planes if squared else planes


def cumulative_flows(flow, ratios, squared=False):
    """Per-instant cumulative and remaining flows.

    Returns two lists of N FlowFields: C_i scales the flow by the ratio mass
    before instant i (C_1 = 0) and R_i by the mass from instant i on
    (R_N = 0). C_i + R_i equals the full flow wherever the ratios sum to one.
    """
    planes = ratios.planes
    if planes.shape[1:] != (flow.height, flow.width):
        raise ValueError(
            f"ratios {planes.shape[1:]} do not match flow {(flow.height, flow.width)}")
    eff = _effective(planes, squared)
    csum = np.cumsum(eff, axis=0)
    total = csum[-1]
    zeros = np.zeros_like(total)
    cs, rs = [], []
    for i in range(planes.shape[0] + 1):
        c = zeros if i == 0 else csum[i - 1]
        r = total - c
        cs.append(FlowField(c * flow.dx, c * flow.dy))
        rs.append(FlowField(r * flow.dx, r * flow.dy))
    return cs, rs


def instant_images(prev, cur, flow, ratios, squared=False):
    """The N instant images between prev and cur (pull sampling).

    I_i averages prev pulled by -C_i and cur pulled by +R_i, so the first
    instant is prev and the last is cur whenever the flow is exact.
    """
    if prev.data.shape != cur.data.shape:
        raise ValueError("prev/cur frames differ in shape")
    cs, rs = cumulative_flows(flow, ratios, squared)
    out = []
    for c, r in zip(cs, rs):
        a = ad.warp_arrays(prev.data, -c.dx, -c.dy)
        b = ad.warp_arrays(cur.data, r.dx, r.dy)
        out.append(Frame(0.5 * (a + b)))
    return out


def accumulate(instants, accum):
    """Per-pixel convex combination of the instants (weights shared across
    channels)."""
    accum.validate(tol=1e-3)
    if len(instants) != accum.n:
        raise ValueError(f"{len(instants)} instants vs {accum.n} weight planes")
    if instants[0].data.shape[1:] != accum.planes.shape[1:]:
        raise ValueError("instant/weight shapes differ")
    out = np.zeros_like(instants[0].data)
    for inst, w in zip(instants, accum.planes):
        out += w * inst.data
    return Frame(out)


def blur(cur, prev, flow, params, squared=False):
    """Full synthesis: split, warp, accumulate."""
    return accumulate(instant_images(prev, cur, flow, params.ratios, squared),
                      params.accum)


def norm_blur(cur, prev, flow, n):
    """Blur with uniform stacks: the plain averaged-exposure baseline."""
    h, w = flow.height, flow.width
    return blur(cur, prev, flow, uniform_params(n, h, w))


def project_constraints(params):
    """Clip both stacks to [0, 1] and L1-renormalize per pixel.

    Pixels whose clipped stack sums below 1e-8 are reset to uniform weights.
    Total function; idempotent on valid inputs.
    """
    return BlurParams(MotionRatios(_project_stack(params.ratios.planes)),
                      AccumWeights(_project_stack(params.accum.planes)))


def _project_stack(planes):
    n = planes.shape[0]
    clipped = np.clip(planes, 0.0, 1.0)
    sums = clipped.sum(axis=0)
    bad = sums < 1e-8
    safe = np.where(bad, 1.0, sums)
    out = clipped / safe
    if bad.any():
        out = np.where(bad, 1.0 / n, out)
    return out


# ---------------------------------------------------------------------------
# taped mirror of the pipeline (gradients w.r.t. the stacks)


def blur_node(prev_arr, cur_arr, flow, w_vars, a_vars, squared=False):
    """Build the blur on a tape from per-plane ratio/accum Vars.

    prev_arr/cur_arr are constant (C, H, W) arrays; w_vars has N-1 (H, W)
    Vars, a_vars N. Returns the blurred (C, H, W) Var.
    """
    insts = instant_nodes(prev_arr, cur_arr, flow, w_vars, squared)
    out = None
    for inst, a in zip(insts, a_vars):
        term = ad.mul(a, inst)
        out = term if out is None else ad.add(out, term)
    return out


def instant_nodes(prev_arr, cur_arr, flow, w_vars, squared=False):
    eff = [ad.mul(w, w) for w in w_vars] if squared else list(w_vars)
    cums = []
    running = None
    for e in eff:
        running = e if running is None else ad.add(running, e)
        cums.append(running)
    total = cums[-1]
    insts = []
    n = len(w_vars) + 1
    for i in range(n):
        if i == 0:
            a = ad.Var(prev_arr)
        else:
            c = cums[i - 1]
            a = ad.warp(prev_arr, ad.mul(ad.scale(c, -1.0), flow.dx),
                        ad.mul(ad.scale(c, -1.0), flow.dy))
        if i == n - 1:
            b = ad.Var(cur_arr)
        else:
            r = total if i == 0 else ad.sub(total, cums[i - 1])
            b = ad.warp(cur_arr, ad.mul(r, flow.dx), ad.mul(r, flow.dy))
        insts.append(ad.scale(ad.add(a, b), 0.5))
    return insts


# ---------------------------------------------------------------------------
# serialization

PARAMS_MAGIC = b"BPRMv1\x00\x00"


def write_params(path, params):
    """BPRMv1 stack dump: magic, N, H, W, then the ratio planes and the
    accumulation planes as 32-bit floats."""
    n = params.n_instants
    h, w = params.spatial
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<III", n, h, w))
        fh.write(params.ratios.planes.astype("<f4").tobytes())
        fh.write(params.accum.planes.astype("<f4").tobytes())


def read_params(path):
    with open(path, "rb") as fh:
        header = fh.read(20)
        if header[:8] != PARAMS_MAGIC:
            raise ValueError(f"bad params magic in {path}")
        n, h, w = struct.unpack("<III", header[8:20])
        nw = (n - 1) * h * w
        na = n * h * w
        wp = np.frombuffer(fh.read(4 * nw), dtype="<f4").reshape(n - 1, h, w)
        ap = np.frombuffer(fh.read(4 * na), dtype="<f4").reshape(n, h, w)
    return BlurParams(MotionRatios(wp.astype(np.float64)),
                      AccumWeights(ap.astype(np.float64)))
