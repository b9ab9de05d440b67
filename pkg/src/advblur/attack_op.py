"""Iterative adversarial blur attack (op-aba).

Per attacked frame: crop matching search regions from the current and
previous frames, estimate flow once, build the adversarial target map from
the clean response (peak moved to the strongest background cell), then run
constrained signed gradient descent on the motion-ratio and accumulation
stacks through the blur -> response -> loss pipeline. Iteration zero is the
uniform-stack blur, so the attack starts from the normal-blur baseline.
"""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .blur import blur, blur_node, project_constraints, uniform_params
from .flow import FlowConfig, estimate_flow
from .images import Frame
from .tracker import crop_at, crop_search_region, respond, respond_node

log = logging.getLogger("advblur.attack")


class NonFiniteGradientError(ArithmeticError):
    """Gradients went non-finite; the current iteration must be aborted."""


LOSS_KINDS = ("l2", "cross-entropy")


@dataclass(frozen=True)
class OpAttackConfig:
    iterations: int = 10
    step_ratios: float = 0.002
    step_accum: float = 0.0002
    n_instants: int = 17
    attack_every: int = 5
    loss_kind: str = "l2"
    context: float = 2.5
    flow: FlowConfig = field(default_factory=FlowConfig)
    chain_prev_blurred: bool = False
    squared_ratios: bool = False

    def validate(self):
        if self.iterations < 1 or self.attack_every < 1 or self.n_instants < 2:
            raise ValueError("iterations/attack_every/n_instants out of range")
        if self.step_ratios < 0 or self.step_accum < 0:
            raise ValueError("step sizes must be non-negative")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        return self


def ablation_variant(config, freeze="none"):
    """Zero the step size of a frozen stack (w/o-ratios or w/o-accum runs)."""
    if freeze == "none":
        return config
    if freeze == "freeze_ratios":
        return replace(config, step_ratios=0.0)
    if freeze == "freeze_accum":
        return replace(config, step_accum=0.0)
    raise ValueError(f"unknown freeze mode {freeze!r}")


@dataclass(frozen=True)
class AttackTarget:
    """Desired response: peak at the strongest background cell q."""

    target_map: np.ndarray
    target_peak: tuple
    loss_kind: str


def make_target(clean_map, obj_size_rc, loss_kind="l2"):
    """Build the adversarial target from the unattacked response.

    A rectangle of the object's size (response cells) centered at the clean
    argmax is masked out; q is the argmax of the remainder (row-major on
    ties). The target is one-hot at q; the cross-entropy variant labels all
    other cells -1.
    """
    values = clean_map.values
    h, w = values.shape
    r0, c0 = clean_map.argmax()
    oh = min(int(round(obj_size_rc[0])), h)
    ow = min(int(round(obj_size_rc[1])), w)
    top = min(max(r0 - (oh - 1) // 2, 0), h - oh)
    left = min(max(c0 - (ow - 1) // 2, 0), w - ow)
    mask = np.zeros((h, w), dtype=bool)
    mask[top : top + oh, left : left + ow] = True
    if mask.all():
        # object covers the whole map: fall back to the hottest corner
        corners = [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)]
        q = max(corners, key=lambda rc: values[rc])
    else:
        bg = np.where(mask, -np.inf, values)
        q = np.unravel_index(int(np.argmax(bg)), values.shape)
    fill = 0.0 if loss_kind == "l2" else -1.0
    tgt = np.full((h, w), fill)
    tgt[q] = 1.0
    return AttackTarget(tgt, (int(q[0]), int(q[1])), loss_kind)


def adversarial_loss(pred_values, target):
    """Distance between a response and the target map (array in, float out)."""
    x = pred_values.values if hasattr(pred_values, "values") else np.asarray(pred_values)
    if x.shape != target.target_map.shape:
        raise ValueError(f"response {x.shape} vs target {target.target_map.shape}")
    if target.loss_kind == "l2":
        d = x - target.target_map
        return float(np.sum(d * d))
    y01 = (target.target_map + 1.0) / 2.0
    return float(np.sum(np.logaddexp(0.0, x) - y01 * x))


def _loss_node(resp_node, target):
    if target.loss_kind == "l2":
        return ad.sse_loss(resp_node, target.target_map)
    return ad.bce_logits_loss(resp_node, (target.target_map + 1.0) / 2.0)


def signed_step(params, grad_ratios, grad_accum, config):
    """One projected signed-descent update of both stacks; sign(0) = 0."""
    if not (np.isfinite(grad_ratios).all() and np.isfinite(grad_accum).all()):
        raise NonFiniteGradientError("non-finite gradient in signed step")
    w = params.ratios.planes - config.step_ratios * np.sign(grad_ratios)
    a = params.accum.planes - config.step_accum * np.sign(grad_accum)
    from .blur import AccumWeights, BlurParams, MotionRatios

    return project_constraints(BlurParams(MotionRatios(w), AccumWeights(a)))


@dataclass
class AttackStats:
    """Per-frame attack trace: losses[0] is the uniform-init (normal blur)
    loss, losses[-1] the loss of the emitted region."""

    losses: list
    peaks: list
    elapsed_ms: float
    attacked: bool = True


def attack_frame(model, cur, prev, prev_bbox, config, flow_override=None):
    """Run the full iterative attack for one frame pair.

    Returns the adversarially blurred search region (cropped from `cur` at
    `prev_bbox`) plus the optimization trace.
    """
    config.validate()
    t0 = time.perf_counter()
    region_cur, tf = crop_search_region(cur, prev_bbox, config.context)
    region_prev = crop_at(prev, tf)
    clean = respond(model, region_cur, tf)
    target = make_target(clean, (model.bbox_h, model.bbox_w), config.loss_kind)
    if flow_override is not None:
        flowfield = flow_override
    else:
        flowfield = estimate_flow(region_prev, region_cur, config.flow)

    h, w = tf.side, tf.side
    params = uniform_params(config.n_instants, h, w)
    losses, peaks = [], []
    for _ in range(config.iterations):
        tape = ad.Tape()
        wv = [tape.param(p) for p in params.ratios.planes]
        av = [tape.param(p) for p in params.accum.planes]
        blurred = blur_node(region_prev.data, region_cur.data, flowfield,
                            wv, av, config.squared_ratios)
        resp = respond_node(model, blurred)
        loss = _loss_node(resp, target)
        losses.append(float(loss.value))
        peaks.append(tuple(int(v) for v in
                           np.unravel_index(int(np.argmax(resp.value)),
                                            resp.value.shape)))
        grads = ad.backward(tape, loss)
        gw = np.stack([grads[v] for v in wv])
        ga = np.stack([grads[v] for v in av])
        try:
            params = signed_step(params, gw, ga, config)
        except NonFiniteGradientError:
            log.warning("non-finite gradients; keeping last valid parameters")
            break

    out = blur(region_cur, region_prev, flowfield, params, config.squared_ratios)
    final_resp = respond(model, out, tf)
    losses.append(adversarial_loss(final_resp, target))
    peaks.append(final_resp.argmax())
    elapsed = (time.perf_counter() - t0) * 1000.0
    return out, AttackStats(losses, peaks, elapsed)


def skipped_stats():
    """Placeholder trace for frames the schedule leaves untouched."""
    return AttackStats([], [], 0.0, attacked=False)


def write_stats_csv(path, rows):
    """rows: iterable of (frame_index, iter, loss, argmax_row, argmax_col)."""
    with open(path, "w") as fh:
        fh.write("frame_index,iter,loss,argmax_row,argmax_col\n")
        for frame_index, it, loss, r, c in rows:
            fh.write(f"{frame_index},{it},{loss:.6f},{r},{c}\n")
