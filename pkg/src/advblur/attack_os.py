"""Amortized one-step blur attack (os-aba).

A small two-decoder convolutional encoder/decoder predicts per-pixel
offsets for the accumulation weights (Tanh head, scaled by 1/N) and the
motion ratios (raw logits composed with a channel softmax) from the stack
of uniform-ratio instant images. Zero-initialized output layers make the
untrained net reproduce the normal blur exactly. Training minimizes the
same adversarial objective as the iterative attack plus a naturalness
penalty pulling the accumulation weights toward uniform, with Adam.
"""

import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .blur import AccumWeights, BlurParams, MotionRatios, blur, blur_node, uniform_params
from .flow import FlowConfig, estimate_flow
from .images import Frame
from .tracker import crop_at, crop_search_region, respond, respond_node
from .attack_op import AttackStats, adversarial_loss, make_target, _loss_node

log = logging.getLogger("advblur.attack")


class TrainingDivergedError(RuntimeError):
    """Loss blew up; the net is left at its last valid parameters."""


class InternalConsistencyError(AssertionError):
    """Predicted stacks failed their constraints beyond tolerance."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    lambda_natural: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 2000
    pairs_per_sequence: int = 8
    seed: int = 0
    context: float = 2.5
    feature_kind: str = "intensity"
    flow: FlowConfig = field(default_factory=FlowConfig)

    def validate(self):
        if self.learning_rate <= 0 or self.steps < 1 or self.pairs_per_sequence < 1:
            raise ValueError("bad training config")
        if self.lambda_natural < 0:
            raise ValueError("lambda_natural must be >= 0")
        return self


class PredictorNet:
    """Stride-2 conv encoder with two transposed-conv decoder heads.

    Input: the N instant images stacked to (3N, S, S) and scaled to [-1, 1]
    (single-channel frames are replicated to three channels). The
    accumulation head ends in Tanh (N planes), the ratio head emits raw
    logits (N-1 planes).
    """

    KERNEL = 4
    SLOPE = 0.2

    def __init__(self, n_instants=17, input_size=64, widths=(16, 32, 64, 64), seed=0):
        if input_size % (2 ** len(widths)) != 0:
            raise ValueError(f"input size {input_size} not divisible by "
                             f"2^{len(widths)} stages")
        self.n_instants = int(n_instants)
        self.input_size = int(input_size)
        self.widths = tuple(int(c) for c in widths)
        self.params = {}
        rng = np.random.default_rng(seed)
        k = self.KERNEL
        cin = 3 * self.n_instants
        for i, cout in enumerate(self.widths):
            self._add(rng, f"enc{i}_w", (cout, cin, k, k))
            self.params[f"enc{i}_b"] = np.zeros(cout)
            cin = cout
        for head, nout in (("deca", self.n_instants), ("decw", self.n_instants - 1)):
            cin = self.widths[-1]
            outs = list(reversed(self.widths[:-1])) + [nout]
            for i, cout in enumerate(outs):
                last = i == len(outs) - 1
                shape = (cin, cout, k, k)
                if last:
                    self.params[f"{head}{i}_w"] = np.zeros(shape)
                else:
                    self._add(rng, f"{head}{i}_w", shape)
                self.params[f"{head}{i}_b"] = np.zeros(cout)
                cin = cout
        self.n_stages = len(self.widths)

    def _add(self, rng, name, shape):
        fan_in = int(np.prod(shape[1:]))
        self.params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)

    def param_names(self):
        return sorted(self.params)

    def clone(self):
        out = PredictorNet.__new__(PredictorNet)
        out.n_instants = self.n_instants
        out.input_size = self.input_size
        out.widths = self.widths
        out.n_stages = self.n_stages
        out.params = {k: v.copy() for k, v in self.params.items()}
        return out

    def forward_arrays(self, x):
        p = self.params
        h = x
        for i in range(self.n_stages):
            h = ad.conv2d_arrays(h, p[f"enc{i}_w"], p[f"enc{i}_b"], 2, 1)
            h = np.where(h > 0, h, self.SLOPE * h)
        heads = []
        for head in ("deca", "decw"):
            g = h
            for i in range(self.n_stages):
                g = ad.conv2d_transpose_arrays(g, p[f"{head}{i}_w"],
                                               p[f"{head}{i}_b"], 2, 1)
                if i < self.n_stages - 1:
                    g = np.where(g > 0, g, self.SLOPE * g)
            heads.append(g)
        return np.tanh(heads[0]), heads[1]

    def forward_nodes(self, pvars, x_const):
        h = ad.Var(x_const)
        for i in range(self.n_stages):
            h = ad.conv2d(h, pvars[f"enc{i}_w"], pvars[f"enc{i}_b"], 2, 1)
            h = ad.leaky_relu(h, self.SLOPE)
        heads = []
        for head in ("deca", "decw"):
            g = h
            for i in range(self.n_stages):
                g = ad.conv2d_transpose(g, pvars[f"{head}{i}_w"],
                                        pvars[f"{head}{i}_b"], 2, 1)
                if i < self.n_stages - 1:
                    g = ad.leaky_relu(g, self.SLOPE)
            heads.append(g)
        return ad.tanh(heads[0]), heads[1]


def net_input(instants, input_size):
    """Stack instants to (3N, S, S) in [-1, 1]."""
    arrs = []
    for f in instants:
        d = f.data if f.data.shape[0] == 3 else np.repeat(f.data, 3, axis=0)
        arrs.append(ad.resize_bilinear_arrays(d, (input_size, input_size)))
    return np.concatenate(arrs, axis=0) * 2.0 - 1.0


def _argmin_mask(a_off):
    n = a_off.shape[0]
    j = np.argmin(a_off, axis=0)
    return (np.arange(n)[:, None, None] == j[None]).astype(np.float64)


def predict_params(net, instants):
    """Predicted blur stacks at the instants' resolution (pure numpy path).

    The accumulation head's offsets are scaled by 1/N; the per-pixel plane
    with the smallest offset is then reset so the stack sums to one, and a
    clip + renormalize safeguard pins the result onto the simplex (the reset
    alone cannot bound the range). Ratios are a channel softmax over
    uniform-plus-logit scores.
    """
    n = net.n_instants
    if len(instants) != n:
        raise ValueError(f"expected {n} instants, got {len(instants)}")
    h, w = instants[0].data.shape[1:]
    x = net_input(instants, net.input_size)
    a_out, w_logits = net.forward_arrays(x)
    a_off = a_out / n
    a_raw = 1.0 / n + a_off
    m = _argmin_mask(a_off)
    a_fix = a_raw * (1 - m) + m * (1.0 - (a_raw.sum(axis=0, keepdims=True) - a_raw))
    a_clip = np.clip(a_fix, 0.0, 1.0)
    a_planes = a_clip / (a_clip.sum(axis=0, keepdims=True) + 1e-12)
    w_planes = _softmax(1.0 / (n - 1) + w_logits)
    a_planes = ad.resize_bilinear_arrays(a_planes, (h, w))
    w_planes = ad.resize_bilinear_arrays(w_planes, (h, w))
    params = BlurParams(MotionRatios(w_planes), AccumWeights(a_planes))
    try:
        params.validate(tol=1e-3)
    except ValueError as exc:
        raise InternalConsistencyError(str(exc)) from exc
    return params


def _softmax(z):
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def predict_params_nodes(net, pvars, instants, out_hw):
    """Taped mirror of predict_params; returns (w_planes Var, a_planes Var)."""
    n = net.n_instants
    x = net_input(instants, net.input_size)
    a_out, w_logits = net.forward_nodes(pvars, x)
    a_off = ad.scale(a_out, 1.0 / n)
    a_raw = ad.add(a_off, 1.0 / n)
    m = _argmin_mask(a_off.value)  # constant per-pixel selection
    fixed = ad.add(ad.mul(a_raw, 1.0 - m),
                   ad.mul(m, ad.sub(1.0, ad.sub(ad.plane_sum(a_raw), a_raw))))
    clipped = ad.clip01(fixed)
    a_planes = ad.div(clipped, ad.add(ad.plane_sum(clipped), 1e-12))
    w_planes = ad.softmax_planes(ad.add(w_logits, 1.0 / (n - 1)))
    return ad.resize_bilinear(w_planes, out_hw), ad.resize_bilinear(a_planes, out_hw)


def naturalness_arrays(a_planes, n):
    """Sum over planes of the Euclidean norm of the deviation from uniform."""
    d = a_planes - 1.0 / n
    return float(np.sqrt((d * d).sum(axis=(1, 2))).sum())


def _naturalness_node(a_planes, n):
    d = ad.sub(a_planes, 1.0 / n)
    total = None
    for plane in ad.split_planes(ad.mul(d, d)):
        term = ad.sqrt(ad.reduce_sum(plane))
        total = term if total is None else ad.add(total, term)
    return total


def _build_loss(net, pvars, model, region_prev, region_cur, flowfield, target,
                lam):
    n = net.n_instants
    h, w = region_cur.data.shape[1:]
    uni = uniform_params(n, h, w)
    from .blur import instant_images

    instants = instant_images(region_prev, region_cur, flowfield, uni.ratios)
    w_planes, a_planes = predict_params_nodes(net, pvars, instants, (h, w))
    blurred = blur_node(region_prev.data, region_cur.data, flowfield,
                        ad.split_planes(w_planes), ad.split_planes(a_planes))
    resp = respond_node(model, blurred)
    l_adv = _loss_node(resp, target)
    l_nat = _naturalness_node(a_planes, n)
    total = ad.add(l_adv, ad.scale(l_nat, lam))
    return total, float(l_adv.value), float(l_nat.value)


def total_loss(net, model, cur_region, prev_region, flowfield, target,
               lambda_natural=1e-3):
    """Adversarial + naturalness objective for one region pair (float)."""
    tape = ad.Tape()
    pvars = {k: tape.param(v, name=k) for k, v in net.params.items()}
    total, l_adv, l_nat = _build_loss(net, pvars, model, prev_region, cur_region,
                                      flowfield, target, lambda_natural)
    return float(total.value), l_adv, l_nat


class Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / b1t
            vhat = self.v[k] / b2t
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _training_samples(sequences, pairs_per_sequence):
    samples = []
    for si, seq in enumerate(sequences):
        n = len(seq.frames)
        idx = np.unique(np.linspace(1, n - 1, pairs_per_sequence).astype(int))
        samples.extend((si, int(t)) for t in idx)
    return samples


def train(net, sequences, config=TrainConfig()):
    """Adam over all net parameters against the white-box intensity tracker.

    Each step draws one (template, prev, cur) triple from the synthetic
    sequences; the tracker and the flow stay frozen. Deterministic for a
    fixed seed. Returns (net, log) with one (step, l_adv, l_natural, total)
    row per step.
    """
    from . import tracker as trk

    config.validate()
    rng = np.random.default_rng(config.seed)
    samples = _training_samples(sequences, config.pairs_per_sequence)
    if not samples:
        raise ValueError("no training samples")
    models = {}
    opt = Adam({k: v.shape for k, v in net.params.items()}, config.learning_rate,
               config.beta1, config.beta2, config.adam_eps)
    log_rows = []
    order = []
    for step in range(config.steps):
        if not order:
            order = list(rng.permutation(len(samples)))
        si, t = samples[order.pop()]
        seq = sequences[si]
        if si not in models:
            models[si] = trk.init(seq.frames[0], seq.gt_boxes[0],
                                  config.feature_kind)
        model = models[si]
        region_cur, tf = crop_search_region(seq.frames[t], seq.gt_boxes[t - 1],
                                            config.context)
        region_prev = crop_at(seq.frames[t - 1], tf)
        clean = respond(model, region_cur, tf)
        target = make_target(clean, (model.bbox_h, model.bbox_w), "l2")
        flowfield = estimate_flow(region_prev, region_cur, config.flow)

        tape = ad.Tape()
        pvars = {k: tape.param(v, name=k) for k, v in net.params.items()}
        total, l_adv, l_nat = _build_loss(net, pvars, model, region_prev,
                                          region_cur, flowfield, target,
                                          config.lambda_natural)
        tot = float(total.value)
        if not np.isfinite(tot) or tot > 1e6:
            raise TrainingDivergedError(
                f"loss {tot} at step {step}; parameters left at last valid state")
        grads = ad.backward(tape, total)
        gmap = {k: grads[v] for k, v in pvars.items()}
        if any(not np.isfinite(g).all() for g in gmap.values()):
            raise TrainingDivergedError(
                f"non-finite gradients at step {step}; parameters left unchanged")
        opt.step(net.params, gmap)
        log_rows.append((step, l_adv, l_nat, tot))
        if step % 100 == 0:
            log.info("train step %d: adv=%.4f natural=%.4f total=%.4f",
                     step, l_adv, l_nat, tot)
    return net, log_rows


def os_attack_frame(net, model, cur, prev, prev_bbox, context=2.5,
                    flow_config=FlowConfig()):
    """Single forward pass: flow -> uniform instants -> offsets -> blur."""
    from .blur import instant_images

    t0 = time.perf_counter()
    region_cur, tf = crop_search_region(cur, prev_bbox, context)
    region_prev = crop_at(prev, tf)
    flowfield = estimate_flow(region_prev, region_cur, flow_config)
    n = net.n_instants
    uni = uniform_params(n, tf.side, tf.side)
    instants = instant_images(region_prev, region_cur, flowfield, uni.ratios)
    params = predict_params(net, instants)
    out = blur(region_cur, region_prev, flowfield, params)
    elapsed = (time.perf_counter() - t0) * 1000.0
    return out, AttackStats([], [], elapsed)


def write_train_log(path, rows):
    with open(path, "w") as fh:
        fh.write("step,L_adv,L_natural,total\n")
        for step, la, ln, tot in rows:
            fh.write(f"{step},{la:.6f},{ln:.6f},{tot:.6f}\n")


# ---------------------------------------------------------------------------
# checkpoint format

NET_MAGIC = b"JAMAv1\x00\x00"


def save_net(path, net):
    """Array dump: magic, layer count, then per layer a shape header and the
    32-bit little-endian weights. Architecture is recovered from the shapes."""
    names = net.param_names()
    with open(path, "wb") as fh:
        fh.write(NET_MAGIC)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = net.params[name]
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_net(path, input_size=64):
    with open(path, "rb") as fh:
        if fh.read(8) != NET_MAGIC:
            raise ValueError(f"bad checkpoint magic in {path}")
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = []
        for _ in range(count):
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape))
            arrays.append(np.frombuffer(fh.read(4 * size), dtype="<f4")
                          .reshape(shape).astype(np.float64))
    # arrays follow sorted-name order (deca*, decw*, enc*), two per layer and
    # three layer groups per stage, so the encoder chain sits at the tail
    if count % 6 != 0:
        raise ValueError(f"checkpoint array count {count} is not 6 x stages")
    stages = count // 6
    if stages > 9:
        raise ValueError("checkpoints beyond 9 stages are not supported")
    enc_w = [arrays[count - 2 * stages + 2 * i + 1] for i in range(stages)]
    n_instants = enc_w[0].shape[1] // 3
    widths = tuple(a.shape[0] for a in enc_w)
    net = PredictorNet(n_instants, input_size, widths)
    names = net.param_names()
    if len(names) != count:
        raise ValueError(
            f"checkpoint has {count} arrays, architecture expects {len(names)}")
    for name, arr in zip(names, arrays):
        if net.params[name].shape != arr.shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{net.params[name].shape} vs {arr.shape}")
        net.params[name] = arr
    return net
