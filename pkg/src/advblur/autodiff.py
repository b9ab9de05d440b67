"""Reverse-mode differentiation over numpy arrays.

A small tape: each operation builds a `Var` holding the forward value, the
parent nodes and a closure that scatters the output gradient back to the
parents. `backward` runs the closures in reverse topological order from a
scalar loss. Only the primitives the blur/tracker/predictor pipelines need
are implemented (no broadcasting semantics beyond what those need).

Images are planar float64 arrays: (channels, height, width) or (height,
width) for single planes. Flow components are separate (height, width)
planes.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NumericFailureError(ArithmeticError):
    """A finite-difference probe produced a non-finite loss."""


class Var:
    """One node of the computation graph."""

    __slots__ = ("value", "grad", "parents", "bwd", "requires_grad", "name")

    def __init__(self, value, parents=(), bwd=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.bwd = bwd
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name})"


class Tape:
    """Registry of the leaf parameters of one differentiable computation.

    The graph itself lives in the Vars produced by the ops below; the tape
    only remembers which leaves were declared so `backward` can hand back a
    gradient for every one of them (zero for leaves the loss never touched).
    One tape per attack/training invocation; tapes are not shared.
    """

    def __init__(self):
        self.params = []

    def param(self, value, name=None):
        v = Var(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params.append(v)
        return v


def _as_var(x):
    return x if isinstance(x, Var) else Var(x)


def _accum(node, g):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += g


def _unbroadcast(g, shape):
    # reverse numpy broadcasting: sum the expanded axes back down
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _toposort(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def run_backward(root, seed):
    """Propagate `seed` (gradient w.r.t. root) through the graph."""
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.asarray(seed, dtype=np.float64).reshape(root.value.shape).copy()
    for node in reversed(order):
        if node.bwd is not None and node.grad is not None:
            node.bwd(node.grad)


def backward(tape, loss):
    """Reverse accumulation from a scalar loss.

    Returns a dict keyed by the tape's leaf Vars; leaves the loss never
    touched get a zero gradient.
    """
    if loss.value.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    run_backward(loss, 1.0)
    return {
        p: (p.grad if p.grad is not None else np.zeros_like(p.value))
        for p in tape.params
    }


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def add(a, b):
    a, b = _as_var(a), _as_var(b)
    out = Var(a.value + b.value, (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    out.bwd = bwd
    return out


def sub(a, b):
    a, b = _as_var(a), _as_var(b)
    out = Var(a.value - b.value, (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, -_unbroadcast(g, b.value.shape))

    out.bwd = bwd
    return out


def mul(a, b):
    a, b = _as_var(a), _as_var(b)
    out = Var(a.value * b.value, (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    out.bwd = bwd
    return out


def div(a, b):
    a, b = _as_var(a), _as_var(b)
    out = Var(a.value / b.value, (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g / b.value, a.value.shape))
        _accum(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    out.bwd = bwd
    return out


def neg(a):
    a = _as_var(a)
    out = Var(-a.value, (a,))
    out.bwd = lambda g: _accum(a, -g)
    return out


def scale(a, c):
    """Multiply by a python scalar constant."""
    a = _as_var(a)
    c = float(c)
    out = Var(a.value * c, (a,))
    out.bwd = lambda g: _accum(a, g * c)
    return out


def sqrt(a):
    """Elementwise square root; subgradient 0 at exactly zero."""
    a = _as_var(a)
    root = np.sqrt(a.value)
    out = Var(root, (a,))

    def bwd(g):
        d = np.where(root > 1e-12, 0.5 / np.maximum(root, 1e-12), 0.0)
        _accum(a, g * d)

    out.bwd = bwd
    return out


def clip01(a):
    """Clamp to [0, 1]; gradients vanish outside."""
    a = _as_var(a)
    out = Var(np.clip(a.value, 0.0, 1.0), (a,))

    def bwd(g):
        _accum(a, g * ((a.value >= 0.0) & (a.value <= 1.0)))

    out.bwd = bwd
    return out


def reduce_sum(a):
    a = _as_var(a)
    out = Var(a.value.sum(), (a,))
    out.bwd = lambda g: _accum(a, np.full_like(a.value, float(g)))
    return out


def plane_sum(a):
    """Sum over the leading (plane) axis, keeping it for broadcasting."""
    a = _as_var(a)
    out = Var(a.value.sum(axis=0, keepdims=True), (a,))
    out.bwd = lambda g: _accum(a, np.broadcast_to(g, a.value.shape).copy())
    return out


def stack_planes(planes):
    planes = [_as_var(p) for p in planes]
    out = Var(np.stack([p.value for p in planes]), tuple(planes))

    def bwd(g):
        for i, p in enumerate(planes):
            _accum(p, g[i])

    out.bwd = bwd
    return out


def split_planes(a):
    """Inverse of stack_planes: one Var per leading-axis slice."""
    a = _as_var(a)
    outs = []
    for i in range(a.value.shape[0]):
        o = Var(a.value[i], (a,))

        def bwd(g, i=i):
            full = np.zeros_like(a.value)
            full[i] = g
            _accum(a, full)

        o.bwd = bwd
        outs.append(o)
    return outs


def leaky_relu(a, slope=0.2):
    a = _as_var(a)
    out = Var(np.where(a.value > 0, a.value, slope * a.value), (a,))

    def bwd(g):
        _accum(a, g * np.where(a.value > 0, 1.0, slope))

    out.bwd = bwd
    return out


def tanh(a):
    a = _as_var(a)
    t = np.tanh(a.value)
    out = Var(t, (a,))
    out.bwd = lambda g: _accum(a, g * (1.0 - t * t))
    return out


def softmax_planes(a):
    """Softmax across the leading (plane) axis, per pixel."""
    a = _as_var(a)
    z = a.value - a.value.max(axis=0, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=0, keepdims=True)
    out = Var(s, (a,))

    def bwd(g):
        dot = (g * s).sum(axis=0, keepdims=True)
        _accum(a, s * (g - dot))

    out.bwd = bwd
    return out


def channel_dot(a, weights):
    """Weighted sum over the channel axis: (C, H, W) x (C,) -> (H, W)."""
    a = _as_var(a)
    w = np.asarray(weights, dtype=np.float64)
    out = Var(np.tensordot(w, a.value, axes=(0, 0)), (a,))
    out.bwd = lambda g: _accum(a, w[:, None, None] * g[None, :, :])
    return out


# ---------------------------------------------------------------------------
# scalar losses


def sse_loss(pred, target):
    """Sum of squared differences against a constant target."""
    pred = _as_var(pred)
    t = np.asarray(target, dtype=np.float64)
    d = pred.value - t
    out = Var(np.sum(d * d), (pred,))
    out.bwd = lambda g: _accum(pred, 2.0 * float(g) * d)
    return out


def bce_logits_loss(pred, labels01):
    """Binary cross-entropy of sigmoid(pred) against {0,1} labels, summed."""
    pred = _as_var(pred)
    y = np.asarray(labels01, dtype=np.float64)
    x = pred.value
    out = Var(np.sum(np.logaddexp(0.0, x) - y * x), (pred,))

    def bwd(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        _accum(pred, float(g) * (sig - y))

    out.bwd = bwd
    return out


# ---------------------------------------------------------------------------
# bilinear sampling


def _grid(h, w):
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    return ys, xs


def _corners(ys, xs, h, w):
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    fy = ys - y0
    fx = xs - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    return y0, x0, y1, x1, fy, fx


def bilinear_gather(image, ys, xs):
    """Sample `image` at float coords (ys, xs), clamped to the border.

    image: (C, H, W) or (H, W); ys/xs: (h2, w2) sample coordinates.
    """
    planar = image.ndim == 3
    img = image if planar else image[None]
    _, h, w = img.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0, x0, y1, x1, fy, fx = _corners(ys, xs, h, w)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = (img[:, y0, x0] * w00 + img[:, y0, x1] * w01
           + img[:, y1, x0] * w10 + img[:, y1, x1] * w11)
    return out if planar else out[0]


def bilinear_scatter(grad, ys, xs, h, w):
    """Adjoint of bilinear_gather: scatter-add grad onto an (C, h, w) grid."""
    planar = grad.ndim == 3
    g = grad if planar else grad[None]
    c = g.shape[0]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0, x0, y1, x1, fy, fx = _corners(ys, xs, h, w)
    out = np.zeros((c, h * w), dtype=np.float64)
    for idx, wgt in (
        (y0 * w + x0, (1 - fy) * (1 - fx)),
        (y0 * w + x1, (1 - fy) * fx),
        (y1 * w + x0, fy * (1 - fx)),
        (y1 * w + x1, fy * fx),
    ):
        flat = idx.ravel()
        for k in range(c):
            out[k] += np.bincount(flat, weights=(g[k] * wgt).ravel(),
                                  minlength=h * w)
    out = out.reshape(c, h, w)
    return out if planar else out[0]


def _sample_coord_grads(img, ys_raw, xs_raw):
    """d(sample)/d(coord) per channel at clamped coords (ys_raw, xs_raw).

    At integer coordinates the bilinear hat has a kink; its subgradient is
    taken as the average of the left and right differences, which matches
    the central finite difference there (including at clamped borders).
    Strictly outside the image the clamp makes the derivative zero.
    """
    c, h, w = img.shape
    ys = np.clip(ys_raw, 0.0, h - 1.0)
    xs = np.clip(xs_raw, 0.0, w - 1.0)
    y0, x0, y1, x1, fy, fx = _corners(ys, xs, h, w)
    x0m = np.maximum(x0 - 1, 0)
    y0m = np.maximum(y0 - 1, 0)

    dx_r0 = img[:, y0, x1] - img[:, y0, x0]
    dx_r1 = img[:, y1, x1] - img[:, y1, x0]
    on_ix = fx == 0.0
    if on_ix.any():
        left0 = img[:, y0, x0] - img[:, y0, x0m]
        left1 = img[:, y1, x0] - img[:, y1, x0m]
        dx_r0 = np.where(on_ix, 0.5 * (dx_r0 + left0), dx_r0)
        dx_r1 = np.where(on_ix, 0.5 * (dx_r1 + left1), dx_r1)
    gx = (1 - fy) * dx_r0 + fy * dx_r1

    dy_c0 = img[:, y1, x0] - img[:, y0, x0]
    dy_c1 = img[:, y1, x1] - img[:, y0, x1]
    on_iy = fy == 0.0
    if on_iy.any():
        up0 = img[:, y0, x0] - img[:, y0m, x0]
        up1 = img[:, y0, x1] - img[:, y0m, x1]
        dy_c0 = np.where(on_iy, 0.5 * (dy_c0 + up0), dy_c0)
        dy_c1 = np.where(on_iy, 0.5 * (dy_c1 + up1), dy_c1)
    gy = (1 - fx) * dy_c0 + fx * dy_c1

    gx *= (xs_raw >= 0.0) & (xs_raw <= w - 1.0)
    gy *= (ys_raw >= 0.0) & (ys_raw <= h - 1.0)
    return gy, gx


def warp_arrays(image, dx, dy):
    """Pull-sample: out[p] = image[p + (dy, dx)[p]], border-clamped."""
    planar = image.ndim == 3
    h, w = image.shape[-2:]
    if dx.shape != (h, w) or dy.shape != (h, w):
        raise ValueError(
            f"flow shape {dx.shape}/{dy.shape} does not match image {image.shape}")
    ys, xs = _grid(h, w)
    return bilinear_gather(image, ys + dy, xs + dx)


def warp_backward_arrays(image, dx, dy, grad_out):
    """Analytic partials of warp_arrays w.r.t. the image and the flow.

    Returns (grad_image, grad_dx, grad_dy).
    """
    planar = image.ndim == 3
    img = image if planar else image[None]
    g = grad_out if planar else grad_out[None]
    if g.shape != img.shape:
        raise ValueError(f"grad shape {grad_out.shape} does not match image")
    c, h, w = img.shape
    ys, xs = _grid(h, w)
    ys_raw, xs_raw = ys + dy, xs + dx
    gimg = bilinear_scatter(g, ys_raw, xs_raw, h, w)
    gy, gx = _sample_coord_grads(img, ys_raw, xs_raw)
    gdx = (g * gx).sum(axis=0)
    gdy = (g * gy).sum(axis=0)
    if not planar:
        gimg = gimg[0]
    return gimg, gdx, gdy


def warp(image, dx, dy):
    """Taped warp. image: (C,H,W) or (H,W); dx/dy: (H,W) displacement."""
    image, dx, dy = _as_var(image), _as_var(dx), _as_var(dy)
    out = Var(warp_arrays(image.value, dx.value, dy.value), (image, dx, dy))

    def bwd(g):
        gimg, gdx, gdy = warp_backward_arrays(image.value, dx.value, dy.value, g)
        _accum(image, gimg)
        _accum(dx, gdx)
        _accum(dy, gdy)

    out.bwd = bwd
    return out


def _resize_coords(h, w, h2, w2):
    # half-pixel-center convention, clamped at the ends
    ys = (np.arange(h2, dtype=np.float64) + 0.5) * (h / h2) - 0.5
    xs = (np.arange(w2, dtype=np.float64) + 0.5) * (w / w2) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    return np.meshgrid(ys, xs, indexing="ij")


def resize_bilinear_arrays(x, out_hw):
    h, w = x.shape[-2:]
    h2, w2 = out_hw
    if (h, w) == (h2, w2):
        return x.copy()
    ys, xs = _resize_coords(h, w, h2, w2)
    return bilinear_gather(x, ys, xs)


def resize_bilinear(x, out_hw):
    """Taped bilinear resize of (K,H,W) or (H,W) to out_hw."""
    x = _as_var(x)
    h, w = x.value.shape[-2:]
    h2, w2 = out_hw
    out = Var(resize_bilinear_arrays(x.value, out_hw), (x,))

    def bwd(g):
        if (h, w) == (h2, w2):
            _accum(x, g)
            return
        ys, xs = _resize_coords(h, w, h2, w2)
        _accum(x, bilinear_scatter(g, ys, xs, h, w))

    out.bwd = bwd
    return out


# ---------------------------------------------------------------------------
# convolution (for the offset predictor)


def conv2d_arrays(x, w, b, stride=1, pad=0):
    """x: (Cin,H,W), w: (Cout,Cin,kh,kw). Zero padding. Returns (Cout,Ho,Wo)."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    kh, kw = w.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.einsum("cijhw,ochw->oij", win, w, optimize=True)
    if b is not None:
        out += b[:, None, None]
    return out


def conv2d(x, w, b, stride=1, pad=0):
    x, w, b = _as_var(x), _as_var(w), _as_var(b)
    out = Var(conv2d_arrays(x.value, w.value, b.value, stride, pad), (x, w, b))
    kh, kw = w.value.shape[2:]
    cin, h, wd = x.value.shape

    def bwd(g):
        xp = np.pad(x.value, ((0, 0), (pad, pad), (pad, pad))) if pad else x.value
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        _accum(w, np.einsum("cijhw,oij->ochw", win, g, optimize=True))
        _accum(b, g.sum(axis=(1, 2)))
        gxp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
        ho, wo = g.shape[1:]
        for a in range(kh):
            for bb in range(kw):
                contrib = np.einsum("oij,oc->cij", g, w.value[:, :, a, bb],
                                    optimize=True)
                gxp[:, a:a + stride * ho:stride, bb:bb + stride * wo:stride] += contrib
        _accum(x, gxp[:, pad:pad + h, pad:pad + wd] if pad else gxp)

    out.bwd = bwd
    return out


def conv2d_transpose_arrays(x, w, b, stride=1, pad=0):
    """x: (Cin,H,W), w: (Cin,Cout,kh,kw). Returns (Cout,(H-1)s-2p+k, ...)."""
    cin, h, wd = x.shape
    kh, kw = w.shape[2:]
    full_h = (h - 1) * stride + kh
    full_w = (wd - 1) * stride + kw
    opad = np.zeros((w.shape[1], full_h, full_w))
    for a in range(kh):
        for bb in range(kw):
            contrib = np.einsum("cij,co->oij", x, w[:, :, a, bb], optimize=True)
            opad[:, a:a + stride * h:stride, bb:bb + stride * wd:stride] += contrib
    out = opad[:, pad:full_h - pad, pad:full_w - pad]
    if b is not None:
        out = out + b[:, None, None]
    return out


def conv2d_transpose(x, w, b, stride=1, pad=0):
    x, w, b = _as_var(x), _as_var(w), _as_var(b)
    out = Var(conv2d_transpose_arrays(x.value, w.value, b.value, stride, pad),
              (x, w, b))
    cin, h, wd = x.value.shape
    kh, kw = w.value.shape[2:]
    full_h = (h - 1) * stride + kh
    full_w = (wd - 1) * stride + kw

    def bwd(g):
        gfull = np.zeros((g.shape[0], full_h, full_w))
        gfull[:, pad:full_h - pad, pad:full_w - pad] = g
        win = sliding_window_view(gfull, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        _accum(x, np.einsum("oijab,coab->cij", win, w.value, optimize=True))
        _accum(w, np.einsum("cij,oijab->coab", x.value, win, optimize=True))
        _accum(b, g.sum(axis=(1, 2)))

    out.bwd = bwd
    return out


# ---------------------------------------------------------------------------
# image gradients and normalized cross-correlation (tracker primitives)


def grad_magnitude_arrays(x):
    xp = np.pad(x, 1, mode="edge")
    gx = 0.5 * (xp[1:-1, 2:] - xp[1:-1, :-2])
    gy = 0.5 * (xp[2:, 1:-1] - xp[:-2, 1:-1])
    return np.sqrt(gx * gx + gy * gy + 1e-12), gx, gy


def grad_magnitude(x):
    """Central-difference gradient magnitude of a single plane (edge-replicated)."""
    x = _as_var(x)
    mag, gx, gy = grad_magnitude_arrays(x.value)
    out = Var(mag, (x,))
    h, w = x.value.shape

    def bwd(g):
        ggx = g * gx / mag
        ggy = g * gy / mag
        acc = np.zeros((h + 2, w + 2))
        acc[1:-1, 2:] += 0.5 * ggx
        acc[1:-1, :-2] -= 0.5 * ggx
        acc[2:, 1:-1] += 0.5 * ggy
        acc[:-2, 1:-1] -= 0.5 * ggy
        # fold the replicated border back onto the edge pixels
        acc[1, :] += acc[0, :]
        acc[-2, :] += acc[-1, :]
        acc[:, 1] += acc[:, 0]
        acc[:, -2] += acc[:, -1]
        _accum(x, acc[1:-1, 1:-1])

    out.bwd = bwd
    return out


_NCC_EPS = 1e-8


def ncc_arrays(region, template):
    """Dense NCC of `template` over `region`, valid positions only.

    Both are single planes. Per window: mean-subtracted, variance-normalized;
    an epsilon in the denominator keeps zero-variance windows finite.
    """
    th, tw = template.shape
    tz = template - template.mean()
    tnorm = np.sqrt(np.sum(tz * tz))
    if tnorm < 1e-8:
        raise ValueError("template has (near-)zero variance")
    n = th * tw
    win = sliding_window_view(region, (th, tw))
    cross = np.einsum("ijhw,hw->ij", win, tz, optimize=True)
    s1 = win.sum(axis=(2, 3))
    s2 = np.einsum("ijhw,ijhw->ij", win, win, optimize=True)
    varw = np.maximum(s2 - s1 * s1 / n, 0.0)
    denom = np.sqrt(varw + _NCC_EPS) * tnorm
    return cross / denom, (tz, tnorm, n, cross, s1, varw, denom)


def ncc(region, template):
    """Taped NCC response; differentiable w.r.t. the region."""
    region = _as_var(region)
    template = np.asarray(template, dtype=np.float64)
    resp, (tz, tnorm, n, cross, s1, varw, denom) = ncc_arrays(region.value, template)
    out = Var(resp, (region,))
    th, tw = template.shape

    def bwd(g):
        # d resp/d r[p] = tz/denom - resp * (r[p] - mean_w) / (varw + eps)
        a = g * resp / (varw + _NCC_EPS)
        meanw = s1 / n
        t1 = conv2d_transpose_arrays((g / denom)[None], tz[None, None], None)[0]
        box = conv2d_transpose_arrays(a[None], np.ones((1, 1, th, tw)), None)[0]
        boxm = conv2d_transpose_arrays((a * meanw)[None],
                                       np.ones((1, 1, th, tw)), None)[0]
        _accum(region, t1 - region.value * box + boxm)

    out.bwd = bwd
    return out


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(build, params, eps=1e-3):
    """Compare analytic gradients of `build` against central differences.

    build(list_of_vars) must return a scalar loss Var. `params` is a list of
    ndarrays small enough for exhaustive probing. Returns the max over all
    elements of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    tape = Tape()
    pvars = [tape.param(p) for p in params]
    loss = build(pvars)
    grads = backward(tape, loss)
    analytic = [grads[v] for v in pvars]

    def eval_loss(ps):
        val = build([Var(p) for p in ps]).value
        if not np.isfinite(val):
            raise NumericFailureError("non-finite loss during FD probing")
        return float(val)

    worst = 0.0
    for k in range(len(params)):
        flat = params[k].reshape(-1)
        aflat = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = eval_loss(params)
            flat[i] = orig - eps
            lm = eval_loss(params)
            flat[i] = orig
            num = (lp - lm) / (2.0 * eps)
            a = aflat[i]
            rel = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, rel)
    return worst
