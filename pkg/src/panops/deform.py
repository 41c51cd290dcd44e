"""Deformable sampling operators: forward evaluation, analytic gradients, tracing.

The family shares one computation: at every output pixel p, sample the input
at kernel taps displaced by learned per-pixel offsets, weight each sample,
and accumulate. The variants differ in what multiplies each sample:

  v1  per-tap scalar weight, single group
  v2  v1 plus a per-tap, per-pixel modulation factor
  v3  channel groups; one scalar weight per group, modulation per (group, tap)
  v4  identical expression to v3 (kept as a separate name)
  dao v3 output gated by a salience score computed from that same output

Tensors are float32 at rest; every kernel here accumulates in float64 and
casts once at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .salience import salient_map
from .tensor import Tensor

VARIANTS = ("v1", "v2", "v3")


@dataclass(frozen=True)
class DeformParams:
    """Static configuration of a deformable operator.

    weights holds one scalar per kernel tap (K = kh*kw values, shared by all
    channels) for v1/v2, or one scalar per channel group (G values) for the
    grouped v3 form.
    """

    kernel: tuple[int, int]
    weights: np.ndarray
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        k = self.kernel
        if isinstance(k, int):
            k = (k, k)
        k = (int(k[0]), int(k[1]))
        if k[0] < 1 or k[1] < 1 or k[0] % 2 == 0 or k[1] % 2 == 0:
            raise ValueError(f"kernel dimensions must be odd and positive, got {k}")
        object.__setattr__(self, "kernel", k)
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError(f"weights must be a non-empty 1-D vector, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        if not isinstance(self.dilation, int) or self.dilation < 1:
            raise ValueError(f"dilation must be an integer >= 1, got {self.dilation}")
        if not isinstance(self.groups, int) or self.groups < 1:
            raise ValueError(f"groups must be an integer >= 1, got {self.groups}")

    @property
    def taps(self) -> int:
        return self.kernel[0] * self.kernel[1]

    def base_offsets(self) -> np.ndarray:
        """(K, 2) array of (dy, dx) regular-grid tap displacements, row-major."""
        kh, kw = self.kernel
        grid = [(self.dilation * (i - kh // 2), self.dilation * (j - kw // 2))
                for i in range(kh) for j in range(kw)]
        return np.array(grid, dtype=np.float64)


# Offset fields store (dy, dx) channel pairs, group-major then tap-major:
# channel 2*(g*K + k) is dy, channel 2*(g*K + k) + 1 is dx. Modulation fields
# store one channel per (group, tap) in the same order.


def _corners(h, w, qy, qx):
    """Bilinear cell corners for fractional coordinates.

    Coordinates are clipped to +-(dim + 1) before flooring; that range change
    never alters which corners are in bounds, and it keeps the int cast safe
    for arbitrarily large offsets. Floor-based cells mean derivatives across
    an integer line take the right-sided limit.
    """
    qy = np.clip(qy, -(h + 1.0), h + 1.0)
    qx = np.clip(qx, -(w + 1.0), w + 1.0)
    y0 = np.floor(qy).astype(np.int64)
    x0 = np.floor(qx).astype(np.int64)
    dy = qy - y0
    dx = qx - x0
    cells = []
    for yy in (y0, y0 + 1):
        for xx in (x0, x0 + 1):
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            cells.append((np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1), ok))
    return dy, dx, cells


def _corner_values(planes, dy, dx, cells):
    """Masked corner values (C, ...) for each of the 4 cell corners, zero fill."""
    vals = []
    for yc, xc, ok in cells:
        vals.append(planes[:, yc, xc] * ok)
    return vals


def _tap_coords(params, off_batch, G, h, w):
    """Absolute sample coordinates (G, K, h, w) for one batch item."""
    K = params.taps
    base = params.base_offsets()
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    ob = off_batch.reshape(G, K, 2, h, w)
    qy = rows + base[:, 0][:, None, None] + ob[:, :, 0]
    qx = cols + base[:, 1][:, None, None] + ob[:, :, 1]
    return qy, qx


def _check_inputs(op, x, params, offsets, modulation, G, need_mod):
    for name, t in (("input", x), ("offsets", offsets)):
        if not isinstance(t, Tensor):
            raise TypeError(f"{op}: {name} must be a Tensor, got {type(t).__name__}")
    n, c, h, w = x.shape
    K = params.taps
    if c % G != 0:
        raise ValueError(f"{op}: {c} channels not divisible by {G} groups")
    expect = (n, 2 * K * G, h, w)
    if offsets.shape != expect:
        raise ValueError(f"{op}: offset field shape {offsets.shape}, expected {expect}")
    if need_mod:
        if not isinstance(modulation, Tensor):
            raise TypeError(f"{op}: modulation must be a Tensor, got {type(modulation).__name__}")
        expect_m = (n, K * G, h, w)
        if modulation.shape != expect_m:
            raise ValueError(f"{op}: modulation field shape {modulation.shape}, expected {expect_m}")
    elif modulation is not None:
        raise ValueError(f"{op}: this variant takes no modulation field")


def _forward_core(x, params, offsets, modulation, w_gk, G):
    n, c, h, w = x.shape
    K = params.taps
    cg = c // G
    xd = x.data.astype(np.float64)
    offd = offsets.data.astype(np.float64)
    modd = None if modulation is None else modulation.data.astype(np.float64)

    out = np.empty((n, c, h, w), dtype=np.float64)
    for b in range(n):
        qy, qx = _tap_coords(params, offd[b], G, h, w)
        mb = None if modd is None else modd[b].reshape(G, K, h, w)
        for g in range(G):
            planes = xd[b, g * cg:(g + 1) * cg]
            dy, dx, cells = _corners(h, w, qy[g], qx[g])
            v00, v01, v10, v11 = _corner_values(planes, dy, dx, cells)
            sampled = ((1 - dy) * (1 - dx) * v00 + (1 - dy) * dx * v01
                       + dy * (1 - dx) * v10 + dy * dx * v11)
            coeff = w_gk[g][:, None, None]
            if mb is not None:
                coeff = coeff * mb[g]
            out[b, g * cg:(g + 1) * cg] = (sampled * coeff).sum(axis=1)
    return Tensor(out.astype(np.float32))


def _variant_weights(op, params, G, per_tap):
    K = params.taps
    if per_tap:
        if params.weights.shape != (K,):
            raise ValueError(f"{op}: weights must have one value per tap "
                             f"({K}), got {params.weights.shape}")
        return params.weights[None, :]
    if params.weights.shape != (G,):
        raise ValueError(f"{op}: weights must have one value per group "
                         f"({G}), got {params.weights.shape}")
    return np.repeat(params.weights[:, None], K, axis=1)


def dcn_forward(x: Tensor, params: DeformParams, offsets: Tensor) -> Tensor:
    """v1: per-tap weights, no modulation, single group."""
    if params.groups != 1:
        raise ValueError("dcn: grouped channels require the v3 operator")
    _check_inputs("dcn", x, params, offsets, None, 1, need_mod=False)
    w_gk = _variant_weights("dcn", params, 1, per_tap=True)
    return _forward_core(x, params, offsets, None, w_gk, 1)


def dcnv2_forward(x: Tensor, params: DeformParams, offsets: Tensor,
                  modulation: Tensor) -> Tensor:
    """v2: per-tap weights scaled by a per-pixel modulation field."""
    if params.groups != 1:
        raise ValueError("dcnv2: grouped channels require the v3 operator")
    _check_inputs("dcnv2", x, params, offsets, modulation, 1, need_mod=True)
    w_gk = _variant_weights("dcnv2", params, 1, per_tap=True)
    return _forward_core(x, params, offsets, modulation, w_gk, 1)


def dcnv3_forward(x: Tensor, params: DeformParams, offsets: Tensor,
                  modulation: Tensor) -> Tensor:
    """v3: channel groups with per-group weights and per-(group, tap) modulation."""
    G = params.groups
    _check_inputs("dcnv3", x, params, offsets, modulation, G, need_mod=True)
    w_gk = _variant_weights("dcnv3", params, G, per_tap=False)
    return _forward_core(x, params, offsets, modulation, w_gk, G)


# Same expression as v3; kept as its own name so call sites can say which
# operator generation they mean.
dcnv4_forward = dcnv3_forward


def dao_forward(x: Tensor, params: DeformParams, offsets: Tensor,
                modulation: Tensor, salience_kernel: int = 3) -> tuple[Tensor, Tensor]:
    """Deformable aggregation with a salience gate.

    Runs the v3 operator, scores its output with salient_map, and multiplies
    the output by the score pixelwise (broadcast over channels). Returns
    (gated output, salient map). The gate is a forward-only rescaling; the
    analytic backward covers v1/v2/v3 only.
    """
    inner = dcnv3_forward(x, params, offsets, modulation)
    gate = salient_map(inner, salience_kernel)
    return Tensor(gate.data * inner.data), gate


@dataclass(frozen=True)
class DeformGradients:
    """Loss gradients for every learned quantity of one operator call."""

    x: np.ndarray
    weights: np.ndarray
    offsets: np.ndarray
    modulation: np.ndarray | None


def deform_backward(variant: str, x: Tensor, params: DeformParams, offsets: Tensor,
                    modulation: Tensor | None, upstream: Tensor) -> DeformGradients:
    """Analytic gradients of sum(upstream * forward(...)) for v1/v2/v3.

    Offset gradients use the right-sided bilinear derivative at integer
    coordinates (consistent with the forward's floor-based cells); input
    gradients scatter through the same zero-fill corners the forward read.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    per_tap = variant in ("v1", "v2")
    need_mod = variant in ("v2", "v3")
    G = 1 if per_tap else params.groups
    if per_tap and params.groups != 1:
        raise ValueError(f"{variant}: grouped channels require the v3 operator")
    _check_inputs(variant, x, params, offsets, modulation, G, need_mod=need_mod)
    w_gk = _variant_weights(variant, params, G, per_tap=per_tap)
    if not isinstance(upstream, Tensor):
        raise TypeError(f"upstream gradient must be a Tensor, got {type(upstream).__name__}")
    if upstream.shape != x.shape:
        raise ValueError(f"upstream gradient shape {upstream.shape}, expected {x.shape}")

    n, c, h, w = x.shape
    K = params.taps
    cg = c // G
    xd = x.data.astype(np.float64)
    offd = offsets.data.astype(np.float64)
    modd = None if modulation is None else modulation.data.astype(np.float64)
    up = upstream.data.astype(np.float64)

    gx = np.zeros_like(xd)
    gw_gk = np.zeros((G, K), dtype=np.float64)
    goff = np.zeros_like(offd)
    gmod = None if modd is None else np.zeros_like(modd)
    crange = np.arange(cg)[:, None, None, None]

    for b in range(n):
        qy, qx = _tap_coords(params, offd[b], G, h, w)
        mb = None if modd is None else modd[b].reshape(G, K, h, w)
        goff_b = goff[b].reshape(G, K, 2, h, w)
        gmod_b = None if gmod is None else gmod[b].reshape(G, K, h, w)
        for g in range(G):
            planes = xd[b, g * cg:(g + 1) * cg]
            dy, dx, cells = _corners(h, w, qy[g], qx[g])
            v00, v01, v10, v11 = _corner_values(planes, dy, dx, cells)
            sampled = ((1 - dy) * (1 - dx) * v00 + (1 - dy) * dx * v01
                       + dy * (1 - dx) * v10 + dy * dx * v11)
            dsdy = (1 - dx) * (v10 - v00) + dx * (v11 - v01)
            dsdx = (1 - dy) * (v01 - v00) + dy * (v11 - v10)

            gout = up[b, g * cg:(g + 1) * cg]
            m = 1.0 if mb is None else mb[g]
            coeff = w_gk[g][:, None, None] * m

            # d loss / d sampled value, per (tap, pixel), summed over channels
            gdot = np.einsum("chw,ckhw->khw", gout, sampled)
            gw_gk[g] += (m * gdot if mb is not None else gdot).sum(axis=(1, 2))
            if gmod_b is not None:
                gmod_b[g] = w_gk[g][:, None, None] * gdot

            goff_b[g, :, 0] = coeff * np.einsum("chw,ckhw->khw", gout, dsdy)
            goff_b[g, :, 1] = coeff * np.einsum("chw,ckhw->khw", gout, dsdx)

            corner_w = ((1 - dy) * (1 - dx), (1 - dy) * dx, dy * (1 - dx), dy * dx)
            gx_g = gx[b, g * cg:(g + 1) * cg]
            for (yc, xc, ok), cw in zip(cells, corner_w):
                contrib = gout[:, None] * (coeff * cw * ok)
                np.add.at(gx_g, (crange, yc[None], xc[None]), contrib)

    if per_tap:
        gweights = gw_gk[0]
    else:
        gweights = gw_gk.sum(axis=1)
    return DeformGradients(x=gx, weights=gweights, offsets=goff, modulation=gmod)


def fd_gradient(loss_fn, values, step: float) -> np.ndarray:
    """Central-difference gradient of a scalar loss at the given point.

    loss_fn receives a float64 array of the same shape as values and returns
    a scalar. One coordinate is displaced by +-step at a time.
    """
    if not (isinstance(step, (int, float)) and math.isfinite(step)) or step <= 0:
        raise ValueError(f"step must be a positive finite number, got {step}")
    theta = np.array(values, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(loss_fn(theta))
        flat[i] = orig - step
        lo = float(loss_fn(theta))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def _family_rel_err(analytic, numeric):
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale


def gradcheck(variant: str = "v3", seed: int = 0, shape=(1, 2, 5, 5), kernel: int = 3,
              dilation: int = 1, groups: int = 1, step: float = 1e-3) -> dict:
    """Compare analytic gradients against central differences on a random case.

    Draws fractional offset parts inside [0.1, 0.9] so neither the draw nor
    the +-step displacement crosses a bilinear cell boundary, where the
    derivative is only one-sided. Returns per-family relative errors
    (max abs difference over the family's max abs numeric gradient) and
    their maximum under "max_rel_err".
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    per_tap = variant in ("v1", "v2")
    need_mod = variant in ("v2", "v3")
    G = 1 if per_tap else groups
    rng = np.random.default_rng(seed)
    n, c, h, w = shape
    K = kernel * kernel

    def signed(size, lo, hi):
        return rng.uniform(lo, hi, size) * rng.choice([-1.0, 1.0], size)

    xval = rng.uniform(-1.0, 1.0, shape)
    wval = signed(K if per_tap else G, 0.4, 1.2)
    whole = rng.integers(-1, 2, (n, 2 * K * G, h, w)).astype(np.float64)
    frac = rng.uniform(0.1, 0.9, (n, 2 * K * G, h, w))
    offval = whole + frac
    modval = rng.uniform(0.2, 1.5, (n, K * G, h, w)) if need_mod else None

    def forward(xa, wa, oa, ma):
        params = DeformParams(kernel=(kernel, kernel), weights=wa,
                              dilation=dilation, groups=G)
        xt = Tensor(xa)
        ot = Tensor(oa)
        if variant == "v1":
            return dcn_forward(xt, params, ot)
        if variant == "v2":
            return dcnv2_forward(xt, params, ot, Tensor(ma))
        return dcnv3_forward(xt, params, ot, Tensor(ma))

    def loss_of(y):
        return float(np.sum(y.data, dtype=np.float64))

    params = DeformParams(kernel=(kernel, kernel), weights=wval,
                          dilation=dilation, groups=G)
    mod_t = Tensor(modval) if need_mod else None
    ones = Tensor.full(shape, 1.0)
    grads = deform_backward(variant, Tensor(xval), params, Tensor(offval), mod_t, ones)

    families = {
        "x": (grads.x, lambda t: loss_of(forward(t, wval, offval, modval))),
        "weights": (grads.weights, lambda t: loss_of(forward(xval, t, offval, modval))),
        "offsets": (grads.offsets, lambda t: loss_of(forward(xval, wval, t, modval))),
    }
    if need_mod:
        families["modulation"] = (grads.modulation,
                                  lambda t: loss_of(forward(xval, wval, offval, t)))

    report = {"variant": variant, "seed": seed, "shape": list(shape), "kernel": kernel,
              "dilation": dilation, "groups": G, "step": step}
    worst = 0.0
    for name, (analytic, fn) in families.items():
        point = {"x": xval, "weights": wval, "offsets": offval, "modulation": modval}[name]
        numeric = fd_gradient(fn, point, step)
        err = _family_rel_err(analytic, numeric)
        report[f"rel_err_{name}"] = err
        worst = max(worst, err)
    report["max_rel_err"] = worst
    return report


def trace_receptive_field(levels, anchor) -> list[tuple[float, float]]:
    """Composed sample locations of stacked deformable layers below one pixel.

    levels is a sequence of (DeformParams, OffsetField) pairs, outermost
    first: the first level is looked up at the anchor, and every point it
    produces is traced through the next level, giving K^L leaf points for
    L levels of K taps each. Offsets are read from batch 0, group 0; lookup
    positions are rounded half-up and clamped into the offset grid, except
    the anchor itself, which must lie inside the first level's grid.
    """
    levels = list(levels)
    if not levels:
        raise ValueError("need at least one level to trace")
    ay, ax = int(anchor[0]), int(anchor[1])
    h0, w0 = levels[0][1].shape[2], levels[0][1].shape[3]
    if not (0 <= ay < h0 and 0 <= ax < w0):
        raise ValueError(f"anchor ({ay}, {ax}) outside the level-1 grid {h0}x{w0}")

    points = [(float(ay), float(ax))]
    for params, offsets in levels:
        if not isinstance(params, DeformParams) or not isinstance(offsets, Tensor):
            raise TypeError("each level must be a (DeformParams, offset Tensor) pair")
        K = params.taps
        _, ch, h, w = offsets.shape
        if ch % (2 * K) != 0:
            raise ValueError(f"offset field has {ch} channels, not a multiple of {2 * K}")
        base = params.base_offsets()
        od = offsets.data
        grown = []
        for py, px in points:
            iy = min(max(math.floor(py + 0.5), 0), h - 1)
            ix = min(max(math.floor(px + 0.5), 0), w - 1)
            for k in range(K):
                grown.append((py + base[k, 0] + float(od[0, 2 * k, iy, ix]),
                              px + base[k, 1] + float(od[0, 2 * k + 1, iy, ix])))
        points = grown
    return points
