"""Metrics, equivariance measurement, certification of the upsampling result and the scale sweep."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .layers import (
    FilterBank,
    NormState,
    Operator,
    concat_operator,
    correlation_operator,
    identity_operator,
    max_scale_operator,
    multiplied_action,
    naive_pool_operator,
    norm_operator,
    relu_operator,
    subsample_operator,
    upsample,
    upsample_operator,
    _shift_and,
)
from .lifting import (
    gaussian_blur,
    gaussian_kernel,
    gaussian_lift,
    level_sigma,
    lifted_action,
    max_project,
    plane_rescale,
    plane_subsample_action,
)
from .models import Model, predict_labels, required_padding
from .rng import make_rng

log = logging.getLogger(__name__)

SWEEP_EXPONENTS = tuple(range(-4, 5))
EXACT_TOL = {"f64": 1e-12, "f32": 1e-5}


def default_scales():
    """``2**(i/2)`` for ``i = -4..4``."""
    return [2.0 ** (i / 2) for i in SWEEP_EXPONENTS]


# ---------------------------------------------------------------- IoU


def iou(pred: np.ndarray, target: np.ndarray, num_classes: int):
    """Per-class IoU (NaN where the union is empty) and their mean over present classes."""
    p = np.asarray(pred).ravel()
    t = np.asarray(target).ravel()
    if p.shape != t.shape:
        raise ValueError("prediction and target extents differ")
    k = num_classes
    conf = np.bincount(t.astype(np.int64) * k + p.astype(np.int64), minlength=k * k).reshape(k, k)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - np.diag(conf)
    per = np.full(k, np.nan)
    nz = union > 0
    per[nz] = inter[nz] / union[nz]
    mean = float(np.nanmean(per)) if nz.any() else float("nan")
    return per, mean


def mean_iou(pred, target, num_classes: int) -> float:
    return iou(pred, target, num_classes)[1]


# ---------------------------------------------------------------- prediction at any extent


def _labeller(model):
    if isinstance(model, Model):
        return lambda x: predict_any_extent(model, x)
    return model


def predict_any_extent(model: Model, images: np.ndarray, chunk: int | None = None) -> np.ndarray:
    """Argmax labels; inputs are edge-padded to a multiple of ``2**height`` and the padding cropped off."""
    x = np.asarray(images)
    h, w = x.shape[1:3]
    ph, pw = required_padding(h, w, model.config.height)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge")
    return predict_labels(model, x, chunk)[:, :h, :w]


def consistency(model, image: np.ndarray, s: float, base_labels: np.ndarray | None = None) -> float:
    """Fraction of pixels where labelling the ``1/s``-rescaled image agrees with rescaling the labels.

    ``model`` is a :class:`Model` or any callable mapping ``(N, H, W, C)``
    images to ``(N, H, W)`` labels. Padding added for the model never enters
    the comparison.
    """
    if s <= 0:
        raise ValueError("scale must be positive")
    label = _labeller(model)
    img = np.asarray(image)
    batch = img if img.ndim == 4 else img[None]
    if base_labels is None:
        base_labels = label(batch)
    base_labels = base_labels if base_labels.ndim == 3 else base_labels[None]
    a = label(plane_rescale(batch, 1.0 / s, "bilinear").astype(batch.dtype))
    b = plane_rescale(base_labels[..., None], 1.0 / s, "nearest")[..., 0]
    return float(np.mean(a == b))


# ---------------------------------------------------------------- equivariance errors


def _act(kind: str, g, x, gamma: int):
    if kind == "lifted":
        return lifted_action(g, x, gamma)
    return plane_subsample_action(g, x, gamma)


def _act_mask(kind: str, g, m: np.ndarray, gamma: int):
    return _act(kind, g, m[..., None], gamma)[..., 0]


def _mask_shape(kind: str, x):
    return x.shape[-4:-1] if kind == "lifted" else x.shape[-3:-1]


def _crop(mask, extents):
    return mask[tuple(slice(0, e) for e in extents)]


def erode(mask: np.ndarray, margin: int) -> np.ndarray:
    if margin <= 0:
        return mask
    r = np.arange(-margin, margin + 1)
    offs = np.stack(np.meshgrid(r, r, indexing="ij"), -1).reshape(-1, 2)
    return _shift_and(mask, offs)


@dataclass
class EquivarianceRow:
    op: str
    k: int
    z_row: int
    z_col: int
    rel_error: float
    exact: bool
    region: str = ""


def equivariance_error(op: Operator, f: np.ndarray, g, gamma: int = 2, margins: int = 0, detail: bool = False):
    """Relative L2 gap between ``op(g . f)`` and ``g' . op(f)`` over the valid region.

    ``g'`` is ``op.out_action(g)``. The region is the intersection of both
    sides' valid masks, derived from operator metadata, further eroded by
    ``margins`` pixels.
    """
    f = np.asarray(f)
    g = (int(g[0]), (int(g[1][0]), int(g[1][1])))
    g_out = op.out_action(g)
    rhs = _act(op.codomain, g_out, op(f), gamma)
    rhs_mask = _act_mask(op.codomain, g_out, op.valid(np.ones(_mask_shape(op.domain, f), dtype=bool)), gamma)
    fa = _act(op.domain, g, f, gamma)
    lhs = op(fa)
    lhs_mask = op.valid(np.ones(_mask_shape(op.domain, fa), dtype=bool))
    ext = tuple(min(a, b, c, d) for a, b, c, d in zip(lhs_mask.shape, rhs_mask.shape,
                                                      _mask_shape(op.codomain, lhs), _mask_shape(op.codomain, rhs)))
    mask = erode(_crop(lhs_mask, ext) & _crop(rhs_mask, ext), margins)
    region = f"{'x'.join(map(str, ext))}, {int(mask.sum())} valid sites"
    if not mask.any():
        raise ValueError(f"empty valid region for {op.name} under g={g} (common extent {ext}, margin {margins})")
    lhs_c = _crop_values(lhs, ext)
    rhs_c = _crop_values(rhs, ext)
    sel = mask[..., None]
    diff = np.where(sel, lhs_c - rhs_c, 0.0)
    ref = np.where(sel, rhs_c, 0.0)
    err = float(np.linalg.norm(diff.ravel()) / (np.linalg.norm(ref.ravel()) + 1e-12))
    return (err, region) if detail else err


def _crop_values(x, ext):
    x = np.asarray(x)
    idx = (Ellipsis,) + tuple(slice(0, e) for e in ext) + (slice(None),)
    return x[idx]


# -- operators on the plane/lifted boundary


def lift_operator(num_scales: int, gamma: int = 2, base_sigma: float = 1.0, level0: str = "sigma0") -> Operator:
    def fn(x):
        return gaussian_lift(x, num_scales, gamma, base_sigma, level0).values

    def valid(mask):
        levels = []
        for s in range(num_scales):
            r = len(gaussian_kernel(level_sigma(s, gamma, base_sigma, level0))) // 2
            levels.append(erode(mask, r))
        return np.stack(levels)

    return Operator("gaussian_lift", fn, valid, False, domain="plane", codomain="lifted")


def projection_operator() -> Operator:
    return Operator("max_project", max_project, lambda m: m.all(axis=0), False, codomain="plane")


# ---------------------------------------------------------------- Proposition 1 and the counter-example


@dataclass
class Prop1Result:
    t: int
    m: int
    k: int
    mode: str
    trials: int
    max_error: float
    passed: bool
    counterexample_detected: bool
    counterexample_error: float
    notes: list = field(default_factory=list)


def upsampled_signal(f0: np.ndarray, t: int, m: int, mode: str) -> np.ndarray:
    """``U^m f0`` cropped to the last anchor, so no clamped border remains."""
    f = f0
    for _ in range(m):
        f = upsample(f, t, mode)
    h, w = f0.shape[-3], f0.shape[-2]
    return np.ascontiguousarray(f[..., : t**m * (h - 1) + 1, : t**m * (w - 1) + 1, :])


def prop1_gap(f: np.ndarray, k: int, x, t: int, mode: str, gamma: int = 2) -> float:
    """Relative sup gap between ``U R_(k,x) f`` and ``R_(k, t x) U f`` on the interpolated region."""
    left_in = lifted_action((k, x), f, gamma)
    left = upsample(left_in, t, mode)
    right = lifted_action(multiplied_action((k, x), t), upsample(f, t, mode), gamma)
    # keep rows/cols up to the last anchor of the left-hand upsampling
    rows = min(t * (left_in.shape[-3] - 1) + 1, right.shape[-3])
    cols = min(t * (left_in.shape[-2] - 1) + 1, right.shape[-2])
    a = left[..., :rows, :cols, :]
    b = right[..., :rows, :cols, :]
    return float(np.abs(a - b).max() / (np.abs(b).max() + 1e-300))


def appendix_b_pair(k: int, shape, rng: np.random.Generator, gamma: int = 2):
    """Two lifted signals that agree exactly on the ``gamma**k`` sub-grid and differ elsewhere."""
    f1 = rng.uniform(-1, 1, size=shape)
    f2 = f1 + rng.uniform(0.5, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    step = gamma**k
    f2[..., ::step, ::step, :] = f1[..., ::step, ::step, :]
    return f1, f2


def certify_proposition1(t: int = 2, m: int = 2, k: int = 1, trials: int = 10, mode: str = "nearest",
                         rng: np.random.Generator | int = 0, base: int = 5, gamma: int = 2) -> Prop1Result:
    """Check ``U R_(k,x) f = R_(k, t x) U f`` for ``f = U^m f0`` and run the counter-example.

    Translations are drawn from ``gamma**m Z^2``: for other translations the
    identity can fail in nearest mode even when ``k <= m``. With ``m < k`` the
    hypothesis is violated and only the counter-example part is meaningful.
    """
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng), "prop1", t, m, k, mode)
    tol = 0.0 if mode == "nearest" else 1e-6
    notes = []
    worst = 0.0
    hyp = k <= m
    if hyp:
        for _ in range(trials):
            f0 = rng.uniform(-1, 1, size=(k + 2, base, base, 2))
            f = upsampled_signal(f0, t, m, mode)
            step = gamma**m
            cells = max(1, (f.shape[-3] - 1) // step)
            x = tuple(int(v) * step for v in rng.integers(0, min(2, cells), size=2))
            worst = max(worst, prop1_gap(f, k, x, t, mode, gamma))
    else:
        notes.append(f"hypothesis k <= m violated (k={k}, m={m}); equality not asserted")

    # counter-example: l = k, x = 0, upsampling factor gamma**k
    f1, f2 = appendix_b_pair(k, (k + 2, 4 * gamma**k, 4 * gamma**k, 2), rng, gamma)
    up = gamma**k
    g = (k, (0, 0))
    ur = [upsample(lifted_action(g, fi, gamma), up, mode) for fi in (f1, f2)]
    ru = [lifted_action(multiplied_action(g, up), upsample(fi, up, mode), gamma) for fi in (f1, f2)]
    same_ur = np.array_equal(ur[0], ur[1])
    diff_ru = not np.array_equal(ru[0], ru[1])
    cex_err = max(prop1_gap(fi, k, (0, 0), up, mode, gamma) for fi in (f1, f2))
    detected = bool(same_ur and diff_ru and cex_err > 0)
    if not detected:
        notes.append("counter-example inequality not detected")
    passed = (worst <= tol) if hyp else True
    return Prop1Result(t, m, k, mode, trials if hyp else 0, worst, bool(passed and detected), detected, cex_err, notes)


# ---------------------------------------------------------------- equivariance report


def _random_bank(rng, cin, cout, ks, dtype, size=3):
    return FilterBank.init(rng, cin, cout, size=size, scale_depth=ks, dtype=dtype)


def exact_suite(rng: np.random.Generator, dtype, channels: int = 2, gamma: int = 2):
    """Operators expected to be exactly equivariant, plus two compositions."""
    bank1 = _random_bank(rng, channels, 3, 1, dtype)
    bank2 = _random_bank(rng, channels, 3, 2, dtype)
    bank3 = _random_bank(rng, 3, 2, 1, dtype)
    st = NormState(channels, running_mean=rng.normal(size=channels), running_var=rng.uniform(0.5, 2, channels))
    norm = norm_operator(rng.normal(size=channels).astype(dtype), rng.normal(size=channels).astype(dtype), st)
    corr1 = correlation_operator(bank1, gamma)
    corr2 = correlation_operator(bank2, gamma)
    ops = [
        identity_operator(),
        corr1,
        corr2,
        subsample_operator(2),
        norm,
        relu_operator(),
        concat_operator(identity_operator(), relu_operator()),
        norm.then(relu_operator()).then(correlation_operator(bank1, gamma)).then(relu_operator()),
        corr1.then(relu_operator()).then(subsample_operator(2)).then(correlation_operator(bank3, gamma)),
    ]
    return ops


def equivariance_report(precision: str = "f64", seed: int = 0, trials: int = 3, extent: int = 48,
                        num_scales: int = 4, gamma: int = 2):
    """Measure every operator family under a few random actions.

    Returns ``(rows, prop1_results)``. A row is classified exact when its
    error is within the precision's exactness tolerance.
    """
    dtype = np.float64 if precision == "f64" else np.float32
    tol = EXACT_TOL[precision]
    rng = make_rng(seed, "equivariance", precision)
    rows = []

    def record(op, f, g, margins=0):
        err, region = equivariance_error(op, f, g, gamma, margins, detail=True)
        rows.append(EquivarianceRow(op.name, g[0], g[1][0], g[1][1], err, err <= tol, region))

    for _ in range(trials):
        f = rng.uniform(-1, 1, size=(num_scales, extent, extent, 2)).astype(dtype)
        for op in exact_suite(rng, dtype, 2, gamma):
            for k in (0, 1, 2):
                z = tuple(int(v) for v in 2 * rng.integers(0, 3, size=2))
                record(op, f, (k, z))

    # approximate / non-equivariant families
    plane = gaussian_blur(rng.uniform(-1, 1, size=(2 * extent, 2 * extent, 1)), 2.0).astype(dtype)
    lift = lift_operator(num_scales, gamma)
    for k in (1, 2):
        record(lift, plane, (k, (0, 0)))
    lifted = rng.uniform(-1, 1, size=(num_scales, extent, extent, 2)).astype(dtype)
    record(projection_operator(), lifted, (1, (0, 0)))
    record(max_scale_operator(1, 2, gamma), lifted, (1, (0, 0)))
    board = checkerboard(num_scales, extent, dtype)
    record(naive_pool_operator(2), board, (1, (0, 0)))
    f1, _ = appendix_b_pair(1, (num_scales, extent, extent, 2), rng, gamma)
    record(upsample_operator(2, "bilinear"), f1.astype(dtype), (1, (1, 1)))
    record(upsample_operator(2, "nearest"), f1.astype(dtype), (1, (1, 1)))

    props = [
        certify_proposition1(2, 2, 1, 5, "nearest", make_rng(seed, "p1a")),
        certify_proposition1(2, 2, 1, 5, "bilinear", make_rng(seed, "p1b")),
        certify_proposition1(2, 3, 3, 3, "nearest", make_rng(seed, "p1c")),
        certify_proposition1(2, 0, 1, 1, "nearest", make_rng(seed, "p1d")),
    ]
    return rows, props


def checkerboard(num_scales: int, extent: int, dtype=np.float64, period: int = 2):
    """High-frequency pattern on every scale; defeats per-scale max-pooling equivariance."""
    i, j = np.mgrid[0:extent, 0:extent]
    board = (((i // (period // 2)) + (j // (period // 2))) % 2).astype(dtype)
    board = board * np.where((i // 3) % 2 == 0, 1.0, 0.5)
    return np.repeat(board[None, :, :, None], num_scales, axis=0)


def equivariance_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["op", "k", "z_row", "z_col", "rel_error", "exact"])
    for r in rows:
        wr.writerow([r.op, r.k, r.z_row, r.z_col, f"{r.rel_error:.6e}", "true" if r.exact else "false"])
    return buf.getvalue()


def prop1_csv(results) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["t", "m", "k", "mode", "trials", "max_error", "counterexample_error", "counterexample", "passed"])
    for r in results:
        wr.writerow([r.t, r.m, r.k, r.mode, r.trials, f"{r.max_error:.6e}", f"{r.counterexample_error:.6e}",
                     "detected" if r.counterexample_detected else "missed", "true" if r.passed else "false"])
    return buf.getvalue()


# ---------------------------------------------------------------- scale sweep


@dataclass
class ScaleSweepReport:
    model: str
    scales: list
    miou: list
    consistency: list
    n: list
    margins: str = "padding cropped; full image compared"

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["scale", "miou", "consistency", "n"])
        for s, a, c, n in zip(self.scales, self.miou, self.consistency, self.n):
            wr.writerow([f"{s:.6f}", f"{a:.6f}", f"{c:.6f}", n])
        return buf.getvalue()

    def at(self, s: float):
        i = int(np.argmin([abs(math.log2(v) - math.log2(s)) for v in self.scales]))
        return self.miou[i], self.consistency[i]

    @classmethod
    def from_csv(cls, text: str, model: str = ""):
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(model, [float(r["scale"]) for r in rows], [float(r["miou"]) for r in rows],
                   [float(r["consistency"]) for r in rows], [int(r["n"]) for r in rows])


def scale_sweep(model, images: np.ndarray, masks: np.ndarray, num_classes: int, scales=None, name: str = "model",
                chunk: int | None = None) -> ScaleSweepReport:
    """Rescale the test set by each ``s`` and score IoU and consistency.

    Consistency at ``s`` compares the labels of the ``s``-rescaled image with
    the nearest-rescaled labels of the original image.
    """
    if len(images) == 0:
        raise ValueError("empty test set")
    scales = default_scales() if scales is None else list(scales)
    label = (lambda x: predict_any_extent(model, x, chunk)) if isinstance(model, Model) else model
    x = np.asarray(images)
    y = np.asarray(masks)
    base = label(x)
    rep = ScaleSweepReport(name, [], [], [], [])
    for s in scales:
        xs = plane_rescale(x, s, "bilinear").astype(x.dtype) if s != 1 else x
        ys = plane_rescale(y[..., None], s, "nearest")[..., 0] if s != 1 else y
        pred = label(xs) if s != 1 else base
        bs = plane_rescale(base[..., None], s, "nearest")[..., 0] if s != 1 else base
        ious = [mean_iou(p, t, num_classes) for p, t in zip(pred, ys)]
        rep.scales.append(float(s))
        rep.miou.append(float(np.nanmean(ious)))
        rep.consistency.append(float(np.mean(pred == bs)))
        rep.n.append(int(len(x)))
        log.info("%s: scale %.3f miou %.4f consistency %.4f", name, s, rep.miou[-1], rep.consistency[-1])
    return rep


def jitter_effect(plain: ScaleSweepReport, jittered: ScaleSweepReport, threshold: float = 0.02):
    """Loss of mean IoU at scale 1 caused by jitter augmentation, and whether it clears ``threshold``."""
    a = plain.at(1.0)[0]
    b = jittered.at(1.0)[0]
    drop = a - b
    return {
        "miou_plain_s1": a,
        "miou_jitter_s1": b,
        "drop": drop,
        "threshold": threshold,
        "phenomenon": "present" if drop >= threshold else "absent at desk scale",
    }


# ---------------------------------------------------------------- SVG


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def sweep_svg(reports, metric: str = "miou", width: int = 560, height: int = 360) -> str:
    """Self-contained SVG line plot of ``metric`` against log2(scale), one series per report."""
    left, right, top, bottom = 60, 150, 30, 50
    pw, ph = width - left - right, height - top - bottom
    xs_all = [math.log2(s) for r in reports for s in r.scales]
    xmin, xmax = (min(xs_all), max(xs_all)) if xs_all else (-2, 2)
    if xmax == xmin:
        xmin, xmax = xmin - 1, xmax + 1

    def px(v):
        return left + (v - xmin) / (xmax - xmin) * pw

    def py(v):
        return top + (1 - v) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="14">'
        f"{metric} vs log2(scale)</text>",
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for i in range(6):
        v = i / 5
        out.append(f'<line x1="{left - 4}" y1="{py(v):.1f}" x2="{left}" y2="{py(v):.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{py(v) + 4:.1f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">{v:.1f}</text>')
    for e in range(int(math.floor(xmin)), int(math.ceil(xmax)) + 1):
        out.append(f'<line x1="{px(e):.1f}" y1="{top + ph}" x2="{px(e):.1f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{px(e):.1f}" y="{top + ph + 18}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11">{e}</text>')
    for idx, r in enumerate(reports):
        colour = _PALETTE[idx % len(_PALETTE)]
        vals = getattr(r, metric)
        pts = " ".join(f"{px(math.log2(s)):.1f},{py(v):.1f}" for s, v in zip(r.scales, vals) if not math.isnan(v))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="2"/>')
        for s, v in zip(r.scales, vals):
            if not math.isnan(v):
                out.append(f'<circle cx="{px(math.log2(s)):.1f}" cy="{py(v):.1f}" r="3" fill="{colour}"/>')
        ly = top + 16 * idx + 8
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" stroke="{colour}" '
                   'stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 36}" y="{ly + 4}" font-family="sans-serif" font-size="11">'
                   f"{_escape(r.model)}</text>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
