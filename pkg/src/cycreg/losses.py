"""Registration, cycle and identity losses with analytic field gradients.

Similarity is the global cross-correlation

    x (*) y = <x - mean x, y - mean y>^2 / (|x - mean x| |y - mean y|)        (as-written)
    x (*) y = <x - mean x, y - mean y>^2 / (|x - mean x|^2 |y - mean y|^2)    (normalized)

and the total objective for a pair (A, B) is

    L = R_AB + R_BA + alpha * cycle + beta * identity
    R_AB = -(warp(A, phi_AB) (*) B) + lambda * |phi_AB|_2
    cycle = |warp(warp(A, phi_AB), phi_BA) - A|_1 + |warp(warp(B, phi_BA), phi_AB) - B|_1
    identity = -(warp(A, phi_AA) (*) A) - (warp(B, phi_BB) (*) B)

All reductions use numpy's pairwise summation so repeated evaluations are
bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from cycreg.errors import DataError
from cycreg.field import displaced_stencil, warp_array

SIM_MODES = ("as-written", "normalized")
REG_MODES = ("magnitude", "gradient")


@dataclass(frozen=True)
class LossWeights:
    """``lambda_`` regularizer, ``alpha`` cycle and ``beta`` identity weights."""

    lambda_: float = 3e-3
    alpha: float = 1e-5
    beta: float = 0.5

    def __post_init__(self):
        for name in ("lambda_", "alpha", "beta"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name.rstrip('_')} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)

    def to_dict(self) -> dict:
        return {"lambda": self.lambda_, "alpha": self.alpha, "beta": self.beta}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        unknown = set(d) - {"lambda", "alpha", "beta"}
        if unknown:
            raise ValueError(f"unknown weight keys {sorted(unknown)}")
        return cls(d.get("lambda", cls.lambda_), d.get("alpha", cls.alpha),
                   d.get("beta", cls.beta))


@dataclass(frozen=True)
class LossBreakdown:
    regist_ab: float
    regist_ba: float
    cycle: float
    identity: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def _check_mode(mode):
    if mode not in SIM_MODES:
        raise ValueError(f"sim mode must be one of {SIM_MODES}, got {mode!r}")


def _cc_value_grad(x: np.ndarray, y: np.ndarray, mode: str, grad: bool = True):
    """Cross-correlation of ``x`` with ``y`` and its derivative with respect to ``x``."""
    _check_mode(mode)
    if x.shape != y.shape:
        raise DataError(f"dims mismatch: {x.shape} vs {y.shape}")
    xc = x - np.mean(x)
    yc = y - np.mean(y)
    xx = np.sum(xc * xc)
    yy = np.sum(yc * yc)
    if not (xx > 0 and yy > 0):
        raise DataError("cross-correlation undefined for a constant volume")
    s = np.sum(xc * yc)
    if mode == "normalized":
        denom = xx * yy
        value = s * s / denom
        dx = (2 * s / denom) * yc - (2 * value / xx) * xc if grad else None
    else:
        denom = math.sqrt(xx) * math.sqrt(yy)
        value = s * s / denom
        dx = (2 * s / denom) * yc - (value / xx) * xc if grad else None
    return float(value), dx


def cross_correlation(x, y, mode: str = "normalized") -> float:
    """Global cross-correlation of two volumes (see module docstring)."""
    return _cc_value_grad(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64),
                          mode, grad=False)[0]


def _forward_diffs(f: np.ndarray):
    return [np.diff(f, axis=d) for d in range(3)]


def regularizer(field, reg_mode: str = "magnitude") -> float:
    """``|phi|_2`` over all components, or ``|grad phi|_2`` with forward differences."""
    f = np.asarray(field, dtype=np.float64)
    if reg_mode == "magnitude":
        return math.sqrt(np.sum(f * f))
    if reg_mode == "gradient":
        return math.sqrt(sum(np.sum(d * d) for d in _forward_diffs(f)))
    raise ValueError(f"reg mode must be one of {REG_MODES}, got {reg_mode!r}")


def _regularizer_value_grad(f: np.ndarray, reg_mode: str):
    value = regularizer(f, reg_mode)
    if value == 0:
        # subgradient 0 at the kink of the norm
        return 0.0, np.zeros_like(f)
    if reg_mode == "magnitude":
        return value, f / value
    g = np.zeros_like(f)
    for axis, d in enumerate(_forward_diffs(f)):
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        g[tuple(lo)] -= d
        g[tuple(hi)] += d
    return value, g / value


def registration_loss(moving, fixed, field, lambda_: float, mode: str = "normalized",
                      reg_mode: str = "magnitude") -> float:
    """``-(warp(moving, field) (*) fixed) + lambda * reg(field)``."""
    warped = warp_array(moving, field)
    sim = cross_correlation(warped, fixed, mode)
    return -sim + lambda_ * regularizer(field, reg_mode)


def cycle_loss(a, b, phi_ab, phi_ba) -> float:
    """l1 distance of both images from their forward-then-backward re-deformation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a_back = warp_array(warp_array(a, phi_ab), phi_ba)
    b_back = warp_array(warp_array(b, phi_ba), phi_ab)
    return float(np.sum(np.abs(a_back - a)) + np.sum(np.abs(b_back - b)))


def identity_loss(a, b, phi_aa, phi_bb, mode: str = "normalized") -> float:
    """Negative self-correlation of each image after warping by its self-field."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return (-cross_correlation(warp_array(a, phi_aa), a, mode)
            - cross_correlation(warp_array(b, phi_bb), b, mode))


def total_loss(a, b, phi_ab, phi_ba, phi_aa=None, phi_bb=None,
               weights: LossWeights = LossWeights(), mode: str = "normalized",
               reg_mode: str = "magnitude") -> LossBreakdown:
    """Weighted sum of the component losses.

    The identity term is evaluated only when both self-fields are supplied
    and is reported as 0 otherwise.
    """
    r_ab = registration_loss(a, b, phi_ab, weights.lambda_, mode, reg_mode)
    r_ba = registration_loss(b, a, phi_ba, weights.lambda_, mode, reg_mode)
    cyc = cycle_loss(a, b, phi_ab, phi_ba)
    if phi_aa is not None and phi_bb is not None:
        ident = identity_loss(a, b, phi_aa, phi_bb, mode)
    else:
        ident = 0.0
    total = r_ab + r_ba + weights.alpha * cyc + weights.beta * ident
    return LossBreakdown(r_ab, r_ba, cyc, ident, total)


class _Warper:
    """Memoizes stencils and image derivatives for one objective evaluation."""

    def __init__(self):
        self._stencils = {}
        self._grads = {}

    def stencil(self, field):
        key = id(field)
        if key not in self._stencils:
            self._stencils[key] = (field, displaced_stencil(field))
        return self._stencils[key][1]

    def image_grad(self, image, field):
        key = (id(image), id(field))
        if key not in self._grads:
            self._grads[key] = (image, field, self.stencil(field).sample_gradient(image))
        return self._grads[key][2]


def objective(a, b, phi_ab, phi_ba, phi_aa=None, phi_bb=None,
              weights: LossWeights = LossWeights(), mode: str = "normalized",
              reg_mode: str = "magnitude", with_grad: bool = True):
    """Evaluate the total loss and, optionally, its gradient for every field.

    Returns ``(breakdown, grads)`` where ``grads`` is a dict keyed by
    ``"phi_ab"``, ``"phi_ba"`` and, when self-fields are given, ``"phi_aa"``
    and ``"phi_bb"``.  Gradients of the l1 and norm terms use the zero
    subgradient at their kinks.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    fields = {"phi_ab": np.asarray(phi_ab, dtype=np.float64),
              "phi_ba": np.asarray(phi_ba, dtype=np.float64)}
    with_identity = phi_aa is not None and phi_bb is not None
    if with_identity:
        fields["phi_aa"] = np.asarray(phi_aa, dtype=np.float64)
        fields["phi_bb"] = np.asarray(phi_bb, dtype=np.float64)
    for name, f in fields.items():
        if f.shape != (*a.shape, 3) or b.shape != a.shape:
            raise DataError(f"dims mismatch: a {a.shape}, b {b.shape}, {name} {f.shape[:3]}")
    w = _Warper()
    grads = {k: np.zeros_like(v) for k, v in fields.items()} if with_grad else None

    def similarity(moving, fixed, name, sign):
        stencil = w.stencil(fields[name])
        warped = stencil.sample(moving)
        value, d = _cc_value_grad(warped, fixed, mode, with_grad)
        if with_grad:
            grads[name] += (sign * d)[..., None] * w.image_grad(moving, fields[name])
        return value

    r = {}
    for name, moving, fixed in (("phi_ab", a, b), ("phi_ba", b, a)):
        sim = similarity(moving, fixed, name, -1.0)
        reg, dreg = _regularizer_value_grad(fields[name], reg_mode)
        r[name] = -sim + weights.lambda_ * reg
        if with_grad:
            grads[name] += weights.lambda_ * dreg

    cyc = 0.0
    for img, first, second in ((a, "phi_ab", "phi_ba"), (b, "phi_ba", "phi_ab")):
        s1, s2 = w.stencil(fields[first]), w.stencil(fields[second])
        mid = s1.sample(img)
        back = s2.sample(mid)
        resid = back - img
        cyc += float(np.sum(np.abs(resid)))
        if with_grad and weights.alpha:
            g = weights.alpha * np.sign(resid)
            grads[second] += g[..., None] * s2.sample_gradient(mid)
            grads[first] += s2.splat(g)[..., None] * w.image_grad(img, fields[first])

    ident = 0.0
    if with_identity:
        ident = -similarity(a, a, "phi_aa", -weights.beta) \
            - similarity(b, b, "phi_bb", -weights.beta)

    total = r["phi_ab"] + r["phi_ba"] + weights.alpha * cyc + weights.beta * ident
    return LossBreakdown(r["phi_ab"], r["phi_ba"], cyc, ident, total), grads


def total_loss_gradient(a, b, phi_ab, phi_ba, phi_aa=None, phi_bb=None,
                        weights: LossWeights = LossWeights(), mode: str = "normalized",
                        reg_mode: str = "magnitude") -> dict:
    """Analytic gradient of :func:`total_loss` with respect to every field."""
    return objective(a, b, phi_ab, phi_ba, phi_aa, phi_bb, weights, mode, reg_mode)[1]
