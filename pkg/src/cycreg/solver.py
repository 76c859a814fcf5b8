"""Joint coarse-to-fine optimization of the forward and backward fields."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from scipy import ndimage

from cycreg.errors import DataError, DivergenceError
from cycreg.field import DisplacementField, upsample_field
from cycreg.losses import REG_MODES, SIM_MODES, LossBreakdown, LossWeights, objective
from cycreg.volume import Volume3D, downsample_trilinear

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1e-2
    iterations_per_level: tuple = (100, 100, 50)
    pyramid_factors: tuple = ((4, 4, 4), (2, 2, 2), (1, 1, 1))
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    sim_mode: str = "normalized"
    reg_mode: str = "gradient"
    gradient_sigma: float = 2.0
    pyramid_sigma: float = 0.5

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        if isinstance(self.weights, dict):
            set_("weights", LossWeights.from_dict(self.weights))
        set_("iterations_per_level", tuple(int(n) for n in self.iterations_per_level))
        set_("pyramid_factors", tuple(tuple(int(f) for f in fac) for fac in self.pyramid_factors))
        if not self.pyramid_factors:
            raise ValueError("pyramid_factors must not be empty")
        if any(len(f) != 3 or min(f) < 1 for f in self.pyramid_factors):
            raise ValueError(f"pyramid factors must be positive triples, got {self.pyramid_factors}")
        if self.pyramid_factors[-1] != (1, 1, 1):
            raise ValueError("the last pyramid level must have factors (1, 1, 1)")
        if len(self.iterations_per_level) != len(self.pyramid_factors):
            raise ValueError(f"{len(self.iterations_per_level)} iteration counts given for "
                             f"{len(self.pyramid_factors)} pyramid levels")
        if any(n < 0 for n in self.iterations_per_level):
            raise ValueError("iteration counts must be >= 0")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not self.adam_epsilon > 0:
            raise ValueError("adam_epsilon must be positive")
        if self.sim_mode not in SIM_MODES:
            raise ValueError(f"sim_mode must be one of {SIM_MODES}")
        if self.reg_mode not in REG_MODES:
            raise ValueError(f"reg_mode must be one of {REG_MODES}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weights"] = self.weights.to_dict()
        d["iterations_per_level"] = list(self.iterations_per_level)
        d["pyramid_factors"] = [list(f) for f in self.pyramid_factors]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, **overrides) -> "SolverConfig":
        overrides = {k: v for k, v in overrides.items() if v is not None}
        weights = {k: overrides.pop(k) for k in ("lambda", "alpha", "beta") if k in overrides}
        if weights:
            overrides["weights"] = LossWeights.from_dict({**self.weights.to_dict(), **weights})
        return replace(self, **overrides)


@dataclass
class RegistrationResult:
    """Optimized fields plus the per-iteration loss history.

    ``loss_trace`` holds one breakdown per optimizer step, evaluated at the
    parameters the step started from, on that step's pyramid level.
    ``initial_loss`` and ``final_loss`` are both evaluated at full resolution
    (zero fields and returned fields respectively).
    """

    phi_ab: DisplacementField
    phi_ba: DisplacementField
    loss_trace: list
    wall_time_s: float
    initial_loss: LossBreakdown | None = None
    final_loss: LossBreakdown | None = None
    level_of_iteration: list = field(default_factory=list)

    @property
    def mean_displacement(self) -> float:
        """Mean vector magnitude over both fields, in voxels."""
        mags = [np.linalg.norm(f.vectors, axis=-1).mean() for f in (self.phi_ab, self.phi_ba)]
        return float(np.mean(mags))


class Adam:
    """Adam with bias correction over a list of arrays updated in place."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _presmooth(v, factor, sigma):
    if sigma <= 0 or tuple(factor) == (1, 1, 1):
        return v
    sig = [sigma * f if f > 1 else 0.0 for f in factor]
    return v.with_data(ndimage.gaussian_filter(v.data, sig, mode="nearest"))


def _smooth_field(g, sigma):
    if sigma <= 0:
        return g
    return ndimage.gaussian_filter(g, (sigma, sigma, sigma, 0), mode="nearest")


def _check_nonconstant(v: np.ndarray, what: str, level: int):
    if not np.ptp(v) > 0:
        raise DataError(f"{what} is constant at pyramid level {level}; similarity undefined")


def _evaluate(a, b, phi_ab, phi_ba, cfg, self_mode, with_grad):
    extra = (phi_ab, phi_ba) if self_mode else (None, None)
    bd, grads = objective(a, b, phi_ab, phi_ba, *extra, weights=cfg.weights,
                          mode=cfg.sim_mode, reg_mode=cfg.reg_mode, with_grad=with_grad)
    if grads is not None and self_mode:
        grads = {"phi_ab": grads["phi_ab"] + grads["phi_aa"],
                 "phi_ba": grads["phi_ba"] + grads["phi_bb"]}
    return bd, grads


def register_pair(a: Volume3D, b: Volume3D, cfg: SolverConfig = SolverConfig(), *,
                  _self_mode: bool = False) -> RegistrationResult:
    """Optimize ``phi_ab`` (warping ``a`` onto ``b``) and ``phi_ba`` jointly.

    Fields start at zero on the coarsest pyramid level.  Each level runs
    Adam on the total loss for its configured number of iterations, then the
    fields are upsampled to the next level.  The identity term is active only
    for self-registration (see :func:`register_self`).

    Raises
    ------
    DataError
        Mismatched dims or a constant volume at some level.
    DivergenceError
        The loss became non-finite or undefined (a warped volume turned
        constant); ``exc.trace`` holds the finite history.
    """
    if a.dims != b.dims:
        raise DataError(f"dims mismatch: moving {list(a.dims)} vs fixed {list(b.dims)}")
    t0 = time.perf_counter()
    levels = []
    for i, factor in enumerate(cfg.pyramid_factors):
        al = downsample_trilinear(_presmooth(a, factor, cfg.pyramid_sigma), factor).data
        bl = downsample_trilinear(_presmooth(b, factor, cfg.pyramid_sigma), factor).data
        _check_nonconstant(al, "moving volume", i)
        _check_nonconstant(bl, "fixed volume", i)
        levels.append((factor, al, bl))

    trace, level_of_iteration = [], []
    phi_ab = phi_ba = None
    prev_factor = None
    for i, ((factor, al, bl), n_iter) in enumerate(zip(levels, cfg.iterations_per_level)):
        if phi_ab is None:
            phi_ab = np.zeros((*al.shape, 3))
            phi_ba = np.zeros((*al.shape, 3))
        else:
            ratio = np.asarray(prev_factor, dtype=np.float64) / np.asarray(factor)
            phi_ab = upsample_field(phi_ab, al.shape, ratio)
            phi_ba = upsample_field(phi_ba, al.shape, ratio)
        prev_factor = factor
        opt = Adam([phi_ab, phi_ba], cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                   cfg.adam_epsilon)
        for it in range(n_iter):
            try:
                bd, grads = _evaluate(al, bl, phi_ab, phi_ba, cfg, _self_mode, True)
            except DataError as exc:
                # inputs were checked above, so a constant warp means the fields left the volume
                raise DivergenceError(f"loss undefined at level {i}, iteration {it}: {exc}",
                                      trace) from exc
            if not math.isfinite(bd.total):
                raise DivergenceError(
                    f"non-finite loss at level {i}, iteration {it}", trace)
            trace.append(bd)
            level_of_iteration.append(i)
            opt.step([_smooth_field(grads["phi_ab"], cfg.gradient_sigma),
                      _smooth_field(grads["phi_ba"], cfg.gradient_sigma)])
        logger.debug("level %d %s: %d iterations, last total %s", i, factor, n_iter,
                     trace[-1].total if trace and n_iter else None)

    a_full, b_full = levels[-1][1], levels[-1][2]
    zero = np.zeros_like(phi_ab)
    initial, _ = _evaluate(a_full, b_full, zero, zero, cfg, _self_mode, False)
    final, _ = _evaluate(a_full, b_full, phi_ab, phi_ba, cfg, _self_mode, False)
    if not math.isfinite(final.total):
        raise DivergenceError("non-finite loss at the returned fields", trace)
    if final.total > initial.total:
        logger.warning("optimized loss %.6g exceeds the zero-field loss %.6g; "
                       "returning zero fields", final.total, initial.total)
        phi_ab, phi_ba, final = zero, zero.copy(), initial
    return RegistrationResult(DisplacementField(phi_ab), DisplacementField(phi_ba), trace,
                              time.perf_counter() - t0, initial, final, level_of_iteration)


def register_self(a: Volume3D, cfg: SolverConfig = SolverConfig()) -> RegistrationResult:
    """Register ``a`` to itself with the identity loss active.

    Both fields act as the self-pair fields, so the identity term adds
    ``-beta * (warp(a, phi) (*) a)`` for each of them.  A result's
    :attr:`RegistrationResult.mean_displacement` is the stationarity
    diagnostic: it stays near zero when the loss leaves unchanged
    regions unchanged.
    """
    return register_pair(a, a, cfg, _self_mode=True)
