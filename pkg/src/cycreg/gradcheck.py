"""Finite-difference verification of the analytic loss gradients.

The oracle differentiates the public component losses (registration,
cycle, identity) one at a time and recombines the derivatives with the
loss weights, exactly as :func:`cycreg.losses.total_loss` combines values.
Differencing components separately keeps the small similarity terms from
being swamped by rounding of the large l1 cycle term.  The smooth terms use
Richardson-extrapolated central differences; the cycle term is piecewise
smooth with kinks where a residual changes sign, so it gets a short plain
central step.

Random fields put every displaced point at a fractional offset in
(0.2, 0.8) from the lattice so no trilinear kink lies within a step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from cycreg.losses import LossWeights, cycle_loss, identity_loss, objective, registration_loss

FIELD_NAMES = ("phi_ab", "phi_ba", "phi_aa", "phi_bb")


@dataclass
class GradCheckResult:
    dims: tuple
    sim_mode: str
    reg_mode: str
    n_coords: int
    max_rel_error: float
    seconds: float

    @property
    def ok(self):
        return self.max_rel_error <= GRAD_TOL


GRAD_TOL = 1e-3
SMOOTH_STEP = 2e-3
CYCLE_STEP = 1e-6


def random_offset_field(rng, dims) -> np.ndarray:
    """Field whose components are an integer in {-1, 0, 1} plus a fraction in +-(0.2, 0.8)."""
    shape = (*dims, 3)
    whole = rng.integers(-1, 2, size=shape)
    frac = rng.uniform(0.2, 0.8, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return whole + frac


def relative_error(analytic: float, numeric: float, floor: float = 1e-10) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _component_losses(a, b, weights, sim_mode, reg_mode):
    """Per-field list of (weight, component loss) pairs that depend on that field.

    Components not listed for a field do not depend on it, so their
    derivative along its coordinates is exactly zero.
    """
    lam = weights.lambda_

    def regist_ab(fs):
        return registration_loss(a, b, fs[0], lam, sim_mode, reg_mode)

    def regist_ba(fs):
        return registration_loss(b, a, fs[1], lam, sim_mode, reg_mode)

    def cycle(fs):
        return cycle_loss(a, b, fs[0], fs[1])

    def identity(fs):
        return identity_loss(a, b, fs[2], fs[3], sim_mode)

    return [
        [(1.0, regist_ab, True), (weights.alpha, cycle, False)],
        [(1.0, regist_ba, True), (weights.alpha, cycle, False)],
        [(weights.beta, identity, True)],
        [(weights.beta, identity, True)],
    ]


def fd_derivative(components, fields, k, idx) -> float:
    """Derivative of the weighted total along coordinate ``idx`` of field ``k``."""

    def at(fn, h):
        shifted = list(fields)
        shifted[k] = fields[k].copy()
        shifted[k][idx] += h
        return fn(shifted)

    def central(fn, h):
        return (at(fn, h) - at(fn, -h)) / (2 * h)

    total = 0.0
    for weight, fn, smooth in components[k]:
        if smooth:
            h = SMOOTH_STEP
            d = (4 * central(fn, h / 2) - central(fn, h)) / 3
        else:
            d = central(fn, CYCLE_STEP)
        total += weight * d
    return total


def check_instance(rng, dims, sim_mode="normalized", reg_mode="magnitude",
                   n_coords=64) -> GradCheckResult:
    t0 = time.perf_counter()
    a = rng.random(dims)
    b = rng.random(dims)
    fields = [random_offset_field(rng, dims) for _ in FIELD_NAMES]
    weights = LossWeights(lambda_=rng.uniform(0.05, 1.0), alpha=rng.uniform(0.05, 1.0),
                          beta=rng.uniform(0.05, 1.0))
    _, grads = objective(a, b, *fields, weights=weights, mode=sim_mode, reg_mode=reg_mode)

    components = _component_losses(a, b, weights, sim_mode, reg_mode)
    worst = 0.0
    for _ in range(n_coords):
        k = int(rng.integers(len(FIELD_NAMES)))
        idx = tuple(int(rng.integers(n)) for n in (*dims, 3))
        numeric = fd_derivative(components, fields, k, idx)
        worst = max(worst, relative_error(grads[FIELD_NAMES[k]][idx], numeric))
    return GradCheckResult(tuple(dims), sim_mode, reg_mode, n_coords, worst,
                           time.perf_counter() - t0)


def run_gradient_suite(n_instances=20, n_coords=64, seed=0):
    """Check ``n_instances`` random 6^3..8^3 problems, cycling through loss modes."""
    rng = np.random.default_rng(seed)
    modes = [(s, r) for s in ("normalized", "as-written") for r in ("magnitude", "gradient")]
    results = []
    for i in range(n_instances):
        dims = tuple(int(n) for n in rng.integers(6, 9, size=3))
        sim_mode, reg_mode = modes[i % len(modes)]
        results.append(check_instance(rng, dims, sim_mode, reg_mode, n_coords))
    return results
