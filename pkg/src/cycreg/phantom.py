"""Synthetic volume pairs with analytic ground-truth deformations.

Intensity models, evaluated at continuous voxel coordinates ``x``:

``spheres``
    Sum of six soft-edged balls, ``c_i * (1 - tanh((|x - m_i| - r_i) / 1.5)) / 2``,
    with seeded centres, radii and contrasts.
``ramp``
    ``x_0 / (nx - 1)``.
``perlin-smooth``
    ``0.5 + (1/6) * sum_k prod_d cos(2 pi x_d / p_k + theta_kd)`` for
    periods ``p = (24, 16, 12)`` voxels and seeded phases ``theta``.

Deformations give ``phi(x)`` in voxel units:

``translation(t)``      ``phi(x) = t``
``affine(M[, t])``      ``phi(x) = M x + t``
``sinusoid(A, P)``      ``phi_d(x) = A sin(2 pi x_d / P + theta_d)``; fold-free iff ``A < P / (2 pi)``
``reflection(d)``       ``phi_d(x) = -2 (x_d - (n_d - 1) / 2)``, other components 0

With ``taper_vox = T > 0`` the intensity is multiplied by
``prod_d smoothstep(clip(min(x_d, n_d - 1 - x_d) / T, 0, 1))``, fading the
content to zero at the faces like a body surrounded by air.  Zero-padded
warping is then consistent with the analytic image outside the grid.

The fixed image is ``contrast(f(x + phi(x)))`` so ``warp(moving, truth)``
approximates the pre-contrast fixed image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cycreg.errors import DataError
from cycreg.field import DisplacementField, identity_grid
from cycreg.volume import LandmarkSet, Volume3D

KINDS = ("spheres", "ramp", "perlin-smooth")
DEFORMATIONS = ("translation", "affine", "sinusoid", "reflection")
CONTRASTS = ("none", "affine", "gamma")
PERLIN_PERIODS = (24.0, 16.0, 12.0)


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for a synthetic pair.

    ``deformation`` and ``contrast`` are ``(name, params)`` tuples, e.g.
    ``("translation", (2, 0, 0))``, ``("sinusoid", (2.0, 16.0))``,
    ``("affine", (1.5, 0.1))`` or ``("none", ())``.
    """

    dims: tuple = (32, 32, 32)
    kind: str = "perlin-smooth"
    deformation: tuple = ("translation", (0.0, 0.0, 0.0))
    contrast: tuple = ("none", ())
    seed: int = 0
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    taper_vox: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        name, params = self.deformation
        object.__setattr__(self, "deformation", (name, tuple(float(p) for p in params)))
        cname, cparams = self.contrast
        object.__setattr__(self, "contrast", (cname, tuple(float(p) for p in cparams)))
        if self.kind not in KINDS:
            raise DataError(f"unknown phantom kind {self.kind!r}; expected one of {KINDS}")
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise DataError(f"phantom dims must be 3 values >= 2, got {self.dims}")
        _validate_deformation(name, self.deformation[1])
        _validate_contrast(cname, self.contrast[1])

    def as_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "kind": self.kind,
            "deformation": {"name": self.deformation[0], "params": list(self.deformation[1])},
            "contrast": {"name": self.contrast[0], "params": list(self.contrast[1])},
            "seed": self.seed,
            "spacing_mm": list(self.spacing_mm),
            "taper_vox": self.taper_vox,
        }


def _validate_deformation(name, params):
    expected = {"translation": (3,), "affine": (9, 12), "sinusoid": (2,), "reflection": (1,)}
    if name not in expected:
        raise DataError(f"unknown deformation {name!r}; expected one of {DEFORMATIONS}")
    if len(params) not in expected[name]:
        raise DataError(f"{name} deformation takes {expected[name]} parameters, got {len(params)}")
    if name == "sinusoid":
        amp, period = params
        if period <= 0:
            raise DataError("sinusoid period must be positive")
        if not abs(amp) < period / (2 * math.pi):
            raise DataError(f"sinusoid amplitude {amp} violates the fold-free bound "
                            f"|A| < P/(2 pi) = {period / (2 * math.pi):.6g}")
    elif name == "affine":
        m = np.asarray(params[:9]).reshape(3, 3)
        if not np.linalg.det(np.eye(3) + m) > 0:
            raise DataError("affine deformation must satisfy det(I + M) > 0")
    elif name == "reflection":
        if params[0] not in (0, 1, 2):
            raise DataError(f"reflection axis must be 0, 1 or 2, got {params[0]}")


def _validate_contrast(name, params):
    expected = {"none": 0, "affine": 2, "gamma": 1}
    if name not in expected:
        raise DataError(f"unknown contrast {name!r}; expected one of {CONTRASTS}")
    if len(params) != expected[name]:
        raise DataError(f"{name} contrast takes {expected[name]} parameters, got {len(params)}")
    if name == "affine" and params[0] == 0:
        raise DataError("affine contrast scale must be nonzero")
    if name == "gamma" and params[0] <= 0:
        raise DataError("gamma must be positive")


def _phases(seed, n):
    return np.random.default_rng([seed, 7919]).uniform(0, 2 * np.pi, size=n)


def taper(spec: PhantomSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if spec.taper_vox <= 0:
        return np.ones(x.shape[:-1])
    upper = np.asarray(spec.dims, dtype=np.float64) - 1
    u = np.clip(np.minimum(x, upper - x) / spec.taper_vox, 0.0, 1.0)
    return np.prod(u * u * (3 - 2 * u), axis=-1)


def intensity(spec: PhantomSpec, x: np.ndarray) -> np.ndarray:
    """Evaluate the phantom's intensity model at coordinates ``x`` (``(..., 3)``)."""
    return _base_intensity(spec, x) * taper(spec, x)


def _base_intensity(spec: PhantomSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    dims = np.asarray(spec.dims, dtype=np.float64)
    if spec.kind == "ramp":
        return x[..., 0] / (dims[0] - 1)
    if spec.kind == "perlin-smooth":
        theta = _phases(spec.seed, 9).reshape(3, 3)
        total = np.zeros(x.shape[:-1])
        for k, period in enumerate(PERLIN_PERIODS):
            term = np.ones(x.shape[:-1])
            for d in range(3):
                term = term * np.cos(2 * np.pi * x[..., d] / period + theta[k, d])
            total += term
        return 0.5 + total / 6.0
    rng = np.random.default_rng([spec.seed, 104729])
    out = np.zeros(x.shape[:-1])
    for _ in range(6):
        centre = rng.uniform(0.2, 0.8, size=3) * (dims - 1)
        radius = rng.uniform(0.12, 0.25) * dims.min()
        contrast = rng.uniform(0.3, 1.0)
        r = np.linalg.norm(x - centre, axis=-1)
        out += contrast * 0.5 * (1.0 - np.tanh((r - radius) / 1.5))
    return out


def displacement(spec: PhantomSpec, x: np.ndarray) -> np.ndarray:
    """Analytic ground-truth displacement at coordinates ``x`` (``(..., 3)``)."""
    x = np.asarray(x, dtype=np.float64)
    name, p = spec.deformation
    if name == "translation":
        return np.broadcast_to(np.asarray(p), x.shape).copy()
    if name == "affine":
        m = np.asarray(p[:9]).reshape(3, 3)
        t = np.asarray(p[9:]) if len(p) == 12 else np.zeros(3)
        return x @ m.T + t
    if name == "sinusoid":
        amp, period = p
        theta = _phases(spec.seed, 3)
        return amp * np.sin(2 * np.pi * x / period + theta)
    axis = int(p[0])
    out = np.zeros_like(x)
    out[..., axis] = -2.0 * (x[..., axis] - (spec.dims[axis] - 1) / 2.0)
    return out


def _apply_contrast(spec: PhantomSpec, v: np.ndarray) -> np.ndarray:
    name, p = spec.contrast
    if name == "affine":
        return p[0] * v + p[1]
    if name == "gamma":
        return np.clip(v, 0.0, None) ** p[0]
    return v


def generate(spec: PhantomSpec):
    """Return ``(moving, fixed, truth)`` for ``spec``."""
    grid = identity_grid(spec.dims)
    truth = displacement(spec, grid)
    moving = intensity(spec, grid)
    fixed = _apply_contrast(spec, intensity(spec, grid + truth))
    return (Volume3D(moving, spec.spacing_mm), Volume3D(fixed, spec.spacing_mm),
            DisplacementField(truth))


def synthetic_landmarks(spec: PhantomSpec, n: int = 10, margin: float = 4.0):
    """Seeded landmark pairs: fixed points inside the margin and their analytic matches.

    Returns ``(fixed_points, moving_points)`` with ``moving = q + phi(q)``.
    """
    dims = np.asarray(spec.dims, dtype=np.float64)
    lo, hi = margin, dims - 1 - margin
    if np.any(hi <= lo):
        raise DataError(f"margin {margin} leaves no room inside dims {spec.dims}")
    rng = np.random.default_rng([spec.seed, 15485863])
    q = rng.uniform(lo, hi, size=(n, 3))
    p = q + displacement(spec, q)
    ids = [f"L{i:02d}" for i in range(n)]
    return (LandmarkSet(tuple(zip(ids, map(tuple, q)))),
            LandmarkSet(tuple(zip(ids, map(tuple, p)))))


def endpoint_error(estimate, truth, margin: int = 0) -> float:
    """Mean Euclidean difference between two fields over voxels ``margin`` from every face."""
    e = np.asarray(estimate, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if e.shape != t.shape:
        raise DataError(f"dims mismatch: {e.shape[:3]} vs {t.shape[:3]}")
    margin = int(margin)
    if margin < 0 or any(2 * margin >= n for n in e.shape[:3]):
        raise DataError(f"margin {margin} too large for dims {e.shape[:3]}")
    inner = (slice(margin, n - margin) for n in e.shape[:3])
    diff = (e - t)[tuple(inner)]
    return float(np.mean(np.linalg.norm(diff, axis=-1)))


def field_margin(truth, pad: int = 1) -> int:
    """Padding band width: max displacement magnitude, rounded up, plus ``pad``."""
    t = np.asarray(truth, dtype=np.float64)
    return int(math.ceil(float(np.max(np.linalg.norm(t, axis=-1))))) + pad
