"""Registration quality metrics: landmark TRE, cycle NMSE and folding."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from cycreg.errors import DataError
from cycreg.field import DisplacementField, jacobian_stats, trilinear_sample, warp_array
from cycreg.volume import LandmarkSet, Volume3D

REPORT_FIELDS = ("tre_mm", "nmse", "folding_percent", "wall_time_s", "per_landmark_tre_mm")


@dataclass
class MetricReport:
    tre_mm: float | None
    nmse: float
    folding_percent: float
    wall_time_s: float
    per_landmark_tre_mm: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_FIELDS}

    def to_json(self) -> str:
        return dumps17(self.as_dict())


def _fmt(x):
    if x is None:
        return "null"
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            raise ValueError(f"cannot serialize non-finite value {x}")
        return format(x, ".17g")
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in x.items()) + "}"
    if isinstance(x, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in x) + "]"
    raise TypeError(f"cannot serialize {type(x).__name__}")


def dumps17(obj) -> str:
    """JSON text with every float written to 17 significant digits."""
    return _fmt(obj) + "\n"


def tre(fixed_points: LandmarkSet, moving_points: LandmarkSet, field: DisplacementField,
        spacing_mm=(1.0, 1.0, 1.0)):
    """Target registration error in millimetres.

    Each fixed-image landmark ``q`` is mapped to ``q + field(q)`` and compared
    with its moving-image counterpart.  Returns ``(mean, per_landmark)`` with
    the per-landmark list ordered by id.
    """
    fixed = fixed_points.as_dict()
    moving = moving_points.as_dict()
    if set(fixed) != set(moving):
        raise DataError(f"landmark ids differ: {sorted(set(fixed) ^ set(moving))}")
    if not fixed:
        raise DataError("no landmarks given")
    fixed_points.check_domain(field.dims)
    ids = sorted(fixed)
    q = np.array([fixed[i] for i in ids])
    p = np.array([moving[i] for i in ids])
    predicted = q + trilinear_sample(field.vectors, q)
    per = np.linalg.norm((predicted - p) * np.asarray(spacing_mm, dtype=np.float64), axis=1)
    per = [float(v) for v in per]
    return float(np.mean(per)), per


def nmse(original, reconstructed) -> float:
    """``|original - reconstructed|^2 / |original|^2``."""
    o = np.asarray(original, dtype=np.float64)
    r = np.asarray(reconstructed, dtype=np.float64)
    if o.shape != r.shape:
        raise DataError(f"dims mismatch: {o.shape} vs {r.shape}")
    energy = np.sum(o * o)
    if not energy > 0:
        raise DataError("NMSE undefined for a zero-energy original")
    d = o - r
    return float(np.sum(d * d) / energy)


def cycle_reconstruction(a, phi_ab, phi_ba) -> np.ndarray:
    """``warp(warp(a, phi_ab), phi_ba)``."""
    return warp_array(warp_array(a, phi_ab), phi_ba)


def evaluate(a: Volume3D, b: Volume3D, result, landmarks=None) -> MetricReport:
    """Metric report for a registration result.

    ``landmarks`` is an optional ``(fixed_points, moving_points)`` pair, with
    fixed points in ``b`` and moving points in ``a``.
    """
    if a.dims != b.dims or result.phi_ab.dims != a.dims:
        raise DataError(f"dims mismatch: a {a.dims}, b {b.dims}, field {result.phi_ab.dims}")
    stats = jacobian_stats(result.phi_ab)
    recon = cycle_reconstruction(a.data, result.phi_ab.vectors, result.phi_ba.vectors)
    err = nmse(a.data, recon)
    mean_tre, per = None, []
    if landmarks is not None:
        mean_tre, per = tre(landmarks[0], landmarks[1], result.phi_ab, b.spacing_mm)
    return MetricReport(mean_tre, err, 100.0 * stats.nonpositive_fraction,
                        float(result.wall_time_s), per)
