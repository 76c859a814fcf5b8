import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from cycreg import solver as solver_mod
from cycreg.errors import DataError, DivergenceError
from cycreg.field import upsample_field, warp_array
from cycreg.losses import LossWeights
from cycreg.phantom import PhantomSpec, endpoint_error, field_margin, generate
from cycreg.solver import Adam, SolverConfig, register_pair, register_self
from cycreg.volume import Volume3D

FAST = dict(iterations_per_level=(10, 10), pyramid_factors=((2, 2, 2), (1, 1, 1)))


def small_pair(seed=0, shift=(1.0, 0.0, 0.0), dims=(12, 12, 12)):
    spec = PhantomSpec(dims, "perlin-smooth", ("translation", shift), ("affine", (1.5, 0.2)),
                       seed=seed, taper_vox=3.0)
    return generate(spec)


def test_defaults_are_valid():
    cfg = SolverConfig()
    assert cfg.pyramid_factors[-1] == (1, 1, 1)
    assert len(cfg.iterations_per_level) == len(cfg.pyramid_factors)
    assert cfg.sim_mode == "normalized"


@pytest.mark.parametrize("bad", [
    dict(pyramid_factors=()),
    dict(pyramid_factors=((2, 2, 2),), iterations_per_level=(5,)),
    dict(iterations_per_level=(1, 2)),
    dict(learning_rate=0.0),
    dict(adam_beta1=1.0),
    dict(adam_epsilon=0.0),
    dict(sim_mode="cosine"),
    dict(reg_mode="tv"),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SolverConfig(**bad)


def test_config_dict_roundtrip():
    cfg = SolverConfig(weights=LossWeights(0.1, 0.2, 0.3), learning_rate=0.02, **FAST)
    d = cfg.to_dict()
    assert d["weights"] == {"lambda": 0.1, "alpha": 0.2, "beta": 0.3}
    assert SolverConfig.from_dict(d) == cfg
    with pytest.raises(ValueError, match="unknown"):
        SolverConfig.from_dict({"step": 1})
    over = cfg.with_overrides(alpha=0.0, learning_rate=None, sim_mode="as-written")
    assert over.weights == LossWeights(0.1, 0.0, 0.3)
    assert over.learning_rate == 0.02
    assert over.sim_mode == "as-written"


def test_adam_first_step_is_lr_times_sign():
    p = np.array([1.0, -2.0, 3.0])
    Adam([p], lr=0.1).step([np.array([5.0, -0.01, 0.0])])
    # bias-corrected m / sqrt(v) = sign(g) on the first step
    np.testing.assert_allclose(p, [0.9, -1.9, 3.0], rtol=1e-6)


def test_zero_iterations_is_a_noop():
    a, b, _ = small_pair()
    cfg = SolverConfig(iterations_per_level=(0, 0), pyramid_factors=((2, 2, 2), (1, 1, 1)))
    r = register_pair(a, b, cfg)
    assert r.loss_trace == []
    assert not np.any(r.phi_ab.vectors) and not np.any(r.phi_ba.vectors)
    assert warp_array(a.data, r.phi_ab.vectors).tobytes() == a.data.tobytes()
    assert r.final_loss == r.initial_loss


def test_trace_length_and_endpoint_improvement():
    a, b, _ = small_pair(1)
    r = register_pair(a, b, SolverConfig(**FAST))
    assert len(r.loss_trace) == 20
    assert r.level_of_iteration == [0] * 10 + [1] * 10
    assert r.final_loss.total <= r.initial_loss.total


def test_endpoint_fallback_returns_zero_fields(monkeypatch):
    a, b, _ = small_pair(2)
    # flip every step into gradient ascent so the endpoint is worse than the start
    monkeypatch.setattr(solver_mod, "_smooth_field", lambda g, sigma: -g)
    r = register_pair(a, b, SolverConfig(**FAST))
    assert r.loss_trace[-1].total > r.loss_trace[0].total
    assert r.final_loss == r.initial_loss
    assert not np.any(r.phi_ab.vectors) and not np.any(r.phi_ba.vectors)


def test_fields_leaving_the_volume_diverge():
    a, b, _ = small_pair(2)
    with pytest.raises(DivergenceError, match="undefined"):
        register_pair(a, b, SolverConfig(learning_rate=50.0, gradient_sigma=0.0, **FAST))


def test_repeat_runs_are_bit_identical():
    a, b, _ = small_pair(3)
    cfg = SolverConfig(**FAST)
    r1, r2 = register_pair(a, b, cfg), register_pair(a, b, cfg)
    assert r1.phi_ab.vectors.tobytes() == r2.phi_ab.vectors.tobytes()
    assert r1.phi_ba.vectors.tobytes() == r2.phi_ba.vectors.tobytes()
    assert r1.loss_trace == r2.loss_trace


def test_errors():
    a, b, _ = small_pair()
    with pytest.raises(DataError, match=r"\[12, 12, 12\].*\[12, 12, 10\]"):
        register_pair(a, Volume3D(np.random.default_rng(0).random((12, 12, 10))))
    flat = Volume3D(np.full((12, 12, 12), 3.0))
    with pytest.raises(DataError, match="constant"):
        register_self(flat, SolverConfig(**FAST))
    # constant only after coarsening: a single bright voxel off the coarse lattice
    spike = np.zeros((12, 12, 12))
    spike[5, 5, 5] = 1.0
    with pytest.raises(DataError, match="level 0"):
        register_self(Volume3D(spike), SolverConfig(pyramid_sigma=0.0, **FAST))


def test_divergence_carries_trace(monkeypatch):
    a, b, _ = small_pair()
    real = solver_mod.objective
    calls = []

    def flaky(*args, **kwargs):
        bd, grads = real(*args, **kwargs)
        calls.append(1)
        if len(calls) == 4:
            bd = type(bd)(math.nan, bd.regist_ba, bd.cycle, bd.identity, math.nan)
        return bd, grads

    monkeypatch.setattr(solver_mod, "objective", flaky)
    with pytest.raises(DivergenceError) as info:
        register_pair(a, b, SolverConfig(**FAST))
    assert len(info.value.trace) == 3
    assert all(math.isfinite(t.total) for t in info.value.trace)


def test_self_registration_is_stationary():
    a, _, _ = small_pair(4)
    r = register_self(a, SolverConfig(**FAST))
    assert r.mean_displacement < 0.05
    assert r.final_loss.identity == pytest.approx(-2.0, abs=1e-12)


def test_equal_pair_without_cycle_or_identity():
    a, _, _ = small_pair(5)
    cfg = SolverConfig(weights=LossWeights(0.0, 0.0, 0.0), **FAST)
    r = register_pair(a, a, cfg)
    assert r.mean_displacement < 0.05
    assert abs(r.final_loss.regist_ab - -1.0) <= 1e-3


def test_recovers_integer_translation():
    spec = PhantomSpec((32, 32, 32), "perlin-smooth", ("translation", (2, 0, 0)),
                       ("affine", (1.5, 0.2)), seed=7, taper_vox=6.0)
    a, b, truth = generate(spec)
    r = register_pair(a, b)
    assert endpoint_error(r.phi_ab, truth, field_margin(truth.vectors)) < 0.2


def test_upsampling_keeps_constant_fields():
    # a solve whose fine level runs zero steps returns the upsampled coarse field
    a, b, _ = small_pair(6, dims=(16, 16, 16))
    cfg = SolverConfig(iterations_per_level=(30, 0), pyramid_factors=((2, 2, 2), (1, 1, 1)))
    r = register_pair(a, b, cfg)
    assert r.level_of_iteration == [0] * 30
    assert r.phi_ab.dims == (16, 16, 16)
    const = np.broadcast_to([0.5, -0.25, 1.0], (8, 8, 8, 3))
    assert_array_equal(upsample_field(const, (16, 16, 16), (2, 2, 2)),
                       np.broadcast_to([1.0, -0.5, 2.0], (16, 16, 16, 3)))
