import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groupreg.regularizer import EnergySpec, energy, greens_solve, operator_apply, sample_field

VELOCITY = EnergySpec(2e-4, 0.0, 0.4, 0.1, 0.4)


def test_membrane_of_impulse_is_seven_point_stencil():
    f = np.zeros((5, 5, 5))
    f[2, 2, 2] = 1.0
    out = operator_apply(f, EnergySpec(membrane=1.0))
    assert out[2, 2, 2] == 6.0
    assert out[1, 2, 2] == out[2, 3, 2] == out[2, 2, 1] == -1.0
    assert abs(out.sum()) < 1e-12


def test_absolute_energy_scales_with_voxel_volume():
    f = np.ones((4, 4, 4))
    assert energy(f, EnergySpec(absolute=1.0), voxel_size=2.0) == pytest.approx(0.5 * 64 * 8)


def test_constant_field_has_no_membrane_or_bending_energy():
    f = np.full((6, 6, 6, 3), 3.0)
    assert energy(f, EnergySpec(0.0, 1.0, 1.0, 1.0, 1.0), vector=True) == pytest.approx(0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1.0, 1.5, (1.0, 2.0, 0.7)]))
def test_operator_is_self_adjoint_and_positive(seed, vs):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((6, 5, 4, 3))
    b = rng.standard_normal((6, 5, 4, 3))
    la = operator_apply(a, VELOCITY, vs, vector=True, voxel_units=True)
    lb = operator_apply(b, VELOCITY, vs, vector=True, voxel_units=True)
    assert abs(np.vdot(a, lb) - np.vdot(b, la)) <= 1e-10 * abs(np.vdot(a, la))
    assert np.vdot(a, la) > 0


@pytest.mark.parametrize("vector,spec", [(False, EnergySpec(1e-2, 0.5, 0.1)), (True, VELOCITY)])
def test_greens_solve_inverts_operator(vector, spec):
    rng = np.random.default_rng(3)
    f = rng.standard_normal((8, 6, 10) + ((3,) if vector else (2,)))
    g = operator_apply(f, spec, (1.0, 1.2, 0.9), vector=vector, voxel_units=vector)
    back = greens_solve(g, spec, (1.0, 1.2, 0.9), vector=vector, voxel_units=vector)
    assert np.abs(back - f).max() <= 1e-6


def test_greens_solve_without_absolute_term_needs_zero_mean():
    spec = EnergySpec(membrane=1.0)
    with pytest.raises(ValueError, match="singular"):
        greens_solve(np.ones((4, 4, 4)), spec)
    g = np.random.default_rng(4).standard_normal((4, 4, 4))
    g -= g.mean()
    f = greens_solve(g, spec)
    assert abs(f.mean()) < 1e-12
    np.testing.assert_allclose(operator_apply(f, spec), g, atol=1e-10)


def test_energy_agrees_across_resolutions():
    def field(n):
        x = (np.arange(n) + 0.5) / n * 2 * np.pi
        gx, gy, gz = np.meshgrid(x, x, x, indexing="ij")
        return np.stack([np.sin(gx + gz), np.cos(gy), np.sin(gx) * np.cos(gy)], -1)

    spec = EnergySpec(0.1, 0.3, 0.2, 0.1, 0.1)
    coarse = energy(field(24), spec, 2 * np.pi / 24, vector=True)
    fine = energy(field(48), spec, 2 * np.pi / 48, vector=True)
    assert abs(coarse - fine) / fine < 0.05


def test_elastic_terms_reject_scalar_fields():
    with pytest.raises(ValueError, match="vector"):
        operator_apply(np.zeros((4, 4, 4)), EnergySpec(elastic_mu=1.0))


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        EnergySpec(membrane=-1.0)


def test_sample_field_has_prior_energy():
    # E[f^T L f] equals the number of degrees of freedom for a unit-precision draw
    spec = EnergySpec(1.0, 0.5, 0.0)
    values = [2 * energy(sample_field((8, 8, 8), spec, 1.5, rng=s), spec, 1.5) for s in range(20)]
    assert np.mean(values) == pytest.approx(512, rel=0.03)
