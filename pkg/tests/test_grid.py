import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iconexec.errors import DomainError, GridMismatch, SchemaError
from iconexec.grid import (
    Family,
    KernelSpec,
    TimeGrid,
    apply_impact,
    build_impact_matrix,
    kernel_cell_integral,
    kernel_value,
)

EXP = KernelSpec.exponential(0.2, 0.5)
PL = KernelSpec.power_law(1.0, 1.0)
SPL = KernelSpec.singular_power_law(0.3, 0.4)
ALL_SPECS = [EXP, PL, SPL, KernelSpec.power_law(0.3, 0.3), KernelSpec.singular_power_law(0.5, 0.45)]


def test_time_grid():
    g = TimeGrid(1.0, 4)
    assert g.dt == 0.25
    np.testing.assert_allclose(g.nodes, [0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(g.left_nodes, [0, 0.25, 0.5, 0.75])
    with pytest.raises(DomainError):
        TimeGrid(1.0, 1)
    with pytest.raises(DomainError):
        TimeGrid(0.0, 10)


def test_kernel_spec_validation():
    with pytest.raises(DomainError):
        KernelSpec.exponential(0.0, 1.0)
    with pytest.raises(DomainError):
        KernelSpec.exponential(0.2, -1.0)
    with pytest.raises(DomainError):
        KernelSpec(Family.POWER_LAW_NONSINGULAR, 0.2, gamma=0.5, ell=2.0)
    with pytest.raises(DomainError, match=r"\(0, 0.5\)"):
        KernelSpec.singular_power_law(0.2, 0.5)
    with pytest.raises(DomainError):
        KernelSpec.singular_power_law(0.2, 0.6)
    assert KernelSpec.power_law(0.2, 1.2).ell == 1.0
    assert KernelSpec.singular_power_law(0.2, 0.4).ell == 0.0


@pytest.mark.parametrize("spec", ALL_SPECS)
def test_kernel_spec_json_roundtrip(spec):
    assert KernelSpec.from_json(spec.to_json()) == spec
    d = json.loads(spec.to_json())
    assert set(d) == {"family", "lambda", "beta", "gamma", "ell"}


def test_kernel_spec_rejects_unknown_fields():
    d = EXP.to_dict()
    d["delta"] = 1.0
    with pytest.raises(SchemaError):
        KernelSpec.from_dict(d)


def test_family_parse_short_names():
    assert Family.parse("ode") is Family.EXPONENTIAL
    assert Family.parse("ker") is Family.POWER_LAW_NONSINGULAR
    assert Family.parse("sker") is Family.POWER_LAW_SINGULAR
    assert Family.parse("PowerLawSingular") is Family.POWER_LAW_SINGULAR


def test_kernel_value_examples():
    assert kernel_value(EXP, 0.0) == 1.0
    assert kernel_value(EXP, 1.0) == pytest.approx(math.exp(-0.5))
    assert kernel_value(EXP, 1.0) == pytest.approx(0.606531, abs=1e-6)
    assert kernel_value(PL, 1.0) == 0.5
    with pytest.raises(DomainError):
        kernel_value(EXP, -0.1)
    with pytest.raises(DomainError):
        kernel_value(SPL, 0.0)
    assert kernel_value(SPL, 1.0) == 1.0


def test_kernel_cell_integral_examples():
    assert kernel_cell_integral(EXP, 1.0, 0.0, 1.0) == pytest.approx((1 - math.exp(-0.5)) / 0.5, rel=1e-14)
    assert kernel_cell_integral(EXP, 1.0, 0.0, 1.0) == pytest.approx(0.786939, abs=1e-6)
    v = kernel_cell_integral(KernelSpec.singular_power_law(1.0, 0.4), 0.01, 0.0, 0.01)
    assert v == pytest.approx(0.01**0.6 / 0.6, rel=1e-14)
    assert v == pytest.approx(0.105159, abs=1e-6)
    assert kernel_cell_integral(PL, 1.0, 0.0, 1.0) == pytest.approx(math.log(2), rel=1e-14)
    with pytest.raises(DomainError):
        kernel_cell_integral(EXP, 1.0, 0.5, 0.2)


@pytest.mark.parametrize("spec", ALL_SPECS)
def test_cell_integral_matches_quadrature(spec):
    from scipy.integrate import quad

    t = 0.7
    for lo, hi in [(0.0, 0.3), (0.2, 0.5), (0.6, 0.7)]:
        ref, _ = quad(lambda s: kernel_value(spec, t - s), lo, hi, limit=200)
        assert kernel_cell_integral(spec, t, lo, hi) == pytest.approx(ref, rel=1e-8)


def test_cell_integral_clips_to_causal_part():
    # the part of the cell after t_i does not contribute
    assert kernel_cell_integral(EXP, 0.5, 0.4, 0.9) == kernel_cell_integral(EXP, 0.5, 0.4, 0.5)
    assert kernel_cell_integral(EXP, 0.5, 0.6, 0.9) == 0.0


@pytest.mark.parametrize("spec", ALL_SPECS)
def test_impact_matrix_structure(spec):
    g = TimeGrid(1.0, 50)
    mat = build_impact_matrix(spec, g)
    assert mat.full.shape == (51, 50)
    assert np.all(np.isfinite(mat.full)) and np.all(mat.full >= 0)
    assert np.all(np.triu(mat.entries) == 0)
    i, j = 20, 7
    expect = kernel_cell_integral(spec, g.nodes[i], g.nodes[j], g.nodes[j + 1]) / g.dt
    assert mat.full[i, j] == pytest.approx(expect, rel=1e-13)


def test_constant_rate_exponential_exact():
    g = TimeGrid(1.0, 1000)
    mat = build_impact_matrix(EXP, g)
    y = apply_impact(mat, np.ones(1000), include_terminal=True)
    assert y[-1] == pytest.approx(0.2 * (1 - math.exp(-0.5)) / 0.5, abs=1e-10)
    assert y[-1] == pytest.approx(0.157388, abs=1e-6)
    t = g.nodes
    np.testing.assert_allclose(y, 0.2 * (1 - np.exp(-0.5 * t)) / 0.5, atol=1e-12)


def test_constant_rate_power_law_exact():
    g = TimeGrid(1.0, 100)
    y = apply_impact(build_impact_matrix(PL, g), np.ones(100), include_terminal=True)
    assert y[-1] == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("spec", ALL_SPECS)
def test_zero_rate_zero_impact(spec):
    g = TimeGrid(1.0, 40)
    assert np.all(apply_impact(build_impact_matrix(spec, g), np.zeros(40)) == 0)


def test_impact_starts_at_zero_and_shape_checked():
    g = TimeGrid(1.0, 10)
    mat = build_impact_matrix(EXP, g)
    assert apply_impact(mat, np.ones(10))[0] == 0.0
    with pytest.raises(GridMismatch):
        apply_impact(mat, np.ones(9))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(0, 29), spec_i=st.integers(0, len(ALL_SPECS) - 1))
def test_causality(seed, k, spec_i):
    g = TimeGrid(1.0, 30)
    mat = build_impact_matrix(ALL_SPECS[spec_i], g)
    rng = np.random.default_rng(seed)
    u = rng.normal(size=30)
    v = u.copy()
    v[k:] += rng.normal(size=30 - k)
    y1, y2 = apply_impact(mat, u), apply_impact(mat, v)
    # Y_i uses only cells strictly before t_i
    assert np.array_equal(y1[: k + 1], y2[: k + 1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3),
       spec_i=st.integers(0, len(ALL_SPECS) - 1))
def test_linearity(seed, a, b, spec_i):
    g = TimeGrid(1.0, 30)
    mat = build_impact_matrix(ALL_SPECS[spec_i], g)
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=(2, 30))
    lhs = apply_impact(mat, a * u + b * v)
    rhs = a * apply_impact(mat, u) + b * apply_impact(mat, v)
    scale = np.abs(a * apply_impact(mat, np.abs(u))).max() + np.abs(b * apply_impact(mat, np.abs(v))).max()
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(scale, 1e-300) + 1e-300
    np.testing.assert_array_equal(apply_impact(mat, 2 * u), 2 * apply_impact(mat, u))


@pytest.mark.parametrize("c", [2.0, 0.25, 3.0])
def test_lambda_homogeneity(c):
    g = TimeGrid(1.0, 30)
    u = np.random.default_rng(3).uniform(0.05, 0.15, 30)
    for spec in ALL_SPECS:
        y1 = apply_impact(build_impact_matrix(spec, g), u)
        y2 = apply_impact(build_impact_matrix(spec.with_lambda(spec.lam * c), g), u)
        np.testing.assert_allclose(y2, c * y1, rtol=1e-15, atol=0)


def _rk4_exponential(beta, lam, u_fn, T, n_fine):
    # fine-grid reference for dY/dt = -beta Y + lam u(t), Y(0) = 0;
    # u_fn(s, k) gets the fine step index k so forcing can be held per step
    h = T / n_fine
    y = 0.0
    out = [0.0]
    for k in range(n_fine):
        t = k * h
        f = lambda s, yy: -beta * yy + lam * u_fn(s, k)
        k1 = f(t, y)
        k2 = f(t + h / 2, y + h / 2 * k1)
        k3 = f(t + h / 2, y + h / 2 * k2)
        k4 = f(t + h, y + h * k3)
        y += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(y)
    return np.array(out)


def test_exponential_matches_ode_for_piecewise_constant_rates():
    g = TimeGrid(1.0, 20)
    rng = np.random.default_rng(11)
    u = rng.uniform(0.0, 0.2, 20)
    spec = KernelSpec.exponential(0.4, 2.0)
    y = apply_impact(build_impact_matrix(spec, g), u, include_terminal=True)
    # the cell value holds on [t_j, t_{j+1}); RK4 steps never straddle a cell edge
    sub = 200
    ref = _rk4_exponential(2.0, 0.4, lambda s, k: u[k // sub], 1.0, 20 * sub)
    np.testing.assert_allclose(y, ref[::sub], atol=1e-10)


def test_exponential_matches_ode_for_smooth_rates_first_order():
    spec = KernelSpec.exponential(0.3, 1.5)
    u_fn = lambda s: 0.1 + 0.05 * math.sin(4 * s)
    ref = _rk4_exponential(1.5, 0.3, lambda s, k: u_fn(s), 1.0, 4000)
    errs = []
    for n in (25, 50, 100):
        g = TimeGrid(1.0, n)
        y = apply_impact(build_impact_matrix(spec, g), [u_fn(t) for t in g.left_nodes], include_terminal=True)
        errs.append(np.max(np.abs(y - ref[:: 4000 // n])))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 5 * 0.01 * 0.3 * 0.05 * 4  # O(dt) with the rate derivative scale


def richardson_order_singular(gamma=0.45, base_n=50):
    spec = KernelSpec.singular_power_law(0.3, gamma)
    u_fn = lambda t: 0.1 + 0.05 * np.sin(3 * t)
    ys = []
    for n in (base_n, 2 * base_n, 4 * base_n):
        g = TimeGrid(1.0, n)
        y = apply_impact(build_impact_matrix(spec, g), u_fn(g.left_nodes), include_terminal=True)
        ys.append(y[:: n // base_n])
    e1 = np.max(np.abs(ys[0] - ys[1]))
    e2 = np.max(np.abs(ys[1] - ys[2]))
    return e1, e2, math.log2(e1 / e2)


def test_singular_grid_refinement_order():
    e1, e2, order = richardson_order_singular()
    assert e2 < e1
    assert order >= 1.0
