import json

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import quad

from iconexec.datagen import (
    DEFAULT_RANGES,
    LAMBDA_RANGE,
    DatasetRecord,
    ThetaSampler,
    TrajectoryBank,
    _gp_factor,
    gp_draw,
    generate_dataset,
    read_dataset,
    record_to_line,
    sample_gp_rate,
    write_dataset,
)
from iconexec.errors import ParseError, SchemaError
from iconexec.grid import Family, KernelSpec, TimeGrid, apply_impact, build_impact_matrix, kernel_value

GRID = TimeGrid()


@pytest.fixture(scope="module")
def raw_draws():
    rng = np.random.default_rng(123)
    return np.stack([gp_draw(GRID, rng) for _ in range(10_000)])


def test_gp_factor_reproduces_covariance():
    L = _gp_factor(1.0, 100)
    t = GRID.left_nodes
    cov = 0.05**2 * np.exp(-2.0 * (t[:, None] - t[None, :]) ** 2)
    np.testing.assert_allclose(L @ L.T, cov, atol=1e-9)


def test_gp_marginal_std(raw_draws):
    sd = raw_draws.std(axis=0)
    assert np.all(np.abs(sd / 0.05 - 1) <= 0.03)


def test_gp_mean(raw_draws):
    m = raw_draws.mean(axis=0)
    # one node at the stated 3-sigma band, all nodes at a Bonferroni-style band
    assert abs(m[50] - 0.1) <= 3 * 0.05 / np.sqrt(10_000)
    assert np.all(np.abs(m - 0.1) <= 4.5 * 0.05 / np.sqrt(10_000))


def test_gp_lag_correlation(raw_draws):
    i, j = 25, 75  # lag 0.5
    c = np.corrcoef(raw_draws[:, i], raw_draws[:, j])[0, 1]
    assert abs(c / np.exp(-0.5) - 1) <= 0.05


def test_positive_rate_is_first_positive_raw_draw():
    a, b = np.random.default_rng(9), np.random.default_rng(9)
    for _ in range(300):
        u = sample_gp_rate(GRID, a)
        while True:
            raw = gp_draw(GRID, b)
            if raw.min() > 0:
                break
        np.testing.assert_array_equal(u, raw)
        assert u.min() > 0


def test_gp_rate_seed_forms():
    np.testing.assert_array_equal(sample_gp_rate(GRID, 4), sample_gp_rate(GRID, [4]))
    assert not np.array_equal(sample_gp_rate(GRID, 4), sample_gp_rate(GRID, 5))


@pytest.mark.parametrize("fam", list(Family))
def test_theta_marginals_uniform(fam):
    s = ThetaSampler(fam)
    rng = np.random.default_rng(2024)
    th = [s.sample(rng) for _ in range(5000)]
    lam = np.array([t.lam for t in th])
    shp = np.array([t.shape_param for t in th])
    lo, hi = DEFAULT_RANGES[fam]
    assert np.all((lam > 0.1) & (lam < 0.5))
    assert np.all((shp > lo) & (shp < hi))
    assert stats.kstest(lam, stats.uniform(0.1, 0.4).cdf).pvalue > 0.01
    assert stats.kstest(shp, stats.uniform(lo, hi - lo).cdf).pvalue > 0.01


def test_theta_sampler_deterministic():
    s = ThetaSampler("ode")
    a = [s.sample(np.random.default_rng(1)) for _ in range(3)]
    assert a[0] == a[1] == a[2]


def _kernel_total(theta, T=1.0):
    return quad(lambda s: kernel_value(theta, s) if s > 0 else 0.0, 0, T, limit=200)[0]


@pytest.mark.parametrize("family", ["ode", "ker", "sker", "all3"])
def test_records_positive_exact_and_bounded(family):
    g = TimeGrid(1.0, 50)
    recs = list(generate_dataset(family, 6, traj_per_theta=4, grid=g, seed=3))
    assert len(recs) == 6
    for rec in recs:
        assert rec.us.shape == rec.ys.shape == (4, 50)
        assert np.all(rec.us > 0)
        mat = build_impact_matrix(rec.theta, g)
        for u, y in zip(rec.us, rec.ys):
            np.testing.assert_array_equal(y, apply_impact(mat, u))
            assert y[0] == 0.0 and np.all(y[1:] > 0)
            assert y.max() <= rec.theta.lam * u.max() * _kernel_total(rec.theta) * (1 + 1e-9)


def test_all3_interleaves_families():
    fams = [r.theta.family for r in generate_dataset("all3", 9, traj_per_theta=1, grid=TimeGrid(1.0, 10))]
    assert fams == [Family.EXPONENTIAL, Family.POWER_LAW_NONSINGULAR, Family.POWER_LAW_SINGULAR] * 3


def test_record_depends_only_on_seed_and_index():
    g = TimeGrid(1.0, 20)
    a = list(generate_dataset("ker", 5, 3, g, seed=8))
    b = list(generate_dataset("ker", 3, 3, g, seed=8))
    assert a[:3] == b
    c = list(generate_dataset("ker", 3, 3, g, seed=9))
    assert a[0] != c[0]


def test_write_is_byte_reproducible(tmp_path):
    g = TimeGrid(1.0, 20)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_dataset(p1, generate_dataset("all3", 7, 3, g, seed=1))
    write_dataset(p2, generate_dataset("all3", 7, 3, g, seed=1))
    assert p1.read_bytes() == p2.read_bytes()


def test_roundtrip_100_records(tmp_path):
    g = TimeGrid(1.0, 30)
    recs = list(generate_dataset("all3", 100, 2, g, seed=77))
    path = tmp_path / "d.jsonl"
    write_dataset(path, recs)
    back = read_dataset(path)
    assert back == recs
    line = path.read_text().splitlines()[0]
    obj = json.loads(line)
    assert set(obj) == {"theta", "grid_n", "traj"} and obj["grid_n"] == 30


def test_truncated_final_line(tmp_path):
    g = TimeGrid(1.0, 10)
    path = tmp_path / "t.jsonl"
    write_dataset(path, generate_dataset("ode", 3, 2, g, seed=0))
    text = path.read_text()
    path.write_text(text[: len(text) - 40])
    with pytest.raises(ParseError, match="line 3"):
        read_dataset(path)


def test_grid_n_mismatch(tmp_path):
    rec = next(generate_dataset("ode", 1, 2, TimeGrid(1.0, 10), seed=0))
    obj = json.loads(record_to_line(rec))
    obj["grid_n"] = 11
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(obj) + "\n")
    with pytest.raises(SchemaError, match="grid_n"):
        read_dataset(path)


def test_missing_field(tmp_path):
    rec = next(generate_dataset("ode", 1, 2, TimeGrid(1.0, 10), seed=0))
    obj = json.loads(record_to_line(rec))
    del obj["traj"]
    path = tmp_path / "m.jsonl"
    path.write_text("\n" + json.dumps(obj) + "\n")
    with pytest.raises(SchemaError, match="line 2"):
        read_dataset(path)


def test_trajectory_bank_shapes():
    recs = list(generate_dataset("ode", 4, 3, TimeGrid(1.0, 12), seed=0))
    bank = TrajectoryBank.from_records(recs)
    assert bank.us.shape == (4, 3, 12) and len(bank) == 4
    assert bank.thetas[2] == recs[2].theta
