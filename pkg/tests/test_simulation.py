import csv
import json

import numpy as np
import pytest
from scipy.stats import norm

from qcf.simulation import (
    DGPConfig,
    ExperimentSpec,
    generate_dgp,
    normalized_factors,
    orthonormal_thetas,
    qfm_baseline,
    qfm_rank,
    run_benchmark,
)


@pytest.mark.parametrize("setting", [1, 2])
def test_factor_normalization(setting):
    _, truth = generate_dgp(DGPConfig(N=30, T=40, setting=setting, seed=3))
    np.testing.assert_allclose(truth.F.T @ truth.F / 40, np.eye(2), atol=1e-10)


def test_second_factor_nonnegative():
    F = normalized_factors(np.random.default_rng(0).standard_normal(50), np.abs(np.random.default_rng(1).standard_normal(50)))
    assert np.all(F[:, 1] >= 0)


@pytest.mark.parametrize("setting,d", [(1, 10), (2, 5)])
def test_thetas_orthonormal(setting, d):
    t1, t2 = orthonormal_thetas(setting)
    assert len(t1) == d
    assert abs(t1 @ t2) < 1e-12
    assert abs(np.linalg.norm(t1) - 1) < 1e-12 and abs(np.linalg.norm(t2) - 1) < 1e-12
    assert t1[0] > 0 and t2[0] > 0


def test_setting2_direction():
    t1, _ = orthonormal_thetas(2)
    np.testing.assert_allclose(t1, np.array([3, 2, -1, -1, 1]) / 4.0, rtol=1e-14)


def test_reproducible():
    a, _ = generate_dgp(DGPConfig(N=20, T=5, seed=42))
    b, _ = generate_dgp(DGPConfig(N=20, T=5, seed=42))
    assert a.y.tobytes() == b.y.tobytes() and a.X.tobytes() == b.X.tobytes()
    c, _ = generate_dgp(DGPConfig(N=20, T=5, seed=43))
    assert a.y.tobytes() != c.y.tobytes()


def test_calibration_at_low_tau():
    N, T, tau = 400, 50, 0.05
    panel, truth = generate_dgp(DGPConfig(N=N, T=T, seed=9))
    share = np.mean(panel.y < truth.quantile_surface(panel, tau))
    assert abs(share - tau) <= 3 * np.sqrt(tau * (1 - tau) / (N * T))


def test_active_factors():
    _, truth = generate_dgp(DGPConfig(N=5, T=4, seed=0))
    assert truth.active_factors(0.5) == 1
    assert truth.active_factors(0.05) == 2 and truth.active_factors(0.95) == 2
    assert truth.error_quantile(0.5) == 0.0
    assert truth.error_quantile(0.05) == pytest.approx(np.sqrt(0.5) * norm.ppf(0.05))


def test_config_validation():
    with pytest.raises(ValueError):
        DGPConfig(setting=3)
    with pytest.raises(ValueError):
        DGPConfig(setting=2, d=10)


def exact_low_rank(N=40, T=30, r=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((N, r)) @ rng.standard_normal((T, r)).T


def test_qfm_noiseless_zero_objective():
    fit = qfm_baseline(exact_low_rank(), 2, 0.3)
    assert fit.objective < 1e-8
    np.testing.assert_allclose(fit.F.T @ fit.F / 30, np.eye(2), atol=1e-10)


def test_qfm_monotone_trace():
    rng = np.random.default_rng(1)
    Y = exact_low_rank(seed=1) + rng.standard_normal((40, 30))
    fit = qfm_baseline(Y, 2, 0.2, max_iter=20)
    tr = np.array(fit.trace)
    assert np.all(np.diff(tr) <= 1e-9 * (1 + tr[:-1]))
    assert "non_monotone" not in fit.flags


def test_qfm_rank_recovers_exact():
    rng = np.random.default_rng(2)
    Y = exact_low_rank(60, 40, 2, 2) * 3 + 0.01 * rng.standard_normal((60, 40))
    assert qfm_rank(Y, 0.5) == 2


def test_qfm_zero_rank_and_bounds():
    Y = np.ones((4, 3))
    assert qfm_baseline(Y, 0, 0.5).r == 0
    with pytest.raises(ValueError):
        qfm_baseline(Y, 4, 0.5)


def test_experiment_config(tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text("# demo\ntau = 0.05, 0.5\nsizes = 100x20, 200x50\nreps = 3\nselect_reps = 1\nmodels = qcf, qfm\ngrid = r=1,2;m=2;ridge=0,1e-3\nseed = 7\n")
    spec = ExperimentSpec.from_config(p)
    assert spec.cells == ((0.05, 100, 20), (0.05, 200, 50), (0.5, 100, 20), (0.5, 200, 50))
    assert spec.reps == 3 and spec.select_reps == 1 and spec.seed == 7
    assert spec.grid.r == (1, 2)
    p.write_text("bogus = 1\n")
    with pytest.raises(ValueError, match="unknown"):
        ExperimentSpec.from_config(p)
    with pytest.raises(ValueError):
        ExperimentSpec(models=("nope",))


def test_benchmark_layout_and_freeze(tmp_path):
    spec = ExperimentSpec(cells=((0.5, 60, 8),), reps=3, select_reps=2, models=("qcf", "qcf_noridge", "qfm"),
                          grid="r=1,2;m=2;ridge=0,1e-3", qfm_kmax=3, seed=1)
    res = run_benchmark(spec)
    assert len(res.records) == 9
    header, rows = res.table("aqe")
    assert header == ["tau", "N", "T", "in_qcf", "in_qcf_noridge", "in_qfm", "oos_qcf", "oos_qcf_noridge", "oos_qfm"]
    assert rows[0][:3] == [0.5, 60, 8]
    frozen = res.frozen[(0.5, 60, 8)]
    assert frozen["qcf_noridge"][2] == 0.0 and frozen["qcf"][2] > 0.0
    third = [r for r in res.records if r.rep == 2]
    assert {r.model: r.hyper for r in third}["qcf"] == tuple(frozen["qcf"])
    res.write(tmp_path)
    with open(tmp_path / "table_qhe.csv") as fh:
        assert next(csv.reader(fh)) == header
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["cells"][0]["reps"] == 3


def test_benchmark_deterministic():
    spec = ExperimentSpec(cells=((0.3, 40, 6),), reps=2, select_reps=1, models=("qcf",), grid="r=1;m=2;ridge=1e-3", seed=5)
    a = [r.oos_aqe for r in run_benchmark(spec).records]
    b = [r.oos_aqe for r in run_benchmark(spec).records]
    assert a == b


def test_benchmark_records_failures(monkeypatch):
    import qcf.simulation as sim
    from qcf.errors import DegenerateEstimationError

    def boom(*a, **k):
        raise DegenerateEstimationError("boom")

    monkeypatch.setattr(sim, "qfm_baseline", boom)
    spec = ExperimentSpec(cells=((0.5, 30, 6),), reps=2, select_reps=0, models=("qcf", "qfm"), grid="r=1;m=2;ridge=1e-3", qfm_r=1)
    res = run_benchmark(spec)
    row = {s["model"]: s for s in res.summary()}
    assert row["qfm"]["failed"] == 2 and row["qfm"]["reps"] == 0
    assert row["qcf"]["reps"] == 2
    assert all("boom" in r.error for r in res.records if r.model == "qfm")


def test_zero_noise_cell_qcf_near_zero():
    spec = ExperimentSpec(cells=((0.5, 200, 20),), reps=1, select_reps=0, models=("qcf",), grid="r=1;m=6;ridge=1e-4",
                          error_scale=0.0, seed=2)
    rec = run_benchmark(spec).records[0]
    panel, _ = generate_dgp(DGPConfig(N=200, T=20, seed=0, error_scale=0.0))
    raw = np.mean(np.abs(panel.y)) / 2
    assert rec.in_aqe < 0.02 * raw and rec.oos_aqe < 0.02 * raw
