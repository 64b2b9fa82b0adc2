import numpy as np
import pytest

from icebhm.config import RatesStudyConfig, SmbStudyConfig
from icebhm.rates_study import run_rates_study
from icebhm.results import emit_results
from icebhm.scoring import grid_rmse, holdout_coverage, read_table, vertex_scores
from icebhm.smb_study import glacier_polygon, run_smb_study
from icebhm.transport import Grid, read_grid, write_grid


def _noiseless_seasons():
    seasons = SmbStudyConfig().seasons
    return {k: v.model_copy(update={"residual_sigma": 0.0}) for k, v in seasons.items()}


def test_smb_noiseless_linear_truth_recovered(tmp_path):
    cfg = SmbStudyConfig(
        first_year=2000,
        last_year=2001,
        seasons=_noiseless_seasons(),
        fit_field=False,
        truth_noise=False,
        noise_sd=1e-9,
        mesh_edge=0.1,
    )
    rep = run_smb_study(cfg, seed=0, out_dir=tmp_path)
    assert rep.summary["n_fits"] == 4
    for tag, rmse in rep.summary["grid_rmse"].items():
        assert rmse < 1e-6, tag


def test_smb_study_outputs(tmp_path):
    cfg = SmbStudyConfig(first_year=2003, last_year=2004, mesh_edge=0.1, hyperparameters="truth")
    rep = run_smb_study(cfg, seed=4, out_dir=tmp_path)
    emit_results(rep)
    for year in (2003, 2004):
        g, w = read_grid(tmp_path / f"maps/{year}_winter_mean.csv")
        _, s = read_grid(tmp_path / f"maps/{year}_summer_mean.csv")
        _, net = read_grid(tmp_path / f"maps/{year}_net_mean.csv")
        np.testing.assert_allclose(net, w + s, rtol=1e-12, equal_nan=True)
        assert np.isnan(net).any() and np.isfinite(net).any()
        assert g.dx == pytest.approx(0.01)
    fits = read_table(tmp_path / "fits.csv")
    assert len(fits) == 4
    assert all(22 - cfg.n_holdout <= int(f["n_fit"]) <= 25 - cfg.n_holdout for f in fits)
    cov, n = holdout_coverage(sorted((tmp_path / "holdout").glob("*.csv")))
    assert n == 4 * cfg.n_holdout
    assert cov == rep.summary["holdout_coverage_95"]


def test_smb_study_reproducible(tmp_path):
    cfg = SmbStudyConfig(first_year=2000, last_year=2000, mesh_edge=0.1, hyperparameters="truth", write_maps=False)
    a = run_smb_study(cfg, seed=9, out_dir=tmp_path / "a")
    b = run_smb_study(cfg, seed=9, out_dir=tmp_path / "b")
    assert (tmp_path / "a/fits.csv").read_bytes() == (tmp_path / "b/fits.csv").read_bytes()
    assert a.summary["holdout_coverage_95"] == b.summary["holdout_coverage_95"]


def test_glacier_polygon_shape():
    poly = glacier_polygon()
    assert poly.is_valid
    x0, y0, x1, y1 = poly.bounds
    assert 0 < x1 - x0 <= 1.0 and 0 < y1 - y0 <= 1.0


def test_grid_rmse_and_mask(tmp_path):
    g = Grid(3, 2, 1.0)
    truth = np.array([[1.0, 2.0, np.nan], [0.0, 0.0, 0.0]])
    pred = np.array([[1.0, 4.0, 5.0], [3.0, 0.0, 0.0]])
    write_grid(tmp_path / "t.csv", g, truth)
    write_grid(tmp_path / "p.csv", g, pred)
    write_grid(tmp_path / "m.csv", g, np.array([[1, 1, 1], [0, 0, 0]]))
    assert grid_rmse(tmp_path / "t.csv", tmp_path / "p.csv") == pytest.approx(np.sqrt((4 + 9) / 5))
    assert grid_rmse(tmp_path / "t.csv", tmp_path / "p.csv", tmp_path / "m.csv") == pytest.approx(np.sqrt(2))
    write_grid(tmp_path / "q.csv", Grid(3, 2, 0.5), pred)
    with pytest.raises(ValueError):
        grid_rmse(tmp_path / "t.csv", tmp_path / "q.csv")


def test_holdout_coverage_counts(tmp_path):
    p = tmp_path / "h.csv"
    # z(0.95) = 1.96: |v - m| = 1.9 inside, 2.0 outside
    p.write_text("site,value,mean,sd\n0,1.9,0,1\n1,-2.0,0,1\n2,0,0,1\n3,10,0,1\n")
    cov, n = holdout_coverage([p, p])
    assert (cov, n) == (0.5, 8)
    assert holdout_coverage([p], level=0.999)[0] == 0.75


def test_vertex_scores_pooling(tmp_path):
    t = tmp_path / "t.csv"
    p = tmp_path / "p.csv"
    t.write_text("process,epoch,index,value\nsmb,0,1,0\nsmb,1,1,0\nsmb,0,2,0\nice,0,1,0\n")
    # vertex (smb,1): errors 0.5 and 1.5, prior sd 1 and 1 -> rmse sqrt(1.25) > 1, fails
    # vertex (smb,2): error 0.5, prior sd 1 -> passes; (ice,1): error 0.1, prior sd 0.2 -> passes
    p.write_text(
        "process,epoch,index,mean,sd,prior_sd,stipple\n"
        "smb,0,1,0.5,1,1,0\nsmb,1,1,1.5,1,1,1\nsmb,0,2,0.5,1,1,0\nice,0,1,0.1,1,0.2,0\n"
    )
    s = vertex_scores([(t, p)])
    assert s["smb"] == {"pass_fraction": 0.5, "n_vertices": 2, "median_ratio": pytest.approx((np.sqrt(1.25) + 0.5) / 2)}
    assert s["ice"]["pass_fraction"] == 1.0
    bad = tmp_path / "bad.csv"
    bad.write_text("process,epoch,index,mean,sd,prior_sd,stipple\nfirn,0,1,0,1,1,0\n")
    with pytest.raises(KeyError):
        vertex_scores([(t, bad)])


SMALL_RATES = dict(
    n_epochs=2,
    coarse_edge=0.35,
    fine_edge=0.15,
    truth_cells=16,
    n_gps=8,
    n_altimetry=40,
    gravimetry_tiles=4,
    gravimetry_cell=0.05,
    n_posterior_draws=50,
    write_maps=False,
)


def test_small_rates_study(tmp_path):
    cfg = RatesStudyConfig(**SMALL_RATES)
    rep = run_rates_study(cfg, seed=1, out_dir=tmp_path)
    s = rep.summary
    assert not s["warnings"]
    assert set(s["vertex_scores"]) == {"gia", "smb", "firn", "ice"}
    assert "mean_abs_corr_with_gravimetry" in s
    # GIA is pinned near the GPS sites: posterior sd well below prior sd there on average
    pred = [r for r in read_table(tmp_path / "pred/rep00.csv") if r["process"] == "gia" and r["epoch"] == "0"]
    sd = np.array([float(r["sd"]) for r in pred])
    psd = np.array([float(r["prior_sd"]) for r in pred])
    assert np.all(sd <= psd * 1.05)
    assert np.median(sd / psd) < 0.8


def test_rates_study_warns_on_unseen_process(tmp_path):
    cfg = RatesStudyConfig(**{**SMALL_RATES, "instruments": ["GPS", "Gravimetry"], "compare_without_gravimetry": False})
    rep = run_rates_study(cfg, seed=2, out_dir=tmp_path)
    assert any("'firn'" in w for w in rep.summary["warnings"])
