"""
Tests for rdmcplot: bin selection, binned statistics, side polynomials
and the genvars columns.
"""

import numpy as np
import pandas as pd
import pytest
from scipy.stats import norm

from analysis.manager import AnalysisManager
from analysis.multicutoff import run_rdmc
from analysis.multiscore import run_rdms
from analysis.rdplot import (
    BinSpec,
    assign_bins,
    bin_stats,
    build_plot_data,
    choose_bins,
    default_nbins,
    estimates_plot_frame,
    run_rdmcplot,
    side_polynomial,
)
from core.datamodel import BoundarySpec, frame_dataset
from core.errors import ValidationError
from core.localpoly import CutoffOptions, rd_estimate
from core.simgen import DgpSpec, generate

Z95 = norm.ppf(0.975)


def _dataset(n=1500, seed=3):
    sim = generate(DgpSpec(n=n, seed=seed))
    return frame_dataset(sim.data[["y", "x", "c"]])


# ---------------- BINS ---------------- #

def test_default_nbins():
    assert default_nbins(100) == 10
    assert default_nbins(101) == 11
    assert default_nbins(1) == 1


def test_evenly_spaced_edges():
    xs = np.arange(100.0)
    edges = choose_bins(xs, BinSpec("es"))
    np.testing.assert_array_equal(edges, np.linspace(0.0, 99.0, 11))


def test_evenly_spaced_support():
    edges = choose_bins(np.array([1.0, 2.0, 3.0]), BinSpec("es", 2, 2), support=(0.0, 4.0))
    np.testing.assert_array_equal(edges, [0.0, 2.0, 4.0])


def test_quantile_edges():
    edges = choose_bins(np.array([1.0, 2.0, 3.0, 4.0]), BinSpec("qs", 2, 2))
    np.testing.assert_allclose(edges, [1.0, 2.5, 4.0])


def test_scale_multiplies_default():
    assert choose_bins(np.arange(100.0), BinSpec("es"), scale=2.0).size == 21


def test_too_many_bins():
    with pytest.raises(ValidationError, match="5 bins"):
        choose_bins(np.array([1.0, 2.0, 3.0]), BinSpec("es", 5, 5))


@pytest.mark.parametrize("kwargs", [{"method": "ew"}, {"nbins_left": 0}])
def test_invalid_bin_spec(kwargs):
    with pytest.raises(ValidationError):
        BinSpec(**kwargs)


def test_assign_bins_closed_last_edge():
    edges = np.array([0.0, 1.0, 2.0])
    np.testing.assert_array_equal(assign_bins([0.0, 0.5, 1.0, 2.0, 2.5, -0.1], edges), [0, 0, 1, 1, -1, -1])


# ---------------- BIN STATISTICS ---------------- #

def test_two_point_bin_ci():
    stats = bin_stats([2.0, 4.0], [0.2, 0.7], np.array([0.0, 1.0]))
    row = stats.loc[0]
    assert row["count"] == 2
    assert row["mean_y"] == pytest.approx(3.0)
    assert row["ci_l"] == pytest.approx(3.0 - Z95)
    assert row["ci_r"] == pytest.approx(3.0 + Z95)


def test_constant_and_single_bins_are_degenerate():
    stats = bin_stats([5.0, 5.0, 5.0, 7.0], [0.1, 0.2, 0.3, 1.5], np.array([0.0, 1.0, 2.0]))
    assert stats.loc[0, "ci_l"] == stats.loc[0, "ci_r"] == 5.0
    assert stats.loc[1, "ci_l"] == stats.loc[1, "ci_r"] == 7.0


def test_empty_bin_kept():
    stats = bin_stats([1.0, 2.0], [0.1, 0.2], np.array([0.0, 1.0, 2.0]))
    assert list(stats.index) == [0, 1]
    assert stats.loc[1, "count"] == 0
    assert np.isnan(stats.loc[1, "mean_y"])


def test_bin_stats_match_group_scan():
    rng = np.random.default_rng(7)
    xs = rng.uniform(0, 10, 300)
    ys = rng.normal(size=300)
    edges = np.linspace(0, 10, 6)
    stats = bin_stats(ys, xs, edges, level=90.0)
    z = norm.ppf(0.95)
    for k in range(5):
        inside = (xs >= edges[k]) & ((xs < edges[k + 1]) if k < 4 else (xs <= edges[k + 1]))
        sel = ys[inside]
        assert stats.loc[k, "count"] == sel.size
        assert stats.loc[k, "mean_x"] == pytest.approx(xs[inside].mean())
        assert stats.loc[k, "mean_y"] == pytest.approx(sel.mean())
        half = z * sel.std(ddof=1) / np.sqrt(sel.size)
        assert stats.loc[k, "ci_r"] - stats.loc[k, "mean_y"] == pytest.approx(half)


# ---------------- POLYNOMIALS ---------------- #

def test_polynomial_reproduces_cubic():
    xs = np.linspace(-5, 5, 101)
    ys = np.where(xs >= 0, 1.0 + 0.5 * xs ** 3, -2.0 + xs - 0.1 * xs ** 2)
    for side in ("left", "right"):
        poly = side_polynomial(ys, xs, 0.0, 4, side=side)
        mask = xs < 0 if side == "left" else xs >= 0
        np.testing.assert_allclose(poly(xs[mask]), ys[mask], atol=1e-8)


def test_polynomial_jump_matches_estimate():
    rng = np.random.default_rng(2)
    xs = rng.uniform(-10, 10, 800)
    ys = 0.2 * xs + 1.5 * (xs >= 0) + rng.normal(size=800)
    left = side_polynomial(ys, xs, 0.0, 1, h=5.0, kernel="uniform", side="left")
    right = side_polynomial(ys, xs, 0.0, 1, h=5.0, kernel="uniform", side="right")
    est = rd_estimate(ys, xs, 0.0, CutoffOptions(h_left=5.0, kernel="uniform"))
    assert right(0.0) - left(0.0) == pytest.approx(est.tau_conventional, rel=1e-10)


# ---------------- GENVARS ---------------- #

def test_genvars_columns():
    data = _dataset()
    outcome = run_rdmcplot(data)
    expected = [f"rdmcplot_{name}_{j}" for j in (1, 2) for name in ("hat_y", "mean_x", "mean_y", "ci_l", "ci_r")]
    assert list(outcome.genvars.columns) == expected
    assert len(outcome.genvars) == len(data)
    mask = data.group_mask(33.0)
    assert outcome.genvars.loc[~mask, "rdmcplot_hat_y_1"].isna().all()
    assert outcome.genvars.loc[mask, "rdmcplot_hat_y_1"].notna().all()
    assert outcome.genvars.loc[mask, "rdmcplot_mean_y_1"].notna().all()


def test_genvars_match_groupby_and_polyfit():
    data = _dataset(n=2000, seed=9)
    outcome = run_rdmcplot(data, [{"p": 1, "nbins_left": 8, "nbins_right": 8}] * 2)
    genvars = outcome.genvars
    y, x = np.asarray(data.y), np.asarray(data.x)
    for s in outcome.series:
        c, j = s.cutoff, s.index
        mask = data.group_mask(c)
        for side in ("left", "right"):
            rows = np.flatnonzero(mask & ((x < c) if side == "left" else (x >= c)))
            edges = s.edges[side]
            # closed last bin
            idx = np.minimum(np.searchsorted(edges, x[rows], side="right") - 1, len(edges) - 2)
            frame = pd.DataFrame({"bin": idx, "x": x[rows], "y": y[rows]})
            grouped = frame.groupby("bin").agg(mx=("x", "mean"), my=("y", "mean"), sd=("y", "std"), n=("y", "size"))
            stats = grouped.loc[idx]
            half = Z95 * stats["sd"].to_numpy() / np.sqrt(stats["n"].to_numpy())
            np.testing.assert_allclose(genvars[f"rdmcplot_mean_x_{j}"].to_numpy()[rows], stats["mx"], rtol=1e-12)
            np.testing.assert_allclose(genvars[f"rdmcplot_mean_y_{j}"].to_numpy()[rows], stats["my"], rtol=1e-12)
            np.testing.assert_allclose(genvars[f"rdmcplot_ci_l_{j}"].to_numpy()[rows],
                                       stats["my"].to_numpy() - half, rtol=1e-12)
            np.testing.assert_allclose(genvars[f"rdmcplot_ci_r_{j}"].to_numpy()[rows],
                                       stats["my"].to_numpy() + half, rtol=1e-12)
            line = np.polyfit(x[rows] - c, y[rows], 1)
            np.testing.assert_allclose(genvars[f"rdmcplot_hat_y_{j}"].to_numpy()[rows],
                                       np.polyval(line, x[rows] - c), rtol=1e-10)


def test_nobins_leaves_polynomial_unchanged():
    data = _dataset(seed=4)
    full = run_rdmcplot(data).genvars
    bare = run_rdmcplot(data, nobins=True).genvars
    assert list(bare.columns) == ["rdmcplot_hat_y_1", "rdmcplot_hat_y_2"]
    pd.testing.assert_series_equal(bare["rdmcplot_hat_y_1"], full["rdmcplot_hat_y_1"])


def test_nopoly_drops_hat_y():
    columns = run_rdmcplot(_dataset(seed=5), nopoly=True).genvars.columns
    assert not any("hat_y" in c for c in columns)
    assert "rdmcplot_ci_r_2" in columns


def test_plot_rows_and_presentation_options():
    manager = AnalysisManager(quiet=True)
    rows = [{"p": 1, "nbins_left": 5, "lineopt": "red"}, {"h_left": 10.0}]
    series = build_plot_data(_dataset(seed=6), rows, manager=manager)
    assert series[0].edges["left"].size == 6 and series[0].edges["right"].size == 6
    assert series[0].polynomials["left"].coefficients.size == 2
    assert series[0].options["presentation"] == {"lineopt": "red"}
    assert series[1].polynomials["right"].bandwidth == 10.0
    assert any("presentation" in e["reason"] for e in manager.get_audit_trail(None))


def test_plot_row_count_mismatch():
    with pytest.raises(ValidationError):
        build_plot_data(_dataset(seed=7), [{}])


def test_estimates_plot_frame():
    frame = estimates_plot_frame(run_rdmc(_dataset(n=3000, seed=8)))
    assert list(frame["label"]) == ["33", "66", "weighted", "pooled"]
    assert (frame["ci_l"] <= frame["estimate"]).all() and (frame["estimate"] <= frame["ci_r"]).all()


def test_estimates_plot_frame_for_boundary_points():
    sim = generate(DgpSpec(design="bivariate", n=4000, seed=8, effects=(3.0,)))
    data = frame_dataset(sim.data.rename(columns={"x1": "x", "t": "treat"}), "bivariate")
    outcome = run_rdms(data, BoundarySpec("bivariate", points=[(25, 50), (50, 25)]))
    frame = estimates_plot_frame(outcome)
    assert list(frame["label"]) == ["(25,50)", "(50,25)"]
    assert frame["cutoff"].isna().all() and frame["weight"].isna().all()
    assert list(frame["estimate"]) == [r.tau_bias_corrected for r in outcome.results]


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
