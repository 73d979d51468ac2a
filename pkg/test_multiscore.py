"""
Tests for rdms: cumulative cutoffs with ranges, closest-cutoff pooling,
signed distances and bivariate boundary estimates.
"""

import math

import numpy as np
import pandas as pd
import pytest
import shapely
from scipy.optimize import minimize_scalar
from shapely.geometry import LineString

from analysis.manager import AnalysisManager
from analysis.multiscore import (
    CornerBoundary,
    PolylineBoundary,
    assign_closest_cutoff,
    boundary_point_estimates,
    cumulative_estimates,
    distance_to_point,
    parse_boundary,
    perpendicular_distance_to_boundary,
    run_rdms,
    selection_windows,
    signed_boundary_distances,
)
from core.datamodel import BoundarySpec, PerCutoffOptions, frame_dataset
from core.errors import DataConsistencyError, EstimationError, ValidationError
from core.localpoly import CutoffOptions, rd_estimate
from core.simgen import DgpSpec, generate


def _cumulative(n=3000, seed=0, noise_sd=1.0):
    sim = generate(DgpSpec(design="cumulative", n=n, seed=seed, noise_sd=noise_sd))
    return frame_dataset(sim.data[["y", "x"]], "cumulative")


def _bivariate(n=4000, seed=0):
    sim = generate(DgpSpec(design="bivariate", n=n, seed=seed, effects=(3.0,)))
    frame = sim.data.rename(columns={"x1": "x", "t": "treat"})
    return frame_dataset(frame, "bivariate")


# ---------------- CLOSEST CUTOFF ---------------- #

@pytest.mark.parametrize("x, expected", [(40.0, 33.0), (49.5, 33.0), (70.0, 66.0), (0.0, 33.0), (100.0, 66.0)])
def test_closest_cutoff(x, expected):
    assert assign_closest_cutoff(x, [33.0, 66.0]) == expected


def test_closest_cutoff_needs_cutoffs():
    with pytest.raises(ValidationError):
        assign_closest_cutoff(1.0, [])


# ---------------- DISTANCES ---------------- #

def test_point_distance_sign():
    assert distance_to_point((55.0, 50.0), (50.0, 50.0), 1).value == 5.0
    assert distance_to_point((55.0, 50.0), (50.0, 50.0), 0).value == -5.0
    on_point = distance_to_point((50.0, 50.0), (50.0, 50.0), 1).value
    assert on_point == 0.0 and math.copysign(1.0, on_point) == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_point_distance_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    center = rng.uniform(-50, 50, 2)
    theta = rng.uniform(0, 2 * math.pi)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    turn = lambda v: (rot @ (np.asarray(v) - center)) + center
    for _ in range(20):
        score, point = rng.uniform(0, 100, 2), rng.uniform(0, 100, 2)
        base = distance_to_point(score, point, 1).value
        turned = distance_to_point(turn(score), turn(point), 1).value
        assert abs(turned - base) < 1e-9


def test_corner_distances():
    corner = CornerBoundary(50.0, 50.0)
    assert perpendicular_distance_to_boundary((40.0, 40.0), corner, 1).value == pytest.approx(10.0)
    assert perpendicular_distance_to_boundary((60.0, 60.0), corner, 0).value == pytest.approx(-math.sqrt(200.0))
    assert perpendicular_distance_to_boundary((60.0, 30.0), corner, 0).value == pytest.approx(-10.0)
    assert perpendicular_distance_to_boundary((50.0, 20.0), corner, 1).value == 0.0


def _ray_distance_oracle(p, a, b, reach=1000.0):
    along_x = minimize_scalar(lambda t: math.hypot(p[0] - t, p[1] - b), bounds=(a - reach, a), method="bounded",
                              options={"xatol": 1e-10})
    along_y = minimize_scalar(lambda t: math.hypot(p[0] - a, p[1] - t), bounds=(b - reach, b), method="bounded",
                              options={"xatol": 1e-10})
    return min(along_x.fun, along_y.fun)


@pytest.mark.parametrize("seed", range(25))
def test_corner_distance_matches_oracles(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(20, 80, 2)
    pts = rng.uniform(0, 100, (40, 2))
    corner = CornerBoundary(a, b)
    ours = corner.distance(pts[:, 0], pts[:, 1])
    lshape = LineString([(a, b - 1000.0), (a, b), (a - 1000.0, b)])
    geometric = shapely.distance(shapely.points(pts[:, 0], pts[:, 1]), lshape)
    np.testing.assert_allclose(ours, geometric, atol=1e-9)
    for k in range(5):
        assert ours[k] == pytest.approx(_ray_distance_oracle(pts[k], a, b), abs=1e-6)


def test_corner_treatment_mismatch_names_rows():
    x1 = np.array([40.0, 60.0, 45.0])
    x2 = np.array([40.0, 60.0, 45.0])
    treat = np.array([1, 0, 0])
    with pytest.raises(DataConsistencyError) as err:
        signed_boundary_distances(x1, x2, treat, CornerBoundary(50.0, 50.0))
    assert err.value.rows == [3]
    np.testing.assert_allclose(signed_boundary_distances(x1, x2, np.array([1, 0, 1]), CornerBoundary(50.0, 50.0)),
                               [10.0, -math.sqrt(200.0), 5.0])


def test_polyline_distance():
    line = PolylineBoundary(((0.0, 0.0), (10.0, 0.0)))
    np.testing.assert_allclose(line.distance([5.0, 13.0], [3.0, 4.0]), [3.0, 5.0])
    # treated to the left of the direction of travel, the line itself included
    np.testing.assert_array_equal(line.contains([1.0, 1.0, 4.0], [1.0, -1.0, 0.0]), [True, False, True])


def test_open_polyline_region_matches_corner():
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 100, (500, 2))
    line = PolylineBoundary(((50.0, 0.0), (50.0, 50.0), (0.0, 50.0)))
    corner = CornerBoundary(50.0, 50.0)
    np.testing.assert_array_equal(line.contains(pts[:, 0], pts[:, 1]), corner.contains(pts[:, 0], pts[:, 1]))


def test_closed_polyline_encloses_treated_region():
    square = PolylineBoundary(((0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0), (0.0, 0.0)))
    assert square.closed
    np.testing.assert_array_equal(square.contains([5.0, 15.0, 10.0], [5.0, 5.0, 3.0]), [True, False, True])
    with pytest.raises(DataConsistencyError) as err:
        signed_boundary_distances(np.array([5.0, 15.0]), np.array([5.0, 5.0]), np.array([1, 1]), square)
    assert err.value.rows == [2]
    np.testing.assert_allclose(
        signed_boundary_distances(np.array([5.0, 15.0]), np.array([5.0, 5.0]), np.array([1, 0]), square),
        [5.0, -5.0])


def test_polyline_rotation_invariance():
    rng = np.random.default_rng(1)
    vertices = rng.uniform(-5, 5, (4, 2))
    pts = rng.uniform(-10, 10, (50, 2))
    theta = 0.7
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    base = PolylineBoundary(tuple(map(tuple, vertices))).distance(pts[:, 0], pts[:, 1])
    turned_pts = pts @ rot.T
    turned = PolylineBoundary(tuple(map(tuple, vertices @ rot.T))).distance(turned_pts[:, 0], turned_pts[:, 1])
    np.testing.assert_allclose(turned, base, atol=1e-9)


@pytest.mark.parametrize("text", ["polyline:0,0", "polyline:0,0;1", "polyline:0,0;1,1;0,0", "corner:1", "circle:1,2",
                                  "corner:a,b"])
def test_invalid_boundaries(text):
    with pytest.raises(ValidationError):
        parse_boundary(text)


def test_parse_boundary():
    assert parse_boundary("corner:50,50") == CornerBoundary(50.0, 50.0)
    line = parse_boundary("polyline:0,0;10,0;10,10")
    assert line.vertices == ((0.0, 0.0), (10.0, 0.0), (10.0, 10.0))
    assert line.describe() == "polyline:0,0;10,0;10,10"


# ---------------- CUMULATIVE CUTOFFS ---------------- #

RANGES = [(0.0, 65.5), (33.5, 100.0)]


def test_range_isolates_observations():
    data = _cumulative(seed=1)
    base = cumulative_estimates(data.y, data.x, [33.0, 66.0], RANGES)
    y = data.y.copy()
    y[data.x > 65.5] += 100.0
    moved = cumulative_estimates(y, data.x, [33.0, 66.0], RANGES)
    assert moved[0].to_dict() == base[0].to_dict()


def test_full_sample_reuse_warning():
    data = _cumulative(seed=2)
    manager = AnalysisManager(quiet=True)
    cumulative_estimates(data.y, data.x, [33.0, 66.0], manager=manager)
    assert any("full sample" in w["reason"] for w in manager.warnings())


def test_selection_windows():
    assert selection_windows([33.0, 66.0]) == [16.5, 16.5]
    assert selection_windows([10.0, 20.0, 50.0]) == [5.0, 5.0, 15.0]
    assert selection_windows([40.0]) == [None]


def test_ranges_containing_the_cells_change_nothing():
    data = _cumulative(n=5000, seed=3)
    ranged = cumulative_estimates(data.y, data.x, [33.0, 66.0], RANGES)
    full = cumulative_estimates(data.y, data.x, [33.0, 66.0])
    for a, b in zip(ranged, full):
        assert max(a.h + a.b) <= 16.5
        assert a.bwselect == "mserd"
        assert a.to_dict() == b.to_dict()


def test_invalid_range():
    data = _cumulative(seed=4)
    with pytest.raises(ValidationError):
        cumulative_estimates(data.y, data.x, [33.0, 66.0], [(40.0, 65.5), None])


def test_range_without_data_names_cutoff():
    data = _cumulative(seed=5)
    with pytest.raises(EstimationError, match="cutoff 33"):
        cumulative_estimates(data.y, data.x, [33.0, 66.0], [(32.95, 33.05), None])


def test_cutoffs_must_increase():
    data = _cumulative(seed=6)
    with pytest.raises(ValidationError):
        cumulative_estimates(data.y, data.x, [66.0, 33.0])


def test_cumulative_recovery():
    data = _cumulative(n=6000, seed=7, noise_sd=0.2)
    results = cumulative_estimates(data.y, data.x, [33.0, 66.0], RANGES)
    assert results[0].tau_bias_corrected == pytest.approx(5.0, abs=0.5)
    assert results[1].tau_bias_corrected == pytest.approx(2.0, abs=0.5)


def test_run_rdms_closest_pooling():
    data = _cumulative(seed=8)
    spec = BoundarySpec("cumulative", cutoffs=[33, 66], ranges=RANGES)
    outcome = run_rdms(data, spec, closest=True)
    assert outcome.xnorm_source == "closest"
    assert outcome.bundle.labels == ["33", "66", "pooled"]
    np.testing.assert_allclose(outcome.xnorm[data.x < 49.5], data.x[data.x < 49.5] - 33.0)


def test_run_rdms_option_conflicts():
    data = _cumulative(seed=9)
    spec = BoundarySpec("cumulative", cutoffs=[33, 66], ranges=RANGES)
    with pytest.raises(ValidationError):
        run_rdms(data, spec, xnorm="column", closest=True)
    with pytest.raises(ValidationError):
        run_rdms(data, BoundarySpec("bivariate", points=[(50, 50)]))


# ---------------- BIVARIATE SCORES ---------------- #

def test_boundary_point_estimates():
    data = _bivariate(seed=10)
    points = [(25.0, 50.0), (50.0, 50.0), (50.0, 25.0)]
    results = boundary_point_estimates(data, points)
    assert len(results) == 3
    assert all(r.cutoff == 0.0 for r in results)


def test_degenerate_second_score_matches_univariate():
    rng = np.random.default_rng(11)
    x = rng.uniform(0, 100, 1500)
    treat = (x >= 40.0).astype(int)
    y = 0.05 * x + 2.0 * treat + rng.normal(size=x.size)
    frame = pd.DataFrame({"y": y, "x": x, "x2": 7.0, "treat": treat})
    data = frame_dataset(frame, "bivariate")
    (result,) = boundary_point_estimates(data, [(40.0, 7.0)])
    assert result.to_dict() == rd_estimate(y, x - 40.0, 0.0).to_dict()


def test_one_sided_point_is_named():
    data = _bivariate(seed=12)
    frame = data.frame
    frame["treat"] = 1
    with pytest.raises(EstimationError, match="point"):
        boundary_point_estimates(frame_dataset(frame, "bivariate"), [(50.0, 50.0)])


def test_run_rdms_perpendicular_pooling():
    data = _bivariate(seed=13)
    spec = BoundarySpec("bivariate", points=[(25, 50), (50, 50), (50, 25)])
    outcome = run_rdms(data, spec, xnorm="perpendicular", perimeter=CornerBoundary(50.0, 50.0))
    assert outcome.labels == ["(25,50)", "(50,50)", "(50,25)"]
    assert outcome.xnorm_source == "corner:50,50"
    assert np.all((outcome.xnorm >= 0) == (data.treat == 1))
    assert outcome.pooled.tau_bias_corrected == pytest.approx(3.0, abs=1.0)
    assert outcome.bundle.V.shape == (4, 4)


def test_perpendicular_needs_boundary():
    data = _bivariate(seed=14)
    with pytest.raises(ValidationError):
        run_rdms(data, BoundarySpec("bivariate", points=[(50, 50)]), xnorm="perpendicular")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
