"""
RDMS - MULTIPLE SCORES
======================
Cumulative cutoffs on one score (with optional estimation ranges) and
bivariate scores estimated at boundary points through signed distances.

Signed distance convention: positive = treated, negative = control,
units at distance 0 count as treated.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import shapely
from joblib import Parallel, delayed
from shapely.geometry import LineString, Polygon

from analysis.manager import AnalysisManager, resolve_manager
from analysis.multicutoff import EstimatesBundle, pooled_estimate
from core.datamodel import BoundarySpec, MultiCutoffDataset, MultiScoreDataset, PerCutoffOptions, format_cutoff
from core.errors import DataConsistencyError, EstimationError, InsufficientDataError, ValidationError
from core.localpoly import CutoffOptions, RdResult, rd_estimate

STAGE = "RDMS"

# Rows listed in a data-consistency error message.
MAX_REPORTED_ROWS = 10


@dataclass(frozen=True)
class SignedDistance:
    value: float
    reference: Any = None


@dataclass
class CumulativeAssignment:
    cutoffs: Tuple[float, ...]
    assigned: np.ndarray
    ranges: Tuple[Optional[Tuple[float, float]], ...]

    def counts(self) -> Dict[float, int]:
        return {c: int(np.sum(self.assigned == c)) for c in self.cutoffs}


# ============================================================
# CUMULATIVE CUTOFFS
# ============================================================

def assign_closest_cutoff(x: float, cutoffs: Sequence[float]) -> float:
    """Nearest cutoff; an exact midpoint goes to the lower one."""
    if not len(cutoffs):
        raise ValidationError("no cutoffs to assign")
    return float(closest_cutoffs(np.array([x]), cutoffs)[0])


def closest_cutoffs(xs, cutoffs: Sequence[float]) -> np.ndarray:
    cuts = np.sort(np.asarray(cutoffs, dtype=float))
    dist = np.abs(np.asarray(xs, dtype=float)[:, None] - cuts[None, :])
    # argmin keeps the first minimum, i.e. the lower cutoff on ties
    return cuts[np.argmin(dist, axis=1)]


def resolve_ranges(cutoffs: Sequence[float], ranges) -> Tuple[Optional[Tuple[float, float]], ...]:
    """Per-cutoff [lo, hi]; a bare number r stands for [c - r, c + r]."""
    if ranges is None:
        return tuple(None for _ in cutoffs)
    if len(ranges) != len(cutoffs):
        raise ValidationError(f"{len(ranges)} ranges given for {len(cutoffs)} cutoffs")
    out = []
    for cut, rng in zip(cutoffs, ranges):
        if rng is None:
            out.append(None)
        elif np.isscalar(rng):
            r = float(rng)
            if not r > 0:
                raise ValidationError(f"range half-width must be positive (got {r:g})")
            out.append((cut - r, cut + r))
        else:
            lo, hi = float(rng[0]), float(rng[1])
            if not lo < cut < hi:
                raise ValidationError(f"range [{lo:g}, {hi:g}] does not contain the cutoff {cut:g}")
            out.append((lo, hi))
    return tuple(out)


def selection_windows(cutoffs: Sequence[float]) -> List[Optional[float]]:
    """Half the distance to the nearest neighbouring cutoff: the closest-cutoff cell of each cutoff."""
    cuts = [float(c) for c in cutoffs]
    windows = []
    for j, cut in enumerate(cuts):
        gaps = [abs(cut - other) for k, other in enumerate(cuts) if k != j]
        windows.append(min(gaps) / 2.0 if gaps else None)
    return windows


def _range_mask(xs: np.ndarray, rng: Optional[Tuple[float, float]]) -> np.ndarray:
    if rng is None:
        return np.ones(xs.size, dtype=bool)
    return (xs >= rng[0]) & (xs <= rng[1])


def _estimate_labelled(y, x, w, cutoff, opts, label, select_within=None) -> RdResult:
    try:
        if y.size == 0:
            raise InsufficientDataError("empty estimation sample")
        return rd_estimate(y, x, cutoff, opts, weights=w, select_within=select_within)
    except EstimationError as err:
        raise err.with_label(label)


def _estimation_window(result: RdResult, rng: Optional[Tuple[float, float]]) -> Tuple[float, float]:
    lo = result.cutoff - max(result.h[0], result.b[0])
    hi = result.cutoff + max(result.h[1], result.b[1])
    if rng is not None:
        lo, hi = max(lo, rng[0]), min(hi, rng[1])
    return lo, hi


def overlap_counts(xs, results: Sequence[RdResult], ranges) -> List[int]:
    """Observations used by both adjacent cutoffs' estimation windows."""
    xs = np.asarray(xs, dtype=float)
    counts = []
    for j in range(len(results) - 1):
        lo_a, hi_a = _estimation_window(results[j], ranges[j])
        lo_b, hi_b = _estimation_window(results[j + 1], ranges[j + 1])
        both = (xs >= max(lo_a, lo_b)) & (xs <= min(hi_a, hi_b))
        counts.append(int(both.sum()))
    return counts


def cumulative_estimates(ys, xs, cutoffs: Sequence[float], ranges=None,
                         options: Optional[PerCutoffOptions] = None, weights=None, n_jobs: int = 1,
                         manager: Optional[AnalysisManager] = None) -> List[RdResult]:
    """
    rd_estimate at each ordered cutoff on the observations inside its range.
    Without ranges every cutoff sees the full sample and a reuse warning is raised.

    Data-driven bandwidths are selected on the cutoff's closest-cutoff cell
    only, so a range that contains the cell leaves the estimate bit-identical.
    """
    manager = resolve_manager(manager)
    ys = np.asarray(ys, dtype=float)
    xs = np.asarray(xs, dtype=float)
    w = None if weights is None else np.asarray(weights, dtype=float)
    cuts = [float(c) for c in cutoffs]
    if any(b <= a for a, b in zip(cuts, cuts[1:])):
        raise ValidationError("cumulative cutoffs must be strictly increasing")
    options = options if options is not None else PerCutoffOptions.defaults(len(cuts))
    if len(options) != len(cuts):
        raise ValidationError(f"{len(options)} option records for {len(cuts)} cutoffs")
    resolved = resolve_ranges(cuts, ranges)

    if all(r is None for r in resolved) and len(cuts) > 1:
        manager.warn(STAGE, "no ranges given: every cutoff uses the full sample, observations beyond a "
                            "neighbouring cutoff may mix treatment levels")

    tasks = []
    for cut, rng, opts, window in zip(cuts, resolved, options, selection_windows(cuts)):
        mask = _range_mask(xs, rng)
        tasks.append((ys[mask], xs[mask], None if w is None else w[mask], cut, opts,
                      f"cutoff {format_cutoff(cut)}", window))
    results = Parallel(n_jobs=n_jobs)(delayed(_estimate_labelled)(*task) for task in tasks)

    for j, count in enumerate(overlap_counts(xs, results, resolved)):
        if count:
            manager.warn(STAGE, f"{count} observations enter the estimation of both cutoffs "
                                f"{format_cutoff(cuts[j])} and {format_cutoff(cuts[j + 1])}",
                         overlap=count)
    return results


def closest_cutoff_dataset(dataset: MultiScoreDataset, cutoffs: Sequence[float]) -> MultiCutoffDataset:
    """Each unit labelled with its nearest cutoff, ready for the rdmc pooled estimate."""
    frame = dataset.frame
    frame["c"] = closest_cutoffs(frame["x"].to_numpy(), cutoffs)
    return MultiCutoffDataset(frame, dataset.report)


# ============================================================
# BIVARIATE SCORES
# ============================================================

def distance_to_point(score: Sequence[float], b: Sequence[float], treated: int) -> SignedDistance:
    """Euclidean distance from (x1, x2) to b, signed by treatment."""
    value = math.hypot(score[0] - b[0], score[1] - b[1])
    return SignedDistance(value if treated else -value, reference=(float(b[0]), float(b[1])))


def signed_point_distances(x1, x2, treat, b: Sequence[float]) -> np.ndarray:
    dist = np.hypot(np.asarray(x1, dtype=float) - b[0], np.asarray(x2, dtype=float) - b[1])
    return np.where(np.asarray(treat) == 1, dist, -dist)


@dataclass(frozen=True)
class CornerBoundary:
    """Frontier of the treated region {x1 <= a} and {x2 <= b}."""
    a: float
    b: float

    def contains(self, x1, x2) -> np.ndarray:
        return (np.asarray(x1) <= self.a) & (np.asarray(x2) <= self.b)

    def distance(self, x1, x2) -> np.ndarray:
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        # horizontal ray {x1 <= a, x2 = b} and vertical ray {x1 = a, x2 <= b}
        horizontal = np.hypot(x1 - np.minimum(x1, self.a), x2 - self.b)
        vertical = np.hypot(x1 - self.a, x2 - np.minimum(x2, self.b))
        return np.minimum(horizontal, vertical)

    def describe(self) -> str:
        return f"corner:{self.a:g},{self.b:g}"


@dataclass(frozen=True)
class PolylineBoundary:
    """
    Boundary through the given vertices. A closed polyline (last vertex equal
    to the first) encloses the treated region; on an open one the treated side
    lies to the left of the direction of travel.
    """
    vertices: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        if len(self.vertices) < 2:
            raise ValidationError(f"polyline boundary needs at least 2 vertices (got {len(self.vertices)})")
        object.__setattr__(self, "vertices", tuple((float(a), float(b)) for a, b in self.vertices))
        if self.closed and len(self.vertices) < 4:
            raise ValidationError("closed polyline boundary needs at least 3 distinct vertices")

    @property
    def closed(self) -> bool:
        return self.vertices[0] == self.vertices[-1]

    @property
    def line(self) -> LineString:
        return LineString(self.vertices)

    def contains(self, x1, x2) -> np.ndarray:
        """Treated-region membership; points on the line count as treated."""
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        pts = shapely.points(x1, x2)
        if self.closed:
            return np.asarray(shapely.covers(Polygon(self.vertices), pts), dtype=bool)

        # side of the nearest segment; segments sharing a nearest vertex agree
        line = self.line
        verts = np.asarray(self.vertices)
        steps = np.diff(verts, axis=0)
        cum = np.concatenate([[0.0], np.cumsum(np.hypot(steps[:, 0], steps[:, 1]))])
        along = np.asarray(shapely.line_locate_point(line, pts), dtype=float)
        seg = np.clip(np.searchsorted(cum, along, side="right") - 1, 0, len(steps) - 1)
        nearest = shapely.line_interpolate_point(line, along)
        offset_x = x1 - shapely.get_x(nearest)
        offset_y = x2 - shapely.get_y(nearest)
        cross = steps[seg, 0] * offset_y - steps[seg, 1] * offset_x
        return (cross >= 0) | (shapely.distance(pts, line) == 0)

    def distance(self, x1, x2) -> np.ndarray:
        pts = shapely.points(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
        return np.asarray(shapely.distance(pts, self.line), dtype=float)

    def describe(self) -> str:
        return "polyline:" + ";".join(f"{a:g},{b:g}" for a, b in self.vertices)


Boundary = Union[CornerBoundary, PolylineBoundary]


def parse_boundary(text: str) -> Boundary:
    """'corner:a,b' or 'polyline:x,y;x,y;...'."""
    kind, _, body = str(text).partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "corner":
            a, b = (float(v) for v in body.split(","))
            return CornerBoundary(a, b)
        if kind == "polyline":
            vertices = [tuple(float(v) for v in pair.split(",")) for pair in body.split(";") if pair.strip()]
            if any(len(v) != 2 for v in vertices):
                raise ValueError
            return PolylineBoundary(tuple(vertices))
    except ValueError:
        raise ValidationError(f"malformed boundary '{text}'")
    raise ValidationError(f"unknown boundary kind '{kind}' (expected corner or polyline)")


def perpendicular_distance_to_boundary(score: Sequence[float], boundary: Boundary, treated: int) -> SignedDistance:
    value = float(boundary.distance(np.array([score[0]]), np.array([score[1]]))[0])
    return SignedDistance(value if treated else -value, reference=boundary.describe())


def signed_boundary_distances(x1, x2, treat, boundary: Boundary, row_ids=None) -> np.ndarray:
    """
    Signed perpendicular distance for every unit. The declared treatment must
    match the boundary's treated region; mismatches raise with their rows.
    """
    treat = np.asarray(treat)
    dist = boundary.distance(x1, x2)
    bad = np.flatnonzero(boundary.contains(x1, x2) != (treat == 1))
    if bad.size:
        ids = (np.asarray(row_ids)[bad] if row_ids is not None else bad) + 1
        shown = ", ".join(str(int(r)) for r in ids[:MAX_REPORTED_ROWS])
        raise DataConsistencyError(
            f"treatment indicator disagrees with the {boundary.describe()} region in {bad.size} rows ({shown})",
            rows=[int(r) for r in ids],
        )
    return np.where(treat == 1, dist, -dist)


def boundary_point_estimates(dataset: MultiScoreDataset, points: Sequence[Sequence[float]],
                             options: Optional[PerCutoffOptions] = None, n_jobs: int = 1) -> List[RdResult]:
    """rd_estimate on (y, signed distance to b_j) at 0 for each boundary point."""
    options = options if options is not None else PerCutoffOptions.defaults(len(points))
    if len(options) != len(points):
        raise ValidationError(f"{len(options)} option records for {len(points)} boundary points")
    y, w = dataset.y, dataset.weights
    x1, x2, treat = dataset.x, dataset.x2, dataset.treat
    tasks = []
    for pt, opts in zip(points, options):
        dist = signed_point_distances(x1, x2, treat, pt)
        label = f"point ({format_cutoff(pt[0])},{format_cutoff(pt[1])})"
        tasks.append((y, dist, w, 0.0, opts, label))
    return Parallel(n_jobs=n_jobs)(delayed(_estimate_labelled)(*task) for task in tasks)


def pooled_on_xnorm(ys, xnorm, pooled_options: Optional[CutoffOptions] = None, weights=None) -> RdResult:
    """rd_estimate on (y, xnorm) at 0."""
    return _estimate_labelled(np.asarray(ys, dtype=float), np.asarray(xnorm, dtype=float),
                              None if weights is None else np.asarray(weights, dtype=float),
                              0.0, pooled_options, "pooled")


# ============================================================
# PIPELINE
# ============================================================

@dataclass
class RdmsOutcome:
    mode: str
    labels: List[str]
    results: List[RdResult]
    options: PerCutoffOptions
    pooled: Optional[RdResult] = None
    pooled_options: Optional[CutoffOptions] = None
    xnorm_source: Optional[str] = None
    ranges: Optional[Tuple[Optional[Tuple[float, float]], ...]] = None
    xnorm: Optional[np.ndarray] = field(default=None, repr=False)
    cutoffs: Tuple[float, ...] = ()

    @property
    def bundle(self) -> EstimatesBundle:
        labels = list(self.labels)
        b = [r.tau_bias_corrected for r in self.results]
        var = [r.se_robust ** 2 for r in self.results]
        if self.pooled is not None:
            labels.append("pooled")
            b.append(self.pooled.tau_bias_corrected)
            var.append(self.pooled.se_robust ** 2)
        return EstimatesBundle(labels, np.array(b), np.diag(var))


def run_rdms(dataset: MultiScoreDataset, boundary: BoundarySpec, options: Optional[PerCutoffOptions] = None,
             pooled_options: Optional[CutoffOptions] = None, xnorm: Optional[str] = None,
             perimeter: Optional[Boundary] = None, closest: bool = False, level: float = 95.0,
             n_jobs: int = 1, manager: Optional[AnalysisManager] = None) -> RdmsOutcome:
    """
    rdms run. xnorm is a dataset column name, 'perpendicular' (needs
    `perimeter`), or None; in cumulative mode `closest` pools on the
    closest-cutoff normalization instead.
    """
    manager = resolve_manager(manager)
    if boundary.mode != dataset.mode:
        raise ValidationError(f"{boundary.mode} boundary given for a {dataset.mode} dataset")
    options = options if options is not None else PerCutoffOptions.defaults(len(boundary), level)
    pooled_options = pooled_options if pooled_options is not None else CutoffOptions(level=level)

    if dataset.report is not None:
        if dataset.report.rows_dropped:
            manager.warn(STAGE, f"dropped {dataset.report.rows_dropped} rows with missing values")
        if dataset.report.mass_points:
            manager.warn(STAGE, f"{dataset.report.mass_points} observations share a score value (mass points); no adjustment applied")

    outcome = RdmsOutcome(dataset.mode, boundary.labels, [], options)
    if dataset.mode == "cumulative":
        outcome.cutoffs = tuple(float(c) for c in boundary.cutoffs)

    # 1. Cutoff / boundary point estimates
    if dataset.mode == "cumulative":
        outcome.ranges = resolve_ranges(boundary.cutoffs, boundary.ranges)
        outcome.results = cumulative_estimates(dataset.y, dataset.x, boundary.cutoffs, boundary.ranges, options,
                                               dataset.weights, n_jobs, manager)
    else:
        outcome.results = boundary_point_estimates(dataset, boundary.points, options, n_jobs)
    for label, res in zip(outcome.labels, outcome.results):
        manager.info(STAGE, f"{label}: {res.tau_bias_corrected:.6g} (h={res.h[0]:.4g}/{res.h[1]:.4g})")

    # 2. Pooled estimate
    if xnorm is not None and closest:
        raise ValidationError("choose either xnorm or the closest-cutoff pooled estimate, not both")
    if closest:
        if dataset.mode != "cumulative":
            raise ValidationError("closest-cutoff pooling applies to cumulative designs only")
        pooled_data = closest_cutoff_dataset(dataset, boundary.cutoffs)
        outcome.pooled = pooled_estimate(pooled_data, pooled_options)
        outcome.xnorm = pooled_data.x - pooled_data.c
        outcome.xnorm_source = "closest"
    elif xnorm is not None:
        if xnorm == "perpendicular":
            if dataset.mode != "bivariate" or perimeter is None:
                raise ValidationError("perpendicular xnorm needs a bivariate design and a boundary description")
            normalized = signed_boundary_distances(dataset.x, dataset.x2, dataset.treat, perimeter,
                                                   row_ids=dataset.row_ids)
            outcome.xnorm_source = perimeter.describe()
        elif xnorm == "column":
            normalized = dataset.column("xnorm")
            outcome.xnorm_source = "column"
        else:
            raise ValidationError(f"invalid xnorm '{xnorm}' (expected column or perpendicular)")
        outcome.xnorm = normalized
        outcome.pooled = pooled_on_xnorm(dataset.y, normalized, pooled_options, dataset.weights)
    if outcome.pooled is not None:
        outcome.pooled_options = pooled_options
        manager.info(STAGE, f"pooled estimate {outcome.pooled.tau_bias_corrected:.6g} ({outcome.xnorm_source})")
    return outcome
