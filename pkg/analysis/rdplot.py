"""
RDMCPLOT - PLOT DATA FOR MULTIPLE CUTOFFS
=========================================
Per-cutoff binned means with normal CIs and per-side polynomial fits,
emitted as genvars columns row-aligned with the input observations.
Nothing is rendered; the columns are the plot.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm

from analysis.manager import AnalysisManager, resolve_manager
from core.datamodel import MultiCutoffDataset, format_cutoff
from core.errors import ValidationError
from core.localpoly import SIDES, KernelKind, local_poly_fit

STAGE = "RDMCPLOT"

BIN_METHODS = ("es", "qs")
DEFAULT_PLOT_ORDER = 4
DEFAULT_PLOT_KERNEL = KernelKind.UNIFORM
GENVARS = ("hat_y", "mean_x", "mean_y", "ci_l", "ci_r")
PRESENTATION_OPTIONS = ("binsopt", "lineopt", "xlineopt", "noxline")


@dataclass(frozen=True)
class BinSpec:
    method: str = "es"
    nbins_left: Optional[int] = None
    nbins_right: Optional[int] = None

    def __post_init__(self):
        method = str(self.method).strip().lower()
        if method not in BIN_METHODS:
            raise ValidationError(f"invalid binselect '{self.method}' (expected es or qs)")
        object.__setattr__(self, "method", method)
        for name in ("nbins_left", "nbins_right"):
            value = getattr(self, name)
            if value is not None and int(value) < 1:
                raise ValidationError(f"{name} must be at least 1 (got {value})")

    def nbins(self, side: str) -> Optional[int]:
        return self.nbins_left if side == "left" else self.nbins_right


@dataclass
class SidePolynomial:
    side: str
    coefficients: np.ndarray
    center: float
    bandwidth: float

    def __call__(self, xs) -> np.ndarray:
        u = np.asarray(xs, dtype=float) - self.center
        return np.polynomial.polynomial.polyval(u, self.coefficients)


@dataclass
class PlotSeries:
    index: int
    cutoff: float
    hat_y: Optional[np.ndarray]
    mean_x: Optional[np.ndarray]
    mean_y: Optional[np.ndarray]
    ci_l: Optional[np.ndarray]
    ci_r: Optional[np.ndarray]
    polynomials: Dict[str, SidePolynomial] = field(default_factory=dict)
    bins: Dict[str, pd.DataFrame] = field(default_factory=dict)
    edges: Dict[str, np.ndarray] = field(default_factory=dict)
    options: Dict[str, Any] = field(default_factory=dict)

    def columns(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in GENVARS:
            values = getattr(self, name)
            if values is not None:
                out[f"rdmcplot_{name}_{self.index}"] = values
        return out

    def manifest(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "cutoff": self.cutoff,
            "options": self.options,
            "edges": {side: e.tolist() for side, e in self.edges.items()},
            "coefficients": {side: p.coefficients.tolist() for side, p in self.polynomials.items()},
        }


# ============================================================
# BINS
# ============================================================

def default_nbins(n_side: int) -> int:
    return int(math.ceil(math.sqrt(n_side)))


def choose_bins(xs, spec: BinSpec, side: str = "left", support: Optional[Tuple[float, float]] = None,
                scale: float = 1.0) -> np.ndarray:
    """Bin edges on one side: equal width (es) or empirical quantiles (qs)."""
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        raise ValidationError(f"no observations on the {side} side to bin")
    nbins = spec.nbins(side)
    if nbins is None:
        nbins = max(1, int(math.ceil(default_nbins(xs.size) * scale)))
    if nbins > xs.size:
        raise ValidationError(f"{nbins} bins requested for {xs.size} observations on the {side} side")

    if spec.method == "es":
        lo, hi = support if support is not None else (float(xs.min()), float(xs.max()))
        return np.linspace(lo, hi, nbins + 1)
    return np.quantile(xs, np.linspace(0.0, 1.0, nbins + 1))


def assign_bins(xs, edges: np.ndarray) -> np.ndarray:
    """Bin index per observation (closed last bin); -1 outside [edges[0], edges[-1]]."""
    xs = np.asarray(xs, dtype=float)
    idx = np.searchsorted(edges, xs, side="right") - 1
    idx = np.where(xs == edges[-1], len(edges) - 2, idx)
    outside = (xs < edges[0]) | (xs > edges[-1])
    return np.where(outside, -1, idx)


def bin_stats(ys, xs, edges: np.ndarray, level: float = 95.0) -> pd.DataFrame:
    """
    Per-bin count, mean_x, mean_y and normal CI mean_y +/- z sd/sqrt(n).
    Every bin gets a row; empty bins have count 0 and NaN statistics,
    singletons a degenerate CI at the mean.
    """
    ys = np.asarray(ys, dtype=float)
    xs = np.asarray(xs, dtype=float)
    z = float(norm.ppf(1.0 - (1.0 - level / 100.0) / 2.0))
    frame = pd.DataFrame({"bin": assign_bins(xs, edges), "x": xs, "y": ys})
    frame = frame[frame["bin"] >= 0]
    grouped = frame.groupby("bin").agg(
        count=("y", "size"), mean_x=("x", "mean"), mean_y=("y", "mean"), sd_y=("y", "std")
    )
    stats = grouped.reindex(range(len(edges) - 1))
    stats["count"] = stats["count"].fillna(0).astype(int)
    half = z * stats["sd_y"].fillna(0.0) / np.sqrt(stats["count"].where(stats["count"] > 0))
    stats["ci_l"] = stats["mean_y"] - half
    stats["ci_r"] = stats["mean_y"] + half
    stats.index.name = "bin"
    return stats[["count", "mean_x", "mean_y", "ci_l", "ci_r"]]


# ============================================================
# POLYNOMIAL FITS
# ============================================================

def side_polynomial(ys, xs, c: float, p: int, h: Optional[float] = None, kernel=DEFAULT_PLOT_KERNEL,
                    side: str = "left") -> SidePolynomial:
    """Order-p fit on one side; without h a global fit over the whole side."""
    xs = np.asarray(xs, dtype=float)
    if h is None:
        side_x = xs[xs < c] if side == "left" else xs[xs >= c]
        if side_x.size == 0:
            raise ValidationError(f"no observations on the {side} side of {c:g}")
        h = float(np.max(np.abs(side_x - c)))
        # Uniform weight over the full side, right end included.
        h = h if h > 0 else 1.0
        kernel = KernelKind.UNIFORM
    fit = local_poly_fit(ys, xs, c, h, p, kernel, side)
    return SidePolynomial(side=side, coefficients=fit.coefficients, center=float(c), bandwidth=float(h))


# ============================================================
# SERIES
# ============================================================

def _resolve_plot_options(row: Mapping[str, Any]) -> Dict[str, Any]:
    opts = {
        "p": int(row.get("p", DEFAULT_PLOT_ORDER)),
        "h_left": row.get("h_left"),
        "h_right": row.get("h_right", row.get("h_left")),
        "kernel": KernelKind.parse(row.get("kernel", DEFAULT_PLOT_KERNEL)),
        "binselect": row.get("binselect", "es"),
        "nbins_left": row.get("nbins_left"),
        "nbins_right": row.get("nbins_right", row.get("nbins_left")),
        "support_left": row.get("support_left"),
        "support_right": row.get("support_right", row.get("support_left")),
        "scale_left": float(row.get("scale_left", 1.0)),
        "scale_right": float(row.get("scale_right", row.get("scale_left", 1.0))),
    }
    if opts["p"] < 0:
        raise ValidationError(f"plot order p must be >= 0 (got {opts['p']})")
    for name in ("h_left", "h_right"):
        if opts[name] is not None and not opts[name] > 0:
            raise ValidationError(f"{name} must be positive (got {opts[name]})")
    for name in ("scale_left", "scale_right"):
        if not opts[name] > 0:
            raise ValidationError(f"{name} must be positive (got {opts[name]})")
    opts["presentation"] = {k: row[k] for k in PRESENTATION_OPTIONS if k in row}
    return opts


def _series_options_dict(opts: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(opts)
    out["kernel"] = opts["kernel"].value
    for name in ("support_left", "support_right"):
        if out[name] is not None:
            out[name] = list(out[name])
    return out


def build_series(index: int, cutoff: float, y: np.ndarray, x: np.ndarray, mask: np.ndarray,
                 row: Mapping[str, Any], nobins: bool = False, nopoly: bool = False,
                 level: float = 95.0) -> PlotSeries:
    """Genvars for one cutoff; rows outside `mask` (other groups) stay NaN."""
    opts = _resolve_plot_options(row)
    n = y.size
    hat_y = np.full(n, np.nan)
    mean_x = np.full(n, np.nan)
    mean_y = np.full(n, np.nan)
    ci_l = np.full(n, np.nan)
    ci_r = np.full(n, np.nan)
    spec = BinSpec(opts["binselect"], opts["nbins_left"], opts["nbins_right"])
    series = PlotSeries(index, float(cutoff), None, None, None, None, None, options=_series_options_dict(opts))

    for side in SIDES:
        h = opts[f"h_{side}"]
        side_mask = mask & ((x < cutoff) if side == "left" else (x >= cutoff))
        if h is not None:
            dist = np.abs(x - cutoff)
            side_mask &= dist <= h
        rows = np.flatnonzero(side_mask)
        if rows.size == 0:
            raise ValidationError(f"cutoff {format_cutoff(cutoff)}: no observations on the {side} side to plot")

        if not nopoly:
            poly = side_polynomial(y[mask], x[mask], cutoff, opts["p"], h, opts["kernel"], side)
            series.polynomials[side] = poly
            hat_y[rows] = poly(x[rows])

        if not nobins:
            support = opts[f"support_{side}"]
            edges = choose_bins(x[rows], spec, side, support, opts[f"scale_{side}"])
            stats = bin_stats(y[rows], x[rows], edges, level)
            series.edges[side] = edges
            series.bins[side] = stats
            bins = assign_bins(x[rows], edges)
            inside = bins >= 0
            target = rows[inside]
            picked = stats.loc[bins[inside]]
            mean_x[target] = picked["mean_x"].to_numpy()
            mean_y[target] = picked["mean_y"].to_numpy()
            ci_l[target] = picked["ci_l"].to_numpy()
            ci_r[target] = picked["ci_r"].to_numpy()

    if not nopoly:
        series.hat_y = hat_y
    if not nobins:
        series.mean_x, series.mean_y, series.ci_l, series.ci_r = mean_x, mean_y, ci_l, ci_r
    return series


def build_plot_data(dataset: MultiCutoffDataset, plot_options: Optional[Sequence[Mapping[str, Any]]] = None,
                    nobins: bool = False, nopoly: bool = False, level: float = 95.0,
                    manager: Optional[AnalysisManager] = None) -> List[PlotSeries]:
    """One PlotSeries per cutoff (1-based index, ascending cutoff)."""
    manager = resolve_manager(manager)
    plot_options = plot_options if plot_options is not None else [{} for _ in dataset.cutoffs]
    if len(plot_options) != len(dataset.cutoffs):
        raise ValidationError(f"{len(plot_options)} plot option rows for {len(dataset.cutoffs)} cutoffs")
    y, x = dataset.y, dataset.x
    series = []
    for index, (cutoff, row) in enumerate(zip(dataset.cutoffs, plot_options), start=1):
        s = build_series(index, cutoff, y, x, dataset.group_mask(cutoff), row, nobins, nopoly, level)
        if s.options["presentation"]:
            manager.info(STAGE, f"cutoff {format_cutoff(cutoff)}: presentation options recorded only")
        series.append(s)
    return series


def genvars_frame(series: Sequence[PlotSeries]) -> pd.DataFrame:
    columns = {}
    for s in series:
        columns.update(s.columns())
    return pd.DataFrame(columns)


def estimates_plot_frame(outcome) -> pd.DataFrame:
    """
    Data behind the estimates plot: estimate, CI and weight per cutoff (or
    boundary point), then the weighted and pooled rows when present. rdms
    outcomes carry no weights; their cutoff column is NaN for boundary points.
    """
    rows = []
    if hasattr(outcome, "estimates"):
        for est in outcome.estimates:
            r = est.result
            rows.append({"label": est.label, "cutoff": est.cutoff, "estimate": r.tau_bias_corrected,
                         "ci_l": r.ci_robust[0], "ci_r": r.ci_robust[1], "weight": est.weight})
        w = outcome.weighted
        rows.append({"label": "weighted", "cutoff": np.nan, "estimate": w.tau, "ci_l": w.ci[0], "ci_r": w.ci[1],
                     "weight": np.nan})
    else:
        cutoffs = list(outcome.cutoffs) or [np.nan] * len(outcome.results)
        for label, cutoff, r in zip(outcome.labels, cutoffs, outcome.results):
            rows.append({"label": label, "cutoff": cutoff, "estimate": r.tau_bias_corrected,
                         "ci_l": r.ci_robust[0], "ci_r": r.ci_robust[1], "weight": np.nan})
    pooled = outcome.pooled
    if pooled is not None:
        rows.append({"label": "pooled", "cutoff": np.nan, "estimate": pooled.tau_bias_corrected,
                     "ci_l": pooled.ci_robust[0], "ci_r": pooled.ci_robust[1], "weight": np.nan})
    return pd.DataFrame(rows)



@dataclass
class RdmcplotOutcome:
    series: List[PlotSeries]
    genvars: pd.DataFrame

    def manifest(self) -> Dict[str, Any]:
        return {"cutoffs": [s.manifest() for s in self.series], "columns": list(self.genvars.columns)}


def run_rdmcplot(dataset: MultiCutoffDataset, plot_options: Optional[Sequence[Mapping[str, Any]]] = None,
                 nobins: bool = False, nopoly: bool = False, level: float = 95.0,
                 manager: Optional[AnalysisManager] = None) -> RdmcplotOutcome:
    manager = resolve_manager(manager)
    series = build_plot_data(dataset, plot_options, nobins, nopoly, level, manager)
    frame = genvars_frame(series)
    manager.info(STAGE, f"{len(series)} series, {frame.shape[1]} genvars columns")
    return RdmcplotOutcome(series, frame)
