"""
RDMC - MULTIPLE NON-CUMULATIVE CUTOFFS
======================================
Cutoff-specific estimates, pooling weights, the normalized-score pooled
estimate, the weighted-average estimate and post-estimation tests.
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import chi2, norm

from analysis.manager import AnalysisManager, resolve_manager
from core.datamodel import MultiCutoffDataset, PerCutoffOptions, format_cutoff
from core.errors import EstimationError, ValidationError
from core.localpoly import CutoffOptions, RdResult, rd_estimate

STAGE = "RDMC"

# Tolerance on sum of weights before averaging.
WEIGHT_SUM_TOL = 1e-12


@dataclass
class CutoffEstimate:
    cutoff: float
    result: RdResult
    weight: Optional[float]
    n_group: int

    @property
    def label(self) -> str:
        return format_cutoff(self.cutoff)


@dataclass
class CutoffWeights:
    """Count-ratio weights: counts[c] / total, exact integer provenance kept."""
    bandwidth: Tuple[float, float]
    counts: Dict[float, int]
    total: int

    @property
    def weights(self) -> Dict[float, float]:
        return {c: n / self.total for c, n in self.counts.items()}

    def exact(self, cutoff: float) -> Fraction:
        return Fraction(self.counts[cutoff], self.total)

    def __getitem__(self, cutoff: float) -> float:
        return self.counts[cutoff] / self.total


@dataclass
class WeightedEstimate:
    tau: float
    se: float
    ci: Tuple[float, float]
    p_value: float
    level: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tau": self.tau,
            "se": self.se,
            "ci": [self.ci[0], self.ci[1]],
            "p_value": self.p_value,
            "level": self.level,
        }


@dataclass
class EstimatesBundle:
    labels: List[str]
    b: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        if self.V.shape != (len(self.labels), len(self.labels)) or self.b.shape != (len(self.labels),):
            raise ValidationError("bundle dimensions do not match its labels")

    def __len__(self) -> int:
        return len(self.labels)

    def to_dict(self) -> Dict[str, Any]:
        return {"labels": list(self.labels), "b": self.b.tolist(), "V": self.V.tolist()}


@dataclass
class TestResult:
    name: str
    statistic: float
    p_value: float
    df: Optional[int] = None
    contrast: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "df": self.df,
            "contrast": list(self.contrast),
        }


# ============================================================
# PRIMITIVES
# ============================================================

def normalize_score(x, c):
    """Recentred score x - c."""
    return np.subtract(x, c)


def _as_pair(h: Union[float, Sequence[float]]) -> Tuple[float, float]:
    if isinstance(h, (tuple, list, np.ndarray)):
        left, right = float(h[0]), float(h[1])
    else:
        left = right = float(h)
    if not (left > 0 and right > 0 and math.isfinite(left) and math.isfinite(right)):
        raise ValidationError(f"weight bandwidth must be positive (got {h})")
    return left, right


def estimate_weights(dataset: MultiCutoffDataset, h: Union[float, Sequence[float]]) -> CutoffWeights:
    """
    Share of each cutoff among units with -h <= x - c <= h.
    A (left, right) pair uses -h_left <= x - c <= h_right.
    """
    h_left, h_right = _as_pair(h)
    xn = normalize_score(dataset.x, dataset.c)
    in_window = (xn >= -h_left) & (xn <= h_right)
    total = int(in_window.sum())
    if total == 0:
        raise EstimationError(f"no observations within the weight bandwidth ({h_left:g}, {h_right:g})")
    cuts = dataset.c[in_window]
    counts = {c: int(np.sum(cuts == c)) for c in dataset.cutoffs}
    return CutoffWeights(bandwidth=(h_left, h_right), counts=counts, total=total)


def _estimate_one(y, x, w, cutoff, opts) -> RdResult:
    try:
        return rd_estimate(y, x, cutoff, opts, weights=w)
    except EstimationError as err:
        raise err.with_label(f"cutoff {format_cutoff(cutoff)}")


def cutoff_specific_estimates(dataset: MultiCutoffDataset, options: Optional[PerCutoffOptions] = None,
                              n_jobs: int = 1, weights: Optional[CutoffWeights] = None) -> List[CutoffEstimate]:
    """One rd_estimate per cutoff on its own group, ascending cutoff order."""
    options = options if options is not None else PerCutoffOptions.defaults(len(dataset.cutoffs))
    if len(options) != len(dataset.cutoffs):
        raise ValidationError(f"{len(options)} option records for {len(dataset.cutoffs)} cutoffs")

    tasks = []
    for cutoff, opts in zip(dataset.cutoffs, options):
        group = dataset.group(cutoff)
        tasks.append((group.y, group.x, group.weights, cutoff, opts))

    results = Parallel(n_jobs=n_jobs)(delayed(_estimate_one)(*task) for task in tasks)

    return [
        CutoffEstimate(
            cutoff=cutoff,
            result=res,
            weight=weights[cutoff] if weights is not None else None,
            n_group=dataset.counts[cutoff],
        )
        for cutoff, res in zip(dataset.cutoffs, results)
    ]


def pooled_estimate(dataset: MultiCutoffDataset, pooled_options: Optional[CutoffOptions] = None) -> RdResult:
    """rd_estimate on (y, x - c) at cutoff 0."""
    try:
        return rd_estimate(dataset.y, normalize_score(dataset.x, dataset.c), 0.0, pooled_options,
                           weights=dataset.weights)
    except EstimationError as err:
        raise err.with_label("pooled")


def weighted_average_estimate(estimates: Sequence[CutoffEstimate], level: float = 95.0) -> WeightedEstimate:
    """tau_w = sum w*tau_bc; se_w = sqrt(sum w^2 se^2), weights held fixed."""
    if not estimates:
        raise ValidationError("no cutoff estimates to average")
    missing = [e.label for e in estimates if e.weight is None]
    if missing:
        raise ValidationError(f"missing weight for cutoff(s) {', '.join(missing)}")
    w = np.array([e.weight for e in estimates], dtype=float)
    if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
        raise ValidationError(f"weights sum to {w.sum():.15g}, not 1")
    tau = np.array([e.result.tau_bias_corrected for e in estimates])
    se = np.array([e.result.se_robust for e in estimates])

    tau_w = float(np.sum(w * tau))
    se_w = float(math.sqrt(np.sum(w ** 2 * se ** 2)))
    z = float(norm.ppf(1.0 - (1.0 - level / 100.0) / 2.0))
    if se_w > 0:
        p_value = float(2.0 * norm.sf(abs(tau_w) / se_w))
    else:
        p_value = 1.0 if tau_w == 0 else 0.0
    return WeightedEstimate(tau_w, se_w, (tau_w - z * se_w, tau_w + z * se_w), p_value, level)


def assemble_bundle(estimates: Sequence[CutoffEstimate], weighted: Optional[WeightedEstimate],
                    pooled: Optional[RdResult]) -> EstimatesBundle:
    labels = [e.label for e in sorted(estimates, key=lambda e: e.cutoff)]
    ordered = sorted(estimates, key=lambda e: e.cutoff)
    b = [e.result.tau_bias_corrected for e in ordered]
    var = [e.result.se_robust ** 2 for e in ordered]
    if weighted is not None:
        labels.append("weighted")
        b.append(weighted.tau)
        var.append(weighted.se ** 2)
    if pooled is not None:
        labels.append("pooled")
        b.append(pooled.tau_bias_corrected)
        var.append(pooled.se_robust ** 2)
    return EstimatesBundle(labels, np.array(b), np.diag(var))


# ============================================================
# POST-ESTIMATION TESTS
# ============================================================

def hypothesis_test(bundle: EstimatesBundle, contrast: Sequence[float]) -> TestResult:
    """z = c'b / sqrt(c'Vc), two-sided normal p-value."""
    cvec = np.asarray(contrast, dtype=float)
    if cvec.shape != (len(bundle),):
        raise ValidationError(f"contrast has length {cvec.size}, bundle has dimension {len(bundle)}")
    value = float(cvec @ bundle.b)
    variance = float(cvec @ bundle.V @ cvec)
    if variance <= 0:
        if value != 0:
            raise EstimationError("contrast has zero variance but a nonzero value")
        return TestResult("contrast", 0.0, 1.0, contrast=cvec.tolist())
    stat = value / math.sqrt(variance)
    return TestResult("contrast", stat, float(2.0 * norm.sf(abs(stat))), contrast=cvec.tolist())


def equality_contrast(bundle: EstimatesBundle, first: int = 0, second: int = 1) -> List[float]:
    contrast = [0.0] * len(bundle)
    contrast[first] = 1.0
    contrast[second] = -1.0
    return contrast


def wald_test(bundle: EstimatesBundle, n_cutoffs: int) -> TestResult:
    """Joint chi-square test that the first n_cutoffs effects are all equal (df = n_cutoffs - 1)."""
    if n_cutoffs < 2:
        raise ValidationError("joint equality test needs at least two cutoffs")
    R = np.zeros((n_cutoffs - 1, len(bundle)))
    for i in range(n_cutoffs - 1):
        R[i, i] = 1.0
        R[i, i + 1] = -1.0
    diff = R @ bundle.b
    cov = R @ bundle.V @ R.T
    if np.linalg.matrix_rank(cov) < n_cutoffs - 1:
        raise EstimationError("singular covariance in the joint equality test")
    stat = float(diff @ np.linalg.solve(cov, diff))
    df = n_cutoffs - 1
    return TestResult("wald_equal", stat, float(chi2.sf(stat, df)), df=df)


# ============================================================
# PIPELINE
# ============================================================

@dataclass
class RdmcOutcome:
    estimates: List[CutoffEstimate]
    weights: CutoffWeights
    weighted: WeightedEstimate
    pooled: RdResult
    bundle: EstimatesBundle
    options: PerCutoffOptions
    pooled_options: CutoffOptions
    tests: List[TestResult] = field(default_factory=list)


def run_rdmc(dataset: MultiCutoffDataset, options: Optional[PerCutoffOptions] = None,
             pooled_options: Optional[CutoffOptions] = None, weight_h: Optional[Union[float, Sequence[float]]] = None,
             test: Optional[str] = None, level: float = 95.0, n_jobs: int = 1,
             manager: Optional[AnalysisManager] = None) -> RdmcOutcome:
    """
    Full rdmc run: pooled fit first (its h drives the weights unless weight_h
    is given), then the cutoff-specific fits, the weighted average and the
    estimates bundle. One failing cutoff aborts the run.
    """
    manager = resolve_manager(manager)
    options = options if options is not None else PerCutoffOptions.defaults(len(dataset.cutoffs), level)
    pooled_options = pooled_options if pooled_options is not None else CutoffOptions(level=level)

    if dataset.report is not None:
        if dataset.report.rows_dropped:
            manager.warn(STAGE, f"dropped {dataset.report.rows_dropped} rows with missing values")
        if dataset.report.mass_points:
            manager.warn(STAGE, f"{dataset.report.mass_points} observations share a score value (mass points); no adjustment applied")

    # 1. Pooled estimate on the normalized score
    pooled = pooled_estimate(dataset, pooled_options)
    manager.info(STAGE, f"pooled estimate {pooled.tau_bias_corrected:.6g} (h={pooled.h[0]:.4g}/{pooled.h[1]:.4g})")

    # 2. Weights
    if weight_h is None:
        weight_h = pooled.h
        source = "pooled bandwidth"
    else:
        source = "user bandwidth"
    weights = estimate_weights(dataset, weight_h)
    manager.warn(STAGE, f"weights computed with the {source} ({weights.bandwidth[0]:.6g}, {weights.bandwidth[1]:.6g})",
                 source=source)

    # 3. Cutoff-specific estimates
    estimates = cutoff_specific_estimates(dataset, options, n_jobs=n_jobs, weights=weights)
    for est in estimates:
        manager.info(STAGE, f"cutoff {est.label}: {est.result.tau_bias_corrected:.6g} (weight {est.weight:.4f})")

    # 4. Weighted average and bundle
    weighted = weighted_average_estimate(estimates, level)
    manager.warn(STAGE, "weighted-average variance treats the estimated weights as fixed")
    bundle = assemble_bundle(estimates, weighted, pooled)

    tests = []
    if test is not None:
        if test != "equal":
            raise ValidationError(f"unknown test '{test}' (expected equal)")
        if len(estimates) < 2:
            raise ValidationError("the equality test needs at least two cutoffs")
        tests.append(hypothesis_test(bundle, equality_contrast(bundle)))
        if len(estimates) > 2:
            tests.append(wald_test(bundle, len(estimates)))

    return RdmcOutcome(estimates, weights, weighted, pooled, bundle, options, pooled_options, tests)
