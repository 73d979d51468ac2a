"""
Synthetic RD designs with known effects.

Scores are uniform on [low, high]; the untreated conditional mean is a
polynomial in the score (in x1 + x2 for bivariate designs). Treated units
in cutoff designs may follow a second polynomial, anchored so the jump at
the (first) cutoff is the effect alone. Sharp assignment follows the
design rule. Draws use a counter-based Philox stream so a seed fixes
every byte of the output.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from core.errors import ValidationError


DESIGNS = ("multicutoff", "cumulative", "bivariate")


@dataclass(frozen=True)
class DgpSpec:
    design: str = "multicutoff"
    n: int = 1000
    cutoffs: Tuple[float, ...] = (33.0, 66.0)
    effects: Tuple[float, ...] = (5.0, 2.0)
    corner: Tuple[float, float] = (50.0, 50.0)
    points: Tuple[Tuple[float, float], ...] = ((25.0, 50.0), (50.0, 50.0), (50.0, 25.0))
    mean_coefs_left: Tuple[float, ...] = (0.0, 0.05)
    mean_coefs_right: Optional[Tuple[float, ...]] = None
    noise_sd: float = 1.0
    low: float = 0.0
    high: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValidationError(f"invalid design '{self.design}' (expected one of {', '.join(DESIGNS)})")
        if int(self.n) < 1:
            raise ValidationError(f"n must be at least 1 (got {self.n})")
        if not (self.noise_sd >= 0 and math.isfinite(self.noise_sd)):
            raise ValidationError(f"noise sd must be >= 0 (got {self.noise_sd})")
        if not self.low < self.high:
            raise ValidationError("score support needs low < high")
        object.__setattr__(self, "cutoffs", tuple(float(c) for c in self.cutoffs))
        object.__setattr__(self, "effects", tuple(float(t) for t in self.effects))
        object.__setattr__(self, "points", tuple((float(a), float(b)) for a, b in self.points))
        object.__setattr__(self, "mean_coefs_left", tuple(float(v) for v in self.mean_coefs_left))
        if self.mean_coefs_right is not None:
            object.__setattr__(self, "mean_coefs_right", tuple(float(v) for v in self.mean_coefs_right))
        if not self.mean_coefs_left or (self.mean_coefs_right is not None and not self.mean_coefs_right):
            raise ValidationError("mean polynomials need at least one coefficient")
        if self.design == "bivariate":
            if len(self.effects) != 1:
                raise ValidationError("bivariate designs take one constant effect")
            if self.mean_coefs_right is not None:
                raise ValidationError("bivariate designs take a single mean polynomial (mean_coefs_left)")
        else:
            if len(self.effects) != len(self.cutoffs):
                raise ValidationError(f"{len(self.effects)} effects for {len(self.cutoffs)} cutoffs")
            if any(b <= a for a, b in zip(sorted(self.cutoffs), sorted(self.cutoffs)[1:])):
                raise ValidationError("cutoffs must be distinct")
            if self.design == "cumulative" and list(self.cutoffs) != sorted(self.cutoffs):
                raise ValidationError("cumulative cutoffs must be increasing")

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["cutoffs"] = list(self.cutoffs)
        out["effects"] = list(self.effects)
        out["corner"] = list(self.corner)
        out["points"] = [list(p) for p in self.points]
        out["mean_coefs_left"] = list(self.mean_coefs_left)
        out["mean_coefs_right"] = list(self.mean_coefs_right) if self.mean_coefs_right is not None else None
        return out


@dataclass
class Simulation:
    spec: DgpSpec
    data: pd.DataFrame
    truth: Dict[str, float] = field(default_factory=dict)

    def manifest(self) -> Dict[str, Any]:
        return {"generator": "philox", "spec": self.spec.to_dict(), "truth": self.truth}


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def untreated_mean(spec: DgpSpec, score) -> np.ndarray:
    return np.polynomial.polynomial.polyval(np.asarray(score, dtype=float), spec.mean_coefs_left)


def treated_mean(spec: DgpSpec, score, anchor) -> np.ndarray:
    """
    Mean of treated units before the effect: the right polynomial shifted to
    meet the untreated one at `anchor`, so the jump there is the effect alone.
    """
    if spec.mean_coefs_right is None:
        return untreated_mean(spec, score)
    polyval = np.polynomial.polynomial.polyval
    score = np.asarray(score, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    return polyval(score, spec.mean_coefs_right) - polyval(anchor, spec.mean_coefs_right) + untreated_mean(spec, anchor)


def treatment_rule(spec: DgpSpec, data: pd.DataFrame) -> np.ndarray:
    """Sharp assignment of the design, applied to generated (or any) scores."""
    if spec.design == "multicutoff":
        return (data["x"] >= data["c"]).to_numpy().astype(int)
    if spec.design == "cumulative":
        return np.searchsorted(np.asarray(spec.cutoffs), data["x"].to_numpy(), side="right")
    a, b = spec.corner
    return ((data["x1"] <= a) & (data["x2"] <= b)).to_numpy().astype(int)


def generate(spec: DgpSpec) -> Simulation:
    rng = make_rng(spec.seed)
    n = int(spec.n)

    if spec.design == "multicutoff":
        x = rng.uniform(spec.low, spec.high, n)
        c = np.asarray(spec.cutoffs)[rng.integers(0, len(spec.cutoffs), n)]
        noise = rng.normal(0.0, 1.0, n) * spec.noise_sd
        data = pd.DataFrame({"x": x, "c": c})
        treat = treatment_rule(spec, data)
        tau = dict(zip(spec.cutoffs, spec.effects))
        effect = np.array([tau[v] for v in c]) * treat
        data["t"] = treat
        mean = np.where(treat == 1, treated_mean(spec, x, c), untreated_mean(spec, x))
        data.insert(0, "y", mean + effect + noise)
        truth = {f"{c:g}": t for c, t in zip(spec.cutoffs, spec.effects)}

    elif spec.design == "cumulative":
        x = rng.uniform(spec.low, spec.high, n)
        noise = rng.normal(0.0, 1.0, n) * spec.noise_sd
        data = pd.DataFrame({"x": x})
        dose = treatment_rule(spec, data)
        steps = np.concatenate([[0.0], np.cumsum(spec.effects)])
        data["dose"] = dose
        mean = np.where(dose > 0, treated_mean(spec, x, spec.cutoffs[0]), untreated_mean(spec, x))
        data.insert(0, "y", mean + steps[dose] + noise)
        truth = {f"{c:g}": t for c, t in zip(spec.cutoffs, spec.effects)}

    else:
        x1 = rng.uniform(spec.low, spec.high, n)
        x2 = rng.uniform(spec.low, spec.high, n)
        noise = rng.normal(0.0, 1.0, n) * spec.noise_sd
        data = pd.DataFrame({"x1": x1, "x2": x2})
        treat = treatment_rule(spec, data)
        data["t"] = treat
        data.insert(0, "y", untreated_mean(spec, x1 + x2) + spec.effects[0] * treat + noise)
        truth = {f"({a:g},{b:g})": spec.effects[0] for a, b in spec.points}
        truth["pooled"] = spec.effects[0]

    return Simulation(spec, data, truth)


def cumulative_cutoff_table(spec: DgpSpec) -> pd.DataFrame:
    """Cutoffs as a column (one row per cutoff), the file form rdms accepts."""
    return pd.DataFrame({"cutoff": list(spec.cutoffs)})


def spec_from_mapping(values: Dict[str, Any]) -> DgpSpec:
    known = set(DgpSpec.__dataclass_fields__)
    unknown = set(values) - known
    if unknown:
        raise ValidationError(f"unknown simulation field(s): {', '.join(sorted(unknown))}")
    fields_ = dict(values)
    for name in ("cutoffs", "effects", "mean_coefs_left", "mean_coefs_right", "corner"):
        if name in fields_ and fields_[name] is not None:
            fields_[name] = tuple(float(v) for v in fields_[name])
    if "points" in fields_ and fields_["points"] is not None:
        fields_["points"] = tuple(tuple(float(v) for v in p) for p in fields_["points"])
    return DgpSpec(**{k: v for k, v in fields_.items() if v is not None})
