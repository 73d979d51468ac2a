"""
DATA MODEL
==========
Typed ingestion and validation of RD data files and per-cutoff option tables.

Input files are delimited text (comma by default), first row headers, UTF-8,
'.' decimal separator. Columns are mapped onto canonical names through a
schema: y, x (score / first score), c (per-unit cutoff), x2, treat, weight,
xnorm.
"""

import hashlib
import math
import os
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from core.errors import DataParseError, UnsupportedOptionError, ValidationError
from core.localpoly import CutoffOptions


MODES = ("multicutoff", "cumulative", "bivariate")

# Stata rd options outside this toolkit; rejected wherever they appear.
UNSUPPORTED_OPTIONS = {
    "fuzzy", "covs", "covsvar", "covseval", "covsevalvar", "covsdrop", "covsdropvar",
    "vce", "vcevar", "cluster", "nnmatch", "masspoints", "masspointsvar",
    "stdvars", "stdvarsvar", "scaleregul", "scaleregulvar", "scalepar", "scaleparvar",
    "bwcheck", "bwcheckvar", "bwrestrict", "bwrestrictvar",
}

# Option-table column aliases, Stata-style *var names included.
ESTIMATION_COLUMNS = {
    "cutoff": "cutoff",
    "p": "p", "pvar": "p",
    "q": "q", "qvar": "q",
    "deriv": "deriv", "derivvar": "deriv",
    "h": "h_left", "hvar": "h_left", "h_left": "h_left",
    "h_right": "h_right", "hright": "h_right", "hrightvar": "h_right",
    "b": "b_left", "bvar": "b_left", "b_left": "b_left",
    "b_right": "b_right", "bright": "b_right", "brightvar": "b_right",
    "rho": "rho", "rhovar": "rho",
    "kernel": "kernel", "kernelvar": "kernel",
    "bwselect": "bwselect", "bwselectvar": "bwselect",
    "level": "level", "ci_level": "level",
}

PLOT_COLUMNS = {
    "cutoff": "cutoff",
    "p": "p", "pvar": "p",
    "h": "h_left", "hvar": "h_left", "h_left": "h_left",
    "h_right": "h_right", "hright": "h_right", "hrightvar": "h_right",
    "kernel": "kernel", "kernelvar": "kernel",
    "nbins": "nbins_left", "nbinsvar": "nbins_left", "nbins_left": "nbins_left",
    "nbins_right": "nbins_right", "nbinsright": "nbins_right", "nbinsrightvar": "nbins_right",
    "binselect": "binselect", "binselectvar": "binselect",
    "support": "support_left", "supportvar": "support_left", "support_left": "support_left",
    "support_right": "support_right", "supportright": "support_right", "supportrightvar": "support_right",
    "scale": "scale_left", "scalevar": "scale_left", "scale_left": "scale_left",
    "scale_right": "scale_right", "scaleright": "scale_right", "scalerightvar": "scale_right",
    "binsopt": "binsopt", "binsoptvar": "binsopt",
    "lineopt": "lineopt", "lineoptvar": "lineopt",
    "xlineopt": "xlineopt", "xlineoptvar": "xlineopt",
    "noxline": "noxline", "noxlinevar": "noxline",
}

_INT_FIELDS = {"p", "q", "deriv", "nbins_left", "nbins_right"}
_FLOAT_FIELDS = {"h_left", "h_right", "b_left", "b_right", "rho", "level", "scale_left", "scale_right", "cutoff"}


# ============================================================
# DOMAIN TYPES
# ============================================================

@dataclass(frozen=True)
class Observation:
    y: float
    x1: float
    x2: Optional[float] = None
    cutoff: Optional[float] = None
    treat: Optional[int] = None
    weight: Optional[float] = None


@dataclass
class LoadReport:
    source: str
    digest: str
    rows_read: int
    rows_dropped: int
    mass_points: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "source": self.source,
            "digest": self.digest,
            "rows_read": self.rows_read,
            "rows_dropped": self.rows_dropped,
            "mass_points": self.mass_points,
        }


class RdDataset:
    """
    Validated RD data held as a canonical-column frame.
    Immutable after construction; arrays handed out are read-only copies.
    """

    mode = "multicutoff"

    def __init__(self, frame: pd.DataFrame, report: Optional[LoadReport] = None):
        self._frame = frame.reset_index(drop=True).copy()
        self.report = report
        self.row_ids = np.arange(len(self._frame)) if "row_id" not in self._frame else self._frame["row_id"].to_numpy()

    def __len__(self) -> int:
        return len(self._frame)

    @property
    def frame(self) -> pd.DataFrame:
        return self._frame.copy()

    def has(self, column: str) -> bool:
        return column in self._frame.columns

    def column(self, name: str) -> np.ndarray:
        if name not in self._frame.columns:
            raise ValidationError(f"dataset has no '{name}' column")
        values = self._frame[name].to_numpy(dtype=float).copy()
        values.setflags(write=False)
        return values

    @property
    def y(self) -> np.ndarray:
        return self.column("y")

    @property
    def x(self) -> np.ndarray:
        return self.column("x")

    @property
    def weights(self) -> Optional[np.ndarray]:
        return self.column("weight") if self.has("weight") else None

    @property
    def observations(self) -> List[Observation]:
        get = lambda row, name, cast=float: cast(row[name]) if name in row else None
        return [
            Observation(
                y=float(row["y"]),
                x1=float(row["x"]),
                x2=get(row, "x2"),
                cutoff=get(row, "c"),
                treat=get(row, "treat", int),
                weight=get(row, "weight"),
            )
            for row in self._frame.to_dict("records")
        ]


class MultiCutoffDataset(RdDataset):
    """Non-cumulative design: every unit faces exactly one cutoff in column c."""

    mode = "multicutoff"

    def __init__(self, frame: pd.DataFrame, report: Optional[LoadReport] = None):
        super().__init__(frame, report)
        if "c" not in self._frame.columns:
            raise ValidationError("cutoff column is required for a multi-cutoff dataset")
        counts = self._frame["c"].value_counts().sort_index()
        self.cutoffs: List[float] = [float(v) for v in counts.index]
        self.counts: Dict[float, int] = {float(k): int(v) for k, v in counts.items()}

    @property
    def c(self) -> np.ndarray:
        return self.column("c")

    def group(self, cutoff: float) -> "RdDataset":
        """Subsample facing `cutoff` (exact equality)."""
        sub = self._frame[self._frame["c"] == cutoff]
        return RdDataset(sub, None)

    def group_mask(self, cutoff: float) -> np.ndarray:
        return (self._frame["c"] == cutoff).to_numpy()


class MultiScoreDataset(RdDataset):
    """Cumulative (one score, ordered cutoffs) or bivariate (two scores + treatment) design."""

    def __init__(self, frame: pd.DataFrame, mode: str, report: Optional[LoadReport] = None):
        super().__init__(frame, report)
        if mode not in ("cumulative", "bivariate"):
            raise ValidationError(f"invalid multi-score mode '{mode}'")
        self.mode = mode
        if mode == "bivariate":
            for name in ("x2", "treat"):
                if name not in self._frame.columns:
                    raise ValidationError(f"bivariate design requires the '{name}' column")

    @property
    def x2(self) -> np.ndarray:
        return self.column("x2")

    @property
    def treat(self) -> np.ndarray:
        return self.column("treat")


@dataclass(frozen=True)
class PerCutoffOptions:
    """One CutoffOptions record per distinct cutoff, in ascending cutoff order."""
    records: Sequence[CutoffOptions]

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> CutoffOptions:
        return self.records[index]

    def __iter__(self):
        return iter(self.records)

    @classmethod
    def defaults(cls, n_cutoffs: int, level: float = 95.0) -> "PerCutoffOptions":
        return cls(tuple(CutoffOptions(level=level) for _ in range(n_cutoffs)))

    def to_list(self) -> List[Dict[str, Any]]:
        return [r.to_dict() for r in self.records]


@dataclass(frozen=True)
class BoundarySpec:
    """Cumulative cutoffs (with optional ranges) or bivariate boundary points."""
    mode: str
    cutoffs: Sequence[float] = ()
    ranges: Optional[Sequence[Optional[Sequence[float]]]] = None
    points: Sequence[Sequence[float]] = ()

    def __post_init__(self):
        if self.mode == "cumulative":
            cuts = [float(v) for v in self.cutoffs]
            if not cuts:
                raise ValidationError("cumulative design needs at least one cutoff")
            if any(not math.isfinite(v) for v in cuts):
                raise ValidationError("cutoffs must be finite")
            if any(b <= a for a, b in zip(cuts, cuts[1:])):
                raise ValidationError("cumulative cutoffs must be strictly increasing")
            object.__setattr__(self, "cutoffs", tuple(cuts))
            if self.ranges is not None:
                if len(self.ranges) != len(cuts):
                    raise ValidationError(f"{len(self.ranges)} ranges given for {len(cuts)} cutoffs")
                resolved = []
                for cut, rng in zip(cuts, self.ranges):
                    if rng is None:
                        resolved.append(None)
                        continue
                    if np.isscalar(rng):
                        # one number r: [c - r, c + r]
                        lo, hi = cut - float(rng), cut + float(rng)
                    else:
                        lo, hi = float(rng[0]), float(rng[1])
                    if not lo < cut < hi:
                        raise ValidationError(f"range [{lo:g}, {hi:g}] does not contain the cutoff {cut:g}")
                    resolved.append((lo, hi))
                object.__setattr__(self, "ranges", tuple(resolved))
        elif self.mode == "bivariate":
            pts = []
            for pt in self.points:
                if len(pt) != 2:
                    raise ValidationError(f"boundary point {pt} is not a pair")
                b1, b2 = float(pt[0]), float(pt[1])
                if not (math.isfinite(b1) and math.isfinite(b2)):
                    raise ValidationError(f"boundary point ({b1}, {b2}) is not finite")
                pts.append((b1, b2))
            if not pts:
                raise ValidationError("bivariate design needs at least one boundary point")
            object.__setattr__(self, "points", tuple(pts))
        else:
            raise ValidationError(f"invalid boundary mode '{self.mode}'")

    @property
    def labels(self) -> List[str]:
        if self.mode == "cumulative":
            return [format_cutoff(c) for c in self.cutoffs]
        return [f"({format_cutoff(a)},{format_cutoff(b)})" for a, b in self.points]

    def __len__(self) -> int:
        return len(self.cutoffs) if self.mode == "cumulative" else len(self.points)


def format_cutoff(value: float) -> str:
    return f"{value:g}"


# ============================================================
# DATA FILES
# ============================================================

def file_digest(path: str) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            sha.update(chunk)
    return sha.hexdigest()


def _required_columns(mode: str) -> List[str]:
    if mode == "multicutoff":
        return ["y", "x", "c"]
    if mode == "cumulative":
        return ["y", "x"]
    if mode == "bivariate":
        return ["y", "x", "x2", "treat"]
    raise ValidationError(f"invalid design mode '{mode}' (expected one of {', '.join(MODES)})")


def _read_table(path: str, delimiter: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise ValidationError(f"file not found: {path}")
    try:
        return pd.read_csv(path, sep=delimiter, dtype=str, encoding="utf-8", skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise ValidationError(f"file is empty: {path}")


def _numeric_column(raw: pd.Series, column: str) -> pd.Series:
    text = raw.str.strip()
    values = pd.to_numeric(text, errors="coerce")
    bad = text.notna() & (text != "") & (values.isna() | ~np.isfinite(values.fillna(0.0)))
    if bad.any():
        first = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataParseError(
            f"non-numeric value '{raw.iloc[first]}' in row {first + 1}, column '{column}'",
            row=first + 1, column=column,
        )
    return values


def load_dataset(path: str, schema: Mapping[str, Optional[str]], mode: str = "multicutoff",
                 delimiter: str = ",") -> RdDataset:
    """
    Read, map and validate an RD data file.

    schema maps canonical names (y, x, c, x2, treat, weight, xnorm) to file
    columns; unmapped or None entries are skipped. Rows missing any mapped value
    are dropped and counted; repeated score values are counted as mass points.
    """
    required = _required_columns(mode)
    mapping = {k: v for k, v in schema.items() if v}
    missing_required = [name for name in required if name not in mapping]
    if missing_required:
        if mode == "multicutoff" and "c" in missing_required:
            raise ValidationError("cutoff column is required in multi-cutoff mode")
        raise ValidationError(f"no column mapped for: {', '.join(missing_required)}")

    raw = _read_table(path, delimiter)
    absent = [col for col in mapping.values() if col not in raw.columns]
    if absent:
        raise ValidationError(f"missing column(s) in {path}: {', '.join(absent)}")

    # 1. Parse mapped columns
    frame = pd.DataFrame({name: _numeric_column(raw[col], col) for name, col in mapping.items()})
    frame["row_id"] = np.arange(len(frame))
    rows_read = len(frame)

    # 2. Drop rows with missing mapped values
    complete = frame.drop(columns=["row_id"]).notna().all(axis=1)
    frame = frame[complete]
    rows_dropped = rows_read - len(frame)
    if frame.empty:
        raise ValidationError(f"no complete rows left in {path} after dropping {rows_dropped} with missing values")

    # 3. Domain checks
    if "weight" in frame and (frame["weight"] < 0).any():
        row = int(frame.loc[frame["weight"] < 0, "row_id"].iloc[0]) + 1
        raise DataParseError(f"negative weight in row {row}", row=row, column=mapping["weight"])
    if "treat" in frame and not frame["treat"].isin([0, 1]).all():
        row = int(frame.loc[~frame["treat"].isin([0, 1]), "row_id"].iloc[0]) + 1
        raise DataParseError(f"treatment indicator must be 0/1 (row {row})", row=row, column=mapping["treat"])

    mass_points = int(frame["x"].duplicated(keep=False).sum())
    report = LoadReport(
        source=os.path.basename(path),
        digest=file_digest(path),
        rows_read=rows_read,
        rows_dropped=rows_dropped,
        mass_points=mass_points,
    )
    if mode == "multicutoff":
        return MultiCutoffDataset(frame, report)
    return MultiScoreDataset(frame, mode, report)


def frame_dataset(frame: pd.DataFrame, mode: str = "multicutoff") -> RdDataset:
    """Wrap an in-memory frame that already uses canonical column names."""
    missing = [name for name in _required_columns(mode) if name not in frame.columns]
    if missing:
        raise ValidationError(f"frame lacks column(s): {', '.join(missing)}")
    frame = frame.dropna(subset=[c for c in frame.columns]).copy()
    if mode == "multicutoff":
        return MultiCutoffDataset(frame)
    return MultiScoreDataset(frame, mode)


def write_dataset(dataset: RdDataset, path: str, delimiter: str = ",") -> None:
    """Write canonical columns with round-trip float precision."""
    frame = dataset.frame.drop(columns=["row_id"], errors="ignore")
    frame.to_csv(path, sep=delimiter, index=False, float_format="%.17g")


def read_boundary_columns(path: str, columns: Sequence[str], delimiter: str = ",") -> List[tuple]:
    """
    Rows of `columns` with every value present: cutoffs listed in one column
    ("each row a cutoff") or boundary points in two.
    """
    raw = _read_table(path, delimiter)
    absent = [col for col in columns if col not in raw.columns]
    if absent:
        raise ValidationError(f"missing column(s) in {path}: {', '.join(absent)}")
    parsed = pd.DataFrame({col: _numeric_column(raw[col], col) for col in columns}).dropna()
    if parsed.empty:
        raise ValidationError(f"no values in column(s) {', '.join(columns)}")
    return [tuple(float(v) for v in row) for row in parsed.itertuples(index=False)]


# ============================================================
# OPTION TABLES
# ============================================================

def _coerce_option(name: str, value: Any) -> Any:
    if value is None:
        return None
    if isinstance(value, float) and math.isnan(value):
        return None
    text = str(value).strip()
    if text == "" or text == ".":
        return None
    try:
        if name in _INT_FIELDS:
            number = float(text)
            if not number.is_integer():
                raise ValueError
            return int(number)
        if name in _FLOAT_FIELDS:
            return float(text)
    except ValueError:
        raise ValidationError(f"invalid value '{text}' for option {name}")
    if name in ("support_left", "support_right"):
        return _parse_pair(text, name)
    return text


def _parse_pair(text: str, name: str):
    parts = text.replace(",", ":").split(":")
    if len(parts) != 2:
        raise ValidationError(f"option {name} expects lo:hi (got '{text}')")
    try:
        lo, hi = float(parts[0]), float(parts[1])
    except ValueError:
        raise ValidationError(f"option {name} expects numbers (got '{text}')")
    if not lo < hi:
        raise ValidationError(f"option {name} needs lo < hi (got '{text}')")
    return (lo, hi)


def _canonical_keys(keys: Iterable[str], aliases: Mapping[str, str]) -> Dict[str, str]:
    resolved = {}
    for key in keys:
        norm = str(key).strip().lower()
        if norm in UNSUPPORTED_OPTIONS:
            raise UnsupportedOptionError(str(key).strip())
        if norm not in aliases:
            raise ValidationError(f"unknown option '{key}'")
        resolved[key] = aliases[norm]
    return resolved


def options_from_mapping(values: Mapping[str, Any], level: float = 95.0) -> CutoffOptions:
    """Build one CutoffOptions record from k=v pairs (option-table row or --pooled-opt)."""
    keys = _canonical_keys(values.keys(), ESTIMATION_COLUMNS)
    fields_ = {}
    for key, name in keys.items():
        if name == "cutoff":
            continue
        value = _coerce_option(name, values[key])
        if value is not None:
            fields_[name] = value
    fields_.setdefault("level", level)
    return CutoffOptions(**fields_)


def parse_option_pairs(pairs: Sequence[str]) -> Dict[str, str]:
    """['h=20', 'p=2'] -> {'h': '20', 'p': '2'}."""
    parsed = {}
    for pair in pairs:
        for token in str(pair).split():
            if "=" not in token:
                raise ValidationError(f"option '{token}' is not of the form key=value")
            key, value = token.split("=", 1)
            parsed[key.strip()] = value.strip()
    return parsed


def _read_option_rows(path: Optional[str], n_cutoffs: int, delimiter: str,
                      cutoffs: Optional[Sequence[float]]) -> Optional[List[Dict[str, Any]]]:
    if path is None:
        return None
    table = _read_table(path, delimiter)
    if len(table) != n_cutoffs:
        raise ValidationError(f"option table has {len(table)} rows but the design has {n_cutoffs} cutoffs")
    rows = table.to_dict("records")
    if cutoffs is not None and "cutoff" in [str(c).strip().lower() for c in table.columns]:
        col = next(c for c in table.columns if str(c).strip().lower() == "cutoff")
        listed = [float(r[col]) for r in rows]
        if listed != [float(c) for c in cutoffs]:
            raise ValidationError(f"option table cutoffs {listed} do not match the data cutoffs {list(cutoffs)}")
    return rows


def load_options(path: Optional[str], n_cutoffs: int, level: float = 95.0, delimiter: str = ",",
                 cutoffs: Optional[Sequence[float]] = None) -> PerCutoffOptions:
    """
    Per-cutoff estimation options, one row per cutoff in ascending cutoff order.
    An absent table yields default records.
    """
    rows = _read_option_rows(path, n_cutoffs, delimiter, cutoffs)
    if rows is None:
        return PerCutoffOptions.defaults(n_cutoffs, level)
    records = []
    for index, row in enumerate(rows):
        try:
            records.append(options_from_mapping(row, level))
        except UnsupportedOptionError:
            raise
        except ValidationError as err:
            raise ValidationError(f"option table row {index + 1}: {err}")
    return PerCutoffOptions(tuple(records))


def load_plot_option_rows(path: Optional[str], n_cutoffs: int, delimiter: str = ",",
                          cutoffs: Optional[Sequence[float]] = None) -> List[Dict[str, Any]]:
    """Per-cutoff rdmcplot option rows as canonical-key dicts (empty dicts when absent)."""
    rows = _read_option_rows(path, n_cutoffs, delimiter, cutoffs)
    if rows is None:
        return [{} for _ in range(n_cutoffs)]
    parsed = []
    for row in rows:
        keys = _canonical_keys(row.keys(), PLOT_COLUMNS)
        record = {}
        for key, name in keys.items():
            if name == "cutoff":
                continue
            value = _coerce_option(name, row[key])
            if value is not None:
                record[name] = value
        parsed.append(record)
    return parsed
