"""
Run reports: results document, estimates bundle, manifest and the
fixed-width table printed to stdout. Every file write is atomic.

The results document carries no timing so identical runs produce
identical bytes; timing lives in the manifest.
"""

import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from core.localpoly import RdResult


SCHEMA_VERSION = "rdmulti.results/1"
RESULTS_FILE = "results.json"
BUNDLE_FILE = "bundle.json"
MANIFEST_FILE = "manifest.json"
TABLE_FILE = "results.txt"


def _clean(value: Any) -> Any:
    """JSON-safe copy: numpy scalars/arrays to Python, NaN/inf to None."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def dumps(document: Dict[str, Any]) -> str:
    return json.dumps(_clean(document), indent=2, sort_keys=True) + "\n"


def write_text_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_json_atomic(path: str, document: Dict[str, Any]) -> None:
    write_text_atomic(path, dumps(document))


# ============================================================
# ROWS
# ============================================================

def result_row(label: str, result: RdResult, weight: Optional[float] = None,
               n_group: Optional[int] = None, kind: str = "estimate") -> Dict[str, Any]:
    row = {"label": label, "kind": kind}
    row.update(result.to_dict())
    row["weight"] = weight
    row["n_group"] = n_group
    return row


def weighted_row(weighted) -> Dict[str, Any]:
    return {
        "label": "weighted",
        "kind": "weighted",
        "tau_bias_corrected": weighted.tau,
        "se_robust": weighted.se,
        "ci_robust": [weighted.ci[0], weighted.ci[1]],
        "p_value_robust": weighted.p_value,
        "level": weighted.level,
    }


@dataclass
class RunReport:
    command: str
    input: Dict[str, Any]
    options: List[Dict[str, Any]]
    rows: List[Dict[str, Any]]
    pooled_options: Optional[Dict[str, Any]] = None
    tests: List[Dict[str, Any]] = field(default_factory=list)
    warnings: List[Dict[str, Any]] = field(default_factory=list)
    extra: Dict[str, Any] = field(default_factory=dict)
    timing: Dict[str, float] = field(default_factory=dict)

    def results_document(self) -> Dict[str, Any]:
        doc = {
            "schema": SCHEMA_VERSION,
            "command": self.command,
            "input": self.input,
            "options": self.options,
            "pooled_options": self.pooled_options,
            "rows": self.rows,
            "tests": self.tests,
            "warnings": self.warnings,
        }
        doc.update(self.extra)
        return doc

    def to_json(self) -> str:
        return dumps(self.results_document())

    def manifest(self, files: Sequence[str], extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        doc = {"schema": SCHEMA_VERSION, "command": self.command, "input": self.input,
               "files": sorted(files), "timing": self.timing}
        if extra:
            doc.update(extra)
        return doc

    def table(self) -> str:
        return render_table(self.rows, self.tests)


class Stopwatch:
    def __init__(self):
        self.started = time.perf_counter()
        self.marks: Dict[str, float] = {}

    def mark(self, name: str) -> None:
        self.marks[name] = time.perf_counter() - self.started


# ============================================================
# TABLE
# ============================================================

def _fmt(value: Any, spec: str = ".3f") -> str:
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return "."
    return format(value, spec)


def render_table(rows: Sequence[Dict[str, Any]], tests: Sequence[Dict[str, Any]] = ()) -> str:
    """Fixed-width rendering of the results rows (same numbers as the document)."""
    header = f"{'Cutoff':<16}{'Coef.':>12}{'P>|z|':>10}{'CI lower':>12}{'CI upper':>12}{'h':>10}{'Nh':>10}{'Weight':>9}"
    rule = "-" * len(header)
    lines = [rule, header, rule]
    for index, row in enumerate(rows):
        ci = row.get("ci_robust") or [None, None]
        h = row.get("h")
        h_text = _fmt(h[0], ".3f") if h and h[0] == h[1] else (f"{h[0]:.2f}/{h[1]:.2f}" if h else ".")
        n_eff = row.get("n_left", 0) + row.get("n_right", 0) if "n_left" in row else None
        lines.append(
            f"{row['label']:<16}"
            f"{_fmt(row.get('tau_bias_corrected')):>12}"
            f"{_fmt(row.get('p_value_robust')):>10}"
            f"{_fmt(ci[0]):>12}"
            f"{_fmt(ci[1]):>12}"
            f"{h_text:>10}"
            f"{_fmt(n_eff, 'd'):>10}"
            f"{_fmt(row.get('weight')):>9}"
        )
        # rule between the cutoff rows and the weighted/pooled rows
        if row["kind"] == "estimate" and index + 1 < len(rows) and rows[index + 1]["kind"] != "estimate":
            lines.append(rule)
    lines.append(rule)
    for test in tests:
        df = f" df={test['df']}" if test.get("df") else ""
        lines.append(f"{test['name']}: statistic={test['statistic']:.4f}{df} p={test['p_value']:.4g}")
    return "\n".join(lines) + "\n"
