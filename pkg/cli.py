"""
Command-line front end.

    python main.py rdmc     --data d.csv --y y --x x --c c [--options opt.csv] [--pooled-opt h=20 p=2] [--plot] [--test equal]
    python main.py rdmcplot --data d.csv --y y --x x --c c [--options plot.csv] [--p 1,1] [--h 11,10] [--nobins] [--nopoly]
    python main.py rdms     --data d.csv --y y --x x --c 33,66 [--range 0:65.5,33.5:100] [--closest] [--plot]
    python main.py rdms     --data d.csv --y y --x x1 --x2 x2 --treat t --c 25:50,50:50,50:25 [--xnorm perpendicular --boundary corner:50,50]
    python main.py simulate --design multicutoff --n 1000 --seed 7

Exit codes: 0 ok, 2 validation error, 3 estimation error.
"""

import argparse
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

from analysis.manager import AnalysisManager
from analysis.multicutoff import equality_contrast, hypothesis_test, run_rdmc, wald_test
from analysis.multiscore import parse_boundary, run_rdms
from analysis.rdplot import estimates_plot_frame, run_rdmcplot
from core import report as rpt
from core.config import Settings
from core.datamodel import (
    UNSUPPORTED_OPTIONS,
    BoundarySpec,
    load_dataset,
    load_options,
    load_plot_option_rows,
    options_from_mapping,
    parse_option_pairs,
    read_boundary_columns,
)
from core.errors import EstimationError, RdmultiError, UnsupportedOptionError, ValidationError
from core.simgen import cumulative_cutoff_table, generate, spec_from_mapping

LOG_PREFIX = "[CLI]"

GENVARS_FILE = "rdmcplot_genvars.csv"
RDMC_PLOT_FILE = "rdmc_plot.csv"
RDMS_PLOT_FILE = "rdms_plot.csv"


@dataclass
class RunArtifacts:
    """Everything a command produces, as text, before anything touches disk."""
    report: rpt.RunReport
    files: Dict[str, str] = field(default_factory=dict)
    stdout: str = ""
    manifest_extra: Dict[str, Any] = field(default_factory=dict)


# ============================================================
# ARGUMENT PARSING
# ============================================================

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", help="input data file (delimited text with headers)")
    parser.add_argument("--y", help="outcome column")
    parser.add_argument("--x", help="score column (first score in bivariate designs)")
    parser.add_argument("--weights", help="sampling weight column")
    parser.add_argument("--options", help="per-cutoff option table, one row per cutoff")
    parser.add_argument("--level", type=float, help="confidence level in percent (default 95)")
    parser.add_argument("--out-dir", dest="out_dir", help="output directory")
    parser.add_argument("--n-jobs", dest="n_jobs", type=int, help="parallel workers for per-cutoff fits")
    parser.add_argument("--delimiter", help="field delimiter of input files")
    parser.add_argument("--quiet", action="store_true", default=None, help="no diagnostics on stderr")
    parser.add_argument("--seed-check", dest="seed_check", action="store_true",
                        help="run twice (second run serial) and require byte-identical outputs")
    for name in sorted(UNSUPPORTED_OPTIONS):
        parser.add_argument(f"--{name}", dest=f"unsupported_{name}", nargs="?", const="1", default=None,
                            help=argparse.SUPPRESS)


def _add_estimation(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--pooled-opt", dest="pooled_opt", nargs="+", default=None,
                        help="options for the pooled estimate, e.g. h=20 p=2")
    parser.add_argument("--verbose", action="store_true", help="print the pooled fit report")
    parser.add_argument("--test", choices=["equal"], help="post-estimation equality test of the first two effects")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdmulti", description="RD designs with multiple cutoffs or scores")
    sub = parser.add_subparsers(dest="command")

    rdmc = sub.add_parser("rdmc", help="pooled and cutoff-specific effects, non-cumulative cutoffs")
    _add_common(rdmc)
    _add_estimation(rdmc)
    rdmc.add_argument("--c", help="cutoff column")
    rdmc.add_argument("--weight-h", dest="weight_h", help="bandwidth for the cutoff weights: h or h_left,h_right")
    rdmc.add_argument("--plot", action="store_true", help="also write the estimates plot data")

    plot = sub.add_parser("rdmcplot", help="plot data (genvars) for multiple cutoffs")
    _add_common(plot)
    plot.add_argument("--c", help="cutoff column")
    plot.add_argument("--p", help="polynomial order per cutoff, comma separated")
    plot.add_argument("--h", help="bandwidth per cutoff, comma separated")
    plot.add_argument("--nbins", help="bins per side per cutoff, comma separated")
    plot.add_argument("--binselect", choices=["es", "qs"], help="bin selection for every cutoff")
    plot.add_argument("--nobins", action="store_true", help="omit bin means and CIs")
    plot.add_argument("--nopoly", action="store_true", help="omit polynomial fits")
    plot.add_argument("--ci", type=float, help="level of the bin confidence intervals")
    plot.add_argument("--nodraw", action="store_true", help="accepted; nothing is ever drawn")

    rdms = sub.add_parser("rdms", help="cumulative cutoffs or bivariate scores")
    _add_common(rdms)
    _add_estimation(rdms)
    rdms.add_argument("--x2", help="second score column (bivariate)")
    rdms.add_argument("--treat", help="treatment indicator column (bivariate)")
    rdms.add_argument("--c", help="cutoffs '33,66' or points '25:50,50:50', or column name(s) in --cutoff-data")
    rdms.add_argument("--cutoff-data", dest="cutoff_data", help="file holding cutoff/point columns (default --data)")
    rdms.add_argument("--range", dest="range_", help="per-cutoff ranges 'lo:hi,lo:hi' ('r' for c-r..c+r, '.' none)")
    rdms.add_argument("--xnorm", help="normalized score column for the pooled estimate, or 'perpendicular'")
    rdms.add_argument("--boundary", help="boundary for --xnorm perpendicular: corner:a,b or polyline:x,y;x,y")
    rdms.add_argument("--closest", action="store_true", help="pooled estimate on the closest-cutoff normalization")
    rdms.add_argument("--plot", action="store_true", help="also write the estimates plot data")

    sim = sub.add_parser("simulate", help="write a synthetic dataset with known effects")
    sim.add_argument("--design", choices=["multicutoff", "cumulative", "bivariate"], default="multicutoff")
    sim.add_argument("--n", type=int)
    sim.add_argument("--cutoffs", help="comma separated cutoffs")
    sim.add_argument("--effects", help="comma separated effects (one per cutoff; one for bivariate)")
    sim.add_argument("--corner", help="treated region corner a,b (bivariate)")
    sim.add_argument("--points", help="boundary points recorded in the truth, '25:50,50:50'")
    sim.add_argument("--mean-coefs-left", dest="mean_coefs_left", help="untreated mean polynomial coefficients")
    sim.add_argument("--mean-coefs-right", dest="mean_coefs_right",
                     help="treated-side mean polynomial coefficients (default: same as left)")
    sim.add_argument("--noise-sd", dest="noise_sd", type=float)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out-dir", dest="out_dir")
    sim.add_argument("--quiet", action="store_true", default=None)
    return parser


def namespace_for(command: str, **values: Any) -> argparse.Namespace:
    """Namespace with every flag of `command` at its default, then `values` applied."""
    args = build_parser().parse_args([command])
    for key, value in values.items():
        if not hasattr(args, key):
            raise ValidationError(f"unknown option '{key}' for {command}")
        setattr(args, key, value)
    return args


def _reject_unsupported(args: argparse.Namespace) -> None:
    for key, value in sorted(vars(args).items()):
        if key.startswith("unsupported_") and value is not None:
            raise UnsupportedOptionError(key[len("unsupported_"):])


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if not getattr(args, n, None)]
    if missing:
        raise ValidationError(f"missing required flag(s): {', '.join(missing)}")


def _floats(text: str, name: str) -> List[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"--{name} expects comma separated numbers (got '{text}')")


def _pairs(text: str, name: str) -> List[tuple]:
    out = []
    for item in str(text).split(","):
        parts = item.split(":")
        if len(parts) != 2:
            raise ValidationError(f"--{name} expects a:b pairs (got '{item}')")
        try:
            out.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ValidationError(f"--{name} expects numbers (got '{item}')")
    return out


def _is_numeric_list(text: str) -> bool:
    try:
        [float(v) for v in text.replace(":", ",").split(",")]
        return True
    except ValueError:
        return False


def _parse_ranges(text: Optional[str], n: int):
    if text is None:
        return None
    items = [v.strip() for v in str(text).split(",")]
    if len(items) != n:
        raise ValidationError(f"--range lists {len(items)} entries for {n} cutoffs")
    ranges = []
    for item in items:
        if item in (".", ""):
            ranges.append(None)
        elif ":" in item:
            ranges.append(_pairs(item, "range")[0])
        else:
            ranges.append(_floats(item, "range")[0])
    return ranges


def _settings(args: argparse.Namespace) -> Settings:
    return Settings.from_env().override(
        n_jobs=getattr(args, "n_jobs", None),
        out_dir=getattr(args, "out_dir", None),
        level=getattr(args, "level", None),
        delimiter=getattr(args, "delimiter", None),
        quiet=getattr(args, "quiet", None),
    )


def _input_block(args: argparse.Namespace, dataset, schema: Dict[str, Optional[str]]) -> Dict[str, Any]:
    block = dataset.report.to_dict() if dataset.report is not None else {}
    block["columns"] = {k: v for k, v in schema.items() if v}
    block["n"] = len(dataset)
    return block


def _pooled_options(args: argparse.Namespace, level: float):
    if not args.pooled_opt:
        return options_from_mapping({}, level)
    return options_from_mapping(parse_option_pairs(args.pooled_opt), level)


# ============================================================
# COMMANDS
# ============================================================

def cmd_rdmc(args: argparse.Namespace, settings: Settings, manager: AnalysisManager) -> RunArtifacts:
    _require(args, "data", "y", "x")
    if not args.c:
        raise ValidationError("cutoff column is required in multi-cutoff mode (--c)")
    schema = {"y": args.y, "x": args.x, "c": args.c, "weight": args.weights}
    dataset = load_dataset(args.data, schema, "multicutoff", settings.delimiter)
    options = load_options(args.options, len(dataset.cutoffs), settings.level, settings.delimiter, dataset.cutoffs)
    pooled_opts = _pooled_options(args, settings.level)
    weight_h = None
    if args.weight_h:
        values = _floats(args.weight_h, "weight-h")
        weight_h = values[0] if len(values) == 1 else tuple(values[:2])

    outcome = run_rdmc(dataset, options, pooled_opts, weight_h=weight_h, test=args.test,
                       level=settings.level, n_jobs=settings.n_jobs, manager=manager)

    rows = [rpt.result_row(e.label, e.result, e.weight, e.n_group) for e in outcome.estimates]
    rows.append(rpt.weighted_row(outcome.weighted))
    rows.append(rpt.result_row("pooled", outcome.pooled, kind="pooled"))
    report = rpt.RunReport(
        command="rdmc",
        input=_input_block(args, dataset, schema),
        options=outcome.options.to_list(),
        pooled_options=outcome.pooled_options.to_dict(),
        rows=rows,
        tests=[t.to_dict() for t in outcome.tests],
        warnings=manager.warnings(),
        extra={"weights": {"bandwidth": list(outcome.weights.bandwidth),
                           "counts": {f"{c:g}": n for c, n in outcome.weights.counts.items()},
                           "total": outcome.weights.total}},
    )
    files = {
        rpt.RESULTS_FILE: report.to_json(),
        rpt.BUNDLE_FILE: rpt.dumps(outcome.bundle.to_dict()),
        rpt.TABLE_FILE: report.table(),
    }
    if args.plot:
        frame = estimates_plot_frame(outcome)
        files[RDMC_PLOT_FILE] = frame.to_csv(sep=settings.delimiter, index=False, float_format="%.17g",
                                             lineterminator="\n")
    stdout = report.table()
    if args.verbose:
        stdout = outcome.pooled.describe() + "\n\n" + stdout
    return RunArtifacts(report, files, stdout)


def _plot_rows(args: argparse.Namespace, n_cutoffs: int, delimiter: str, cutoffs) -> List[Dict[str, Any]]:
    rows = load_plot_option_rows(args.options, n_cutoffs, delimiter, cutoffs)
    for flag, key, cast in (("p", "p", int), ("h", "h_left", float), ("nbins", "nbins_left", int)):
        text = getattr(args, flag)
        if text is None:
            continue
        values = _floats(text, flag)
        if len(values) == 1:
            values = values * n_cutoffs
        if len(values) != n_cutoffs:
            raise ValidationError(f"--{flag} lists {len(values)} values for {n_cutoffs} cutoffs")
        for row, value in zip(rows, values):
            row[key] = cast(value)
            if key == "h_left":
                row.pop("h_right", None)
            if key == "nbins_left":
                row.pop("nbins_right", None)
    if args.binselect:
        for row in rows:
            row["binselect"] = args.binselect
    return rows


def cmd_rdmcplot(args: argparse.Namespace, settings: Settings, manager: AnalysisManager) -> RunArtifacts:
    _require(args, "data", "y", "x")
    if not args.c:
        raise ValidationError("cutoff column is required in multi-cutoff mode (--c)")
    schema = {"y": args.y, "x": args.x, "c": args.c, "weight": args.weights}
    dataset = load_dataset(args.data, schema, "multicutoff", settings.delimiter)
    rows = _plot_rows(args, len(dataset.cutoffs), settings.delimiter, dataset.cutoffs)
    level = args.ci if args.ci is not None else settings.level
    if not 0 < level < 100:
        raise ValidationError(f"confidence level must lie in (0, 100) (got {level})")

    outcome = run_rdmcplot(dataset, rows, nobins=args.nobins, nopoly=args.nopoly, level=level, manager=manager)

    # one output row per input row; dropped and other-cutoff rows stay blank
    genvars = outcome.genvars
    genvars.index = dataset.row_ids
    if dataset.report is not None:
        genvars = genvars.reindex(range(dataset.report.rows_read))
    text = genvars.to_csv(sep=settings.delimiter, index=False, float_format="%.17g", lineterminator="\n")

    report = rpt.RunReport(
        command="rdmcplot",
        input=_input_block(args, dataset, schema),
        options=[s.options for s in outcome.series],
        rows=[],
        warnings=manager.warnings(),
        extra={"series": outcome.manifest(), "level": level},
    )
    files = {GENVARS_FILE: text, rpt.RESULTS_FILE: report.to_json()}
    stdout = f"{LOG_PREFIX} wrote {len(genvars.columns)} genvars columns for {len(outcome.series)} cutoffs\n"
    return RunArtifacts(report, files, stdout)


def _infer_rdms_mode(args: argparse.Namespace) -> str:
    if args.x2 and args.treat:
        return "bivariate"
    if args.x2 or args.treat:
        raise ValidationError("ambiguous design: bivariate mode needs both --x2 and --treat")
    return "cumulative"


def _boundary_spec(args: argparse.Namespace, mode: str, delimiter: str) -> BoundarySpec:
    if not args.c:
        raise ValidationError("--c is required: cutoffs, points or their column name(s)")
    source = args.cutoff_data or args.data
    if mode == "cumulative":
        if _is_numeric_list(args.c):
            cutoffs = _floats(args.c, "c")
        else:
            cutoffs = [row[0] for row in read_boundary_columns(source, [args.c.strip()], delimiter)]
        return BoundarySpec("cumulative", cutoffs=cutoffs, ranges=_parse_ranges(args.range_, len(cutoffs)))
    if args.range_ is not None:
        raise ValidationError("--range applies to cumulative designs only")
    if _is_numeric_list(args.c):
        points = _pairs(args.c, "c")
    else:
        columns = [v.strip() for v in args.c.split(",")]
        if len(columns) != 2:
            raise ValidationError("bivariate points need two columns (--c b1col,b2col)")
        points = read_boundary_columns(source, columns, delimiter)
    return BoundarySpec("bivariate", points=points)


def cmd_rdms(args: argparse.Namespace, settings: Settings, manager: AnalysisManager) -> RunArtifacts:
    _require(args, "data", "y", "x")
    mode = _infer_rdms_mode(args)
    xnorm_mode = None
    schema = {"y": args.y, "x": args.x, "weight": args.weights}
    if mode == "bivariate":
        schema.update({"x2": args.x2, "treat": args.treat})
    if args.xnorm:
        if args.xnorm == "perpendicular":
            xnorm_mode = "perpendicular"
        else:
            schema["xnorm"] = args.xnorm
            xnorm_mode = "column"
    perimeter = parse_boundary(args.boundary) if args.boundary else None
    if xnorm_mode == "perpendicular" and perimeter is None:
        raise ValidationError("--xnorm perpendicular needs --boundary")

    dataset = load_dataset(args.data, schema, mode, settings.delimiter)
    boundary = _boundary_spec(args, mode, settings.delimiter)
    options = load_options(args.options, len(boundary), settings.level, settings.delimiter)
    pooled_opts = _pooled_options(args, settings.level)

    outcome = run_rdms(dataset, boundary, options, pooled_opts, xnorm=xnorm_mode, perimeter=perimeter,
                       closest=args.closest, level=settings.level, n_jobs=settings.n_jobs, manager=manager)

    rows = [rpt.result_row(label, res) for label, res in zip(outcome.labels, outcome.results)]
    if outcome.pooled is not None:
        rows.append(rpt.result_row("pooled", outcome.pooled, kind="pooled"))
    bundle = outcome.bundle
    tests = []
    if args.test not in (None, "equal"):
        raise ValidationError(f"unknown test '{args.test}' (expected equal)")
    if args.test == "equal":
        if len(outcome.results) < 2:
            raise ValidationError("the equality test needs at least two cutoffs or points")
        tests.append(hypothesis_test(bundle, equality_contrast(bundle)).to_dict())
        if len(outcome.results) > 2:
            tests.append(wald_test(bundle, len(outcome.results)).to_dict())

    extra = {"mode": mode}
    if outcome.ranges is not None:
        extra["ranges"] = [list(r) if r is not None else None for r in outcome.ranges]
    if outcome.xnorm_source is not None:
        extra["xnorm"] = outcome.xnorm_source
    report = rpt.RunReport(
        command="rdms",
        input=_input_block(args, dataset, schema),
        options=outcome.options.to_list(),
        pooled_options=outcome.pooled_options.to_dict() if outcome.pooled_options is not None else None,
        rows=rows,
        tests=tests,
        warnings=manager.warnings(),
        extra=extra,
    )
    files = {
        rpt.RESULTS_FILE: report.to_json(),
        rpt.BUNDLE_FILE: rpt.dumps(bundle.to_dict()),
        rpt.TABLE_FILE: report.table(),
    }
    if args.plot:
        frame = estimates_plot_frame(outcome)
        files[RDMS_PLOT_FILE] = frame.to_csv(sep=settings.delimiter, index=False, float_format="%.17g",
                                             lineterminator="\n")
    stdout = report.table()
    if args.verbose and outcome.pooled is not None:
        stdout = outcome.pooled.describe() + "\n\n" + stdout
    return RunArtifacts(report, files, stdout)


def cmd_simulate(args: argparse.Namespace, settings: Settings, manager: AnalysisManager) -> RunArtifacts:
    values: Dict[str, Any] = {"design": args.design, "n": args.n, "noise_sd": args.noise_sd, "seed": args.seed}
    if args.cutoffs:
        values["cutoffs"] = _floats(args.cutoffs, "cutoffs")
    if args.effects:
        values["effects"] = _floats(args.effects, "effects")
    if args.corner:
        values["corner"] = _floats(args.corner, "corner")
    if args.points:
        values["points"] = _pairs(args.points, "points")
    if args.mean_coefs_left:
        values["mean_coefs_left"] = _floats(args.mean_coefs_left, "mean-coefs-left")
    if args.mean_coefs_right:
        values["mean_coefs_right"] = _floats(args.mean_coefs_right, "mean-coefs-right")
    sim = generate(spec_from_mapping(values))
    manager.info("SIMGEN", f"{sim.spec.design} design, n={sim.spec.n}, seed={sim.spec.seed}")

    csv = lambda frame: frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
    files = {"data.csv": csv(sim.data), "truth.json": rpt.dumps(sim.manifest())}
    if sim.spec.design == "cumulative":
        files["cutoffs.csv"] = csv(cumulative_cutoff_table(sim.spec))
    report = rpt.RunReport(command="simulate", input={"spec": sim.spec.to_dict()}, options=[], rows=[],
                           extra={"truth": sim.truth})
    return RunArtifacts(report, files, f"{LOG_PREFIX} wrote {sim.spec.n} rows\n")


HANDLERS = {"rdmc": cmd_rdmc, "rdmcplot": cmd_rdmcplot, "rdms": cmd_rdms, "simulate": cmd_simulate}


# ============================================================
# EXECUTION
# ============================================================

def execute(args: argparse.Namespace, settings: Optional[Settings] = None,
            manager: Optional[AnalysisManager] = None) -> RunArtifacts:
    """Run one command and write its files atomically into the output directory."""
    settings = settings if settings is not None else _settings(args)
    manager = manager if manager is not None else AnalysisManager(quiet=settings.quiet)
    _reject_unsupported(args)
    if not 0 < settings.level < 100:
        raise ValidationError(f"confidence level must lie in (0, 100) (got {settings.level})")
    if settings.n_jobs == 0:
        raise ValidationError("--n-jobs must not be 0")

    watch = rpt.Stopwatch()
    handler = HANDLERS[args.command]
    artifacts = handler(args, settings, manager)
    watch.mark("run")

    if getattr(args, "seed_check", False):
        replay = handler(args, settings.override(n_jobs=1), AnalysisManager(quiet=True))
        watch.mark("seed_check")
        differing = sorted(name for name in artifacts.files if artifacts.files[name] != replay.files.get(name))
        if differing:
            raise EstimationError(f"seed check failed: {', '.join(differing)} differ between runs")
        manager.info("CLI", "seed check passed: outputs byte-identical across runs")

    artifacts.report.timing = dict(watch.marks)
    for name, text in artifacts.files.items():
        rpt.write_text_atomic(os.path.join(settings.out_dir, name), text)
    manifest = artifacts.report.manifest(list(artifacts.files), artifacts.manifest_extra)
    manifest["audit"] = manager.get_audit_trail(limit=None)
    rpt.write_json_atomic(os.path.join(settings.out_dir, rpt.MANIFEST_FILE), manifest)
    return artifacts


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    try:
        artifacts = execute(args)
    except RdmultiError as err:
        kind = "VALIDATION" if isinstance(err, ValidationError) else "ESTIMATION"
        print(f"{LOG_PREFIX} {kind} ERROR: {err}", file=sys.stderr)
        return err.exit_code
    sys.stdout.write(artifacts.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
