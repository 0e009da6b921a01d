# commands/analysis_commands.py - analyze and report subcommands
import json
import logging
import os

from services.analysis import RF_WEIGHTINGS, kernel_selection_by_category, load_trace_dir, read_annotations, rf_box_ratio
from services.report import emit_report
from utils.errors import ContractViolation, FormatError
from utils.helpers import emit_result

logger = logging.getLogger()

ANALYSIS_FILE = "analysis.json"


def analyze_command(args):
    traces = load_trace_dir(args.traces)
    annotations = read_annotations(args.annotations)
    ratio = rf_box_ratio(traces, annotations, rf_weighting=args.rf_weighting)

    selection = {}
    if not args.no_selection:
        selection = {category: result.to_dict() for category, result in kernel_selection_by_category(traces, annotations).items()}

    payload = {"rf_ratio": ratio.to_dict(), "selection": selection, "images": len(traces)}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, ANALYSIS_FILE)
        with open(path, "w") as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
            handle.write("\n")
        logger.info(f"Wrote analysis results to {path}")

    lines = [f"{'category':<24} {'R_c':>12} {'normalised':>11} {'images':>7}"]
    for category in sorted(ratio.ratios):
        lines.append(
            f"{category:<24} {ratio.ratios[category]:>12.4f} {ratio.normalized[category]:>11.4f} {ratio.image_counts[category]:>7}"
        )
    lines += [f"{category:<24} {'absent':>12}" for category in ratio.absent]
    for category, result in sorted(selection.items()):
        ranked = ", ".join(f"{key} {result['per_block'][key]:.3f}" for key in result["ranking"])
        lines.append(f"ΔA {category}: {ranked}")
    emit_result(args, payload, lines)
    return 0


def report_command(args):
    if not args.out:
        raise ContractViolation("report needs --out DIR for the charts")
    with open(args.results) as handle:
        try:
            results = json.load(handle)
        except ValueError as e:
            raise FormatError(f"{args.results}: invalid JSON ({e})")
    charts = emit_report(results, args.out)
    payload = {"charts": [{"file": chart.path, "bars": len(chart.heights)} for chart in charts]}
    lines = [f"{chart.path}: {len(chart.heights)} bars" for chart in charts]
    emit_result(args, payload, lines)
    return 0


def register_analysis_commands(subparsers, common):
    """Register the analyze and report subcommands"""

    # ➤ analyze
    parser = subparsers.add_parser("analyze", parents=[common], help="R_c and kernel selection difference")
    parser.add_argument("--traces", required=True, help="trace directory written by export")
    parser.add_argument("--annotations", required=True, help="DOTA label file or directory of them")
    parser.add_argument("--rf-weighting", choices=RF_WEIGHTINGS, default="linear")
    parser.add_argument("--no-selection", action="store_true", help="skip ΔA (plans with N != 2)")
    parser.set_defaults(handler=analyze_command)

    # ➤ report
    parser = subparsers.add_parser("report", parents=[common], help="SVG/CSV charts from analysis JSON")
    parser.add_argument("--results", required=True, help="analysis.json produced by analyze")
    parser.set_defaults(handler=report_command)
