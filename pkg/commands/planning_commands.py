# commands/planning_commands.py - plan and cost subcommands
import logging

from config import (
    BACKBONE_PRESETS,
    COMPARISON_CHANNELS,
    FLOP_INPUT_SIZE,
    PARAM_BAND,
    REPORTED_PARAMS,
    SEARCH_KERNEL_CANDIDATES,
    SEARCH_MAX_BRANCHES,
)
from services.cost_model import COMPARISON_NOTE, backbone_cost, cost_of_plan, kernel_comparison
from services.decomposition import prefix_receptive_fields, validate_plan
from services.planner import MIN_FLOPS, MIN_PARAMS, SearchQuery, search_decompositions
from storage.config_loader import load_model_config
from utils.errors import ContractViolation, FormatError
from utils.helpers import emit_result, format_plan, parse_plan

logger = logging.getLogger()


def _parse_candidates(text):
    try:
        return tuple(int(value) for value in text.split(",") if value.strip())
    except ValueError:
        raise FormatError(f"invalid kernel candidate list {text!r}, expected e.g. 3,5,7")


def _ledger_lines(report, limit=None):
    rows = report.ledger if limit is None else report.ledger[:limit]
    lines = [f"{'layer':<44} {'params':>12} {'w/o bias':>12} {'FLOPs':>16}"]
    lines += [f"{row.name:<44} {row.params:>12} {row.weights:>12} {row.flops:>16}" for row in rows]
    if limit is not None and len(report.ledger) > limit:
        lines.append(f"... {len(report.ledger) - limit} more layers (use --json for the full ledger)")
    lines.append(
        f"{'total':<44} {report.params_with_bias:>12} {report.params_without_bias:>12} {report.flops:>16}"
    )
    return lines


def plan_command(args):
    if args.check:
        pairs = parse_plan(args.check)
        violations = validate_plan(pairs)
        payload = {
            "plan": [list(pair) for pair in pairs],
            "rf": prefix_receptive_fields(pairs),
            "valid": not violations,
            "violations": [{"rule": v.rule, "index": v.index, "message": v.message} for v in violations],
        }
        lines = [f"plan {format_plan(pairs)}: RF prefix {prefix_receptive_fields(pairs)}"]
        lines += [f"  violation [{v.rule}] {v.message}" for v in violations] or ["  ok"]
        emit_result(args, payload, lines)
        return 0

    if args.rf is None:
        raise ContractViolation("plan needs --rf TARGET (or --check PLAN)")
    query = SearchQuery(
        target_rf=args.rf,
        max_branches=args.max_branches,
        k_candidates=_parse_candidates(args.k) if args.k else SEARCH_KERNEL_CANDIDATES,
        objective=args.objective,
        channels=args.channels,
        spatial=(args.size, args.size),
        branch_channels=args.branch_channels,
    )
    result = search_decompositions(query)
    payload = result.to_dict()
    lines = [f"RF {query.target_rf}, up to {query.max_branches} branches, objective {query.objective}"]
    if result.empty:
        lines.append("no legal decomposition (empty result)")
    else:
        lines.append(f"{'#':>3}  {'plan':<32} {'N':>2} {'params':>10} {'FLOPs':>16}")
        for rank, entry in enumerate(result.ranked[: args.limit], start=1):
            lines.append(
                f"{rank:>3}  {format_plan(entry.plan.pairs()):<32} {len(entry.plan):>2} "
                f"{entry.cost.params_with_bias:>10} {entry.cost.flops:>16}"
            )
        if len(result.ranked) > args.limit:
            lines.append(f"... {len(result.ranked) - args.limit} more (use --limit or --json)")
    emit_result(args, payload, lines)
    return 0


def cost_command(args):
    spatial = (args.size, args.size)
    if args.compare:
        rows = kernel_comparison(channels=args.channels, spatial=spatial)
        payload = {"comparison": [row.to_dict() for row in rows], "notes": [COMPARISON_NOTE]}
        lines = [f"{'RF':>3}  {'plan':<26} {'params':>8} {'reported':>9} {'FLOPs':>14}"]
        for row in rows:
            lines.append(f"{row.rf:>3}  {format_plan(row.single):<26} {row.single_cost.params_with_bias:>8} {row.reported_single_params:>9.0f} {row.single_cost.flops:>14}")
            lines.append(f"{'':>3}  {format_plan(row.decomposed):<26} {row.decomposed_cost.params_with_bias:>8} {row.reported_decomposed_params:>9.0f} {row.decomposed_cost.flops:>14}")
            lines.append(f"{'':>3}  ratio {row.params_ratio:.3f} (reported {row.reported_ratio:.3f})")
        lines.append(f"note: {COMPARISON_NOTE}")
        emit_result(args, payload, lines)
        return 0

    if args.plan:
        report = cost_of_plan(
            parse_plan(args.plan),
            args.channels,
            spatial,
            include_selection=not args.no_selection,
            include_projections=not args.no_projections,
            branch_channels=args.branch_channels,
            selection_kernel=args.selection_kernel,
        )
        payload = {"cost": report.to_dict()}
        emit_result(args, payload, _ledger_lines(report) + [f"note: {report.notes[0]}"])
        return 0

    cfg = load_model_config(args.config, preset=args.preset)
    report = backbone_cost(cfg, args.size, args.size)
    payload = {"model": cfg.to_dict(), "cost": report.to_dict()}
    lines = _ledger_lines(report, limit=None if args.full else 12)
    preset = args.preset
    if preset in REPORTED_PARAMS:
        reported = REPORTED_PARAMS[preset]
        deviation = report.params_with_bias / reported - 1.0
        payload["reported_params"] = reported
        payload["within_band"] = abs(deviation) <= PARAM_BAND
        lines.append(f"reported {reported:.3g} params, deviation {deviation:+.1%} (band ±{PARAM_BAND:.0%})")
    emit_result(args, payload, lines)
    return 0


def register_planning_commands(subparsers, common):
    """Register the plan and cost subcommands"""

    # ➤ plan
    parser = subparsers.add_parser("plan", parents=[common], help="search or check kernel decompositions")
    parser.add_argument("--rf", type=int, help="target receptive field")
    parser.add_argument("--check", help="validate one plan, e.g. 5,1:7,3")
    parser.add_argument("--max-branches", type=int, default=SEARCH_MAX_BRANCHES)
    parser.add_argument("--k", help="comma-separated odd kernel candidates (default 1..31)")
    parser.add_argument("--objective", choices=(MIN_PARAMS, MIN_FLOPS), default=MIN_PARAMS)
    parser.add_argument("--channels", type=int, default=COMPARISON_CHANNELS)
    parser.add_argument("--size", type=int, default=FLOP_INPUT_SIZE, help="square input size for FLOPs")
    parser.add_argument("--branch-channels", type=int, default=None)
    parser.add_argument("--limit", type=int, default=10, help="rows shown in the table")
    parser.set_defaults(handler=plan_command)

    # ➤ cost
    parser = subparsers.add_parser("cost", parents=[common], help="analytic parameter / FLOP ledgers")
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--plan", help="cost of one LSK module, e.g. 5,1:7,3")
    source.add_argument("--compare", action="store_true", help="single vs decomposed kernel comparison")
    source.add_argument("--preset", choices=sorted(BACKBONE_PRESETS), help="backbone preset")
    parser.add_argument("--config", help="TOML model config for a backbone ledger")
    parser.add_argument("--channels", type=int, default=COMPARISON_CHANNELS)
    parser.add_argument("--size", type=int, default=FLOP_INPUT_SIZE)
    parser.add_argument("--branch-channels", type=int, default=None)
    parser.add_argument("--selection-kernel", type=int, default=7)
    parser.add_argument("--no-selection", action="store_true", help="drop selection and fusion layers")
    parser.add_argument("--no-projections", action="store_true", help="drop per-branch 1x1 projections")
    parser.add_argument("--full", action="store_true", help="print the whole backbone ledger")
    parser.set_defaults(handler=cost_command)
