# commands/model_commands.py - forward, gradcheck and export subcommands
import logging
import os

from config import BACKBONE_PRESETS
from services.analysis import export_activation_maps, traces_from_backbone
from services.backbone import backbone_forward_traced, build_backbone, parameter_count, zero_backbone_weights
from services.gradcheck import OPS, STRICT_FLOOR, run_gradcheck
from services.tensor_core import check_finite, checksum
from storage.config_loader import load_model_config
from storage.tensor_io import load_tensor_arg, write_lskt
from storage.weight_bundle import load_bundle, save_bundle
from utils.errors import ContractViolation
from utils.helpers import emit_result

logger = logging.getLogger()

BUNDLE_KIND = "backbone"


def _model(args):
    cfg = load_model_config(args.config, preset=args.preset)
    if args.weights:
        weights = load_bundle(args.weights, BUNDLE_KIND, cfg, zero_backbone_weights(cfg))
        logger.info(f"Loaded weights from {args.weights}")
    else:
        weights = build_backbone(cfg, args.seed)
    return cfg, weights


def forward_command(args):
    cfg, weights = _model(args)
    x = check_finite(load_tensor_arg(args.input), name="input")
    pyramid, _ = backbone_forward_traced(x, cfg, weights)
    stages = []
    for index, (stage, stride) in enumerate(zip(pyramid.stages, pyramid.strides), start=1):
        entry = {"stage": index, "stride": stride, "shape": list(stage.shape), "sha256": checksum(stage)}
        if args.out:
            path = os.path.join(args.out, f"stage{index}.lskt")
            write_lskt(path, stage)
            entry["file"] = path
        stages.append(entry)
    if args.out and args.save_weights:
        save_bundle(os.path.join(args.out, "weights"), BUNDLE_KIND, cfg, weights)
    payload = {"model": cfg.to_dict(), "params": parameter_count(weights), "stages": stages}
    lines = [f"stage {s['stage']} (stride {s['stride']:>2}): {tuple(s['shape'])} sha256 {s['sha256']}" for s in stages]
    lines.append(f"parameters: {payload['params']}")
    emit_result(args, payload, lines)
    return 0


def gradcheck_command(args):
    options = {}
    if args.op == "conv2d":
        options = {"k": args.k, "d": args.d, "stride": args.stride, "depthwise": args.depthwise}
    elif args.op == "channel_pool":
        options = {"mode": args.pooling}
    result = run_gradcheck(args.op, seed=args.seed, samples=args.samples, **options)
    lines = [
        f"{result.op}: {result.checked} coordinates, max rel. error {result.max_rel_error:.3e} "
        f"(tolerance {result.tolerance:g}) at {result.worst}: {'PASS' if result.passed else 'FAIL'}",
        f"  unfloored rel. error {result.max_strict_rel_error:.3e} over gradients above {STRICT_FLOOR:g}",
    ]
    emit_result(args, {"gradcheck": result.to_dict()}, lines)
    return 0 if result.passed else 1


def export_command(args):
    if not args.out:
        raise ContractViolation("export needs --out DIR for the activation maps")
    cfg, weights = _model(args)
    x = check_finite(load_tensor_arg(args.input), name="input")
    _, traces = backbone_forward_traced(x, cfg, weights)
    batch = x.shape[0]
    image_ids = [args.image_id] if batch == 1 else [f"{args.image_id}_{index}" for index in range(batch)]
    written = []
    for trace in traces_from_backbone(traces, x.shape[2:], image_ids):
        written += export_activation_maps(trace, args.out, render=not args.no_pgm)
    tensors = [path for path in written if path.endswith(".lskt")]
    payload = {"model": cfg.to_dict(), "images": image_ids, "tensor_files": len(tensors), "files": written}
    lines = [f"exported {len(tensors)} selection maps for {', '.join(image_ids)} to {args.out}"]
    emit_result(args, payload, lines)
    return 0


def _add_model_arguments(parser):
    parser.add_argument("--preset", choices=sorted(BACKBONE_PRESETS), help="backbone preset (default lsknet-t)")
    parser.add_argument("--config", help="TOML model config")
    parser.add_argument("--weights", help="weight bundle directory (default: seeded init)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--input", required=True, help="zeros:NxCxHxW, seed:S:normal:NxCxHxW or an .lskt file")


def register_model_commands(subparsers, common):
    """Register the forward, gradcheck and export subcommands"""

    # ➤ forward
    parser = subparsers.add_parser("forward", parents=[common], help="backbone forward pass")
    _add_model_arguments(parser)
    parser.add_argument("--save-weights", action="store_true", help="also write the weight bundle under --out")
    parser.set_defaults(handler=forward_command)

    # ➤ gradcheck
    parser = subparsers.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    parser.add_argument("--op", choices=OPS, required=True)
    parser.add_argument("--k", type=int, default=3)
    parser.add_argument("--d", type=int, default=1)
    parser.add_argument("--stride", type=int, default=1)
    parser.add_argument("--depthwise", action="store_true")
    parser.add_argument("--pooling", choices=("avg", "max", "both"), default="both")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--samples", type=int, default=None, help="coordinates per array (default: all)")
    parser.set_defaults(handler=gradcheck_command)

    # ➤ export
    parser = subparsers.add_parser("export", parents=[common], help="write selection maps of a forward pass")
    _add_model_arguments(parser)
    parser.add_argument("--image-id", default="image")
    parser.add_argument("--no-pgm", action="store_true", help="skip the PGM previews")
    parser.set_defaults(handler=export_command)
