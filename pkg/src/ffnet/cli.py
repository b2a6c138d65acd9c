"""Command-line front end.

Exit codes: 0 success, 1 a scientific check failed, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from ffnet.errors import CorruptCheckpoint, CorruptFile, CountMismatch, FfnError, SpecMismatch
from ffnet.network import PRESETS, FfnSpec, describe_rows, load_checkpoint, load_config, preset, save_checkpoint

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _spec_from_args(args) -> FfnSpec:
    if getattr(args, "config", None):
        return load_config(args.config)
    return preset(args.preset or "ffn32")


def _add_arch(p: argparse.ArgumentParser, default: str | None = "ffn32") -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--preset", choices=PRESETS, default=None, help=f"architecture preset (default {default})")
    g.add_argument("--config", metavar="FILE", help="JSON architecture config")


def _parse_synth(text: str) -> tuple[int, int]:
    try:
        k, n = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected CLASSESxPER_CLASS, got {text!r}") from None
    if not (1 <= k <= 32 and n >= 1):
        raise argparse.ArgumentTypeError("classes must lie in [1, 32] and per-class count be positive")
    return k, n


def cmd_describe(args) -> int:
    spec = _spec_from_args(args)
    if args.json:
        print(json.dumps(spec.to_dict(), indent=2))
        return EXIT_OK
    print(f"{spec.name}: input {'x'.join(map(str, spec.input_shape))}, feature length {spec.feature_length}")
    print(f"{'layer':>5}  {'volume shape':>12}  {'volumes':>8}  {'vol out':>7}  {'output shape':>12}")
    for row in describe_rows(spec):
        print(
            f"{row['layer']:>5}  {row['volume_shape']:>12}  {row['num_volumes']:>8}  "
            f"{row['volume_output']:>7}  {row['output_shape']:>12}"
        )
    return EXIT_OK


def cmd_analyze(args) -> int:
    from ffnet.analysis import approx_millions, cost_of_network

    spec = _spec_from_args(args)
    if args.num_classes:
        spec = spec.with_head(args.num_classes)
    report = cost_of_network(spec)
    if args.json:
        d = report.to_dict()
        d["name"] = spec.name
        print(json.dumps(d, indent=2))
        return EXIT_OK
    print(
        f"params {report.parameter_count} (≈{approx_millions(report.parameter_count)}), "
        f"macs {report.mac_count} (≈{approx_millions(report.mac_count)}), "
        f"activations {report.activation_label}, output {report.output_vector_length}"
    )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from ffnet.training import gradcheck

    spec = _spec_from_args(args)
    if args.num_classes:
        spec = spec.with_head(args.num_classes)
    report = gradcheck(spec, seed=args.seed, max_coords=args.coords)
    for name, err in report.errors.items():
        print(f"  {name:<18} max_rel_err={err:.3e}")
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_erf(args) -> int:
    from ffnet.analysis import conv_stack, erf_probe, erf_report

    spec = _spec_from_args(args).backbone()
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    maps = [erf_probe(spec, args.trials, args.seed)]
    if args.compare:
        depth = int(args.compare[len("conv") :])
        maps.append(erf_probe(conv_stack(depth, 16, spec.input_shape), args.trials, args.seed))
    written = erf_report(maps, args.out)
    print(Path(written[-1]).read_text(), end="")
    return EXIT_OK


def _load_data(args, split: str, input_shape=None, num_classes=None):
    from ffnet.training import load_idx, synth_dataset

    if args.idx:
        return load_idx(args.idx[0], args.idx[1], num_classes, split)
    k, n = args.synth or (10, 100)
    p = input_shape[0] if input_shape else 16
    return synth_dataset(k, n, p, args.data_seed, args.sigma, split)


def cmd_train(args) -> int:
    from ffnet.training import TrainConfig, train, write_metrics

    spec = _spec_from_args(args)
    config = TrainConfig(args.lr, args.epochs, args.batch_size, args.dropout, args.seed, args.optimizer)
    data = _load_data(args, "train", spec.input_shape)
    if data.images.shape[1:] != spec.input_shape:
        raise UsageError(f"data patches {data.images.shape[1:]} do not fit {spec.name} input {spec.input_shape}")
    params, metrics = train(spec.backbone(), data, config)
    full = spec.backbone().with_head(data.num_classes)
    full = FfnSpec(full.name, full.layers, full.head, config.dropout_rate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(full, params, out / "checkpoint.ffnw")
    write_metrics(metrics, out / "metrics.csv")
    for m in metrics:
        print(f"epoch {m.epoch:3d}  train_loss {m.train_loss:.6f}  train_acc {m.train_acc:.4f}")
    print(f"final train_acc {metrics[-1].train_acc:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from ffnet.training import evaluate

    spec, params = load_checkpoint(args.checkpoint)
    data = _load_data(args, "test", spec.input_shape, spec.head.num_classes if spec.head else None)
    if data.images.shape[1:] != spec.input_shape:
        raise UsageError(f"data patches {data.images.shape[1:]} do not fit {spec.name} input {spec.input_shape}")
    loss, acc = evaluate(spec, params, data)
    print(f"eval_loss {loss:.6f}  eval_acc {acc:.4f}  samples {len(data)}")
    return EXIT_OK


def cmd_patch(args) -> int:
    from ffnet import patcher

    image = patcher.read_image(args.image)
    if args.mode == "text":
        image = patcher.text_canvas(image)
        patches = patcher.multiscale(image, args.size, source=str(args.image))
    elif args.mode == "multiscale":
        patches = patcher.multiscale(image, args.size, source=str(args.image))
    elif args.mode == "nearest":
        patches = patcher.tile(patcher.resize_nearest_patch(image), patcher.nearest_patch_size(*image.shape[:2]))
    else:
        patches = patcher.tile(image, args.size, source=str(args.image))
    manifest = patcher.write_patchset(patches, args.out)
    print(f"{len(patches)} patches of {patches.patch_size}x{patches.patch_size} -> {manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ffnet", description=__doc__)
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS threads (env FFN_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", help="print the per-layer geometry of an architecture")
    _add_arch(p)
    p.add_argument("--json", action="store_true", help="emit the JSON architecture config")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("analyze", help="parameter / MAC accounting")
    _add_arch(p)
    p.add_argument("--num-classes", type=int, default=None, help="include a dense head")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_arch(p)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=10, help="sampled coordinates per parameter group")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("erf", help="empirical effective receptive field probe")
    _add_arch(p)
    p.add_argument("--compare", choices=["conv2", "conv3", "conv4", "conv5", "conv6"], default=None)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_erf)

    for name, func in (("train", cmd_train), ("eval", cmd_eval)):
        p = sub.add_parser(name, help=f"{name} on synthetic or IDX data")
        src = p.add_mutually_exclusive_group()
        src.add_argument("--synth", type=_parse_synth, default=None, metavar="KxN", help="synthetic set, e.g. 10x100")
        src.add_argument("--idx", nargs=2, metavar=("IMAGES", "LABELS"))
        p.add_argument("--sigma", type=float, default=0.3, help="synthetic noise level")
        p.add_argument("--data-seed", type=int, default=0)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        if name == "train":
            _add_arch(p, "ffn16")
            p.set_defaults(preset="ffn16")
            p.add_argument("--epochs", type=int, default=20)
            p.add_argument("--batch-size", type=int, default=32)
            p.add_argument("--lr", type=float, default=1e-3)
            p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
            p.add_argument("--dropout", type=float, default=0.25)
            p.add_argument("--out", required=True, help="output directory")
        else:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("patch", help="cut an image into FFN patches")
    p.add_argument("image", help="PPM/PGM (or other raster) image")
    p.add_argument("--mode", choices=["tile", "multiscale", "text", "nearest"], default="multiscale")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_patch)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = args.threads
    if threads is None and os.environ.get("FFN_THREADS"):
        try:
            threads = int(os.environ["FFN_THREADS"])
        except ValueError:
            parser.error("FFN_THREADS must be an integer")
    if threads is not None and threads < 1:
        parser.error("--threads must be positive")
    try:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(threads) if threads else nullcontext()
    except ImportError:  # pragma: no cover
        limiter = nullcontext()
    try:
        with limiter:
            return args.func(args)
    except (OSError, CorruptCheckpoint, CorruptFile, CountMismatch) as exc:
        print(f"ffnet: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, SpecMismatch, KeyError, ValueError) as exc:
        print(f"ffnet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FfnError as exc:
        print(f"ffnet: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
