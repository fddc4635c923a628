"""Command-line interface: ``dilatedseg <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure during training.
"""
import argparse
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import imaging_io as io
from . import inference
from . import metrics
from . import network as net
from . import optim
from .errors import ConfigError, DilatedSegError, FormatError, NumericError, ShapeError
from .phantom import PhantomSpec, make_phantom
from .volume import ISOTROPIC_SPACING, isotropic_spacing, preprocess, resample_labels_nearest

log = logging.getLogger("dilatedseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(DilatedSegError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _network_config(args):
    if getattr(args, "config", None):
        try:
            config = net.config_from_entries(io.read_config_entries(args.config))
        except ConfigError as exc:
            if exc.path is None:
                raise ConfigError(exc.message, exc.lineno, args.config) from None
            raise
        if args.no_dilation:
            config = net.NetworkConfig(
                tuple(net.LayerSpec(l.kernel_size, 1, l.out_channels, l.has_bias, l.has_batchnorm,
                                    l.has_dropout, l.activation) for l in config.layers),
                config.in_channels, config.dropout_rate, config.elu_alpha)
        return config
    return net.default_config(width=args.width, dilated=not args.no_dilation,
                              dropout_rate=getattr(args, "dropout_rate", 0.5))


# -- inspect ----------------------------------------------------------------

def cmd_inspect(config, out=sys.stdout):
    fields = net.receptive_field(config)
    per_layer, total = net.parameter_count(config)
    out.write(f"{'layer':>5} {'kernel':>7} {'dilation':>8} {'field':>9} {'channels':>8} {'parameters':>10}\n")
    for i, (layer, f, p) in enumerate(zip(config.layers, fields, per_layer), 1):
        k = f"{layer.kernel_size}x{layer.kernel_size}"
        out.write(f"{i:>5} {k:>7} {layer.dilation:>8} {f'{f}x{f}':>9} {layer.out_channels:>8} {p:>10}\n")
    out.write(f"total parameters {total}\n")
    return fields, per_layer, total


# -- synth ------------------------------------------------------------------

def cmd_synth(out_dir, count, spec=PhantomSpec()):
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FormatError(f"cannot create {out_dir}: {exc}") from exc
    written = []
    for i in range(count):
        image, labels = make_phantom(spec, i)
        written += io.write_volume(image, out_dir / f"image{i:03d}.mhd", "MET_FLOAT")
        written += io.write_volume(labels, out_dir / f"labels{i:03d}.mhd", "MET_UCHAR")
    return written


# -- train ------------------------------------------------------------------

def find_pairs(data_dir):
    data_dir = Path(data_dir)
    pairs = []
    for img in sorted(data_dir.glob("image*.mhd")):
        m = re.fullmatch(r"image(.*)\.mhd", img.name)
        lab = data_dir / f"labels{m.group(1)}.mhd"
        if lab.exists():
            pairs.append((img, lab))
    if not pairs:
        raise FormatError(f"no imageNNN.mhd / labelsNNN.mhd pairs found in {data_dir}")
    return pairs


def load_dataset(data_dir, target_spacing=ISOTROPIC_SPACING, normalize_first=True):
    """Preprocessed ``(image, labels)`` pairs; ``target_spacing="min"`` uses
    the smallest voxel dimension in the dataset."""
    raw = []
    for img_path, lab_path in find_pairs(data_dir):
        image = io.read_volume(img_path, kind="intensity")
        labels = io.read_volume(lab_path, kind="label")
        if image.dims != labels.dims:
            raise ShapeError(f"{img_path.name} dims {image.dims} != {lab_path.name} dims {labels.dims}")
        raw.append((image, labels))
    if target_spacing == "min":
        target_spacing = isotropic_spacing([im for im, _ in raw])
    return [(preprocess(im, target_spacing, normalize_first),
             resample_labels_nearest(lab, target_spacing)) for im, lab in raw]


def cmd_train(data_dir, plan: optim.TrainPlan, out_weights, config=None, loss_log_path=None,
              target_spacing=ISOTROPIC_SPACING, normalize_first=True, out=sys.stdout):
    config = config or net.default_config()
    out.write(plan.banner() + "\n")
    out.flush()
    dataset = load_dataset(data_dir, target_spacing, normalize_first)
    weights, loss_log = optim.train(config, dataset, plan)
    net.save_weights(config, weights, out_weights)
    if loss_log_path is None:
        loss_log_path = str(out_weights) + ".loss.tsv"
    Path(loss_log_path).write_text(optim.format_loss_log(loss_log))
    return weights, loss_log


# -- segment ----------------------------------------------------------------

def cmd_segment(weights_path, in_volume, out_labels, probs_prefix=None, export_dir=None,
                show_time=False, target_spacing=ISOTROPIC_SPACING, batch_size=None, out=sys.stdout):
    config, weights = net.load_weights(weights_path)
    image = io.read_volume(in_volume, kind="intensity")
    result = inference.fuse_and_segment(config, weights, image, target_spacing, batch_size=batch_size)
    io.write_volume(result.labels, out_labels, "MET_UCHAR")
    if probs_prefix is not None:
        for name, vol in zip(net.CLASS_NAMES, result.class_probs):
            io.write_volume(vol, f"{probs_prefix}_{name}.mhd", "MET_FLOAT")
    if export_dir is not None:
        export_dir = Path(export_dir)
        export_dir.mkdir(parents=True, exist_ok=True)
        for axis, n in zip("xyz", image.dims):
            io.export_slice_pixmap(image, axis, n // 2, export_dir / f"mid_{axis}.ppm",
                                   overlay=result.labels)
    if show_time:
        out.write(f"seconds={result.timing_seconds:.3f}\n")
    return result


# -- evaluate ---------------------------------------------------------------

def cmd_evaluate(pred_path, ref_path, out=sys.stdout):
    pred = io.read_volume(pred_path, kind="label")
    ref = io.read_volume(ref_path, kind="label")
    report = metrics.evaluate(pred, ref)
    out.write(report.table() + "\n")
    for line in report.machine_lines():
        out.write(line + "\n")
    return report


# -- ensemble-std -----------------------------------------------------------

def cmd_ensemble_std(weight_paths, in_volume, cls, out_volume, target_spacing=ISOTROPIC_SPACING,
                     batch_size=None):
    if len(weight_paths) < 2:
        raise UsageError("ensemble-std needs at least two weight files")
    image = io.read_volume(in_volume, kind="intensity")
    maps = []
    for path in weight_paths:
        config, weights = net.load_weights(path)
        if not 0 <= cls < config.num_classes:
            raise UsageError(f"class {cls} outside 0..{config.num_classes - 1}")
        res = inference.fuse_and_segment(config, weights, image, target_spacing, batch_size=batch_size)
        maps.append(res.class_probs)
    std = inference.ensemble_std(maps, cls)
    io.write_volume(std, out_volume, "MET_FLOAT")
    return std


# -- argument parsing -------------------------------------------------------

def _spacing(text):
    if text == "min":
        return text
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError("spacing must be positive")
    return value


def build_parser():
    p = _Parser(prog="dilatedseg", description="Dilated CNN segmentation of volumetric images.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def arch(sp):
        sp.add_argument("--config", help="network config file (key = value lines)")
        sp.add_argument("--width", type=int, default=32, help="feature channels (default 32)")
        sp.add_argument("--no-dilation", action="store_true", help="set every dilation to 1")

    sp = sub.add_parser("inspect", help="print the layer table")
    arch(sp)

    sp = sub.add_parser("synth", help="write synthetic phantom image/label pairs")
    sp.add_argument("out_dir", nargs="?")
    sp.add_argument("--out", dest="out_opt")
    sp.add_argument("--count", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=PhantomSpec.size)

    sp = sub.add_parser("train", help="train a network on image/label pairs")
    sp.add_argument("data_dir", nargs="?")
    sp.add_argument("out_weights", nargs="?")
    sp.add_argument("--in", dest="in_opt")
    sp.add_argument("--out", dest="out_opt")
    arch(sp)
    sp.add_argument("--steps", type=int, default=10000)
    sp.add_argument("--batch", type=int, default=128)
    sp.add_argument("--crop", type=int, default=201)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--dropout-rate", type=float, default=0.5)
    sp.add_argument("--no-augment", action="store_true", help="skip the rotated copies")
    sp.add_argument("--spacing", type=_spacing, default=ISOTROPIC_SPACING,
                    help="isotropic spacing in mm, or 'min' for the dataset minimum")
    sp.add_argument("--normalize-after", action="store_true",
                    help="normalise intensities after resampling instead of before")
    sp.add_argument("--loss-log", help="loss log path (default <weights>.loss.tsv)")

    sp = sub.add_parser("segment", help="segment a volume")
    sp.add_argument("weights", nargs="?")
    sp.add_argument("in_volume", nargs="?")
    sp.add_argument("out_labels", nargs="?")
    sp.add_argument("--in", dest="in_opt")
    sp.add_argument("--out", dest="out_opt")
    sp.add_argument("--probs", metavar="PREFIX", help="also write <PREFIX>_<class>.mhd")
    sp.add_argument("--export-slices", metavar="DIR", help="write mid-slice PPM snapshots")
    sp.add_argument("--time", action="store_true", help="print seconds=<elapsed>")
    sp.add_argument("--spacing", type=_spacing, default=ISOTROPIC_SPACING)
    sp.add_argument("--batch-size", type=int)

    sp = sub.add_parser("evaluate", help="score a label volume against a reference")
    sp.add_argument("pred")
    sp.add_argument("ref")

    sp = sub.add_parser("ensemble-std", help="voxelwise std of one class across networks")
    sp.add_argument("paths", nargs="*", help="WEIGHTS... IN OUT (or use --in/--out)")
    sp.add_argument("--in", dest="in_opt")
    sp.add_argument("--out", dest="out_opt")
    sp.add_argument("--class", dest="cls", type=int, default=2)
    sp.add_argument("--spacing", type=_spacing, default=ISOTROPIC_SPACING)
    sp.add_argument("--batch-size", type=int)
    return p


def _pick(positional, option, name):
    value = option if option is not None else positional
    if value is None:
        raise UsageError(f"missing {name}")
    return value


def _run(args, out):
    if args.command == "inspect":
        cmd_inspect(_network_config(args), out)
    elif args.command == "synth":
        cmd_synth(_pick(args.out_dir, args.out_opt, "output directory"), args.count,
                  PhantomSpec(size=args.size, seed=args.seed))
    elif args.command == "train":
        plan = optim.TrainPlan(steps=args.steps, batch_size=args.batch, crop_size=args.crop,
                               seed=args.seed, lr=args.lr, augment=not args.no_augment)
        cmd_train(_pick(args.data_dir, args.in_opt, "data directory"), plan,
                  _pick(args.out_weights, args.out_opt, "output weights"),
                  config=_network_config(args), loss_log_path=args.loss_log,
                  target_spacing=args.spacing, normalize_first=not args.normalize_after, out=out)
    elif args.command == "segment":
        if args.spacing == "min":
            raise UsageError("segment needs an explicit --spacing")
        cmd_segment(_pick(args.weights, None, "weights"), _pick(args.in_volume, args.in_opt, "input volume"),
                    _pick(args.out_labels, args.out_opt, "output labels"), args.probs,
                    args.export_slices, args.time, args.spacing, args.batch_size, out)
    elif args.command == "evaluate":
        cmd_evaluate(args.pred, args.ref, out)
    elif args.command == "ensemble-std":
        paths = list(args.paths)
        out_path = args.out_opt if args.out_opt is not None else (paths.pop() if paths else None)
        in_path = args.in_opt if args.in_opt is not None else (paths.pop() if paths else None)
        if in_path is None or out_path is None:
            raise UsageError("ensemble-std needs WEIGHTS... IN OUT")
        if args.spacing == "min":
            raise UsageError("ensemble-std needs an explicit --spacing")
        cmd_ensemble_std(paths, in_path, args.cls, out_path, args.spacing, args.batch_size)


def main(argv=None, out=None):
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse: --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args, out)
    except UsageError as exc:
        print(f"dilatedseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"dilatedseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DilatedSegError, ValueError, IndexError, OSError) as exc:
        print(f"dilatedseg: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
