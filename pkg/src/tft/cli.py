"""Command-line entry point: ``tft <command> [options]``.

Every command accepts ``--config FILE`` (``key = value`` lines, ``#``
comments, keys named like the long options with dashes or underscores);
flags given on the command line override file values. Exit codes: 0 ok,
1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import json
import platform
import sys

import numpy as np

from . import __version__
from .affine import TransformParams
from .backbone import Backbone, accuracy, train_backbone
from .checkpoint import load_checkpoint, load_tensors, save_checkpoint, save_tensors
from .core import Tft, TftConfig, one_hot
from .data import (OnlineTuples, ThetaRanges, load_tuples, make_tuples, max_norm, pad_to, read_idx_arrays,
                   read_pgm, save_tuples, warp_image, write_pgm)
from .errors import DataError, NumericError, TftError, UsageError
from .pipelines import (InversionConfig, StyleConfig, TrainConfig, flow_field, internal_augment_finetune,
                        invert_features, make_style_filters, mspe, train_style, train_tft)
from .render import emit_flow_svg, write_flow_csv, write_history_csv

RANDOMIZED = {"train-backbone", "harvest-tuples", "train-tft", "invert", "augment-finetune", "style-train"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- config file


def read_config(path):
    """Parse ``key = value`` lines; returns a dict of strings keyed by option dest."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"{path}:{n}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _apply_config(sub, values):
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    defaults = {}
    for key, text in values.items():
        a = actions[key]
        if isinstance(a, argparse._StoreTrueAction):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key} expects a boolean, got {text!r}")
            defaults[key] = text.lower() in ("true", "1", "yes")
            continue
        conv = a.type or str
        try:
            items = text.split() if a.nargs in ("+", "*") else [text]
            vals = [conv(v) for v in items]
        except (TypeError, ValueError) as exc:
            raise UsageError(f"config key {key}: {exc}") from exc
        if a.choices is not None and any(v not in a.choices for v in vals):
            raise UsageError(f"config key {key}: {text!r} not in {sorted(a.choices)}")
        if isinstance(a, argparse._AppendAction):
            defaults[key] = vals
        else:
            defaults[key] = vals if a.nargs in ("+", "*") else vals[0]
        a.required = False
    sub.set_defaults(**defaults)


# ---------------------------------------------------------------- parser


def _common(p, randomized):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, required=False, help="random seed" + (" (required)" if randomized else ""))
    p.add_argument("--workers", type=int, default=1, help="parallel workers (computation is single-threaded)")


def _control(p):
    p.add_argument("--theta", type=float, default=0.0, help="rotation in degrees")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--tx", type=float, default=0.0, help="translation in input-image pixels")
    p.add_argument("--ty", type=float, default=0.0)


def _idx(p):
    p.add_argument("--images", required=True, help="IDX image file (optionally gzipped)")
    p.add_argument("--labels", required=True, help="IDX label file")
    p.add_argument("--offset", type=int, default=0, help="first sample to use")
    p.add_argument("--count", type=int, default=2000, help="number of samples")
    p.add_argument("--pad", type=int, default=44, help="zero-pad images to this size")
    p.add_argument("--shuffle-seed", type=int, default=None, help="shuffle the file before slicing")


def _tft_shape(p):
    p.add_argument("--branches", type=int, default=4)
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")


def build_parser():
    root = _Parser(prog="tft", description="Top-down feature transformer tools")
    root.add_argument("--version", action="version", version=__version__)
    subs = root.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def sub(name, helptext):
        p = subs.add_parser(name, help=helptext, description=helptext)
        _common(p, name in RANDOMIZED)
        return p

    p = sub("train-backbone", "train the classifier backbone on IDX data")
    _idx(p)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub("harvest-tuples", "harvest (f, f_theta, theta) training tuples")
    p.add_argument("--backbone", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--count", type=int, default=2000, help="number of source images")
    p.add_argument("--pad", type=int, default=44)
    p.add_argument("--shuffle-seed", type=int, default=None)
    p.add_argument("--tuples", type=int, default=1000, help="number of tuples")
    p.add_argument("--taps", type=int, nargs="+", default=[1])
    p.add_argument("--ranges", choices=("grid", "box", "identity"), default="grid")
    p.add_argument("--out", required=True)

    p = sub("train-tft", "train a spatial TFT for one backbone tap")
    p.add_argument("--backbone", required=True)
    p.add_argument("--tuples", help="tuple file; when absent tuples are harvested online from --images")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--pad", type=int, default=44)
    p.add_argument("--shuffle-seed", type=int, default=None)
    p.add_argument("--ranges", choices=("grid", "box", "identity"), default="grid")
    p.add_argument("--tap", type=int, default=1)
    _tft_shape(p)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--reduction", choices=("mean", "sum"), default="mean")
    p.add_argument("--zero-init", action="store_true", help="start from zero kernels")
    p.add_argument("--out", required=True)

    p = sub("transform", "apply a TFT to the tap features of a PGM image")
    p.add_argument("--backbone", required=True)
    p.add_argument("--tft", required=True)
    p.add_argument("--image", required=True)
    _control(p)
    p.add_argument("--out", required=True, help="tensor file for the transformed features")

    p = sub("invert", "generate a transformed image by feature inversion")
    p.add_argument("--backbone", required=True)
    p.add_argument("--tft", action="append", required=True, help="TFT checkpoint (repeat for several taps)")
    p.add_argument("--image", required=True)
    _control(p)
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--step-size", type=float, default=0.05)
    p.add_argument("--beta", type=float, default=None, help="TV weight (default: 1%% of the initial loss)")
    p.add_argument("--init", choices=("source", "noise"), default="source")
    p.add_argument("--out", required=True, help="output PGM")

    p = sub("flowfield", "flow field of a TFT under one control")
    p.add_argument("--tft", required=True)
    _control(p)
    p.add_argument("--spacing", type=int, default=4)
    p.add_argument("--height", type=int, default=44, help="feature-map height")
    p.add_argument("--width", type=int, default=44)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--svg", help="optional SVG rendering")

    p = subs.add_parser("eval-mspe", help="mean squared pixel error between two PGM files")
    _common(p, False)
    p.add_argument("a")
    p.add_argument("b")

    p = sub("augment-finetune", "fine-tune the backbone through a frozen TFT")
    _idx(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--tft", required=True)
    p.add_argument("--ranges", choices=("grid", "box", "identity"), default="box")
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--p-augment", type=float, default=1.0)
    p.add_argument("--freeze-upstream", action="store_true")
    p.add_argument("--out", required=True)

    p = sub("style-train", "train a style-conditioned TFT on synthetic per-channel filter styles")
    _idx(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--tap", type=int, default=2)
    p.add_argument("--styles", type=int, default=4)
    _tft_shape(p)
    p.add_argument("--regressor-hidden", type=int, default=32)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True)

    p = sub("style-apply", "apply one learned style to the tap features of a PGM image")
    p.add_argument("--backbone", required=True)
    p.add_argument("--tft", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--style", type=int, required=True, help="style index")
    p.add_argument("--out", required=True)
    return root


# ---------------------------------------------------------------- helpers


def _meta_path(out):
    return out + ".meta.json"


def _write_meta(args, outputs, extra=None):
    import scipy

    snapshot = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    meta = {
        "command": args.command,
        "seed": args.seed,
        "config": snapshot,
        "outputs": outputs,
        "versions": {"tft": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
    }
    if extra:
        meta.update(extra)
    with open(_meta_path(outputs[0]), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_images(args):
    x, y = read_idx_arrays(args.images, args.labels)
    if args.shuffle_seed is not None:
        perm = np.random.default_rng(args.shuffle_seed).permutation(len(x))
        x, y = x[perm], y[perm]
    x, y = x[args.offset : args.offset + args.count], y[args.offset : args.offset + args.count]
    if len(x) == 0:
        raise DataError("no samples selected")
    if args.pad:
        x = np.stack([pad_to(i, args.pad) for i in x])
    return x, y


def _ranges(name):
    return {"grid": ThetaRanges.mnist_grid, "box": ThetaRanges.augment_box, "identity": ThetaRanges.identity}[name]()


def _params(args):
    try:
        return TransformParams(args.theta, args.scale, args.tx, args.ty)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load(path, kind):
    model = load_checkpoint(path)
    if not isinstance(model, kind):
        raise DataError(f"{path} does not hold a {kind.__name__}")
    return model


def _log(msg):
    print(msg, file=sys.stderr)


def _map_pgm(features):
    """Channel-mean feature map rescaled to [0, 1] for viewing."""
    m = np.asarray(features).mean(axis=-1)
    m = m - m.min()
    return max_norm(m) if m.max() > 0 else m


# ---------------------------------------------------------------- commands


def cmd_train_backbone(args):
    x, y = _load_images(args)
    bb, hist = train_backbone(x, y, args.epochs, args.lr, args.batch_size, seed=args.seed, log=_log)
    save_checkpoint(bb, args.out)
    csv = args.out + ".losses.csv"
    write_history_csv(list(enumerate(hist, start=1)), csv)
    acc = accuracy(bb, x, y)
    print(f"train accuracy {acc:.4f}")
    _write_meta(args, [args.out, csv], {"train_accuracy": acc})


def cmd_harvest_tuples(args):
    bb = _load(args.backbone, Backbone)
    x, _ = _load_images(args)
    tuples = make_tuples(bb, x, args.tuples, _ranges(args.ranges), np.random.default_rng(args.seed),
                         taps=tuple(args.taps))
    save_tuples(tuples, args.out)
    _write_meta(args, [args.out])


def cmd_train_tft(args):
    bb = _load(args.backbone, Backbone)
    dtype = np.dtype(args.dtype)
    if args.tuples:
        source = load_tuples(args.tuples)
        if not source:
            raise DataError("tuple file is empty")
    elif args.images and args.labels:
        x, _ = _load_images(args)
        source = OnlineTuples(bb, x, _ranges(args.ranges), args.tap, dtype)
    else:
        raise UsageError("train-tft needs --tuples or --images/--labels")
    cfg = TftConfig(channels=bb.tap_channels(args.tap), n_branches=args.branches, hidden=args.hidden,
                    kernel=args.kernel, depth=args.depth)
    tft = Tft(cfg, tap=args.tap, stride=bb.stride(args.tap), rng=np.random.default_rng(args.seed),
              zero=args.zero_init, dtype=dtype)
    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, l2=args.l2,
                       seed=args.seed, tap=args.tap, reduction=args.reduction)
    _, hist = train_tft(tft, source, tcfg, log=_log)
    save_checkpoint(tft, args.out)
    csv = args.out + ".losses.csv"
    write_history_csv(hist, csv)
    _write_meta(args, [args.out, csv], {"loss_reduction": args.reduction})


def _read_image(path, bb=None):
    img = read_pgm(path)
    if bb is not None and min(img.shape) < 2 ** len(bb.channels):
        raise DataError(f"{path}: image too small for the backbone")
    return img


def cmd_transform(args):
    bb = _load(args.backbone, Backbone)
    tft = _load(args.tft, Tft)
    if tft.mode != "spatial":
        raise DataError("transform needs a spatial-mode TFT")
    img = _read_image(args.image, bb)
    feats = bb.taps(img, tft.tap)[tft.tap].data
    out = tft(feats.astype(tft.pre.kernels[0].dtype), _params(args)).data[0]
    save_tensors({"features": out}, args.out)
    write_pgm(_map_pgm(out), args.out + ".pgm")
    _write_meta(args, [args.out, args.out + ".pgm"])


def cmd_invert(args):
    bb = _load(args.backbone, Backbone)
    tfts = {}
    for path in args.tft:
        t = _load(path, Tft)
        if t.tap in tfts:
            raise UsageError(f"two TFTs for tap {t.tap}")
        tfts[t.tap] = t
    img = _read_image(args.image, bb)
    cfg = InversionConfig(alphas={k: 1.0 for k in tfts}, beta=args.beta, iterations=args.iterations,
                          step_size=args.step_size, init=args.init, seed=args.seed)
    res = invert_features(bb, tfts, img, _params(args), cfg)
    write_pgm(res.image, args.out)
    csv = args.out + ".losses.csv"
    write_history_csv(list(enumerate(res.history)), csv)
    print(f"final loss {res.loss!r}")
    _write_meta(args, [args.out, csv], {"beta": res.beta, "final_loss": res.loss})


def cmd_flowfield(args):
    tft = _load(args.tft, Tft)
    if args.spacing < 1:
        raise UsageError("--spacing must be >= 1")
    field = flow_field(tft, _params(args), args.spacing, args.height, args.width)
    write_flow_csv(field, args.out)
    outputs = [args.out]
    if args.svg:
        emit_flow_svg(field, args.svg)
        outputs.append(args.svg)
    _write_meta(args, outputs, {"invalid_points": int((~field.valid).sum())})


def cmd_eval_mspe(args):
    a, b = read_pgm(args.a), read_pgm(args.b)
    if a.shape != b.shape:
        raise DataError(f"image sizes differ: {a.shape} vs {b.shape}")
    print(repr(mspe(a, b)))


def cmd_augment_finetune(args):
    bb = _load(args.backbone, Backbone)
    tft = _load(args.tft, Tft)
    x, y = _load_images(args)
    try:
        bb, hist = internal_augment_finetune(bb, tft, x, y, _ranges(args.ranges), args.epochs, lr=args.lr,
                                             batch_size=args.batch_size, seed=args.seed,
                                             p_augment=args.p_augment, freeze_upstream=args.freeze_upstream,
                                             log=_log)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    save_checkpoint(bb, args.out)
    csv = args.out + ".losses.csv"
    write_history_csv(list(enumerate(hist, start=1)), csv)
    _write_meta(args, [args.out, csv])


def cmd_style_train(args):
    bb = _load(args.backbone, Backbone)
    x, _ = _load_images(args)
    dtype = np.dtype(args.dtype)
    feats = np.concatenate([bb.taps(x[i : i + 64], args.tap)[args.tap].data for i in range(0, len(x), 64)])
    rng = np.random.default_rng(args.seed)
    banks = make_style_filters(args.styles, bb.tap_channels(args.tap), rng)
    cfg = TftConfig(channels=bb.tap_channels(args.tap), n_branches=args.branches, hidden=args.hidden,
                    kernel=args.kernel, depth=args.depth, mode="style", n_styles=args.styles,
                    regressor_hidden=args.regressor_hidden)
    tft = Tft(cfg, tap=args.tap, stride=bb.stride(args.tap), rng=rng, dtype=dtype)
    _, hist = train_style(tft, feats.astype(dtype), banks,
                          StyleConfig(args.steps, args.batch_size, args.lr, args.seed), log=_log)
    save_checkpoint(tft, args.out)
    save_tensors({f"style{i}": b for i, b in enumerate(banks)}, args.out + ".styles")
    csv = args.out + ".losses.csv"
    write_history_csv(hist, csv)
    _write_meta(args, [args.out, args.out + ".styles", csv])


def cmd_style_apply(args):
    bb = _load(args.backbone, Backbone)
    tft = _load(args.tft, Tft)
    if tft.mode != "style":
        raise DataError("style-apply needs a style-mode TFT")
    if not 0 <= args.style < tft.config.n_styles:
        raise UsageError(f"--style must be in [0, {tft.config.n_styles - 1}]")
    img = _read_image(args.image, bb)
    feats = bb.taps(img, tft.tap)[tft.tap].data.astype(tft.pre.kernels[0].dtype)
    out = tft(feats, one_hot(args.style, tft.config.n_styles)).data[0]
    save_tensors({"features": out}, args.out)
    write_pgm(_map_pgm(out), args.out + ".pgm")
    _write_meta(args, [args.out, args.out + ".pgm"])


COMMANDS = {
    "train-backbone": cmd_train_backbone,
    "harvest-tuples": cmd_harvest_tuples,
    "train-tft": cmd_train_tft,
    "transform": cmd_transform,
    "invert": cmd_invert,
    "flowfield": cmd_flowfield,
    "eval-mspe": cmd_eval_mspe,
    "augment-finetune": cmd_augment_finetune,
    "style-train": cmd_style_train,
    "style-apply": cmd_style_apply,
}


def parse_args(argv):
    """Parse ``argv`` with config-file defaults; raises UsageError on any problem."""
    parser = build_parser()
    argv = list(argv)
    if not argv or argv[0] not in COMMANDS:
        if argv and argv[0] in ("-h", "--help", "--version"):
            parser.parse_args(argv)
        parser.print_usage(sys.stderr)
        raise UsageError(f"unknown command {argv[0]!r}" if argv else "no command given")
    sub = parser._subparsers._group_actions[0].choices[argv[0]]
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv[1:])
    if known.config:
        _apply_config(sub, read_config(known.config))
    args = parser.parse_args(argv)
    if argv[0] in RANDOMIZED and args.seed is None:
        raise UsageError(f"{argv[0]} requires --seed")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    return args


def run(argv=None):
    """Execute one command; returns the process exit code."""
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except TftError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
