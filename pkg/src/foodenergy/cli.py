"""Command-line driver: synth, densify, train-encoder, train-decoder, eval, report.

Settings resolve as command-line flag, then ``--config`` INI file, then the
built-in default. The INI file uses one section per stage::

    [dataset]
    seed = 0
    image_size = 64

    [encoder]
    epochs = 30
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys

from . import dataset as ds
from . import io
from ._torch import DEVICE_ENV, derive_seed
from .decoder import (
    BACKBONES,
    GrayscaleDecoder,
    RegressionDecoderConfig,
    SummationDecoder,
    load_decoder,
    save_decoder,
    train_regression_decoder,
)
from .encoder import CGANEncoder, EncoderConfig, train_encoder, write_loss_csv
from .evaluate import (
    AggregateReport,
    OracleEncoder,
    aggregate,
    comparison_table,
    encode_occasions,
    error_histogram,
    evaluate,
    qualitative_panel,
    select_extremes,
)
from .exceptions import FoodEnergyError

logger = logging.getLogger("foodenergy")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "dataset": {"seed": 0, "image_size": 256, "train_ratio": 0.70, "val_ratio": 0.10, "test_ratio": 0.20},
    "encoder": {"epochs": 200, "batch_size": 1, "learning_rate": 0.0002, "beta1": 0.5, "beta2": 0.999,
                "l1_weight": 100.0, "base_filters": 64, "dropout": 0.5, "lr_decay_epochs": 0,
                "seed": 0, "save_interval": 10, "grayscale_scale": 1.0, "representation": "tensor"},
    "decoder": {"backbone": "resnet18", "pretrained_weights": None, "epochs": 50, "patience": 20,
                "learning_rate": 1e-4, "batch_size": 16, "seed": 0},
    "eval": {"runs": 5, "decoder": "summation", "panels": 3, "figures": True, "grayscale_scale": 1.0},
}


class Settings:
    """Layered lookup over parsed flags, the INI file and :data:`DEFAULTS`."""

    def __init__(self, args, config_path=None):
        self.args = args
        self.file = configparser.ConfigParser()
        if config_path:
            if not self.file.read(config_path):
                raise FileNotFoundError(f"config file not found: {config_path}")

    def get(self, section, key):
        flag = getattr(self.args, f"{section}__{key}", None)
        if flag is not None:
            return flag
        default = DEFAULTS[section][key]
        if self.file.has_option(section, key):
            raw = self.file.get(section, key)
            if isinstance(default, bool):
                return self.file.getboolean(section, key)
            if default is None or isinstance(default, str):
                return raw
            return type(default)(raw)
        return default


def _opt(parser, flag, section, key, help, **kw):
    default = DEFAULTS[section][key]
    kw.setdefault("metavar", key.upper())
    parser.add_argument(flag, dest=f"{section}__{key}", default=None,
                        help=f"{help} (default: {default})", **kw)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.default is None or "(default:" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="foodenergy",
        description="Food energy estimation with per-pixel calorie density maps.",
        epilog=f"Set {DEVICE_ENV}=cuda to train on a GPU.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = _HelpFormatter

    def add(name, help):
        p = sub.add_parser(name, help=help, description=help, formatter_class=fmt)
        p.add_argument("--config", help="INI file with [dataset]/[encoder]/[decoder]/[eval] sections")
        return p

    p = add("synth", "generate a synthetic eating-scene dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=_positive_int, default=200, help="number of scenes")
    p.add_argument("--size", type=_positive_int, default=64, help="image size in pixels")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--items-min", type=_positive_int, default=1, help="fewest items per scene")
    p.add_argument("--items-max", type=_positive_int, default=4, help="most items per scene")

    p = add("densify", "write one DMAP density map per valid occasion")
    p.add_argument("--manifest", required=True, help="manifest JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=_positive_int, default=None, help="regularize images to this size first")
    p.add_argument("--strict", action="store_true", help="exit non-zero if any occasion is rejected")

    p = add("train-encoder", "train the cGAN encoder on the training split")
    p.add_argument("--manifest", required=True, help="manifest JSON")
    p.add_argument("--out", required=True, help="checkpoint path")
    _opt(p, "--image-size", "dataset", "image_size", "model resolution", type=_positive_int)
    _opt(p, "--split-seed", "dataset", "seed", "seed of the train/val/test split", type=int)
    _opt(p, "--epochs", "encoder", "epochs", "training epochs", type=_nonneg_int)
    _opt(p, "--batch-size", "encoder", "batch_size", "batch size", type=_positive_int)
    _opt(p, "--lr", "encoder", "learning_rate", "Adam learning rate", type=_positive_float)
    _opt(p, "--beta1", "encoder", "beta1", "Adam beta1", type=float)
    _opt(p, "--l1-weight", "encoder", "l1_weight", "weight of the L1 term", type=float)
    _opt(p, "--base-filters", "encoder", "base_filters", "width of the first conv layer", type=_positive_int)
    _opt(p, "--dropout", "encoder", "dropout", "generator dropout", type=float)
    _opt(p, "--lr-decay-epochs", "encoder", "lr_decay_epochs", "linearly decay lr over this many final epochs; 0 keeps it constant", type=_nonneg_int)
    _opt(p, "--seed", "encoder", "seed", "training seed", type=int)
    _opt(p, "--save-interval", "encoder", "save_interval", "checkpoint every N epochs (0 = only at the end)", type=_nonneg_int)
    _opt(p, "--representation", "encoder", "representation", "training target representation", choices=("tensor", "grayscale"), metavar="{tensor,grayscale}")
    _opt(p, "--grayscale-scale", "encoder", "grayscale_scale", "kCal per grayscale level", type=_positive_float)

    p = add("train-decoder", "train a regression decoder on maps from a frozen encoder")
    p.add_argument("--manifest", required=True, help="manifest JSON")
    p.add_argument("--encoder", required=True, help="encoder checkpoint")
    p.add_argument("--out", required=True, help="decoder checkpoint path")
    _opt(p, "--split-seed", "dataset", "seed", "seed of the train/val/test split", type=int)
    _opt(p, "--backbone", "decoder", "backbone", "regression backbone", choices=BACKBONES, metavar="{" + ",".join(BACKBONES) + "}")
    _opt(p, "--pretrained-weights", "decoder", "pretrained_weights", "state-dict file to initialize the backbone")
    _opt(p, "--epochs", "decoder", "epochs", "maximum epochs", type=_positive_int)
    _opt(p, "--patience", "decoder", "patience", "early-stopping patience in epochs", type=_positive_int)
    _opt(p, "--lr", "decoder", "learning_rate", "Adam learning rate", type=_positive_float)
    _opt(p, "--batch-size", "decoder", "batch_size", "batch size", type=_positive_int)
    _opt(p, "--seed", "decoder", "seed", "training seed", type=int)

    p = add("eval", "evaluate a pipeline on the test split over several runs")
    p.add_argument("--manifest", required=True, help="manifest JSON")
    p.add_argument("--out", required=True, help="output directory for reports and figures")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--encoder", help="encoder checkpoint (reused for 1 run; its settings are re-seeded for more)")
    source.add_argument("--oracle", action="store_true", help="use ground-truth maps as the encoder output")
    _opt(p, "--decoder", "eval", "decoder", "summation, grayscale, a backbone name, or a decoder checkpoint path")
    _opt(p, "--runs", "eval", "runs", "independent training runs to average", type=_positive_int)
    _opt(p, "--panels", "eval", "panels", "qualitative panels for the k largest over- and under-estimates", type=_nonneg_int)
    _opt(p, "--grayscale-scale", "eval", "grayscale_scale", "kCal per level for the grayscale decoder", type=_positive_float)
    _opt(p, "--split-seed", "dataset", "seed", "seed of the train/val/test split", type=int)
    _opt(p, "--seed", "encoder", "seed", "top-level seed expanded per run", type=int)
    p.add_argument("--no-figures", dest="eval__figures", action="store_false", default=None,
                   help="skip histogram and panel figures")

    p = add("report", "compare aggregate reports with the published reference results")
    p.add_argument("inputs", nargs="+", metavar="NAME=PATH", help="aggregate report JSON files")
    p.add_argument("--table", choices=("1", "2", "3"), default="1", help="reference table to print")
    p.add_argument("--out", help="also write the table to this file")
    return parser


# -- helpers -----------------------------------------------------------------

def _load_split(manifest, settings, image_size=None):
    occasions = ds.load_manifest(manifest, target_size=image_size)
    ratios = tuple(settings.get("dataset", k) for k in ("train_ratio", "val_ratio", "test_ratio"))
    parts = ds.split(occasions, settings.get("dataset", "seed"), ratios)
    return occasions, parts


def _encoder_config(settings, **overrides) -> EncoderConfig:
    keys = ("epochs", "batch_size", "learning_rate", "beta1", "beta2", "l1_weight",
            "base_filters", "dropout", "lr_decay_epochs", "seed", "save_interval")
    values = {k: settings.get("encoder", k) for k in keys}
    values["image_size"] = settings.get("dataset", "image_size")
    values.update(overrides)
    return EncoderConfig(**values)


def _decoder_config(settings, **overrides) -> RegressionDecoderConfig:
    keys = ("backbone", "pretrained_weights", "epochs", "patience", "learning_rate", "batch_size", "seed")
    values = {k: settings.get("decoder", k) for k in keys}
    values.update(overrides)
    return RegressionDecoderConfig(**values)


def _grayscale_target(settings):
    if settings.get("encoder", "representation") == "grayscale":
        return settings.get("encoder", "grayscale_scale")
    return None


# -- commands ----------------------------------------------------------------

def cmd_synth(args, settings):
    if args.items_min > args.items_max:
        raise argparse.ArgumentTypeError("--items-min exceeds --items-max")
    config = ds.SyntheticSceneConfig(n_scenes=args.n, image_size=args.size, seed=args.seed,
                                     items_per_scene=(args.items_min, args.items_max))
    path = ds.save_manifest(ds.generate_synthetic(config), args.out)
    print(f"wrote {args.n} scenes to {path}")
    return EXIT_OK


def cmd_densify(args, settings):
    occasions, failures = ds.read_manifest(args.manifest, target_size=args.size)
    kept, rejected = ds.prune(occasions)
    rejected.update(failures)
    os.makedirs(args.out, exist_ok=True)
    for occ in kept:
        io.write_dmap(os.path.join(args.out, f"{occ.id}.dmap"), occ.density_map())
    with open(os.path.join(args.out, "rejections.json"), "w") as fh:
        json.dump(dict(sorted(rejected.items())), fh, indent=1)
        fh.write("\n")
    print(f"wrote {len(kept)} density maps to {args.out}")
    if rejected:
        print(f"warning: {len(rejected)} occasion(s) rejected, see rejections.json", file=sys.stderr)
        for occ_id, reason in sorted(rejected.items()):
            print(f"  {occ_id}: {reason}", file=sys.stderr)
        if args.strict:
            return EXIT_FAILURE
    return EXIT_OK


def cmd_train_encoder(args, settings):
    size = settings.get("dataset", "image_size")
    occasions, parts = _load_split(args.manifest, settings, size)
    train = ds.augment_all(ds.select(occasions, parts.train))
    config = _encoder_config(settings, checkpoint_path=args.out)
    model = train_encoder(config, train, grayscale_scale=_grayscale_target(settings))
    model.save(args.out)
    stem = os.path.splitext(args.out)[0]
    write_loss_csv(model.history_, f"{stem}_losses.csv")
    with open(f"{stem}_split.json", "w") as fh:
        json.dump(parts.to_dict(), fh, indent=1)
        fh.write("\n")
    print(f"trained {model.epochs_trained_} epochs on {len(train)} augmented pairs -> {args.out}")
    return EXIT_OK


def cmd_train_decoder(args, settings):
    encoder = CGANEncoder.load(args.encoder)
    occasions, parts = _load_split(args.manifest, settings, encoder.image_size)
    config = _decoder_config(settings)
    decoder = train_regression_decoder(
        config, encoder, ds.select(occasions, parts.train), ds.select(occasions, parts.val),
    )
    save_decoder(decoder, args.out)
    print(f"best validation epoch {decoder.best_epoch_} of {decoder.stopped_epoch_} -> {args.out}")
    return EXIT_OK


def _make_decoder(kind, settings, encoder, train, val, seed):
    if kind == "summation":
        return SummationDecoder().fit()
    if kind == "grayscale":
        return GrayscaleDecoder(settings.get("eval", "grayscale_scale")).fit()
    if kind in BACKBONES:
        if isinstance(encoder, OracleEncoder):
            raise FoodEnergyError("regression decoders need a trained encoder, not --oracle")
        return train_regression_decoder(_decoder_config(settings, backbone=kind, seed=seed), encoder, train, val)
    return load_decoder(kind)


def cmd_eval(args, settings):
    runs = settings.get("eval", "runs")
    kind = settings.get("eval", "decoder")
    base = CGANEncoder.load(args.encoder) if args.encoder else None
    size = base.image_size if base is not None else None
    occasions, parts = _load_split(args.manifest, settings, size)
    train, val, test = (ds.select(occasions, ids) for ids in (parts.train, parts.val, parts.test))
    descriptor = {"encoder": "oracle" if args.oracle else os.path.basename(args.encoder), "decoder": kind}
    top_seed = settings.get("encoder", "seed")

    def run(index, seed):
        if args.oracle:
            encoder = OracleEncoder()
        elif runs == 1:
            encoder = base
        else:
            params = dict(base.get_params(), seed=seed, checkpoint_path=None, save_interval=0)
            encoder = train_encoder(EncoderConfig(**params), ds.augment_all(train))
        decoder = _make_decoder(kind, settings, encoder, train, val, derive_seed(seed, "decoder"))
        return evaluate(encoder, decoder, test, seed=seed, pipeline=descriptor)

    result = aggregate(run, runs=runs, seed=top_seed)
    os.makedirs(args.out, exist_ok=True)
    result.write_json(os.path.join(args.out, "aggregate.json"))
    for i, report in enumerate(result.reports):
        report.write_json(os.path.join(args.out, f"run{i}.json"))
        report.write_csv(os.path.join(args.out, f"run{i}.csv"))
    if settings.get("eval", "figures"):
        first = result.reports[0]
        error_histogram(first, os.path.join(args.out, "error_histogram.png"),
                        os.path.join(args.out, "error_histogram.csv"))
        k = settings.get("eval", "panels")
        if k and runs == 1:
            over, under = select_extremes(first, k)
            encoder = OracleEncoder() if args.oracle else base
            chosen = ds.select(test, over + under)
            maps = encode_occasions(encoder, chosen) if chosen else []
            estimates = {r["id"]: r["est_kcal"] for r in first.records}
            for occ, m in zip(chosen, maps):
                qualitative_panel(occ, m, estimates[occ.id], os.path.join(args.out, f"panel_{occ.id}.png"))
    print(f"{runs} run(s): MAE {result.mae:.2f} kCal, MAPE {result.mape:.2f}%  -> {args.out}")
    return EXIT_OK


def cmd_report(args, settings):
    results = {}
    for entry in args.inputs:
        name, sep, path = entry.partition("=")
        if not sep:
            name, path = os.path.splitext(os.path.basename(entry))[0], entry
        with open(path) as fh:
            results[name] = AggregateReport.from_dict(json.load(fh))
    table = comparison_table(results, args.table)
    print(table)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table + "\n")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "densify": cmd_densify,
    "train-encoder": cmd_train_encoder,
    "train-decoder": cmd_train_decoder,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        settings = Settings(args, getattr(args, "config", None))
        return COMMANDS[args.command](args, settings)
    except argparse.ArgumentTypeError as exc:
        parser.error(str(exc))
    except (FoodEnergyError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
