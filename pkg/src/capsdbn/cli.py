"""Batch command-line surface.

One command per pipeline stage; every command is deterministic under the
config seed, exits 0 on success, and reports failures as a single
machine-parseable line on stderr.
"""

import argparse
import dataclasses
import sys

from . import __version__, pipeline
from .config import RunConfig
from .errors import CapsDbnError, ConfigurationError, NumericError, UsageError


def _load_config(args):
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def build_parser():
    parser = argparse.ArgumentParser(
        prog="capsdbn",
        description="Capsule-network + convolutional DBN training and triage toolkit")
    parser.add_argument("--version", action="version", version=f"capsdbn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=False, archive=False, caps=False, dbn=False, fusion=False,
               out=True):
        p.add_argument("--config", help="run configuration file (key=value lines)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if manifest:
            p.add_argument("--manifest", required=True, help="dataset manifest CSV")
        if archive:
            p.add_argument("--archive", required=True, help="preprocessed patch archive")
        if caps:
            p.add_argument("--caps", required=True, help="capsule network checkpoint")
        if dbn:
            p.add_argument("--dbn", required=True, help="belief network checkpoint")
        if fusion:
            p.add_argument("--fusion", required=True, help="fusion head checkpoint")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    common(sub.add_parser("synth", help="render the synthetic dataset + manifest"))
    common(sub.add_parser("preprocess", help="clean, augment, split, and whiten"),
           manifest=True)
    common(sub.add_parser("pretrain-dbn", help="greedy layer-wise CRBM pretraining"),
           archive=True)
    common(sub.add_parser("train-caps", help="train the capsule network"), archive=True)
    common(sub.add_parser("train-fusion", help="train the fusion head"),
           archive=True, caps=True, dbn=True)
    common(sub.add_parser("evaluate", help="metrics, confusion, AUC, referral reports"),
           archive=True, caps=True, dbn=True, fusion=True)
    predict = sub.add_parser("predict", help="classify raw PNG images")
    common(predict, caps=True, dbn=True, fusion=True, out=False)
    predict.add_argument("images", nargs="+", help="PNG files to classify")
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    config = _load_config(args)
    if args.command == "synth":
        manifest = pipeline.stage_synth(config, args.out)
        print(f"wrote {manifest}")
    elif args.command == "preprocess":
        archive = pipeline.stage_preprocess(config, args.manifest, args.out)
        print(f"wrote {archive}")
    elif args.command == "pretrain-dbn":
        ckpt = pipeline.stage_pretrain_dbn(config, args.archive, args.out)
        print(f"wrote {ckpt}")
    elif args.command == "train-caps":
        ckpt = pipeline.stage_train_caps(config, args.archive, args.out)
        print(f"wrote {ckpt}")
    elif args.command == "train-fusion":
        ckpt = pipeline.stage_train_fusion(config, args.archive, args.caps, args.dbn,
                                           args.out)
        print(f"wrote {ckpt}")
    elif args.command == "evaluate":
        result = pipeline.stage_evaluate(config, args.archive, args.caps, args.dbn,
                                         args.fusion, args.out)
        print(f"validation accuracy {result.accuracy:.4f}; reports in {args.out}")
    elif args.command == "predict":
        results = pipeline.stage_predict(config, args.caps, args.dbn, args.fusion,
                                         args.images)
        k = len(config.categories)
        print("path,category,referral," + ",".join(f"p{i}" for i in range(k)))
        for row in results:
            probs = ",".join(repr(float(p)) for p in row["probabilities"])
            print(f"{row['path']},{row['category']},"
                  f"{'yes' if row['referral'] else 'no'},{probs}")
    return 0


_ERROR_NAMES = {
    ConfigurationError: "configuration",
    UsageError: "usage",
    NumericError: "numeric",
}


def main(argv=None):
    try:
        return run(argv)
    except CapsDbnError as exc:
        name = _ERROR_NAMES.get(type(exc), "error")
        print(f"error: {name}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
