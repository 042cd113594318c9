"""Command line entry point covering the full model lifecycle.

Exit codes: 0 success, 2 usage or config errors, 3 missing files,
4 checkpoint format or version mismatches, 1 anything else. Errors are
emitted as a single machine-parsable line on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import explain as xp
from . import refine
from . import selftest
from . import train as trn
from .backbone import BackboneConfig
from .checkpoint import CheckpointError
from .data import AugmentConfig, Dataset, gen_synthetic, load_dataset, \
    load_ppm, write_dataset
from .model import ProtoTreeModel, build_model

EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_VERSION = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single-line usage errors, exit code 2
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


_MODEL_KEYS = ("height", "latent_depth", "input_side", "in_channels", "stages")
_TRAIN_KEYS = ("epochs", "batch_size", "lr_body", "lr_head", "lr_prototypes",
               "milestones", "gamma", "seed", "beta1", "beta2", "eps",
               "frozen_epochs", "leaf_norm", "augment_enabled", "flip_p",
               "brightness_lo", "brightness_hi")

_DEFAULTS: dict[str, str] = {
    "height": "4", "latent_depth": "32", "input_side": "64",
    "in_channels": "3", "stages": "16:3:2,32:3:2,64:3:2",
    "epochs": "60", "batch_size": "64", "lr_body": "0.001",
    "lr_head": "0.001", "lr_prototypes": "0.001", "milestones": "",
    "gamma": "0.5", "seed": "0", "beta1": "0.9", "beta2": "0.999",
    "eps": "1e-8", "frozen_epochs": "0", "leaf_norm": "softmax",
    "augment_enabled": "false", "flip_p": "0.5",
    "brightness_lo": "0.6", "brightness_hi": "1.4",
}


def read_config(path: str | None, overrides: list[str]) -> dict[str, str]:
    values = dict(_DEFAULTS)
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                if "=" not in text:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, value = (part.strip() for part in text.split("=", 1))
                if key not in values:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                values[key] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in values:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return values


class ConfigError(ValueError):
    pass


def _parse_stages(text: str) -> tuple[tuple[int, int, int], ...]:
    stages = []
    for part in text.split(","):
        fields = part.strip().split(":")
        if len(fields) != 3:
            raise ConfigError(f"stage {part!r} must be out:kernel:stride")
        stages.append(tuple(int(f) for f in fields))
    return tuple(stages)


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def build_configs(values: dict[str, str]) -> tuple[BackboneConfig, int,
                                                   trn.TrainConfig]:
    backbone = BackboneConfig(
        in_channels=int(values["in_channels"]),
        stages=_parse_stages(values["stages"]),
        latent_depth=int(values["latent_depth"]),
        input_side=int(values["input_side"]))
    milestones = tuple(int(m) for m in values["milestones"].split(",")
                       if m.strip())
    augment = AugmentConfig(
        horizontal_flip_p=float(values["flip_p"]),
        brightness_jitter=(float(values["brightness_lo"]),
                           float(values["brightness_hi"])),
        enabled=_bool(values["augment_enabled"]))
    config = trn.TrainConfig(
        epochs=int(values["epochs"]), batch_size=int(values["batch_size"]),
        lr_body=float(values["lr_body"]), lr_head=float(values["lr_head"]),
        lr_prototypes=float(values["lr_prototypes"]), milestones=milestones,
        gamma=float(values["gamma"]), seed=int(values["seed"]),
        beta1=float(values["beta1"]), beta2=float(values["beta2"]),
        eps=float(values["eps"]), frozen_epochs=int(values["frozen_epochs"]),
        leaf_norm=values["leaf_norm"], augment=augment)
    return backbone, int(values["height"]), config


def _require(path: str, kind: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{kind} not found: {path}")
    return path


def _load_split(root: str, split: str) -> Dataset:
    _require(root, "data directory")
    sub = os.path.join(root, split)
    return load_dataset(sub if os.path.isdir(sub) else root, split)


def cmd_train(args) -> int:
    values = read_config(args.config, args.set or [])
    backbone_cfg, height, config = build_configs(values)
    train_set = _load_split(args.data, "train")
    test_set = _load_split(args.data, "test")
    model = build_model(backbone_cfg, height, train_set.num_classes,
                        config.seed, leaf_norm=config.leaf_norm,
                        class_names=train_set.class_names)
    csv_path = args.metrics or args.out + ".metrics.csv"
    trn.fit(model, train_set, test_set, config, csv_path=csv_path,
            verbose=not args.quiet)
    model.save(args.out)
    print(f"checkpoint {args.out}")
    print(f"metrics {csv_path}")
    print(f"train_acc {model.accuracy(train_set):.6f}")
    print(f"test_acc {model.accuracy(test_set):.6f}")
    return 0


def cmd_eval(args) -> int:
    model = ProtoTreeModel.load(_require(args.ckpt, "checkpoint"))
    dataset = _load_split(args.data, "test")
    if args.strategy == "soft":
        acc = model.accuracy(dataset)
    else:
        acc = refine.hard_accuracy(model, dataset, args.strategy)
    fid = refine.fidelity(model, dataset, args.strategy)
    print(f"strategy {args.strategy}")
    print(f"accuracy {acc:.6f}")
    print(f"fidelity {fid:.6f}")
    if args.strategy == "greedy" and model.topology.num_internal:
        stats = refine.path_length_stats(model, dataset)
        print(f"path_length_mean {stats['mean']:.4f}")
        print(f"path_length_minmax {stats['min']} {stats['max']}")
    return 0


def cmd_prune(args) -> int:
    model = ProtoTreeModel.load(_require(args.ckpt, "checkpoint"))
    tau = args.tau if args.tau is not None \
        else refine.default_tau(model.num_classes)
    report = refine.prune(model, tau)
    model.save(args.out)
    print("tau,leaves_removed,internal_removed,fraction_pruned")
    print(f"{report.tau},{report.leaves_removed},{report.internal_removed},"
          f"{report.fraction_pruned:.6f}")
    return 0


def cmd_project(args) -> int:
    model = ProtoTreeModel.load(_require(args.ckpt, "checkpoint"))
    dataset = _load_split(args.data, "train")
    records = refine.project(model, dataset, constrained=args.constrained)
    model.save(args.out)
    print("node,image_id,row,col,distance,constrained,fallback")
    for r in records:
        print(f"{r.node_index},{r.image_id},{r.location[0]},{r.location[1]},"
              f"{r.distance:.8f},{int(r.constrained)},{int(r.fallback)}")
    return 0


def cmd_visualize(args) -> int:
    model = ProtoTreeModel.load(_require(args.ckpt, "checkpoint"))
    graph = xp.export_tree(model, args.out_dir, png=args.png)
    print(f"wrote {len(graph.files)} files under {args.out_dir}")
    return 0


def cmd_explain(args) -> int:
    model = ProtoTreeModel.load(_require(args.ckpt, "checkpoint"))
    image = load_ppm(_require(args.image, "image"))
    name = os.path.splitext(os.path.basename(args.image))[0]
    graph = xp.export_tree(model, args.out_dir, sample=image,
                           sample_name=name, png=args.png)
    print(f"wrote {len(graph.files)} files under {args.out_dir}")
    print(f"path_length {len(graph.sample_path)}")
    return 0


def cmd_ensemble_eval(args) -> int:
    models = [ProtoTreeModel.load(_require(p, "checkpoint"))
              for p in args.ckpt]
    dataset = _load_split(args.data, "test")
    predictions = refine.ensemble_predict(models, dataset.images)
    acc = float((predictions.argmax(axis=1) == dataset.labels).mean())
    for i, m in enumerate(models):
        print(f"member_{i}_acc {m.accuracy(dataset):.6f}")
    print(f"ensemble_acc {acc:.6f}")
    return 0


def cmd_gen_data(args) -> int:
    train_set, test_set = gen_synthetic(args.k, args.n, args.side, args.seed)
    write_dataset(train_set, os.path.join(args.out, "train"))
    write_dataset(test_set, os.path.join(args.out, "test"))
    print(f"train {len(train_set)} images, test {len(test_set)} images "
          f"under {args.out}")
    return 0


def cmd_selftest(args) -> int:
    return 0 if selftest.run(verbose=True) else 1


def build_parser() -> _Parser:
    parser = _Parser(prog="prototree",
                     description="train, inspect and explain prototype trees")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True, help="dataset root (train/, test/)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--metrics", help="metrics CSV path (default <out>.metrics.csv)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and fidelity on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", choices=("soft", "max_path", "greedy"),
                   default="soft")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prune", help="remove near-uniform leaves")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tau", type=float, default=None,
                   help="threshold (default max(0.01, 1.2/K))")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("project",
                       help="replace prototypes with nearest training patches")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--constrained", action=argparse.BooleanOptionalAction,
                   default=True,
                   help="restrict candidates to reachable majority classes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("visualize", help="export the global tree")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--png", action="store_true",
                   help="write PNG patches instead of PPM")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("explain", help="export the greedy path for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="PPM image to explain")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ensemble-eval", help="mean-prediction ensemble accuracy")
    p.add_argument("--ckpt", action="append", required=True,
                   help="repeat for each member checkpoint")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_ensemble_eval)

    p = sub.add_parser("gen-data", help="generate the synthetic parts dataset")
    p.add_argument("--k", type=int, required=True, help="number of classes")
    p.add_argument("--n", type=int, required=True, help="train images per class")
    p.add_argument("--side", type=int, default=64, choices=(32, 64))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("selftest", help="run built-in oracle checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    if os.environ.get("NPTT_THREADS", "").strip():
        # worker parallelism cap; the current implementation is sequential,
        # so any valid value is accepted as 1
        try:
            if int(os.environ["NPTT_THREADS"]) < 1:
                print("error: NPTT_THREADS must be >= 1", file=sys.stderr)
                return EXIT_USAGE
        except ValueError:
            print("error: NPTT_THREADS must be an integer", file=sys.stderr)
            return EXIT_USAGE
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VERSION
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
