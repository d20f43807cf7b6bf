"""
Command line front end. Every subcommand is a `CommandBase` implementation
registered with a `CommandDispatcher`; errors are mapped onto stable exit
codes:

    0  success
    1  any other failure
    2  invalid configuration or parameters
    3  unreadable or malformed dataset
    4  checkpoint incompatible with the evaluated data
"""

import argparse
import collections
import csv
import json
import logging
import os
import sys
import time
from typing import Any, Dict, List, Optional, Sequence

import numpy

from . import __version__
from .data_ingest import Dataset, load_manifest, split, synth_generate, write_dataset
from .errors import ProgAttnError, ConfigError, LoadError, ShapeError
from .graph_spectral import build_adjacency, load_montage
from .pipeline import (
    EvalResult,
    TrainConfig,
    evaluate,
    format_mean_std,
    load_checkpoint,
    resolve_static_masks,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_SHAPE = 4

ABLATION_VARIANTS = {
    "full": {},
    "2e": {"expert_count": 2},
    "no-ld": {"beta": 0.0},
    "static-v1": {"attention_mode": "static", "static_channels": "v1"},
    "static-v2": {"attention_mode": "static", "static_channels": "v2"},
}

SYNTH_DEFAULTS = {
    "channels": 16,
    "bands": 5,
    "classes": 3,
    "n_per_class": 200,
    "planted": None,
    "snr": 3.0,
    "seed": 42,
    "trials_per_class": 5,
    "subjects": 1,
    "montage": None,
    "format": "bin",
}


class MemHandler(logging.Handler):
    """
    Storing logging records in memory using a first-in-first-out scheme, so
    that the log of a command can be written into its report file.
    """

    def __init__(self, capacity: int, level: int = logging.NOTSET):
        super().__init__(level=level)
        self.record_list = collections.deque([], maxlen=capacity)
        self.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))

    def emit(self, record):
        self.record_list.append(record)

    def messages(self) -> List[str]:
        return [self.format(r) for r in self.record_list]


def _write_json(path: str, payload: Dict[str, Any]) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)


def _load_data(path: str) -> Dataset:
    """Dataset shape problems found while loading count as data errors"""
    try:
        return load_manifest(path)
    except ShapeError as err:
        raise LoadError(str(err)) from err


def _check_compatible(dataset: Dataset, channel_names: Sequence[str], bands: int) -> None:
    data_names = [c.upper() for c in dataset.manifest.channel_names]
    if data_names != [c.upper() for c in channel_names] or dataset.band_count != bands:
        raise ShapeError(
            f"Checkpoint expects {len(channel_names)} channels x {bands} bands, "
            f"dataset has {dataset.channel_count} x {dataset.band_count} "
            "(or a different channel order)"
        )


def _select(dataset: Dataset, which: str):
    if which == "all":
        return list(dataset.samples)
    train_samples, test_samples = split(dataset)
    return train_samples if which == "train" else test_samples


"""
Commands
"""


class CommandBase(object):
    """
    Base class of the subcommands. Concrete commands declare their `name`, a
    one line `help` text, extend the argument parser and implement `run`.
    """

    name: str = ""
    help: str = ""

    def __init__(self, logger: logging.Logger):
        self.logger = logger
        for method in ("add_arguments", "run"):
            assert hasattr(self, method), (
                "Command class [" + self.__class__.__name__ + "] is missing method: " + method
            )

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        raise NotImplementedError("Should be overloaded by command class")

    def run(self, args: argparse.Namespace) -> Optional[Dict[str, Any]]:
        """Running the command, a returned dictionary is written as report.json"""
        raise NotImplementedError("Should be overloaded by command class")


def _add_train_overrides(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="Training configuration JSON")
    parser.add_argument("--data", type=str, required=True, help="Dataset manifest or directory")
    parser.add_argument("--out", type=str, required=True, help="Output directory")
    parser.add_argument("--experts", type=int, choices=(2, 3), default=None, dest="expert_count")
    parser.add_argument("--beta", type=float, default=None, help="Diversity loss weight")
    parser.add_argument("--lambda", type=float, default=None, dest="lam", help="Expert loss weight")
    parser.add_argument("--eta", type=float, default=None, help="Node pruning threshold")
    parser.add_argument("--attention", choices=("dynamic", "static"), default=None, dest="attention_mode")
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--channels-v1", action="store_const", const="v1", dest="static_channels")
    group.add_argument("--channels-v2", action="store_const", const="v2", dest="static_channels")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    parser.add_argument("--lr", type=float, default=None)


def _resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Built-in defaults < --config file < command line flags"""
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {
        key: getattr(args, key, None)
        for key in (
            "expert_count",
            "beta",
            "lam",
            "eta",
            "attention_mode",
            "static_channels",
            "seed",
            "epochs",
            "batch_size",
            "lr",
        )
    }
    return cfg.merged(overrides)


class TrainCommand(CommandBase):
    name = "train"
    help = "Train a model and write its report, per-epoch metrics and checkpoint"

    def add_arguments(self, parser):
        _add_train_overrides(parser)
        parser.add_argument("--checkpoint", type=str, default="checkpoint.json", help="Checkpoint file name inside --out")

    def run(self, args):
        cfg = _resolve_config(args)
        dataset = _load_data(args.data)
        os.makedirs(args.out, exist_ok=True)

        result = train(dataset, cfg, logger=self.logger)
        held_out = result.test_samples or result.train_samples
        evaluation = evaluate(held_out, result.state, cfg, result.adjacency, result.static_masks)
        save_checkpoint(os.path.join(args.out, args.checkpoint), result.state, cfg)

        with open(os.path.join(args.out, "metrics.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_loss", "train_acc", "test_acc", "mean_js"])
            for rec in result.history:
                writer.writerow(
                    [
                        rec.epoch,
                        repr(rec.train_loss),
                        repr(rec.train_acc),
                        "" if rec.test_acc is None else repr(rec.test_acc),
                        repr(rec.mean_js),
                    ]
                )
        self.logger.info(f"Final accuracy {evaluation.accuracy:.4f} ({evaluation.summary()})")
        return {
            "command": self.name,
            "version": __version__,
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "epochs": [rec.to_dict() for rec in result.history],
            "final_accuracy": evaluation.accuracy,
            "confusion": evaluation.confusion.tolist(),
            "evaluation": evaluation.to_dict(),
            "seconds": result.seconds,
        }


class _CheckpointCommand(CommandBase):
    """Shared arguments and loading of commands that run a trained model"""

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint", type=str, required=True)
        parser.add_argument("--data", type=str, required=True, help="Dataset manifest or directory")
        parser.add_argument("--out", type=str, required=True, help="Output directory")
        parser.add_argument("--split", choices=("test", "train", "all"), default="test", help="Samples to process")
        parser.add_argument("--workers", type=int, default=None, help="Evaluation threads")

    def evaluate(self, args, keep_forwards: bool = False):
        state, cfg = load_checkpoint(args.checkpoint)
        if args.workers is not None:
            cfg = cfg.merged({"eval_workers": args.workers})
        dataset = _load_data(args.data)
        _check_compatible(dataset, state.channel_names, state.bands)
        samples = _select(dataset, args.split)
        adjacency = build_adjacency(dataset.manifest.montage, cfg.adjacency())
        static_masks = resolve_static_masks(cfg, state.channel_names)
        os.makedirs(args.out, exist_ok=True)
        result = evaluate(samples, state, cfg, adjacency, static_masks, keep_forwards=keep_forwards)
        return dataset, samples, cfg, result


class EvalCommand(_CheckpointCommand):
    name = "eval"
    help = "Evaluate a checkpoint: accuracy, confusion matrix and per-sample predictions"

    def run(self, args):
        _, samples, cfg, result = self.evaluate(args)
        _write_predictions(os.path.join(args.out, "predictions.csv"), samples, result)
        metrics = {"command": self.name, "checkpoint": args.checkpoint, "split": args.split}
        metrics.update(result.to_dict())
        _write_json(os.path.join(args.out, "metrics.json"), metrics)
        self.logger.info(f"Accuracy {result.accuracy:.4f}, per subject {result.summary()}")
        return None


def _write_predictions(path: str, samples, result: EvalResult) -> None:
    E = len(result.probabilities[0]) if result.probabilities else 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["index", "subject", "trial", "label", "prediction"] + [f"p{e}" for e in range(E)]
        )
        for index, (s, pred, probs) in enumerate(
            zip(samples, result.predictions, result.probabilities)
        ):
            writer.writerow([index, s.subject, s.trial, s.label, pred] + [repr(p) for p in probs])


class AttnExportCommand(_CheckpointCommand):
    name = "attn-export"
    help = "Export per-sample attention maps, keep masks and fused features"

    def run(self, args):
        dataset, samples, cfg, result = self.evaluate(args, keep_forwards=True)
        montage = dataset.manifest.montage
        records = []
        with open(os.path.join(args.out, "features.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            width = None
            for index, (s, fwd) in enumerate(zip(samples, result.forwards)):
                flat = fwd.fused.data.reshape(-1)
                if width is None:
                    width = flat.size
                    writer.writerow(["index", "label", "prediction"] + [f"h{j}" for j in range(width)])
                writer.writerow([index, s.label, fwd.prediction] + [repr(v) for v in flat])
                records.append(
                    {
                        "index": index,
                        "subject": s.subject,
                        "trial": s.trial,
                        "label": s.label,
                        "prediction": fwd.prediction,
                        "xi": fwd.xi.data.reshape(-1).tolist(),
                        "experts": [
                            {
                                "normalized_attention": o.normalized.data.reshape(-1).tolist(),
                                "keep_mask": o.keep_mask.astype(int).tolist(),
                                "attention": o.masked_attention.data.reshape(-1).tolist(),
                                "target": o.target,
                            }
                            for o in fwd.experts
                        ],
                    }
                )
        _write_json(
            os.path.join(args.out, "attention.json"),
            {
                "channels": dataset.manifest.channel_names,
                "montage": [{"name": m.name, "x": m.x, "y": m.y} for m in montage],
                "eta": cfg.eta,
                "samples": records,
            },
        )
        self.logger.info(f"Exported attention maps of {len(records)} samples to [{args.out}]")
        return None


def _parse_planted(text: Optional[str]) -> Optional[List[List[int]]]:
    """'0,1,2,3;4,5,6,7' -> [[0, 1, 2, 3], [4, 5, 6, 7]]"""
    if text is None:
        return None
    try:
        return [[int(c) for c in group.split(",") if c.strip()] for group in text.split(";")]
    except ValueError as err:
        raise ConfigError(f"Cannot parse planted channel sets [{text}]: {err}") from err


class SynthCommand(CommandBase):
    name = "synth"
    help = "Generate a planted-signal synthetic dataset"

    def add_arguments(self, parser):
        parser.add_argument("--config", type=str, default=None, help="Synthetic generation preset JSON")
        parser.add_argument("--out", type=str, required=True, help="Output directory")
        parser.add_argument("--channels", type=int, default=None)
        parser.add_argument("--bands", type=int, default=None)
        parser.add_argument("--classes", type=int, default=None)
        parser.add_argument("--per-class", type=int, default=None, dest="n_per_class")
        parser.add_argument("--snr", type=float, default=None)
        parser.add_argument("--planted", type=str, default=None, help="Channel sets per class, e.g. '0,1;2,3;4,5'")
        parser.add_argument("--trials-per-class", type=int, default=None, dest="trials_per_class")
        parser.add_argument("--subjects", type=int, default=None)
        parser.add_argument("--montage", type=str, default=None, help="Montage JSON replacing the ring layout")
        parser.add_argument("--seed", type=int, default=None)
        parser.add_argument("--format", choices=("bin", "csv"), default=None)

    def run(self, args):
        params = dict(SYNTH_DEFAULTS)
        if args.config:
            try:
                with open(args.config, "r") as f:
                    preset = json.load(f)
            except (OSError, json.JSONDecodeError) as err:
                raise ConfigError(f"Cannot read synthetic preset [{args.config}]: {err}") from err
            unknown = sorted(set(preset) - set(SYNTH_DEFAULTS))
            if unknown:
                raise ConfigError(f"Unknown synthetic preset keys {unknown}")
            params.update(preset)
        for key in SYNTH_DEFAULTS:
            value = getattr(args, key, None)
            if value is not None:
                params[key] = value
        for key, default in SYNTH_DEFAULTS.items():
            if isinstance(default, (int, float)):
                numeric = (int,) if isinstance(default, int) else (int, float)
                if isinstance(params[key], bool) or not isinstance(params[key], numeric):
                    raise ConfigError(f"Synthetic key [{key}] has invalid value {params[key]!r}")
        if isinstance(params["planted"], str):
            params["planted"] = _parse_planted(params["planted"])
        if params["format"] not in ("bin", "csv"):
            raise ConfigError(f"Unknown feature format [{params['format']}]")
        montage = load_montage(params["montage"]) if params["montage"] else None

        dataset = synth_generate(
            channels=params["channels"],
            bands=params["bands"],
            classes=params["classes"],
            n_per_class=params["n_per_class"],
            planted=params["planted"],
            snr=params["snr"],
            seed=params["seed"],
            trials_per_class=params["trials_per_class"],
            subjects=params["subjects"],
            montage=montage,
        )
        write_dataset(dataset, args.out, fmt=params["format"])
        return None


class AblateCommand(CommandBase):
    name = "ablate"
    help = "Train ablation variants over several seeds and compare accuracies"

    def add_arguments(self, parser):
        _add_train_overrides(parser)
        parser.add_argument(
            "--variants",
            type=str,
            default="full,2e,no-ld",
            help=f"Comma separated subset of {','.join(ABLATION_VARIANTS)}",
        )
        parser.add_argument("--seeds", type=str, default="1,2,3,4,5", help="Comma separated seeds")

    def run(self, args):
        base = _resolve_config(args)
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        unknown = [v for v in variants if v not in ABLATION_VARIANTS]
        if unknown or not variants:
            raise ConfigError(f"Unknown ablation variants {unknown}")
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError as err:
            raise ConfigError(f"Cannot parse seeds [{args.seeds}]") from err
        if not seeds:
            raise ConfigError("No seeds given")
        dataset = _load_data(args.data)
        os.makedirs(args.out, exist_ok=True)

        summary = {}
        for variant in variants:
            accuracies, js_values = [], []
            for seed in seeds:
                cfg = base.merged(dict(ABLATION_VARIANTS[variant], seed=seed))
                result = train(dataset, cfg, logger=self.logger)
                held_out = result.test_samples or result.train_samples
                evaluation = evaluate(held_out, result.state, cfg, result.adjacency, result.static_masks)
                accuracies.append(evaluation.accuracy)
                js_values.append(result.history[-1].mean_js if result.history else 0.0)
                self.logger.info(f"[{variant}] seed {seed}: accuracy {evaluation.accuracy:.4f}")
            mean, std = float(numpy.mean(accuracies)), float(numpy.std(accuracies))
            summary[variant] = {
                "seeds": seeds,
                "accuracy": accuracies,
                "mean_accuracy": mean,
                "std_accuracy": std,
                "aggregate": format_mean_std(mean, std),
                "mean_js": js_values,
                "mean_converged_js": float(numpy.mean(js_values)),
            }
        _write_json(
            os.path.join(args.out, "ablation.json"),
            {"config": base.to_dict(), "variants": summary},
        )
        return None


"""
Dispatching
"""


class CommandDispatcher(object):
    """
    Owns the subcommand instances, builds the argument parser and runs the
    selected command with the in-memory log capture attached.
    """

    def __init__(self, logger: logging.Logger, commands: List[CommandBase]):
        self.logger = logger
        self.commands = commands
        _check = list(set([x.name for x in self.commands]))
        _names = ",".join([x.name + "(" + x.__class__.__name__ + ")" for x in self.commands])
        assert len(_check) == len(self.commands), "Duplicate command name!" + _names

    def make_cmd_parser(self, prog: str, desc: str) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog, description=desc, formatter_class=argparse.ArgumentDefaultsHelpFormatter
        )
        parser.add_argument("--log-level", type=str, default="INFO", help="Logging verbosity")
        parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
        subparsers = parser.add_subparsers(dest="command", required=True)
        for command in self.commands:
            sub = subparsers.add_parser(
                command.name,
                help=command.help,
                formatter_class=argparse.ArgumentDefaultsHelpFormatter,
            )
            command.add_arguments(sub)
        return parser

    def run(self, args: argparse.Namespace) -> int:
        command = {c.name: c for c in self.commands}[args.command]
        mem_handle = MemHandler(capacity=4096)
        self.logger.addHandler(mem_handle)
        start = time.perf_counter()
        try:
            report = command.run(args)
            # Commands returning a report get it written with the captured log
            if report is not None:
                report["wall_seconds"] = time.perf_counter() - start
                report["log"] = mem_handle.messages()
                _write_json(os.path.join(args.out, "report.json"), report)
            return EXIT_OK
        except ConfigError as err:
            self.logger.error(f"Configuration error: {err}")
            return EXIT_CONFIG
        except LoadError as err:
            self.logger.error(f"Data error: {err}")
            return EXIT_DATA
        except ShapeError as err:
            self.logger.error(f"Shape mismatch: {err}")
            return EXIT_SHAPE
        except (ProgAttnError, OSError) as err:
            self.logger.error(f"{type(err).__name__}: {err}")
            return EXIT_FAILURE
        finally:
            self.logger.removeHandler(mem_handle)


def make_dispatcher(logger: Optional[logging.Logger] = None) -> CommandDispatcher:
    logger = logger or logging.getLogger("progattn")
    return CommandDispatcher(
        logger,
        [
            TrainCommand(logger),
            EvalCommand(logger),
            AttnExportCommand(logger),
            SynthCommand(logger),
            AblateCommand(logger),
        ],
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    dispatcher = make_dispatcher()
    parser = dispatcher.make_cmd_parser(
        "progattn",
        """
        Training, evaluation and attention export of the progressive multi-expert
        Chebyshev graph network for EEG emotion recognition, plus synthetic
        planted-signal datasets for checking the attention mechanism.
        """,
    )
    args = parser.parse_args(argv)
    level = getattr(logging, args.log_level.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    dispatcher.logger.setLevel(level)
    return dispatcher.run(args)


if __name__ == "__main__":
    sys.exit(main())
