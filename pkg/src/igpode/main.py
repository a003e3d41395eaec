#!/usr/bin/env python3
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from igpode import diffmath as dm
from igpode.callbacks import TrainCallbacks
from igpode.checkpoint import Checkpoint
from igpode.checkpoint import load_checkpoint
from igpode.checkpoint import save_checkpoint
from igpode.config import ExperimentConfig
from igpode.config import GlobalLatents
from igpode.dynamics import DriftKind
from igpode.errors import ConfigError
from igpode.errors import IgpodeError
from igpode.evaluate import evaluate
from igpode.evaluate import fskill
from igpode.evaluate import read_report
from igpode.evaluate import write_report
from igpode.exporter import PlotExporter
from igpode.inference import train
from igpode.simdata import BallsConfig
from igpode.simdata import ChargesConfig
from igpode.simdata import Dataset
from igpode.simdata import NoiseLevel
from igpode.simdata import Split
from igpode.simdata import read_dataset
from igpode.simdata import simulate_balls
from igpode.simdata import simulate_charges
from igpode.simdata import write_dataset

logger = logging.getLogger(__name__)


def create_output_directory(output: str | Path) -> Path:
    outpath = Path(output)
    try:
        outpath.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {outpath}: {e}") from e
    return outpath.absolute()


def parse_rounds(text: str) -> tuple[tuple[int, int], ...]:
    """Parses ``"5:2000,16:1000"`` into ``((5, 2000), (16, 1000))``."""
    try:
        return tuple(
            (int(length), int(iters))
            for length, iters in (item.split(":") for item in text.split(","))
        )
    except ValueError as e:
        raise argparse.ArgumentTypeError(
            f"rounds must look like 5:2000,16:1000, got '{text}'",
        ) from e


def _match_observed(dataset: Dataset, obs_dim: int) -> Dataset:
    if dataset.obs_dim > obs_dim:
        logger.debug(f"dropping observed dims beyond {obs_dim}")
        return dataset.positions_only(obs_dim)
    return dataset


# --------------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------------


def simulate(args):
    overrides = {
        "noise": NoiseLevel(args.noise),
        "missing_velocity": args.missing_velocity,
    }
    if args.num_objects is not None:
        overrides["num_objects"] = args.num_objects
    if args.num_steps is not None:
        overrides["num_steps"] = args.num_steps
    split = Split(args.split)
    if args.num_sequences is not None:
        overrides[f"num_{split.value}"] = args.num_sequences

    if args.system == "balls":
        dataset = simulate_balls(BallsConfig(**overrides), args.seed, split)
    else:
        dataset = simulate_charges(ChargesConfig(**overrides), args.seed, split)
    out = Path(args.out)
    create_output_directory(out.parent)
    write_dataset(dataset, out)
    logger.info(f"wrote {dataset.num_sequences} sequences to {out}")


def _experiment_config(args) -> ExperimentConfig:
    config = ExperimentConfig()
    if args.config:
        config = ExperimentConfig.from_file(args.config)
    model = {}
    if args.model is not None:
        model["kind"] = DriftKind(args.model)
    if args.structured is not None:
        model["structured"] = args.structured
    if args.global_latents is not None:
        model["global_latents"] = GlobalLatents(args.global_latents)
    train_changes = {}
    if args.seed is not None:
        train_changes["seed"] = args.seed
    if args.rounds is not None:
        train_changes["rounds"] = args.rounds
    if model:
        config = config.with_model(**model)
    if train_changes:
        config = config.with_train(**train_changes)
    return config


def train_model(args):
    config = _experiment_config(args)
    dataset = read_dataset(args.data)
    if args.latent_velocity:
        dataset = dataset.positions_only()
    ckpt = Path(args.ckpt)
    create_output_directory(ckpt.parent)

    def on_round_end(state, round_index):
        save_checkpoint(Checkpoint.from_state(state, config), ckpt)

    logger.info(
        f"training {config.model.kind.value} on {dataset.num_sequences} sequences "
        f"of {dataset.num_steps} frames",
    )
    state, history = train(
        dataset,
        config,
        dm.make_rng(config.train.seed),
        TrainCallbacks(on_round_end=on_round_end),
    )
    save_checkpoint(Checkpoint.from_state(state, config), ckpt)
    if args.history:
        Path(args.history).write_text(json.dumps(history, indent=2))


def eval_model(args):
    checkpoint = load_checkpoint(args.ckpt)
    model = checkpoint.model()
    dataset = _match_observed(read_dataset(args.data), model.obs_dim)
    report = evaluate(
        model,
        checkpoint.param_store(),
        dataset,
        args.samples,
        args.seed,
        args.horizon,
    )
    out = Path(args.report)
    create_output_directory(out.parent)
    write_report(report, out)
    summary = report["summary"]
    logger.info(
        f"MSE {summary['mse']['mean']:.4f} +- {summary['mse']['std']:.4f}, "
        f"ELL {summary['ell']['mean']:.4f} +- {summary['ell']['std']:.4f}",
    )


def plot(args):
    report = read_report(args.report)
    dataset = read_dataset(args.truth)
    written = PlotExporter().export(report, dataset, create_output_directory(args.out))
    logger.info(f"wrote {len(written)} files to {args.out}")


def score_kinematics(args):
    checkpoint = load_checkpoint(args.ckpt)
    model = checkpoint.model()
    dataset = _match_observed(read_dataset(args.data), model.obs_dim)
    result = fskill(
        model,
        checkpoint.param_store(),
        dataset,
        args.seed,
        num_samples=args.samples,
        steps=args.steps,
    )
    print(json.dumps(result, indent=2))


# --------------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------------


def get_parser():
    parser = argparse.ArgumentParser(prog="igpode")
    subparsers = parser.add_subparsers()

    # Global args
    parser.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        help="Enable verbose logging",
    )

    # Simulate subparser
    parser_sim = subparsers.add_parser(
        "simulate",
        help="Generate a bouncing-balls or charges dataset",
    )
    parser_sim.set_defaults(func=simulate)
    parser_sim.add_argument("--system", choices=["balls", "charges"], required=True)
    parser_sim.add_argument(
        "--noise",
        choices=[n.value for n in NoiseLevel],
        default=NoiseLevel.NONE.value,
    )
    parser_sim.add_argument(
        "--split",
        choices=[s.value for s in Split],
        default=Split.TRAIN.value,
    )
    parser_sim.add_argument("--num-sequences", type=int)
    parser_sim.add_argument("--num-objects", type=int)
    parser_sim.add_argument("--num-steps", type=int)
    parser_sim.add_argument(
        "--missing-velocity",
        action="store_true",
        help="Store positions only",
    )
    parser_sim.add_argument("--seed", type=int, default=0)
    parser_sim.add_argument("--out", metavar="FILE", required=True)

    # Train subparser
    parser_train = subparsers.add_parser("train", help="Fit a model to a dataset")
    parser_train.set_defaults(func=train_model)
    parser_train.add_argument("--data", metavar="FILE", required=True)
    parser_train.add_argument("--model", choices=[k.value for k in DriftKind])
    parser_train.add_argument(
        "--structured",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="Position/velocity latent state",
    )
    parser_train.add_argument(
        "--latent-velocity",
        action="store_true",
        help="Drop observed velocities and infer them",
    )
    parser_train.add_argument(
        "--global-latents",
        choices=[g.value for g in GlobalLatents],
    )
    parser_train.add_argument("--config", metavar="FILE", help="JSON config file")
    parser_train.add_argument("--rounds", type=parse_rounds, help="e.g. 5:200,16:100")
    parser_train.add_argument("--ckpt", metavar="FILE", required=True)
    parser_train.add_argument("--history", metavar="FILE", help="Write history JSON")
    parser_train.add_argument("--seed", type=int)

    # Eval subparser
    parser_eval = subparsers.add_parser("eval", help="Forecast and score a dataset")
    parser_eval.set_defaults(func=eval_model)
    parser_eval.add_argument("--ckpt", metavar="FILE", required=True)
    parser_eval.add_argument("--data", metavar="FILE", required=True)
    parser_eval.add_argument("--samples", type=int, default=20)
    parser_eval.add_argument("--report", metavar="FILE", required=True)
    parser_eval.add_argument("--horizon", type=int)
    parser_eval.add_argument("--seed", type=int, default=0)

    # Plot subparser
    parser_plot = subparsers.add_parser("plot", help="Write CSV and SVG forecasts")
    parser_plot.set_defaults(func=plot)
    parser_plot.add_argument("--report", metavar="FILE", required=True)
    parser_plot.add_argument("--truth", metavar="FILE", required=True)
    parser_plot.add_argument("--out", metavar="DIR", required=True)

    # Fskill subparser
    parser_fskill = subparsers.add_parser(
        "fskill",
        help="Roll out the independent kinematics alone on single-object data",
    )
    parser_fskill.set_defaults(func=score_kinematics)
    parser_fskill.add_argument("--ckpt", metavar="FILE", required=True)
    parser_fskill.add_argument("--data", metavar="FILE", required=True)
    parser_fskill.add_argument("--samples", type=int, default=2)
    parser_fskill.add_argument("--steps", type=int, default=10)
    parser_fskill.add_argument("--seed", type=int, default=0)

    return parser


def parse_args(argv=None):
    parser = get_parser()
    args = parser.parse_args(argv)

    if hasattr(args, "func"):
        return args
    parser.print_help()
    return None


def main(argv=None) -> int:
    args = parse_args(argv)
    if not args:
        return 0

    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s : %(message)s")

    try:
        args.func(args)
    except (IgpodeError, OSError) as e:
        logger.error(str(e))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
