"""
This module is the command-line entry point: offline data generation, training runs,
theory verification and learning-curve plots.
"""

import argparse
import dataclasses
import json
import os
import sys
from typing import Callable, Dict, List, Optional, Tuple

from config_utils import ExperimentConfig, build_experiment_config, load_config
from datagen import save_dataset
from errors import ConfigError, DivergenceError, VerificationFailure, WombetError
from harness.metrics import RunMetrics
from harness.plots import emit_plots
from harness.runs import (
    ABLATIONS,
    generate_source_dataset,
    run_ablation,
    run_offline_only,
    run_sac_baseline,
    run_wombet,
)
from logging_config import setup_logger
from oracles import CertificationReport, adversarial_instance, certify_lower_bound, make_chain_mdp
from utils import ensure_directory

logger = setup_logger()

EXIT_OK: int = 0
EXIT_ERROR: int = 1
EXIT_CONFIG: int = 2
EXIT_DIVERGENCE: int = 3
EXIT_VERIFICATION: int = 4


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    """Typed config from --config, with --budget and --out applied on top."""
    mapping = load_config(args.config)
    logger.setLevel(os.getenv("WOMBET_LOG_LEVEL") or mapping.get("log.level", "INFO").upper())
    cfg = build_experiment_config(mapping)
    if args.budget is not None:
        if args.budget < 0:
            raise ConfigError("--budget must be >= 0")
        cfg = dataclasses.replace(cfg, budget=args.budget)
    if args.out:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _seeds(args: argparse.Namespace, cfg: ExperimentConfig) -> Tuple[int, ...]:
    return (args.seed,) if args.seed is not None else cfg.seeds


def cmd_gen_data(args: argparse.Namespace) -> int:
    """Generate, filter and relabel the offline dataset; save it with the model checkpoint."""
    cfg = _experiment(args)
    ensure_directory(cfg.out_dir)
    for seed in _seeds(args, cfg):
        dataset, model, counter = generate_source_dataset(cfg, seed)
        stem = os.path.join(cfg.out_dir, f"dataset__{cfg.task_pair}__seed{seed}")
        dataset.metadata["config"] = cfg.flatten()
        save_dataset(dataset, stem + ".csv")
        model.save(stem + ".model")
        logger.info(
            "Seed %d: %d offline rows, %d source steps -> %s.csv",
            seed,
            len(dataset),
            counter.counts["source"],
            stem,
        )
    return EXIT_OK


def _runner(variant: str) -> Callable[[ExperimentConfig, int, Optional[str]], RunMetrics]:
    if variant == "wombet":
        return lambda cfg, seed, out: run_wombet(cfg, seed, out_dir=out)
    if variant == "sac":
        return run_sac_baseline
    if variant == "offline":
        return run_offline_only
    if variant.startswith("ablation:"):
        which = variant.split(":", 1)[1]
        if which not in ABLATIONS:
            raise ConfigError(f"unknown ablation '{which}' (choose from {', '.join(ABLATIONS)})")
        return lambda cfg, seed, out: run_ablation(cfg, which, seed, out_dir=out)
    raise ConfigError(f"unknown train variant '{variant}'")


def cmd_train(args: argparse.Namespace) -> int:
    """Run one variant for every selected seed and write its metrics."""
    cfg = _experiment(args)
    runner = _runner(args.variant)
    for seed in _seeds(args, cfg):
        metrics = runner(cfg, seed, cfg.out_dir)
        logger.info("%s seed %d finished: final eval return %.3f", args.variant, seed, metrics.final_return)
    return EXIT_OK


def verify_theory(seed: int = 0, n_policies: int = 100) -> Dict[str, CertificationReport]:
    """
    Certify the penalized lower bound on a random chain and check the adversarial instance.

    Args:
        seed (int, optional): Seed of the chain and of the random policies. Defaults to 0.
        n_policies (int, optional): Random policies to certify. Defaults to 100.

    Returns:
        Dict[str, CertificationReport]: "random" (lambda = L_v), "adversarial"
            (lambda = L_v) and "adversarial-half" (lambda = L_v / 2).
    """
    chain = make_chain_mdp(seed=seed)
    adversarial, policy = adversarial_instance()
    return {
        "random": certify_lower_bound(chain, n_policies=n_policies, seed=seed),
        "adversarial": certify_lower_bound(adversarial, lam_scale=1.0, policies=[policy]),
        "adversarial-half": certify_lower_bound(adversarial, lam_scale=0.5, policies=[policy]),
    }


def cmd_verify(args: argparse.Namespace) -> int:
    """Print the certification report; fail unless the bound holds and its contrast case breaks."""
    reports = verify_theory(seed=args.seed or 0)
    for name, report in reports.items():
        print(f"{name}: {report.summary()}")
    problems: List[str] = []
    if not reports["random"].passed:
        problems.append("lower bound violated on random policies with lambda = L_v")
    if not reports["adversarial"].passed:
        problems.append("lower bound violated on the adversarial instance with lambda = L_v")
    if reports["adversarial-half"].bound_violations < 1:
        problems.append("no violation found with lambda = L_v / 2 on the adversarial instance")
    if problems:
        raise VerificationFailure("; ".join(problems))
    print("verification passed")
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    """Render learning curves of every metrics file under --out (or the config's out_dir)."""
    directory = args.out or build_experiment_config(load_config(args.config)).out_dir
    summary = emit_plots(directory)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wombet", description="World-model experience transfer experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (default: $WOMBET_CONFIG or built-in defaults)")
    common.add_argument("--seed", type=int, help="run a single seed instead of experiment.seeds")
    common.add_argument("--out", help="output directory (overrides experiment.out_dir)")
    common.add_argument("--budget", type=int, help="target-task interaction budget")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", parents=[common], help="generate the filtered offline dataset")
    gen.set_defaults(handler=cmd_gen_data)
    train = commands.add_parser("train", parents=[common], help="train one variant")
    train.add_argument(
        "variant",
        help="wombet | sac | offline | " + " | ".join(f"ablation:{name}" for name in ABLATIONS),
    )
    train.set_defaults(handler=cmd_train)
    verify = commands.add_parser("verify", parents=[common], help="certify the penalized lower bound")
    verify.set_defaults(handler=cmd_verify)
    plot = commands.add_parser("plot", parents=[common], help="plot learning curves")
    plot.set_defaults(handler=cmd_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, dispatch and map failures to exit codes.

    Returns:
        int: 0 success, 2 config error, 3 divergence, 4 verification failure, 1 otherwise.
    """
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as e:
        logger.critical("Configuration error: %s", e)
        return EXIT_CONFIG
    except DivergenceError as e:
        logger.critical("Training diverged: %s", e)
        return EXIT_DIVERGENCE
    except VerificationFailure as e:
        logger.critical("Verification failed: %s", e)
        return EXIT_VERIFICATION
    except WombetError as e:
        logger.critical("%s", e)
        return EXIT_ERROR
    except Exception as e:  # pylint: disable=broad-exception-caught
        logger.critical("Unexpected error: %s", e, exc_info=True)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
