"""Command line entry point: train, evaluate and inspect agents that learn
from bidirectional model rollouts, and check the tabular return bounds.
"""
import sys

from pathlib import Path

import click
import numpy as np

from bidyn import console
from bidyn.bound_lab import verify_suite, write_report
from bidyn.config import load_config, with_overrides
from bidyn.env import PendulumEnv
from bidyn.errors import BidynError, StateError
from bidyn.policy import BackwardPolicyLoss
from bidyn.rollout import Ablation
from bidyn.seeding import RandomStreams
from bidyn.trainer import (
    collect_trajectories,
    evaluate_policy,
    load_run,
    mean_compounding_error,
    run_bmpo,
)
from bidyn.version import __version__


def _fail(error: BidynError):
    console.red(f"{type(error).__name__}: {error}")
    sys.exit(1)


def _run_dir(checkpoint: str) -> Path:
    path = Path(checkpoint)
    return path.parent if path.is_file() else path


###########################################################################
#                                                                         #
#                                main                                     #
#                                                                         #
###########################################################################


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Display help and usage for subcommands, use: bidyn [COMMAND] --help"""
    pass  # pylint: disable=unnecessary-pass


###########################################################################
#                                                                         #
#              bidyn train                                                #
#                                                                         #
###########################################################################


@click.command("train", help="Train an agent on the pendulum with bidirectional model rollouts")
@click.option("-c", "--config", "config_path", default=None, help="Path to a flat YAML config")
@click.option("--seed", default=None, type=int, help="Seed, overrides the config and BIDYN_SEED")
@click.option("-o", "--out-dir", default="runs/bmpo", help="Directory for config, metrics and checkpoint")
@click.option(
    "--ablation",
    default=None,
    type=click.Choice([a.value for a in Ablation]),
    help="Component ablation, default from the config (full)",
)
@click.option(
    "--backward-policy",
    default=None,
    type=click.Choice([b.value for b in BackwardPolicyLoss]),
    help="Backward policy loss, default from the config (mle)",
)
@click.option("-q", "--quiet", default=False, is_flag=True, help="Only print the final summary")
# pylint: disable=too-many-arguments
def train(config_path, seed, out_dir, ablation, backward_policy, quiet):
    """Run the training loop and write ``config.yaml``, ``metrics.csv`` and
    ``checkpoint.bin`` into ``out_dir``.

    Parameters
    ----------
    config_path: str
        flat YAML config; defaults reproduce the pendulum preset
    seed: int
        overrides the config seed and ``BIDYN_SEED``
    out_dir: str
        run directory
    ablation: str
        full, forward-only, backward-only, no-mpc or mbpo
    backward_policy: str
        mle or gan
    """
    try:
        config = load_config(config_path, seed=seed)
        overrides = {}
        if ablation is not None:
            overrides["ablation"] = ablation
        if backward_policy is not None:
            overrides["backward_policy_loss"] = backward_policy
        if overrides:
            config = with_overrides(config, **overrides)
        result = run_bmpo(config, out_dir, verbose=not quiet)
    except BidynError as e:
        _fail(e)

    if not result.metrics:
        console.yellow("no epochs configured, nothing evaluated")
        return
    last = result.metrics[-1]
    console.green(
        f"final eval return {last.eval_return_mean:.2f} +- {last.eval_return_std:.2f} "
        f"after {result.env_steps} env steps"
    )


###########################################################################
#                                                                         #
#              bidyn eval                                                 #
#                                                                         #
###########################################################################


@click.command("eval", help="Evaluate the deterministic policy of a trained run")
@click.option("--checkpoint", required=True, help="Run directory or its checkpoint.bin")
@click.option("--episodes", default=10, type=int, help="Number of evaluation episodes")
@click.option("--seed", default=0, type=int, help="Seed of the first evaluation episode")
def evaluate(checkpoint, episodes, seed):
    try:
        config, components = load_run(_run_dir(checkpoint))
        mean, std = evaluate_policy(components.agent, PendulumEnv(), episodes, seed=seed)
    except BidynError as e:
        _fail(e)
    console.cyan(f"ablation={config.ablation.value} seed={config.seed}", bold=False)
    console.green(f"mean return {mean:.2f} +- {std:.2f} over {episodes} episodes")


###########################################################################
#                                                                         #
#              bidyn model-error                                          #
#                                                                         #
###########################################################################


@click.command("model-error", help="Multi-step forward and bidirectional model error")
@click.option("--checkpoint", required=True, help="Run directory or its checkpoint.bin")
@click.option("--h", "h", default=5, type=int, help="Half window length")
@click.option("--anchors", default=100, type=int, help="Number of anchor windows")
@click.option("--trajectories", default=5, type=int, help="Held-out trajectories to collect")
@click.option("--seed", default=12345, type=int, help="Seed for held-out trajectories")
def model_error(checkpoint, h, anchors, trajectories, seed):
    try:
        _, components = load_run(_run_dir(checkpoint))
        if not (components.forward_model.trained and components.backward_model.trained):
            raise StateError("checkpoint does not hold both trained ensembles")
        held_out = collect_trajectories(trajectories, seed, agent=components.agent)
        error_for, error_bi = mean_compounding_error(
            components.forward_model,
            components.backward_model,
            held_out,
            h,
            anchors,
            RandomStreams(seed).numpy("anchors"),
        )
    except BidynError as e:
        _fail(e)
    console.yellow(f"h={h} anchors={anchors}", bold=False)
    console.green(f"error_for {error_for:.6f}")
    console.green(f"error_bi  {error_bi:.6f}")


###########################################################################
#                                                                         #
#              bidyn verify-bounds                                        #
#                                                                         #
###########################################################################


@click.command("verify-bounds", help="Check the return discrepancy bounds on random tabular MDPs")
@click.option("--instances", default=100, type=int, help="Number of random instances")
@click.option("--seed", default=0, type=int, help="Seed")
@click.option("--max-states", default=5, type=int, help="Largest state count")
@click.option("--max-actions", default=3, type=int, help="Largest action count")
@click.option("--gamma", default=0.9, type=float, help="Discount")
@click.option("-o", "--out", default=None, help="Write the YAML report here instead of stdout")
def verify_bounds(instances, seed, max_states, max_actions, gamma, out):
    try:
        report = verify_suite(
            instances,
            np.random.default_rng(seed),
            max_states=max_states,
            max_actions=max_actions,
            gamma=gamma,
            verbose=out is not None,
        )
    except BidynError as e:
        _fail(e)

    if out:
        write_report(report, path=out)
        console.green(f"report written to {out}")
    else:
        write_report(report, stream=sys.stdout)

    if report.total_violations:
        console.red(f"{report.total_violations} bound violations")
        sys.exit(1)
    console.green("no bound violations")


main.add_command(train)
main.add_command(evaluate)
main.add_command(model_error)
main.add_command(verify_bounds)

if __name__ == "__main__":
    main()
