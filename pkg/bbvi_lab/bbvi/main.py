import argparse
import logging
import os
import sys
from dataclasses import replace

# Add the parent directory to sys.path to make bbvi discoverable
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from bbvi import utils
from bbvi.config import build_family, build_schedule, build_target, load_config, resolve_seed
from bbvi.errors import ConfigurationError, ContractViolation, UnsupportedConfiguration
from bbvi.family import initial_params
from bbvi.optimizers import OPTIMIZER_KINDS, run
from bbvi.services import report_writer
from bbvi.services.sweep_runner import run_sweep, summarize_sweep
from bbvi.theory import run_suite, softplus_constants

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')

EXIT_OK = 0
EXIT_VERIFICATION_FAILED = 1
EXIT_CONFIG_ERROR = 2


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {value}")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid count {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_seed, help="base seed (falls back to BBVI_LAB_SEED, then the config)")
    common.add_argument("--threads", type=_positive_int, default=1, help="concurrent workers")
    common.add_argument("--out", help="output path")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    experiment = argparse.ArgumentParser(add_help=False)
    experiment.add_argument("--config", help="YAML experiment configuration")
    experiment.add_argument("--optimizer", choices=OPTIMIZER_KINDS)
    experiment.add_argument("--stepsize", type=float)
    experiment.add_argument("--iterations", type=_positive_int)

    parser = argparse.ArgumentParser(prog="bbvi", description="Black-box variational inference lab.")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("verify", parents=[common], help="run the verification suite")
    commands.add_parser("sweep", parents=[common, experiment], help="stepsize x initialization sweep")
    run_parser = commands.add_parser("run", parents=[common, experiment], help="optimization trajectories")
    run_parser.add_argument("--trials", type=_positive_int, default=1, help="number of replications to record")
    commands.add_parser("constants", parents=[common], help="print the softplus constants")
    return parser


def _experiment_config(args):
    config = load_config(args.config)
    overrides = {}
    if args.optimizer:
        overrides["optimizer_kind"] = args.optimizer
    if args.stepsize is not None:
        overrides["optimizer_stepsize"] = args.stepsize
    if args.iterations is not None:
        overrides["run_iterations"] = args.iterations
    if args.out:
        overrides["output_path"] = args.out
    config = replace(config, **overrides)
    config.validate()
    return config


def cmd_verify(args) -> int:
    seed = resolve_seed(args.seed)
    logging.info(f"Running verification suite with seed {seed} on {args.threads} threads")
    reports = run_suite(seed, args.threads)
    report_writer.write_report(args.out or "verification.jsonl", reports)
    print(report_writer.summary_table(reports))
    return EXIT_OK if all(report.passed for report in reports) else EXIT_VERIFICATION_FAILED


def cmd_sweep(args) -> int:
    config = _experiment_config(args)
    seed = resolve_seed(args.seed, config)
    logging.info(f"Starting sweep: {len(config.variants)} variants, {len(config.sweep_stepsizes)} stepsizes, {len(config.sweep_init_scales)} initializations, {config.run_replications} replications")
    rows = run_sweep(config, base_seed=seed, threads=args.threads)
    report_writer.write_sweep(config.output_path, rows)
    failed = sum(1 for row in rows if row.failed)
    if failed:
        logging.warning(f"{failed} sweep cells failed numerically and were recorded as censored")
    print(report_writer.sweep_summary_table(summarize_sweep(rows)))
    return EXIT_OK


def cmd_run(args) -> int:
    config = _experiment_config(args)
    seed = resolve_seed(args.seed, config)
    results = []
    for trial in range(args.trials):
        rng = utils.make_stream(utils.derive_seed(seed, trial))
        target = build_target(config, rng)
        family = build_family(config)
        schedule = build_schedule(config, target, family)
        result = run(
            config.optimizer_kind,
            target,
            family,
            schedule,
            config.estimator_kind,
            config.estimator_samples,
            config.run_iterations,
            rng,
            config.run_checkpoint_every,
            initial_params(family, config.run_init_scale),
            beta1=config.optimizer_beta1,
            beta2=config.optimizer_beta2,
            eps=config.optimizer_eps,
        )
        final = result.records[-1]
        logging.info(f"Trial {trial}: {len(result.records)} checkpoints, final ELBO {final.elbo:.6g}, KL {final.kl}")
        results.append((trial, result))
    report_writer.write_trajectories(
        config.output_path, results, config.optimizer_kind, config.family_conditioner, config.estimator_kind, config.optimizer_stepsize, config.run_init_scale
    )
    return EXIT_OK


def cmd_constants(args) -> int:
    L_h, L_s = softplus_constants()
    print(f"L_h {L_h:.6f}")
    print(f"L_s_factor {L_s:.6f}")
    return EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "run": cmd_run,
    "constants": cmd_constants,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse prints usage to stderr and exits 2 on bad arguments
        return int(e.code or 0)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, UnsupportedConfiguration, ContractViolation) as e:
        logging.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
