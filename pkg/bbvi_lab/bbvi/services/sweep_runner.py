import asyncio
import logging
import math
from dataclasses import dataclass

import pandas as pd

from bbvi import utils
from bbvi.config import ExperimentConfig, build_family, build_schedule, build_target
from bbvi.errors import ConfigurationError, UnsupportedConfiguration
from bbvi.family import initial_params
from bbvi.models import SweepRow
from bbvi.optimizers import run

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepCell:
    optimizer: str
    conditioner: str
    stepsize: float
    init_scale: float
    trial: int


def run_cell(config: ExperimentConfig, cell: SweepCell, base_seed: int) -> SweepRow:
    """
    One (variant, stepsize, init_scale, replication) cell: a fresh target drawn
    from the replication's stream, m0 = 0 and C0 = init_scale I, then run until
    KL <= eps or T iterations. The same replication sees the same target and the
    same gradient noise in every cell.
    """
    T = config.run_iterations
    rng = utils.make_stream(utils.derive_seed(base_seed, cell.trial))
    target = build_target(config, rng)
    family = build_family(config, cell.conditioner)
    schedule = build_schedule(config, target, family, stepsize=cell.stepsize)
    result = run(
        cell.optimizer,
        target,
        family,
        schedule,
        config.estimator_kind,
        config.estimator_samples,
        T,
        rng,
        config.run_checkpoint_every,
        initial_params(family, cell.init_scale),
        eps_kl=config.run_eps_kl,
        beta1=config.optimizer_beta1,
        beta2=config.optimizer_beta2,
        eps=config.optimizer_eps,
    )
    final_kl = result.records[-1].kl if result.records else math.nan
    if result.failed:
        return SweepRow(cell.optimizer, cell.conditioner, cell.stepsize, cell.init_scale, cell.trial, T, True, math.nan, failed=True)
    censored = result.iterations_to_eps is None
    iterations = T if censored else result.iterations_to_eps
    return SweepRow(cell.optimizer, cell.conditioner, cell.stepsize, cell.init_scale, cell.trial, iterations, censored, final_kl)


class SweepRunner:
    """Drains a queue of sweep cells with `num_workers` worker tasks, each running cells in a thread."""

    def __init__(self, config: ExperimentConfig, base_seed: int, num_workers: int = 1):
        if config.target_kind != "quadratic":
            raise UnsupportedConfiguration("Sweeps measure iterations to a KL threshold and need a quadratic target")
        for optimizer, conditioner in config.variants:
            if optimizer in ("prox_sgd", "proxgen_adam") and conditioner != "identity":
                raise ConfigurationError(f"Sweep variant {optimizer}/{conditioner}: the scale prox needs the identity conditioner")
        self.config = config
        self.base_seed = base_seed
        self.num_workers = max(1, num_workers)
        self.cell_queue: asyncio.Queue = asyncio.Queue()
        self.rows: list[SweepRow] = []
        self.workers = []
        logger.info(f"SweepRunner initialized with {self.num_workers} workers.")

    def cells(self, stepsizes, init_scales) -> list[SweepCell]:
        return [
            SweepCell(optimizer, conditioner, float(stepsize), float(init_scale), trial)
            for optimizer, conditioner in self.config.variants
            for stepsize in stepsizes
            for init_scale in init_scales
            for trial in range(self.config.run_replications)
        ]

    async def _worker(self, worker_id: str):
        logger.debug(f"SweepRunner {worker_id} started.")
        while True:
            cell = await self.cell_queue.get()
            try:
                row = await asyncio.to_thread(run_cell, self.config, cell, self.base_seed)
                if row.censored and not row.failed:
                    logger.warning(f"SweepRunner {worker_id}: {cell.optimizer}/{cell.conditioner} gamma={cell.stepsize:.3g} init={cell.init_scale:g} trial {cell.trial} censored at T={row.iters_to_eps}.")
                else:
                    logger.info(f"SweepRunner {worker_id}: {cell.optimizer}/{cell.conditioner} gamma={cell.stepsize:.3g} init={cell.init_scale:g} trial {cell.trial}: {row.iters_to_eps} iterations.")
            except Exception as e:
                logger.error(f"SweepRunner {worker_id}: cell {cell} failed: {e}", exc_info=True)
                row = SweepRow(cell.optimizer, cell.conditioner, cell.stepsize, cell.init_scale, cell.trial, self.config.run_iterations, True, math.nan, failed=True)
            finally:
                self.cell_queue.task_done()
            self.rows.append(row)

    async def run(self, stepsizes=None, init_scales=None) -> list[SweepRow]:
        stepsizes = self.config.sweep_stepsizes if stepsizes is None else stepsizes
        init_scales = self.config.sweep_init_scales if init_scales is None else init_scales
        if not len(stepsizes) or not len(init_scales):
            raise ConfigurationError("Sweep grids must be non-empty")

        cells = self.cells(stepsizes, init_scales)
        logger.info(f"SweepRunner: {len(cells)} cells queued.")
        for cell in cells:
            self.cell_queue.put_nowait(cell)
        self.workers = [asyncio.create_task(self._worker(f"worker-{i + 1}")) for i in range(self.num_workers)]
        try:
            await self.cell_queue.join()
        finally:
            await self.stop()
        return sorted(self.rows)

    async def stop(self):
        for worker in self.workers:
            worker.cancel()
        await asyncio.gather(*self.workers, return_exceptions=True)
        logger.debug("SweepRunner workers stopped.")


def run_sweep(config: ExperimentConfig, stepsizes=None, init_scales=None, base_seed: int | None = None, threads: int = 1) -> list[SweepRow]:
    """Every sweep cell, sorted by (optimizer, conditioner, stepsize, init_scale, trial)."""
    seed = config.run_base_seed if base_seed is None else base_seed
    runner = SweepRunner(config, seed, threads)
    return asyncio.run(runner.run(stepsizes, init_scales))


def sweep_frame(rows: list[SweepRow]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "trial": [row.trial for row in rows],
            "optimizer": [row.optimizer for row in rows],
            "conditioner": [row.conditioner for row in rows],
            "stepsize": [row.stepsize for row in rows],
            "init_scale": [row.init_scale for row in rows],
            "iters_to_eps": [row.iters_to_eps for row in rows],
            "censored": [int(row.censored) for row in rows],
            "final_kl": [row.final_kl for row in rows],
        }
    )


def summarize_sweep(rows: list[SweepRow]) -> pd.DataFrame:
    """
    Best-over-grid iterations to eps per (optimizer, conditioner, init_scale):
    average the replications of each stepsize, then take the best stepsize.
    Censored replications count as T.
    """
    frame = sweep_frame(rows)
    per_stepsize = (
        frame.groupby(["optimizer", "conditioner", "init_scale", "stepsize"], sort=True)
        .agg(mean_iters=("iters_to_eps", "mean"), censored=("censored", "sum"))
        .reset_index()
    )
    best = per_stepsize.loc[per_stepsize.groupby(["optimizer", "conditioner", "init_scale"], sort=True)["mean_iters"].idxmin()]
    return best.rename(columns={"stepsize": "best_stepsize"}).reset_index(drop=True)
