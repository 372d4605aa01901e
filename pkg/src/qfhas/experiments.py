"""Experiment grids over user count and per-user capacity.

Each realization draws a fresh utility-to-user assignment from the preset
pool. The assignment, the share noise and the start offsets come from three
independent streams spawned from ``(seed, N, C_usr, N_TCP, realization)``,
and none of them depend on the controller. Runs of different controllers in
the same cell and realization therefore see the same users.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from qfhas.metrics import BoxStats, SummaryMetrics, summarize
from qfhas.netsim import simulate
from qfhas.scenario import GridSpec, ScenarioBase, ScenarioSpec, build_sim_config, scenario_from_base
from qfhas.utility import PRESET_ORDER


@dataclass(frozen=True)
class CellKey:
    controller: str
    n_users: int
    c_usr: float
    n_tcp: int = 0


@dataclass(frozen=True)
class RealizationSeeds:
    assignment: int
    noise: int
    start: int


def realization_seeds(seed: int, n_users: int, c_usr: float, n_tcp: int, realization: int) -> RealizationSeeds:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(n_users, int(round(c_usr)), n_tcp, realization))
    a, n, s = (int(c.generate_state(1, dtype=np.uint32)[0]) for c in ss.spawn(3))
    return RealizationSeeds(a, n, s)


def realization_scenario(base: ScenarioBase, controller: str, n_users: int, c_usr: float,
                         realization: int, n_tcp: int = 0,
                         preset_pool: Sequence[str] = PRESET_ORDER,
                         start_jitter: float = 0.0) -> ScenarioSpec:
    seeds = realization_seeds(base.seed, n_users, c_usr, n_tcp, realization)
    pool = list(preset_pool)
    picks = np.random.default_rng(seeds.assignment).integers(0, len(pool), n_users)
    offsets = np.random.default_rng(seeds.start).uniform(0.0, start_jitter, n_users) \
        if start_jitter > 0 else np.zeros(n_users)
    users = [{"controller": controller, "utility": pool[int(i)], "start_time": float(o)}
             for i, o in zip(picks, offsets)]
    link = base.link.model_dump()
    link.update(capacity_bps=(n_users + n_tcp) * c_usr, capacity_trace=None, noise_seed=seeds.noise)
    cross = [{"start_time": 0.0, "stop_time": None}] * n_tcp
    return scenario_from_base(base, users, link=link, cross_traffic=cross)


def run_scenario(spec: ScenarioSpec) -> SummaryMetrics:
    return summarize(simulate(build_sim_config(spec)))


def _run_job(job):
    key, r, spec = job
    return key, r, run_scenario(spec)


def _fmean(values):
    values = [v for v in values if v is not None]
    return math.fsum(values) / len(values) if values else None


@dataclass
class CellResult:
    key: CellKey
    # realization index -> summary
    runs: dict[int, SummaryMetrics] = field(default_factory=dict)

    def ordered(self) -> list[SummaryMetrics]:
        return [self.runs[r] for r in sorted(self.runs)]

    def averaged(self) -> dict[str, float | None]:
        """Across-realization means; ``math.fsum`` makes them order independent."""
        runs = list(self.runs.values())
        return {
            "mean_average_ssim": _fmean([s.average_ssim.mean for s in runs if s.average_ssim]),
            "min_average_ssim": _fmean([s.average_ssim.minimum for s in runs if s.average_ssim]),
            "mean_delta_ssim": _fmean([s.delta_ssim.mean for s in runs if s.delta_ssim]),
            "capacity_usage": _fmean([s.capacity_usage for s in runs]),
            "cross_usage": _fmean([s.cross_usage for s in runs]),
            "underruns": _fmean([s.underruns for s in runs]),
            "mean_price": _fmean([s.mean_price for s in runs]),
        }

    def pooled_average_ssim(self) -> BoxStats:
        """Box statistics over every user of every realization."""
        return BoxStats.of([u.average_ssim for s in self.ordered() for u in s.users
                            if u.average_ssim is not None])

    def pooled_delta_ssim(self) -> BoxStats:
        return BoxStats.of([u.delta_ssim for s in self.ordered() for u in s.users
                            if u.delta_ssim is not None])


@dataclass
class GridResult:
    cells: dict[CellKey, CellResult] = field(default_factory=dict)

    def cell(self, controller: str, n_users: int, c_usr: float, n_tcp: int = 0) -> CellResult:
        return self.cells[CellKey(controller, n_users, float(c_usr), n_tcp)]

    def to_dict(self) -> dict:
        out = []
        for key in sorted(self.cells, key=lambda k: (k.controller, k.n_users, k.c_usr, k.n_tcp)):
            cell = self.cells[key]
            out.append({
                "controller": key.controller, "n_users": key.n_users,
                "c_usr_bps": key.c_usr, "n_tcp": key.n_tcp,
                "realizations": len(cell.runs),
                "averaged": cell.averaged(),
                "pooled_average_ssim": vars(cell.pooled_average_ssim()),
                "pooled_delta_ssim": vars(cell.pooled_delta_ssim()),
            })
        return {"cells": out}


def run_experiment_grid(base: ScenarioBase, n_users_list: Sequence[int], c_usr_list: Sequence[float],
                        realizations: int = 10, controllers: Sequence[str] = ("quality_fair",),
                        n_tcp_list: Sequence[int] = (0,), preset_pool: Sequence[str] = PRESET_ORDER,
                        start_jitter: float = 0.0, workers: int = 1,
                        realization_order: Sequence[int] | None = None) -> GridResult:
    if realizations < 1:
        raise ValueError("realizations must be >= 1")
    order = list(range(realizations)) if realization_order is None else list(realization_order)
    jobs = []
    for ctrl in controllers:
        for n in n_users_list:
            for cu in c_usr_list:
                for nt in n_tcp_list:
                    key = CellKey(ctrl, int(n), float(cu), int(nt))
                    for r in order:
                        spec = realization_scenario(base, ctrl, int(n), float(cu), r, int(nt),
                                                    preset_pool, start_jitter)
                        jobs.append((key, r, spec))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]

    grid = GridResult()
    for key, r, summary in results:
        grid.cells.setdefault(key, CellResult(key)).runs[r] = summary
    return grid


def run_grid_spec(spec: GridSpec, workers: int = 1) -> GridResult:
    return run_experiment_grid(
        spec.base, spec.n_users, spec.c_usr_bps, spec.realizations, spec.controllers,
        spec.n_tcp, spec.preset_pool, spec.start_jitter, workers,
    )
