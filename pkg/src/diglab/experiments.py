"""The four attractor experiments on the two-point task, plus multi-seed
comparison studies.

stuck:   vanilla training from a fresh initialization (D0, G0) -> (D1, G1).
perturb: continuations from (G1, D1 + Gaussian noise) at four variances.
avoid:   gap-regularized training from the bit-identical (D0, G0).
escape:  from a trapped state, train D to optimality under the regularized
         objective -> (D2, G2), then continue once without and once with the
         regularizer.

Each bundle records configs, trajectory logs, coverage reports and parameter
snapshots; seeds fan out to a small process pool when requested.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import (CoverageReport, Dataset, ExperimentDependencyError,
                       ExperimentPreconditionError, GanConfig, TWO_POINT_DATASET,
                       TrainResult, coverage, discriminator_norm_gap,
                       paper_toy_config, perturb_params, train,
                       train_discriminator_to_optimality, trapping_iteration)
from .nn import MlpParams, params_to_text

EXPERIMENTS = ("stuck", "perturb", "avoid", "escape")
PERTURB_VARIANCES = (0.1, 1.0, 5.0, 10.0)
ESCAPE_GAP_BOUND = 1e-4

WORKERS_ENV = "DIGLAB_WORKERS"


def snapshot_hash(params: MlpParams) -> str:
    return hashlib.sha256(params_to_text(params).encode()).hexdigest()


@dataclass
class RunArtifact:
    """One training run inside a bundle."""

    name: str
    config: GanConfig
    result: TrainResult
    report: CoverageReport
    note: str = ""

    @property
    def log(self):
        return self.result.log


@dataclass
class ExperimentBundle:
    kind: str
    seed: int
    runs: list[RunArtifact] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def run(self, name: str) -> RunArtifact:
        for r in self.runs:
            if r.name == name:
                return r
        raise KeyError(name)


def _modes(dataset: Dataset) -> np.ndarray:
    return dataset.points


def _artifact(name: str, config: GanConfig, result: TrainResult,
              dataset: Dataset, note: str = "") -> RunArtifact:
    report = coverage(result.final_fakes, _modes(dataset), config.coverage_eps)
    return RunArtifact(name, config, result, report, note)


def classify_outcome(report: CoverageReport, diverged: bool) -> str:
    if diverged:
        return "diverged"
    if report.covered_modes == len(report.covered):
        return "covers_all"
    if report.trapped:
        return f"trapped_mode_{report.trapped_mode}"
    return "partial" if report.covered_modes else "uncovered"


def run_experiment(which: str, base_seed: int,
                   dataset: Dataset = TWO_POINT_DATASET,
                   stuck: ExperimentBundle | None = None,
                   **config_overrides) -> ExperimentBundle:
    """Build one experiment bundle for one seed.

    ``escape`` requires the matching ``stuck`` bundle (its trapped end state
    is the starting point); everything else is self-contained. ``perturb``
    reruns the stuck stage internally when not given one.
    """
    if which not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {which!r}; choose from {EXPERIMENTS}")
    vanilla_cfg = paper_toy_config("none", seed=base_seed, **config_overrides)
    dig_cfg = paper_toy_config("dig", seed=base_seed, **config_overrides)
    bundle = ExperimentBundle(which, base_seed)

    if which == "stuck":
        result = train(vanilla_cfg, dataset)
        art = _artifact("vanilla", vanilla_cfg, result, dataset)
        bundle.runs.append(art)
        bundle.info["outcome"] = classify_outcome(art.report, result.log.diverged)
        bundle.info["init_gen_hash"] = snapshot_hash(result.init_gen)
        bundle.info["init_disc_hash"] = snapshot_hash(result.init_disc)
        bundle.info["stop_reason"] = result.log.stop_reason
        return bundle

    if which == "avoid":
        result = train(dig_cfg, dataset)
        art = _artifact("dig", dig_cfg, result, dataset)
        bundle.runs.append(art)
        bundle.info["outcome"] = classify_outcome(art.report, result.log.diverged)
        bundle.info["init_gen_hash"] = snapshot_hash(result.init_gen)
        bundle.info["init_disc_hash"] = snapshot_hash(result.init_disc)
        bundle.info["stop_reason"] = result.log.stop_reason
        return bundle

    if which == "perturb":
        if stuck is None:
            stuck = run_experiment("stuck", base_seed, dataset, **config_overrides)
        base = stuck.run("vanilla").result
        for i, var in enumerate(PERTURB_VARIANCES):
            noise_seed = np.random.SeedSequence([base_seed, 7001 + i])
            noisy_d = perturb_params(base.disc, var, noise_seed)
            result = train(vanilla_cfg, dataset, init_g=base.gen, init_d=noisy_d)
            art = _artifact(f"var{var:g}", vanilla_cfg, result, dataset,
                            note=f"noise variance {var:g} on discriminator")
            bundle.runs.append(art)
        bundle.info["classification"] = {
            r.name: classify_outcome(r.report, r.result.log.diverged)
            for r in bundle.runs}
        return bundle

    # escape
    if stuck is None:
        raise ExperimentDependencyError(
            "escape continues from a stuck run's end state; run the stuck "
            "experiment first and pass its bundle")
    base_art = stuck.run("vanilla")
    if not base_art.report.trapped:
        raise ExperimentPreconditionError(
            f"stuck run for seed {base_seed} is not trapped "
            f"(outcome: {classify_outcome(base_art.report, base_art.result.log.diverged)})")
    # continuations inherit the stuck run's constants exactly
    vanilla_cfg = replace(base_art.config, regularizer="none", lam=0.0)
    dig_cfg = replace(base_art.config, regularizer="dig", lam=1.0, alpha=1.0)
    trapped_mode = base_art.report.trapped_mode
    g2 = base_art.result.gen
    # Stationarity needs steps that scale with the gradient; Adam's
    # normalized updates oscillate at ~lr forever and never meet the
    # gradient tolerance, so this phase always runs plain momentum descent.
    opt_cfg = replace(dig_cfg, optimizer="sgd_momentum")
    d2, opt_info = train_discriminator_to_optimality(
        opt_cfg, dataset, g2, base_art.result.disc)
    gap = opt_info["norm_gap"]
    if gap >= ESCAPE_GAP_BOUND:
        raise ExperimentPreconditionError(
            f"gradient-norm gap {gap:.3e} at the optimized discriminator is "
            f"not below {ESCAPE_GAP_BOUND:g}; the escape comparison would be invalid")
    for name, cfg in (("vanilla", vanilla_cfg), ("dig", dig_cfg)):
        result = train(cfg, dataset, init_g=g2, init_d=d2)
        bundle.runs.append(_artifact(name, cfg, result, dataset))
    bundle.info.update(
        trapped_mode=trapped_mode,
        optimality=opt_info,
        start_gap=gap,
        start_gen_hash=snapshot_hash(g2),
        start_disc_hash=snapshot_hash(d2),
    )
    return bundle


# --- multi-seed studies ------------------------------------------------------


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _pool_map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    import multiprocessing as mp
    ctx = mp.get_context("fork")
    with ctx.Pool(min(workers, len(jobs))) as pool:
        return pool.map(fn, jobs)


@dataclass
class StudyRow:
    """Summary of one run in a regularizer-by-seed study."""

    regularizer: str
    seed: int
    lam: float
    covered_modes: int
    trapped: bool
    trapped_mode: int | None
    trapping_iter: int | None
    pre_trap_gap: float | None
    steady_gap: float
    final_gap: float
    diverged: bool
    final_fakes: list[float]


def _study_one(job) -> StudyRow:
    kind, seed, overrides = job
    cfg = paper_toy_config(kind, seed=seed, **overrides)
    dataset = TWO_POINT_DATASET
    result = train(cfg, dataset)
    report = coverage(result.final_fakes, dataset.points, cfg.coverage_eps)
    log = result.log
    trap_it, trap_mode = trapping_iteration(log, dataset.points, cfg.coverage_eps)
    pre_gap = None
    if trap_it is not None:
        lo = max(0, trap_it - 500)
        window = [g for it, g in zip(log.iterations, log.gap) if lo <= it < trap_it]
        if not window:  # trapped from the very start; use the first record
            window = log.gap[:1]
        pre_gap = float(np.mean(window))
    tail = max(1, len(log.gap) // 10)
    steady = float(np.mean(log.gap[-tail:])) if log.gap else float("nan")
    final = float(log.gap[-1]) if log.gap else float("nan")
    return StudyRow(
        regularizer=kind, seed=seed, lam=cfg.lam,
        covered_modes=report.covered_modes, trapped=report.trapped,
        trapped_mode=report.trapped_mode, trapping_iter=trap_it,
        pre_trap_gap=pre_gap, steady_gap=steady, final_gap=final,
        diverged=log.diverged, final_fakes=result.final_fakes.ravel().tolist())


def seed_study(regularizers: list[str], seeds: list[int],
               workers: int | None = None, **overrides) -> list[StudyRow]:
    """Train every regularizer on every seed; rows ordered by the input
    lists regardless of pool size."""
    jobs = [(kind, seed, overrides) for kind in regularizers for seed in seeds]
    return _pool_map(_study_one, jobs, workers or default_workers())
