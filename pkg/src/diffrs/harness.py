"""Experiment driver: train, calibrate, sample, evaluate, and write artifacts.

Every byte of output except the manifest timestamp is determined by
(config, seed): floats are serialized with repr, orderings are fixed, and
per-run randomness derives from named substreams of the run seed.  The
DIFFRS_THREADS environment variable caps the worker pool that executes
independent (strategy, seed) runs; results are merged in fixed order so the
thread count never changes the output.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ExperimentConfig,
    build_model,
    build_schedule,
    build_target,
    config_to_toml,
)
from .diffusion import ChainRecord, DiffusionModel
from .discriminator import (
    DiscriminatorModel,
    TrainConfig,
    init_discriminator,
    load_checkpoint,
    save_checkpoint,
    train_discriminator,
)
from .evaluation import (
    energy_distance,
    estimate_acceptance_term,
    estimate_kl_bound,
    sliced_wasserstein,
    summarize_run,
)
from .gmm import GaussianMixture, save_gmm
from .rejection import (
    DiscriminatorRatio,
    OracleRatio,
    RejectionConstants,
    Strategy,
    calibrate_constants,
    diffrs_sample,
    save_constants,
)
from .schedule import NoiseSchedule

# named substreams hanging off each run seed
_STREAM_DATA = 11
_STREAM_DISC = 23
_STREAM_CALIB = 37
_STREAM_EVAL = 53

METRICS_COLUMNS = [
    "run_id",
    "seed",
    "strategy",
    "gamma",
    "estimator_mode",
    "mean_nfe",
    "mean_disc_nfe",
    "sw_dist",
    "energy_dist",
    "J_hat",
    "J_se",
    "R_hat",
    "R_se",
    "violation_rate",
]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def worker_count() -> int:
    raw = os.environ.get("DIFFRS_THREADS", "1")
    try:
        return max(int(raw), 1)
    except ValueError:
        return 1


# ----------------------------------------------------------------------
# artifact writers
# ----------------------------------------------------------------------

def write_samples_csv(path, records: list[ChainRecord]) -> None:
    dim = len(records[0].x)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(dim)] + ["chain_id", "nfe_model", "nfe_disc"])
        for i, rec in enumerate(records):
            writer.writerow(
                [_fmt(float(v)) for v in rec.x] + [i, rec.nfe_model, rec.nfe_disc]
            )


def write_events_csv(path, records: list[ChainRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain_id", "step_index", "t", "kind", "log_L"])
        for i, rec in enumerate(records):
            for j, ev in enumerate(rec.events):
                writer.writerow([i, j, ev.t, ev.kind, _fmt(float(ev.log_L))])


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_matrix_csv(path, header: list[str], rows: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in np.atleast_2d(rows):
            writer.writerow([_fmt(float(v)) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.array([[float(v) for v in row] for row in reader])


# ----------------------------------------------------------------------
# pipeline stages
# ----------------------------------------------------------------------

@dataclass
class Bench:
    """Everything derived from the config that the stages share."""

    cfg: ExperimentConfig
    q0: GaussianMixture
    model: DiffusionModel
    schedule: NoiseSchedule


def build_bench(cfg: ExperimentConfig) -> Bench:
    q0 = build_target(cfg.target)
    return Bench(
        cfg=cfg, q0=q0, model=build_model(cfg, q0), schedule=build_schedule(cfg.schedule)
    )


def generate_training_data(bench: Bench) -> tuple[np.ndarray, np.ndarray]:
    """Real draws from the target; generated draws from the plain sampler."""
    from .diffusion import base_sample_batch

    cfg = bench.cfg
    rng = np.random.default_rng([cfg.seed, _STREAM_DATA])
    real = bench.q0.sample(rng, cfg.discriminator.n_train_real)
    fake = base_sample_batch(
        bench.model, bench.schedule, cfg.discriminator.n_train_fake, rng
    )[-1]
    return real, fake


def train_disc_stage(bench: Bench, real: np.ndarray, fake: np.ndarray):
    cfg = bench.cfg
    d = bench.q0.dim
    spec = cfg.discriminator
    model = init_discriminator(
        [d + 2 * spec.num_frequencies] + list(spec.hidden),
        num_frequencies=spec.num_frequencies,
        seed=cfg.seed,
    )
    train_cfg = TrainConfig(
        epochs=spec.epochs,
        batch=spec.batch,
        lr=spec.lr,
        lambda_rule=spec.lambda_rule,
        seed=int(np.random.SeedSequence([cfg.seed, _STREAM_DISC]).generate_state(1)[0]),
    )
    oracle = OracleRatio(bench.q0, bench.model.p0, bench.schedule)

    def oracle_fn(x, t):
        return oracle.log_ratio_batch(x, t)

    return train_discriminator(
        model, real, fake, bench.schedule, train_cfg, oracle_log_ratio_fn=oracle_fn
    )


def build_estimator(bench: Bench, disc: DiscriminatorModel | None):
    cfg = bench.cfg
    if cfg.estimator == "oracle":
        return OracleRatio(
            bench.q0, bench.model.p0, bench.schedule, terminal=cfg.terminal_ratio
        )
    if disc is None:
        raise RuntimeError("discriminator estimator requested but no trained model")
    return DiscriminatorRatio(disc, bench.schedule)


def calibrate_stage(bench: Bench, estimator, run_seed: int) -> RejectionConstants:
    cfg = bench.cfg
    return calibrate_constants(
        bench.model,
        bench.schedule,
        estimator,
        cfg.n_calib,
        cfg.gamma,
        seed=[run_seed, _STREAM_CALIB],
        max_evals=cfg.resolved_max_evals(),
    )


def evaluate_run(
    bench: Bench,
    estimator,
    strategy: Strategy,
    run_seed: int,
    samples: np.ndarray,
    records: list[ChainRecord],
) -> dict:
    cfg = bench.cfg
    rng = np.random.default_rng([run_seed, _STREAM_EVAL])
    reference = bench.q0.sample(rng, cfg.evaluation.n_reference)
    summary = summarize_run(records)
    row = {
        "run_id": f"{strategy.value}-{run_seed}",
        "seed": run_seed,
        "strategy": strategy.value,
        "gamma": cfg.gamma,
        "estimator_mode": cfg.estimator,
        "mean_nfe": summary.mean_nfe_model,
        "mean_disc_nfe": summary.mean_nfe_disc,
        "sw_dist": sliced_wasserstein(
            samples, reference, cfg.evaluation.n_projections, rng
        ),
        "energy_dist": energy_distance(samples, reference),
        "J_hat": math.nan,
        "J_se": math.nan,
        "R_hat": math.nan,
        "R_se": math.nan,
        "violation_rate": summary.violation_rate,
    }
    n_mc = cfg.evaluation.n_bound_mc
    if n_mc > 0:
        if bench.model.kernel_mode == "exact_reverse":
            j = estimate_kl_bound(
                bench.q0, bench.model, bench.schedule, n_mc, seed=[run_seed, _STREAM_EVAL, 1]
            )
            row["J_hat"], row["J_se"] = j.value, j.mc_std_error
        r = estimate_acceptance_term(
            bench.q0, bench.model, bench.schedule, estimator, n_mc,
            seed=[run_seed, _STREAM_EVAL, 2],
        )
        row["R_hat"], row["R_se"] = r.value, r.mc_std_error
    return row


# ----------------------------------------------------------------------
# the experiment driver
# ----------------------------------------------------------------------

def _manifest(cfg: ExperimentConfig, status: str, artifacts: list[str]) -> dict:
    return {
        "config_hash": hashlib.sha256(config_to_toml(cfg).encode()).hexdigest(),
        "versions": {
            "diffrs": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "created_at": datetime.now(timezone.utc).isoformat(),
        "seed": cfg.seed,
        "n_seeds": cfg.n_seeds,
        "gamma": cfg.gamma,
        "K": cfg.resolved_max_evals(),
        "estimator_mode": cfg.estimator,
        "strategies": list(cfg.strategies),
        "status": status,
        "artifacts": sorted(artifacts),
    }


def _write_manifest(out: Path, manifest: dict) -> None:
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def _summary_dict(records: list[ChainRecord]) -> dict:
    s = summarize_run(records)
    return {
        "n_chains": s.n_chains,
        "mean_nfe_model": s.mean_nfe_model,
        "std_nfe_model": s.std_nfe_model,
        "mean_nfe_disc": s.mean_nfe_disc,
        "std_nfe_disc": s.std_nfe_disc,
        "violation_rate": s.violation_rate,
        "n_restarts": s.n_restarts,
        "acceptance_rate": [None if not np.isfinite(r) else r for r in s.acceptance_rate],
        "reinit_depth_hist": {str(k): v for k, v in sorted(s.reinit_depth_hist.items())},
    }


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Full pipeline over every (strategy, seed) pair; returns the manifest.

    Any stage failure writes a manifest flagging the partial outputs, then
    re-raises with the stage name attached.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts: list[str] = []
    stage = "setup"
    try:
        bench = build_bench(cfg)
        disc = None
        if cfg.estimator == "disc":
            stage = "train-disc"
            real, fake = generate_training_data(bench)
            disc, report = train_disc_stage(bench, real, fake)
            save_checkpoint(disc, out / "disc.json")
            artifacts.append("disc.json")
            with open(out / "train_report.json", "w") as fh:
                json.dump(
                    {
                        "epoch_losses": report.epoch_losses,
                        "logit_oracle_corr": report.logit_oracle_corr,
                    },
                    fh,
                )
            artifacts.append("train_report.json")
        estimator = build_estimator(bench, disc)

        runs = [
            (Strategy(name), run_seed)
            for name in cfg.strategies
            for run_seed in cfg.run_seeds()
        ]
        nested = len(runs) > 1
        stage = "calibrate"
        constants_by_seed = {
            run_seed: calibrate_stage(bench, estimator, run_seed)
            for run_seed in cfg.run_seeds()
        }

        stage = "sample"

        def one_run(args):
            strategy, run_seed = args
            samples, records = diffrs_sample(
                bench.model,
                bench.schedule,
                estimator,
                constants_by_seed[run_seed],
                strategy,
                cfg.n_chains,
                seed=run_seed,
            )
            row = evaluate_run(bench, estimator, strategy, run_seed, samples, records)
            return samples, records, row

        workers = worker_count()
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(one_run, runs))
        else:
            results = [one_run(r) for r in runs]

        stage = "eval"
        rows = []
        for (strategy, run_seed), (samples, records, row) in zip(runs, results):
            run_dir = out / "runs" / row["run_id"] if nested else out
            run_dir.mkdir(parents=True, exist_ok=True)
            write_samples_csv(run_dir / "samples.csv", records)
            write_events_csv(run_dir / "events.csv", records)
            save_constants(constants_by_seed[run_seed], run_dir / "constants.json")
            with open(run_dir / "summary.json", "w") as fh:
                json.dump(_summary_dict(records), fh, indent=1, sort_keys=True)
            rel = str((run_dir / "samples.csv").relative_to(out).parent)
            for name in ("samples.csv", "events.csv", "constants.json", "summary.json"):
                artifacts.append(name if rel == "." else f"{rel}/{name}")
            rows.append(row)
        write_metrics_csv(out / "metrics.csv", rows)
        artifacts.append("metrics.csv")
    except Exception as exc:
        manifest = _manifest(cfg, f"failed: {stage}", artifacts)
        _write_manifest(out, manifest)
        raise RuntimeError(f"[{stage}] {exc}") from exc
    manifest = _manifest(cfg, "complete", artifacts + ["manifest.json"])
    _write_manifest(out, manifest)
    return manifest


# ----------------------------------------------------------------------
# single-purpose stages used by the command-line tool
# ----------------------------------------------------------------------

def stage_gen_data(cfg: ExperimentConfig, out_dir=None) -> list[str]:
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = build_bench(cfg)
    real, fake = generate_training_data(bench)
    save_gmm(bench.q0, out / "target.json")
    save_gmm(bench.model.p0, out / "model.json")
    dim = bench.q0.dim
    header = [f"x{i}" for i in range(dim)]
    write_matrix_csv(out / "real_x0.csv", header, real)
    write_matrix_csv(out / "fake_x0.csv", header, fake)
    return ["target.json", "model.json", "real_x0.csv", "fake_x0.csv"]


def stage_train_disc(cfg: ExperimentConfig, out_dir=None) -> list[str]:
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = build_bench(cfg)
    real_path = out / "real_x0.csv"
    if real_path.exists():
        real = read_matrix_csv(real_path)
        fake = read_matrix_csv(out / "fake_x0.csv")
    else:
        real, fake = generate_training_data(bench)
    disc, report = train_disc_stage(bench, real, fake)
    save_checkpoint(disc, out / "disc.json")
    with open(out / "train_report.json", "w") as fh:
        json.dump(
            {
                "epoch_losses": report.epoch_losses,
                "logit_oracle_corr": report.logit_oracle_corr,
            },
            fh,
        )
    return ["disc.json", "train_report.json"]


def _estimator_for_stage(cfg: ExperimentConfig, bench: Bench, out: Path):
    disc = None
    if cfg.estimator == "disc":
        path = out / "disc.json"
        if not path.exists():
            raise RuntimeError(
                "discriminator estimator requested but disc.json is missing; "
                "run the train-disc stage first"
            )
        disc = load_checkpoint(path)
    return build_estimator(bench, disc)


def stage_calibrate(cfg: ExperimentConfig, out_dir=None) -> list[str]:
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = build_bench(cfg)
    estimator = _estimator_for_stage(cfg, bench, out)
    constants = calibrate_stage(bench, estimator, cfg.seed)
    save_constants(constants, out / "constants.json")
    return ["constants.json"]


def stage_sample(cfg: ExperimentConfig, out_dir=None) -> list[str]:
    from .rejection import load_constants

    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = build_bench(cfg)
    estimator = _estimator_for_stage(cfg, bench, out)
    constants_path = out / "constants.json"
    if constants_path.exists():
        constants = load_constants(constants_path)
    else:
        constants = calibrate_stage(bench, estimator, cfg.seed)
        save_constants(constants, constants_path)
    strategy = Strategy(cfg.strategies[0])
    samples, records = diffrs_sample(
        bench.model, bench.schedule, estimator, constants, strategy,
        cfg.n_chains, seed=cfg.seed,
    )
    write_samples_csv(out / "samples.csv", records)
    write_events_csv(out / "events.csv", records)
    with open(out / "summary.json", "w") as fh:
        json.dump(_summary_dict(records), fh, indent=1, sort_keys=True)
    return ["samples.csv", "events.csv", "constants.json", "summary.json"]


def stage_eval(cfg: ExperimentConfig, out_dir=None) -> list[str]:
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    bench = build_bench(cfg)
    estimator = _estimator_for_stage(cfg, bench, out)
    run_dirs = []
    if (out / "samples.csv").exists():
        run_dirs.append((Strategy(cfg.strategies[0]), cfg.seed, out))
    elif (out / "runs").is_dir():
        for strategy_name in cfg.strategies:
            for run_seed in cfg.run_seeds():
                run_dir = out / "runs" / f"{strategy_name}-{run_seed}"
                if run_dir.is_dir():
                    run_dirs.append((Strategy(strategy_name), run_seed, run_dir))
    if not run_dirs:
        raise RuntimeError("no sampled runs found; run the sample stage first")
    rows = []
    for strategy, run_seed, run_dir in run_dirs:
        data = read_matrix_csv(run_dir / "samples.csv")
        dim = bench.q0.dim
        samples = data[:, :dim]
        nfe_model = data[:, dim + 1]
        nfe_disc = data[:, dim + 2]
        rng = np.random.default_rng([run_seed, _STREAM_EVAL])
        reference = bench.q0.sample(rng, cfg.evaluation.n_reference)
        with open(run_dir / "summary.json") as fh:
            summary = json.load(fh)
        rows.append(
            {
                "run_id": f"{strategy.value}-{run_seed}",
                "seed": run_seed,
                "strategy": strategy.value,
                "gamma": cfg.gamma,
                "estimator_mode": cfg.estimator,
                "mean_nfe": float(nfe_model.mean()),
                "mean_disc_nfe": float(nfe_disc.mean()),
                "sw_dist": sliced_wasserstein(
                    samples, reference, cfg.evaluation.n_projections, rng
                ),
                "energy_dist": energy_distance(samples, reference),
                "J_hat": math.nan,
                "J_se": math.nan,
                "R_hat": math.nan,
                "R_se": math.nan,
                "violation_rate": summary["violation_rate"],
            }
        )
    write_metrics_csv(out / "metrics.csv", rows)
    return ["metrics.csv"]


def sweep_gamma(
    cfg: ExperimentConfig, gammas=(30.0, 50.0, 70.0, 85.0), out_dir=None
) -> list[dict]:
    """Constants from one shared calibration pass per seed, swept over the
    percentile; emits one metrics row per (gamma, seed) plus sweep.csv."""
    from .rejection import collect_calibration_ratios, constants_from_trace

    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = build_bench(cfg)
    estimator = _estimator_for_stage(cfg, bench, out)
    rows = []
    for run_seed in cfg.run_seeds():
        trace = collect_calibration_ratios(
            bench.model, bench.schedule, estimator, cfg.n_calib,
            seed=[run_seed, _STREAM_CALIB],
        )
        for gamma in gammas:
            constants = constants_from_trace(
                trace, gamma, max_evals=cfg.resolved_max_evals()
            )
            samples, records = diffrs_sample(
                bench.model, bench.schedule, estimator, constants,
                Strategy.FULL_DIFFRS, cfg.n_chains, seed=run_seed,
            )
            row = evaluate_run(
                bench, estimator, Strategy.FULL_DIFFRS, run_seed, samples, records
            )
            row["gamma"] = gamma
            row["run_id"] = f"gamma{gamma:g}-{run_seed}"
            rows.append(row)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gamma", "seed", "mean_nfe", "mean_disc_nfe", "sw_dist", "energy_dist", "violation_rate"])
        for row in rows:
            writer.writerow(
                [_fmt(row[c]) for c in ["gamma", "seed", "mean_nfe", "mean_disc_nfe", "sw_dist", "energy_dist", "violation_rate"]]
            )
    write_metrics_csv(out / "metrics.csv", rows)
    return rows
