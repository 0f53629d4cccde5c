"""Train-and-probe cells, the masking x balancing grid, and hyperparameter sweeps."""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Iterable, Sequence

import numpy as np

from .config import RunConfig
from .evaluate import linear_probe, minority_majority_split, tolerance, uniformity
from .synth import SyntheticBatch, generate_batch
from .trainer import TrainingDiverged, embed, train

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# (name, masking, balancing) -> train overrides
GRID_CELLS = (
    ("baseline", False, False, {"variant": "slidr"}),
    ("masking", True, False, {"variant": "knn"}),
    ("balancing", False, True, {"variant": "st", "k_percent": 0.0}),
    ("full", True, True, {"variant": "st"}),
)

ROW_FIELDS = (
    "cell", "seed", "variant", "masking", "balancing", "k_percent", "alpha_min",
    "overall_acc", "minority_acc", "majority_acc", "uniformity", "tolerance",
    "final_loss", "status",
)


def eval_batch(run: RunConfig) -> SyntheticBatch:
    """Class-balanced probe batch drawn from the run's scenario geometry."""
    sc = run.scenario
    balanced = replace(sc.balanced(), superpixels_per_batch=run.evaluation.per_class * sc.num_classes)
    return generate_batch(balanced, purpose="eval")


def run_cell(run: RunConfig, name: str = "cell") -> dict:
    """Train one configuration and probe its superpoint embeddings."""
    cfg = run.train
    row = {
        "cell": name, "seed": run.seed, "variant": cfg.variant,
        "masking": int(cfg.variant in ("knn", "st") and cfg.k_percent > 0),
        "balancing": int(cfg.variant == "st" and cfg.balance != "off"),
        "k_percent": cfg.k_percent, "alpha_min": cfg.alpha_min,
    }
    try:
        result = train(run.scenario, cfg)
    except TrainingDiverged as exc:
        logger.warning("cell %s seed %d diverged at step %d", name, run.seed, exc.step)
        return {**row, **dict.fromkeys(ROW_FIELDS[7:13], float("nan")), "status": f"diverged@{exc.step}"}
    ev = eval_batch(run)
    q = embed(result.model, ev)
    minority, majority = minority_majority_split(run.scenario.proportions, run.evaluation.minority_threshold)
    report = linear_probe(q, ev.class_labels, run.evaluation.ridge_lambda, split_seed=run.seed)
    report = report.with_groups(minority, majority)
    final = float(np.mean(result.losses[-10:]))
    return {
        **row,
        "overall_acc": report.overall_accuracy,
        "minority_acc": report.minority_mean,
        "majority_acc": report.majority_mean,
        "uniformity": uniformity(q),
        "tolerance": tolerance(q, ev.class_labels),
        "final_loss": final,
        "status": "ok",
    }


def _run_job(job):
    run, name = job
    return run_cell(run, name)


def workers() -> int:
    try:
        return max(1, int(os.environ.get("XMD_THREADS", "1")))
    except ValueError:
        return 1


def run_jobs(jobs: Sequence[tuple[RunConfig, str]]) -> list[dict]:
    """Run cells, in parallel when XMD_THREADS > 1; rows come back in job order."""
    n = min(workers(), len(jobs))
    if n <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_run_job, jobs))


def compare_jobs(run: RunConfig, seeds: Iterable[int]) -> list[tuple[RunConfig, str]]:
    jobs = []
    for name, _, _, overrides in GRID_CELLS:
        for seed in seeds:
            r = run.seeded(seed)
            jobs.append((replace(r, train=replace(r.train, **overrides)), name))
    return jobs


def sweep_jobs(run: RunConfig, seeds: Iterable[int], alpha_min: Sequence[float] = (),
               k_percent: Sequence[float] = ()) -> list[tuple[RunConfig, str]]:
    if not alpha_min and not k_percent:
        raise ValueError("sweep grid is empty")
    jobs = []
    for a in alpha_min:
        for seed in seeds:
            r = run.seeded(seed)
            jobs.append((replace(r, train=replace(r.train, variant="alpha", alpha_min=float(a))), f"alpha_min={a:g}"))
    for k in k_percent:
        for seed in seeds:
            r = run.seeded(seed)
            jobs.append((replace(r, train=replace(r.train, variant="knn", k_percent=float(k))), f"k={k:g}%"))
    return jobs


def format_csv(rows: list[dict], digest: str) -> str:
    buf = io.StringIO()
    buf.write(f"# schema={SCHEMA_VERSION} config_sha256={digest}\n")
    w = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def spread(rows: list[dict], prefix: str, seed: int, metric: str = "overall_acc") -> float:
    vals = [r[metric] for r in rows if r["cell"].startswith(prefix) and r["seed"] == seed]
    return float(max(vals) - min(vals))
