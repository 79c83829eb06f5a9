"""Pseudo-label simulator: scores the labelling rules on synthetic posteriors
whose noise level is controlled, independently of any training."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .pseudo import (UNLABELED, NoiseModel, classes_to_labels, generate_pseudo_labels, msst_pseudo_classes,
                     naive_pseudo_labels, pseudo_label_quality, simulate_class_probs, simulate_prob_fields)
from .scenes import SceneSpec, generate_scene, generate_scenes, render_density
from .surrogate import DEFAULT_RATIOS, ThresholdLadder, derive_mask_set, derive_thresholds

CSV_FIELDS = ("seed", "noise", "t_p", "method", "precision", "coverage", "emitted", "subset_violations")
SIM_METHODS = ("irast", "naive", "msst")


def worker_count(default: int = 1) -> int:
    """Worker cap from ``IRAB_THREADS`` (at least 1)."""
    raw = os.environ.get("IRAB_THREADS")
    if raw is None:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"IRAB_THREADS must be an integer, got {raw!r}") from None


def reference_ladder(spec: SceneSpec = SceneSpec(), ratios: Sequence[float] = DEFAULT_RATIOS,
                     n: int = 30, seed: int = 0, sigma: float = 1.5) -> ThresholdLadder:
    """Ladder derived from a fixed pool of generated scenes."""
    maps = [render_density(s, sigma, spec.factor) for s in generate_scenes(n, seed, spec)]
    return derive_thresholds(maps, ratios)


def subset_violations(irast, naive) -> int:
    """Emitted IRAST labels that naive thresholding does not emit identically."""
    mine = irast.labels != UNLABELED
    return int(np.sum(naive.labels[mine] != irast.labels[mine]))


def simulate_seed(seed: int, noise: NoiseModel, t_p: float, ladder: ThresholdLadder,
                  spec: SceneSpec = SceneSpec(), sigma: float = 1.5) -> list:
    """Rows for one seed: the scene, the noise draw and the rules share it."""
    scene = generate_scene(int(np.random.default_rng([seed, 7]).integers(2**31 - 1)), spec)
    density = render_density(scene, sigma, spec.factor)
    truth = derive_mask_set(density, ladder)
    model = NoiseModel(noise.kind, noise.magnitude, seed)
    fields = simulate_prob_fields(density, ladder, model)
    irast = generate_pseudo_labels(fields, t_p)
    naive = naive_pseudo_labels(fields, t_p)
    classes = msst_pseudo_classes(simulate_class_probs(density, ladder, model), t_p)
    msst = classes_to_labels(classes, len(ladder))
    tag = f"{noise.kind}:{noise.magnitude:g}"
    violations = subset_violations(irast, naive)
    rows = []
    for method, labels in (("irast", irast), ("naive", naive), ("msst", msst)):
        q = pseudo_label_quality(labels, truth)
        rows.append({"seed": seed, "noise": tag, "t_p": t_p, "method": method,
                     "precision": q["precision"], "coverage": q["coverage"], "emitted": q["emitted"],
                     "subset_violations": violations if method == "irast" else 0})
    return rows


def _one(args):
    return simulate_seed(*args)


def run_simulation(noise: NoiseModel, t_p: float = 0.9, seeds: Iterable[int] = range(100),
                   spec: SceneSpec = SceneSpec(), ratios: Sequence[float] = DEFAULT_RATIOS,
                   sigma: float = 1.5, workers: Optional[int] = None) -> list:
    ladder = reference_ladder(spec, ratios, sigma=sigma)
    jobs = [(int(s), noise, float(t_p), ladder, spec, sigma) for s in seeds]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            chunks = list(ex.map(_one, jobs))
    else:
        chunks = [_one(j) for j in jobs]
    return [row for chunk in chunks for row in chunk]


def summarize(rows: Sequence[dict]) -> dict:
    """Mean precision and coverage per method, plus total subset violations."""
    out = {}
    for method in SIM_METHODS:
        sel = [r for r in rows if r["method"] == method]
        if sel:
            out[method] = {"precision": float(np.mean([r["precision"] for r in sel])),
                           "coverage": float(np.mean([r["coverage"] for r in sel])),
                           "subset_violations": int(sum(r["subset_violations"] for r in sel))}
    return out


def write_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return path
