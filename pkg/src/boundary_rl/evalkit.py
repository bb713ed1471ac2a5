"""Scoring harness: Dice overlap, Welch's t-test, the sliding-window
classifier baseline, and the multi-method evaluation report."""

import csv
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats as scipy_stats

from .classifier import patch_slices


class ZeroVarianceError(ValueError):
    """Welch's test is undefined for two constant samples with equal means."""


@dataclass
class EvalReport:
    method: str
    image_ids: list
    dice_scores: np.ndarray
    mean: float
    std: float
    runtime_seconds: float


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); two empty masks count as identical (1.0)."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def t_test(samples_a, samples_b):
    """Welch's unequal-variance two-sample t-test, two-tailed.

    Returns (t, p). Sign convention: positive t means mean(a) > mean(b).
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least 2 observations")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    se2 = va / len(a) + vb / len(b)
    diff = a.mean() - b.mean()
    if se2 == 0.0:
        if diff == 0.0:
            raise ZeroVarianceError(
                "both samples constant with equal means; t is undefined")
        return float(np.sign(diff) * np.inf), 0.0
    t = diff / np.sqrt(se2)
    dof = se2 ** 2 / (
        (va / len(a)) ** 2 / (len(a) - 1) + (vb / len(b)) ** 2 / (len(b) - 1))
    p = 2.0 * float(scipy_stats.t.sf(abs(t), dof))
    return float(t), p


def sliding_window_segment(image: np.ndarray, classifier, stride: int,
                           threshold: float = 0.5) -> np.ndarray:
    """Classic sliding-window inference: every patch on the stride grid
    casts its presence probability over its footprint; per-pixel averages
    above `threshold` form the mask."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = image.shape
    p = classifier.patch_size
    half = p // 2
    prob_sum = np.zeros((h, w))
    counts = np.zeros((h, w))
    for ci in range(half, h - p + half + 1, stride):
        for cj in range(half, w - p + half + 1, stride):
            si, sj = patch_slices((ci, cj), p)
            prob = float(classifier.predict_proba(image[si, sj],
                                                  center=(ci, cj)))
            prob_sum[si, sj] += prob
            counts[si, sj] += 1.0
    avg = np.divide(prob_sum, counts, out=np.zeros_like(prob_sum),
                    where=counts > 0)
    return avg > threshold


def evaluate(dataset, methods, out_dir=None):
    """Score each method (name -> phantom -> mask) over the dataset.

    Returns (reports, tests) where tests maps (method_a, method_b) to
    (t, p). With out_dir set, writes results.csv, summary.csv and
    tests.csv with deterministic formatting.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if isinstance(methods, dict):
        methods = list(methods.items())
    reports = []
    for name, segmenter in methods:
        start = time.perf_counter()
        scores = np.array([dice(segmenter(p), p.mask) for p in dataset])
        elapsed = time.perf_counter() - start
        reports.append(EvalReport(
            method=name, image_ids=list(range(len(dataset))),
            dice_scores=scores, mean=float(scores.mean()),
            std=float(scores.std(ddof=1)) if len(scores) > 1 else 0.0,
            runtime_seconds=elapsed))
    tests = {}
    for i in range(len(reports)):
        for j in range(i + 1, len(reports)):
            a, b = reports[i], reports[j]
            tests[(a.method, b.method)] = t_test(a.dice_scores, b.dice_scores)
    if out_dir is not None:
        write_reports(out_dir, reports, tests)
    return reports, tests


def write_reports(out_dir, reports, tests) -> None:
    import os

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "image_id", "dice"])
        for report in reports:
            for image_id, score in zip(report.image_ids, report.dice_scores):
                writer.writerow([report.method, image_id, f"{score:.6f}"])
    # runtime stays out of the CSVs so identical runs produce identical bytes
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "mean_dice", "std_dice", "n_images"])
        for report in reports:
            writer.writerow([report.method, f"{report.mean:.6f}",
                             f"{report.std:.6f}", len(report.image_ids)])
    with open(os.path.join(out_dir, "tests.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method_a", "method_b", "t_value", "p_value"])
        for (name_a, name_b), (t, p) in sorted(tests.items()):
            writer.writerow([name_a, name_b, f"{t:.6f}", f"{p:.6f}"])
