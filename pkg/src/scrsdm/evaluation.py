"""Alignment error metrics and the multi-initialization evaluation protocol."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .align import fit
from .dataio import AnnotatedSample, LandmarkScheme, interocular_distance
from .training import CascadeModel, PerturbationParams, generate_perturbations

CED_THRESHOLDS = np.round(np.arange(151) * 0.1, 1)  # 0..15% in 0.1% steps


def normalized_error(pred: np.ndarray, gt: np.ndarray, scheme: LandmarkScheme) -> float:
    """Mean point-to-point distance as a percentage of the ground-truth inter-ocular distance."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return 100.0 * float(np.mean(np.linalg.norm(pred - gt, axis=1))) / interocular_distance(gt, scheme)


def ced(errors: Sequence[float], thresholds: np.ndarray = CED_THRESHOLDS) -> np.ndarray:
    """Fraction of errors at or below each threshold."""
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    return np.searchsorted(errors, thresholds, side="right") / max(len(errors), 1)


@dataclass
class EvalReport:
    rows: list[tuple[str, int, float, float]]  # sample_id, init_idx, init_error, error

    @property
    def errors(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows])

    @property
    def init_errors(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    def summary(self) -> dict:
        e = self.errors
        per_image = {}
        for sid, _, _, err in self.rows:
            per_image.setdefault(sid, []).append(err)
        img_means = np.array([np.mean(v) for v in per_image.values()])
        return {
            "n_rows": len(self.rows),
            "n_images": len(per_image),
            "mean": float(np.mean(e)),
            "median": float(np.median(e)),
            "std": float(np.std(e)),
            "per_image_mean": float(np.mean(img_means)),
            "init_mean": float(np.mean(self.init_errors)),
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "errors.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["sample_id", "init_idx", "init_error_percent", "error_percent"])
            for sid, j, e0, e in self.rows:
                w.writerow([sid, j, f"{e0:.6f}", f"{e:.6f}"])
        with open(out / "ced.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["threshold_percent", "fraction"])
            for t, frac in zip(CED_THRESHOLDS, ced(self.errors)):
                w.writerow([f"{t:.2f}", f"{frac:.6f}"])
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def evaluation_inits(model: CascadeModel, test: Sequence[AnnotatedSample], n_inits: int, seed: int,
                     pert: PerturbationParams | None = None) -> np.ndarray:
    """Seeded initial shapes ``(N, n_inits, P, 2)``; identical for any two models sharing mean shape and seed."""
    if pert is None:
        pert = PerturbationParams(**model.meta.get("perturbation", {}))
    return generate_perturbations(test, pert, model.mean_shape, model.scheme, n_inits, seed=seed)


def evaluate(model: CascadeModel, test: Sequence[AnnotatedSample], n_inits: int = 20, seed: int = 0,
             pert: PerturbationParams | None = None, inits: np.ndarray | None = None) -> EvalReport:
    """Fit every test image from ``n_inits`` perturbed initializations.

    Pass ``inits`` to share exactly the same starting shapes between models.
    """
    if n_inits < 1:
        raise ValueError("n_inits must be >= 1")
    if inits is None:
        inits = evaluation_inits(model, test, n_inits, seed, pert)
    extractor = model.extractor()
    rows = []
    for i, s in enumerate(test):
        for j in range(inits.shape[1]):
            res = fit(s.image, inits[i, j], model, extractor)
            rows.append((s.id, j, normalized_error(inits[i, j], s.ground_truth, model.scheme),
                         normalized_error(res.final, s.ground_truth, model.scheme)))
    return EvalReport(rows)
