"""Runtime fitting of a trained cascade."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .dataio import interocular_distance
from .features import extract_shape_features, presmooth
from .training import CascadeModel


@dataclass
class FitResult:
    final: np.ndarray
    per_stage: list[np.ndarray]
    timings: list[float]


def fit(image: np.ndarray, init: np.ndarray, model: CascadeModel, extractor=None) -> FitResult:
    """Run every stage: extract features at the current shape, regress an
    update, rescale it by the initial shape's inter-ocular distance, add it.

    The image is blurred with the model's ``smooth_sigma`` first, as in training.
    """
    init = np.asarray(init, dtype=np.float64)
    if init.shape != (model.scheme.n_points, 2):
        raise ValueError(f"initial shape must have {model.scheme.n_points} points, got {init.shape}")
    extractor = extractor or model.extractor()
    image = presmooth(image, model.smooth_sigma)
    scale = interocular_distance(init, model.scheme)
    x = init.copy()
    shapes, timings = [], []
    for k, stage in enumerate(model.stages):
        t0 = time.perf_counter()
        phi = extract_shape_features(image, x, extractor)
        dx = stage.predict(phi) * scale
        if not np.all(np.isfinite(dx)):
            raise FloatingPointError(f"stage {k + 1} produced a non-finite update")
        x = x + dx.reshape(-1, 2)
        timings.append(time.perf_counter() - t0)
        shapes.append(x)
    return FitResult(shapes[-1] if shapes else x, shapes, timings)
