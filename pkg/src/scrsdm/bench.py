"""Timing harness: dense vs composed regressor apply, SIFT vs BASIFT extraction.

Timings are single-threaded by default (BLAS pools are capped to one thread
for the duration of a run) so that the comparison reflects the algorithms.
"""

from __future__ import annotations

import contextlib
import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import features as F
from .dataio import canonical_scheme
from .scr import SparseComposition, build_paper_structure, densify, flop_count


@dataclass
class Timing:
    case: str
    median_ns: float
    p10_ns: float
    p90_ns: float
    flops: int | None = None

    def row(self):
        return [self.case, f"{self.median_ns:.1f}", f"{self.p10_ns:.1f}", f"{self.p90_ns:.1f}",
                "" if self.flops is None else str(self.flops)]


@contextlib.contextmanager
def single_threaded(enabled: bool = True):
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=1):
        yield


def time_call(fn, reps: int, warmup: int = 50) -> np.ndarray:
    """Per-call wall-clock samples in nanoseconds (warm-up calls discarded)."""
    for _ in range(warmup):
        fn()
    out = np.empty(reps)
    clock = time.perf_counter_ns
    for i in range(reps):
        t0 = clock()
        fn()
        out[i] = clock() - t0
    return out


def _timing(case, samples, flops=None) -> Timing:
    p10, med, p90 = np.percentile(samples, [10, 50, 90])
    return Timing(case, float(med), float(p10), float(p90), flops)


def bench_regressor(composition: SparseComposition | None = None, reps: int = 1000, seed: int = 0,
                    single_thread: bool = True, rtol: float = 1e-9) -> list[Timing]:
    """Time ``R @ v`` for the dense product and the nested composition.

    The two operators are checked to agree (``rtol``) before timing.
    """
    if reps < 100:
        raise ValueError("reps must be >= 100")
    rng = np.random.default_rng(seed)
    if composition is None:
        composition = build_paper_structure(canonical_scheme(), rng=rng, init="scaled_random")
    dense = np.ascontiguousarray(densify(composition))
    v = rng.normal(size=composition.in_dim)
    ref = dense @ v
    got = composition.apply(v)
    if np.max(np.abs(got - ref)) > rtol * max(np.max(np.abs(ref)), 1e-300):
        raise AssertionError("composed and dense regressors disagree; refusing to time unequal operators")
    with single_threaded(single_thread):
        td = time_call(lambda: dense @ v, reps)
        tc = time_call(lambda: composition.apply(v), reps)
    return [_timing("dense", td, flop_count(dense)), _timing("composed", tc, flop_count(composition))]


def bench_features(model: F.BasiftModel | None = None, n_patches: int = 10000, seed: int = 0,
                   single_thread: bool = True, images=None, batch: int = 49, passes: int = 3) -> list[Timing]:
    """Per-patch extraction time of reference SIFT and BASIFT on the same patches.

    Patches are extracted ``batch`` at a time (one face's worth for the
    49-point scheme), as the fitter does; each sample is one batch's time
    divided by its size. Every pass walks the whole patch list. A per-stage
    breakdown (gradients, binning, accumulation or histogram) is timed on the
    first batch. Without a trained model a random sign map is used; speed
    does not depend on its values.
    """
    if n_patches < 1000:
        raise ValueError("n_patches must be >= 1000")
    if not 1 <= batch <= n_patches:
        raise ValueError("batch must be in [1, n_patches]")
    rng = np.random.default_rng(seed)
    if images is None:
        images = F.builtin_natural_images()
    patches = F.sample_patches(images, n_patches, seed=seed)
    if model is None:
        model = F.BasiftModel(rng.integers(-1, 2, size=(F.D_SIFT, 32 * 32 * F.N_BINS)))
    starts = range(0, n_patches - batch + 1, batch)

    def per_patch(fn):
        fn(patches[:batch])
        out = []
        clock = time.perf_counter_ns
        for _ in range(passes):
            for s in starts:
                chunk = patches[s:s + batch]
                t0 = clock()
                fn(chunk)
                out.append((clock() - t0) / batch)
        return np.array(out)

    def staged(fn, reps=200):
        return time_call(fn, reps, warmup=5) / batch

    stack = patches[:batch]
    gx, gy = F.gradients(stack)
    active = F.basift_active(stack, model.lut)
    with single_threaded(single_thread):
        out = [
            _timing("sift", per_patch(F.reference_sift)),
            _timing("basift", per_patch(lambda p: F.basift_extract(p, model))),
            _timing("stage:gradients", staged(lambda: F.gradients(stack))),
            _timing("stage:sift_histogram", staged(lambda: F.sift_histogram(gx, gy))),
            _timing("stage:basift_binning", staged(lambda: model.lut[F.orientation_codes(gx, gy)])),
            _timing("stage:basift_accumulate", staged(lambda: F.basift_accumulate(active, model))),
        ]
    return out


def write_csv(timings: list[Timing], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["case", "median_ns", "p10", "p90", "flops"])
        for t in timings:
            w.writerow(t.row())
