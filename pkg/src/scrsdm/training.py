"""Cascade training: Monte-Carlo perturbations, SCR stages by masked gradient
descent with early stopping, and the dense ridge baseline.

Targets are shape updates ``x* - x`` divided by the inter-ocular distance of
the sample's initial shape, so losses are in the units of the evaluation
metric and the runtime fitter can undo the scaling without ground truth.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import scr
from .dataio import AnnotatedSample, LandmarkScheme, interocular_distance
from .features import extract_shape_features, presmooth

log = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class DivergenceError(RuntimeError):
    pass


@dataclass
class PerturbationParams:
    n_train_perturb: int = 5
    n_val_perturb: int = 2
    translate_sigma: float = 0.08
    scale_sigma: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_train_perturb < 1 or self.n_val_perturb < 1:
            raise ValueError("perturbation counts must be >= 1")
        if self.translate_sigma < 0 or self.scale_sigma < 0:
            raise ValueError("perturbation sigmas must be >= 0")


@dataclass
class TrainConfig:
    stages: int = 5
    learn_rate: float = 0.5
    max_iters: int = 400
    patience: int = 20
    batch: int | None = None
    init_mode: str = "scaled_random"
    momentum: float = 0.0
    lambda_bracket: tuple[float, float] = (1e-4, 1e2)
    center_features: bool = False
    smooth_sigma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if not self.learn_rate > 0:
            raise ValueError("learn_rate must be positive")
        if self.patience > self.max_iters:
            raise ValueError("patience must not exceed max_iters")
        if self.init_mode not in ("zeros", "scaled_random", "ridge_projected"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.smooth_sigma < 0:
            raise ValueError("smooth_sigma must be >= 0")
        lo, hi = self.lambda_bracket
        if not 0 < lo < hi:
            raise ValueError("lambda_bracket must satisfy 0 < lo < hi")
        self.lambda_bracket = (float(lo), float(hi))


@dataclass
class RegressionProblem:
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.features) != len(self.targets):
            raise ValueError("features and targets must have the same number of rows")

    @property
    def n(self) -> int:
        return len(self.features)


# -- shapes ---------------------------------------------------------------------

def similarity_fit(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares similarity transform of ``src`` onto ``dst``; returns the moved ``src``."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    var = np.sum(a**2)
    if var == 0:
        return np.broadcast_to(mu_d, src.shape).copy()
    # 2-D similarity as complex multiplication z -> c z
    za = a[:, 0] + 1j * a[:, 1]
    zb = b[:, 0] + 1j * b[:, 1]
    c = np.vdot(za, zb) / var
    z = c * za
    return np.stack([z.real, z.imag], axis=1) + mu_d


def mean_shape(shapes: Sequence[np.ndarray], scheme: LandmarkScheme) -> np.ndarray:
    """Average of shapes normalized to zero centroid and unit inter-ocular distance."""
    acc = np.zeros((scheme.n_points, 2))
    for s in shapes:
        acc += (s - s.mean(0)) / interocular_distance(s, scheme)
    acc /= len(shapes)
    return acc / interocular_distance(acc, scheme)


def generate_perturbations(samples: Sequence[AnnotatedSample], params: PerturbationParams, mean: np.ndarray,
                           scheme: LandmarkScheme, n: int | None = None, seed: int | None = None) -> np.ndarray:
    """Initial shapes ``(N, n, P, 2)``: the mean shape similarity-fit to each
    ground truth, then shifted by ``Normal(0, translate_sigma * IOD)`` per axis
    and scaled about its centroid by ``Normal(1, scale_sigma)``.
    """
    n = params.n_train_perturb if n is None else n
    rng = np.random.default_rng(params.rng_seed if seed is None else seed)
    noise = rng.standard_normal((len(samples), n, 3))
    out = np.empty((len(samples), n, scheme.n_points, 2))
    for i, s in enumerate(samples):
        fit = similarity_fit(mean, s.ground_truth)
        iod = interocular_distance(s.ground_truth, scheme)
        c = fit.mean(0)
        for j in range(n):
            t = noise[i, j, :2] * params.translate_sigma * iod
            k = 1.0 + noise[i, j, 2] * params.scale_sigma
            out[i, j] = (fit - c) * k + c + t
    return out


# -- problems ---------------------------------------------------------------------

def stage_problem(samples: Sequence[AnnotatedSample], current: np.ndarray, norm: np.ndarray, extractor) -> RegressionProblem:
    """Features at the current shapes and IOD-normalized residual targets.

    ``current`` is ``(N, n, P, 2)``; ``norm`` is ``(N, n)`` normalizers.
    """
    N, n = current.shape[:2]
    P = current.shape[2]
    feats = None
    targets = np.empty((N * n, 2 * P))
    for i, s in enumerate(samples):
        for j in range(n):
            phi = extract_shape_features(s.image, current[i, j], extractor)
            if feats is None:
                feats = np.empty((N * n, phi.size))
            feats[i * n + j] = phi
            targets[i * n + j] = ((s.ground_truth - current[i, j]) / norm[i, j]).reshape(-1)
    if feats is None:
        feats = np.empty((0, 0))
    return RegressionProblem(feats, targets)


def init_normalizers(inits: np.ndarray, scheme: LandmarkScheme) -> np.ndarray:
    a, b = scheme.interocular
    return np.linalg.norm(inits[:, :, a] - inits[:, :, b], axis=-1)


# -- SCR objective ------------------------------------------------------------------

def composition_loss(comp: scr.SparseComposition, problem: RegressionProblem) -> float:
    """``0.5 * mean_n ||target_n - R phi_n||^2``."""
    r = comp.apply(problem.features) - problem.targets
    return 0.5 * float(np.sum(r * r)) / problem.n


def composition_gradient(comp: scr.SparseComposition, problem: RegressionProblem):
    """Loss and its gradient with respect to every block payload.

    Each component's gradient is the full-product gradient restricted to its
    block support, so entries outside the support never appear.
    """
    acts = [problem.features]
    for c in comp.components:
        acts.append(c.apply(acts[-1]))
    r = acts[-1] - problem.targets
    loss = 0.5 * float(np.sum(r * r)) / problem.n
    g = r / problem.n
    grads = [None] * comp.L
    for li in range(comp.L - 1, -1, -1):
        c = comp.components[li]
        x = acts[li]
        if c.uniform:
            nb, rr, cc = c._stack.shape
            gb = g.reshape(-1, nb, rr).transpose(1, 2, 0)
            xb = x.reshape(-1, nb, cc).transpose(1, 0, 2)
            grads[li] = list(np.matmul(gb, xb))
        else:
            grads[li] = [g[:, b.row_slice].T @ x[:, b.col_slice] for b in c.blocks]
        if li:
            g = c.apply_transpose(g)
    return loss, grads


def dense_gradient(comp: scr.SparseComposition, problem: RegressionProblem) -> list[np.ndarray]:
    """Unmasked gradient of each factor treated as a full dense matrix (oracle)."""
    mats = [c.to_dense() for c in comp.components]
    acts = [problem.features]
    for m in mats:
        acts.append(acts[-1] @ m.T)
    g = (acts[-1] - problem.targets) / problem.n
    out = [None] * len(mats)
    for li in range(len(mats) - 1, -1, -1):
        out[li] = g.T @ acts[li]
        g = g @ mats[li]
    return out


def embed_gradient(comp: scr.SparseComposition, grads) -> list[np.ndarray]:
    """Place block gradients into dense factor-shaped arrays (zeros off-support)."""
    out = []
    for c, gl in zip(comp.components, grads):
        m = np.zeros(c.shape)
        for b, gb in zip(c.blocks, gl):
            m[b.row_slice, b.col_slice] = gb
        out.append(m)
    return out


@dataclass
class TrainTrace:
    iterations: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_iteration: int = 0

    @property
    def best_val_loss(self) -> float:
        return min(self.val_loss)

    def rows(self):
        return zip(self.iterations, self.train_loss, self.val_loss)


def _minibatches(n: int, batch: int | None, rng):
    if not batch or batch >= n:
        yield slice(None)
        return
    order = rng.permutation(n)
    for s in range(0, n, batch):
        yield order[s:s + batch]


def ridge_projected_init(template: scr.SparseComposition, R: np.ndarray) -> list[list[np.ndarray]]:
    """Factor a dense regressor ``R`` onto the template's three-component layout.

    Component 1 blocks take the leading right singular vectors of ``R``
    restricted to their columns; component 2 is recovered the same way from
    the reduced matrix, and component 3 is what remains. The three factors
    are then rescaled to equal spectral norm, which keeps gradient steps on
    each of them comparable.
    """
    if template.L != 3 or template.components[2].kind != scr.DENSE:
        raise ValueError("ridge_projected init needs a block, block, dense composition")
    c1, c2, _ = template.components

    def project(mat, comp):
        blocks = []
        reduced = np.zeros((mat.shape[0], comp.out_dim))
        for b in comp.blocks:
            _, _, vt = np.linalg.svd(mat[:, b.col_slice], full_matrices=False)
            basis = np.zeros((b.rows, b.cols))
            k = min(b.rows, vt.shape[0])
            basis[:k] = vt[:k]
            blocks.append(basis)
            reduced[:, b.row_slice] = mat[:, b.col_slice] @ basis.T
        return blocks, reduced

    p1, m1 = project(np.asarray(R, dtype=np.float64), c1)
    p2, m2 = project(m1, c2)
    top = float(np.linalg.norm(m2, 2))
    c = top ** (1.0 / 3.0) if top > 0 else 1.0
    return [[b * c for b in p1], [b * c for b in p2], [m2 / (c * c)]]


def train_stage_scr(problem: RegressionProblem, val: RegressionProblem, template: scr.SparseComposition,
                    cfg: TrainConfig, rng: np.random.Generator | None = None,
                    callback: Callable | None = None):
    """Fit the composition's block payloads by gradient descent.

    Returns ``(composition, trace)``: the parameter snapshot with the lowest
    validation loss seen, and the per-iteration loss trace. Training stops
    after ``cfg.patience`` iterations without validation improvement or after
    ``cfg.max_iters``.
    """
    if val.n == 0:
        raise ValueError("validation problem is empty")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if cfg.init_mode == "zeros":
        payloads = [[np.zeros((b.rows, b.cols)) for b in c.blocks] for c in template.components]
    elif cfg.init_mode == "scaled_random":
        payloads = [[rng.normal(0.0, 1.0 / math.sqrt(b.cols), size=(b.rows, b.cols)) for b in c.blocks]
                    for c in template.components]
    else:
        R, _ = train_stage_dense(problem, val, cfg.lambda_bracket)
        payloads = ridge_projected_init(template, R)
    comp = template.with_payloads(payloads)
    velocity = [[np.zeros_like(p) for p in pl] for pl in payloads]

    trace = TrainTrace()
    best = comp
    stale = 0
    for it in range(cfg.max_iters + 1):
        v_loss = composition_loss(comp, val)
        if cfg.batch:
            t_loss = composition_loss(comp, problem)
        else:
            t_loss, grads = composition_gradient(comp, problem)
        if not (math.isfinite(t_loss) and math.isfinite(v_loss)):
            raise DivergenceError(f"loss became non-finite at iteration {it} (learn_rate={cfg.learn_rate}); lower the learning rate")
        trace.iterations.append(it)
        trace.train_loss.append(t_loss)
        trace.val_loss.append(v_loss)
        if callback is not None:
            callback(it, t_loss, v_loss)
        if v_loss < trace.val_loss[trace.best_iteration] or it == 0:
            trace.best_iteration = it
            best = comp
            stale = 0
        else:
            stale += 1
        if stale >= cfg.patience or it == cfg.max_iters:
            break

        for idx in _minibatches(problem.n, cfg.batch, rng):
            if cfg.batch:
                _, grads = composition_gradient(comp, RegressionProblem(problem.features[idx], problem.targets[idx]))
            for pl, gl, vl in zip(payloads, grads, velocity):
                for k in range(len(pl)):
                    vl[k] = cfg.momentum * vl[k] - cfg.learn_rate * gl[k]
                    pl[k] = pl[k] + vl[k]
            try:
                comp = template.with_payloads(payloads)
            except ValueError as exc:
                raise DivergenceError(f"parameters became non-finite at iteration {it} (learn_rate={cfg.learn_rate})") from exc
    return best, trace


# -- dense ridge baseline -------------------------------------------------------------

def _trace_scale(features: np.ndarray) -> float:
    """Mean diagonal of ``features.T @ features``; keeps lambda brackets scale-free."""
    return float(np.sum(features**2)) / max(features.shape[1], 1)


def ridge_solve(features: np.ndarray, targets: np.ndarray, lam: float) -> np.ndarray:
    """``R = targets.T @ features @ inv(features.T @ features + lam I)`` via the thin SVD."""
    u, s, vt = np.linalg.svd(features, full_matrices=False)
    return ((targets.T @ u) * (s / (s * s + lam))) @ vt


def golden_section(f: Callable[[float], float], a: float, b: float, tol: float = 1e-5, max_iter: int = 200):
    """Minimize a unimodal ``f`` on ``[a, b]``; returns ``(x, f(x), trace)``."""
    if not a < b:
        raise ValueError("golden_section needs a < b")
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    trace = [(c, fc), (d, fd)]
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
            trace.append((c, fc))
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
            trace.append((d, fd))
    x = (a + b) / 2
    fx = f(x)
    trace.append((x, fx))
    best = min(trace, key=lambda t: t[1])
    return best[0], best[1], trace


def train_stage_dense(problem: RegressionProblem, val: RegressionProblem,
                      bracket: tuple[float, float] = (1e-4, 1e2), tol: float = 1e-2, relative: bool = True,
                      max_condition: float = 1e12):
    """Closed-form ridge regressor with lambda chosen by golden-section search.

    The search runs over ``log10(lambda)``. With ``relative`` the bracket is
    multiplied by the mean diagonal of ``features.T @ features``. Returns
    ``(R, info)``.
    """
    lo, hi = bracket
    if not 0 < lo < hi:
        raise ValueError("lambda bracket must be positive and increasing")
    scale = _trace_scale(problem.features) if relative else 1.0
    u, s, vt = np.linalg.svd(problem.features, full_matrices=False)
    proj_t = u.T @ problem.targets            # (r, 2P)
    val_v = val.features @ vt.T                # (n_val, r)

    def val_loss(log_lam):
        lam = 10.0**log_lam * scale
        pred = (val_v * (s / (s * s + lam))) @ proj_t
        r = pred - val.targets
        return 0.5 * float(np.sum(r * r)) / max(val.n, 1)

    log_lam, loss, trace = golden_section(val_loss, math.log10(lo), math.log10(hi), tol=tol)
    lam = 10.0**log_lam * scale
    s_max = float(s.max()) if s.size else 0.0
    s_min = float(s.min()) if s.size else 0.0
    cond = (s_max**2 + lam) / (s_min**2 + lam) if problem.features.shape[0] >= problem.features.shape[1] else (s_max**2 + lam) / lam
    if not math.isfinite(cond) or cond > max_condition:
        raise np.linalg.LinAlgError(f"ridge system is ill-conditioned (cond={cond:.3g} at lambda={lam:.3g}); widen the lambda bracket upward")
    R = ((proj_t.T) * (s / (s * s + lam))) @ vt
    info = {"lambda": lam, "log10_lambda_rel": log_lam, "val_loss": loss,
            "trace": [(10.0**x * scale, y) for x, y in trace], "condition": cond}
    return R, info


# -- cascade ------------------------------------------------------------------------------

@dataclass
class CascadeStage:
    regressor: object  # SparseComposition or dense (2P, D) array
    extractor: str = "sift"
    offset: np.ndarray | None = None  # subtracted from features before regression

    @property
    def kind(self) -> str:
        return "scr" if isinstance(self.regressor, scr.SparseComposition) else "dense"

    def regressor_apply(self, phi: np.ndarray) -> np.ndarray:
        """The linear part only, for features that are already centred."""
        if isinstance(self.regressor, scr.SparseComposition):
            return self.regressor.apply(phi)
        return phi @ self.regressor.T if phi.ndim == 2 else self.regressor @ phi

    def predict(self, phi: np.ndarray) -> np.ndarray:
        if self.offset is not None:
            phi = phi - self.offset
        return self.regressor_apply(phi)


@dataclass
class CascadeModel:
    stages: list[CascadeStage]
    scheme: LandmarkScheme
    mean_shape: np.ndarray
    extractor_kind: str = "sift"
    patch_side: int = 32
    basift: object = None  # BasiftModel when extractor_kind == "basift"
    meta: dict = field(default_factory=dict)
    smooth_sigma: float = 0.0

    @property
    def K(self) -> int:
        return len(self.stages)

    def extractor(self):
        from .features import BasiftExtractor, SiftExtractor

        if self.extractor_kind == "basift":
            if self.basift is None:
                raise ValueError("BASIFT cascade without a BASIFT model")
            return BasiftExtractor(self.basift)
        return SiftExtractor(self.patch_side)


@dataclass
class StageLog:
    stage: int
    train_error: float
    val_error: float
    seconds: float
    info: dict = field(default_factory=dict)


def _smoothed(samples, sigma):
    if sigma <= 0:
        return list(samples)
    return [replace(s, image=presmooth(s.image, sigma)) for s in samples]


def _mean_normalized_error(samples, shapes, scheme):
    errs = []
    for i, s in enumerate(samples):
        iod = interocular_distance(s.ground_truth, scheme)
        for j in range(shapes.shape[1]):
            errs.append(100.0 * np.mean(np.linalg.norm(shapes[i, j] - s.ground_truth, axis=1)) / iod)
    return float(np.mean(errs))


def train_cascade(samples: Sequence[AnnotatedSample], val_samples: Sequence[AnnotatedSample], cfg: TrainConfig,
                  pert: PerturbationParams, extractor, regressor_kind: str, scheme: LandmarkScheme,
                  template_factory: Callable[[], scr.SparseComposition] | None = None,
                  on_iteration: Callable | None = None):
    """Train ``cfg.stages`` regressors, each on the residuals left by the previous ones.

    Returns ``(model, stage_logs, traces)`` where ``traces[k]`` holds the
    SCR loss trace or the golden-section trace of stage ``k``.
    """
    if regressor_kind not in ("scr", "dense"):
        raise ValueError("regressor_kind must be 'scr' or 'dense'")
    train_ids = {s.id for s in samples}
    if train_ids & {s.id for s in val_samples}:
        raise ValueError("training and validation samples overlap")
    mean = mean_shape([s.ground_truth for s in samples], scheme)
    samples = _smoothed(samples, cfg.smooth_sigma)
    val_samples = _smoothed(val_samples, cfg.smooth_sigma)
    cur_t = generate_perturbations(samples, pert, mean, scheme, pert.n_train_perturb, seed=pert.rng_seed)
    cur_v = generate_perturbations(val_samples, pert, mean, scheme, pert.n_val_perturb, seed=pert.rng_seed + 1)
    norm_t = init_normalizers(cur_t, scheme)
    norm_v = init_normalizers(cur_v, scheme)
    if template_factory is None:
        def template_factory():
            return scr.build_paper_structure(scheme, feat_per_lm=extractor.d_feature)

    rng = np.random.default_rng(cfg.seed)
    stages, logs, traces = [], [], []
    log.info("stage 0: train error %.3f%%, val error %.3f%%",
             _mean_normalized_error(samples, cur_t, scheme), _mean_normalized_error(val_samples, cur_v, scheme))
    for k in range(cfg.stages):
        t0 = time.perf_counter()
        prob = stage_problem(samples, cur_t, norm_t, extractor)
        vprob = stage_problem(val_samples, cur_v, norm_v, extractor)
        offset = None
        if cfg.center_features:
            offset = prob.features.mean(axis=0)
            prob = RegressionProblem(prob.features - offset, prob.targets)
            vprob = RegressionProblem(vprob.features - offset, vprob.targets)
        if regressor_kind == "scr":
            cb = (lambda it, tl, vl, k=k: on_iteration(k, it, tl, vl)) if on_iteration else None
            reg, trace = train_stage_scr(prob, vprob, template_factory(), cfg, rng=rng, callback=cb)
            info = {"best_iteration": trace.best_iteration, "best_val_loss": trace.best_val_loss,
                    "iterations": len(trace.iterations)}
            stage = CascadeStage(reg, extractor.kind, offset)
        else:
            R, info = train_stage_dense(prob, vprob, cfg.lambda_bracket)
            trace = info.pop("trace")
            stage = CascadeStage(R, extractor.kind, offset)
        stages.append(stage)
        traces.append(trace)
        shape = cur_t.shape
        cur_t = cur_t + (stage.regressor_apply(prob.features) * norm_t.reshape(-1, 1)).reshape(shape)
        shape = cur_v.shape
        cur_v = cur_v + (stage.regressor_apply(vprob.features) * norm_v.reshape(-1, 1)).reshape(shape)
        entry = StageLog(k + 1, _mean_normalized_error(samples, cur_t, scheme),
                         _mean_normalized_error(val_samples, cur_v, scheme), time.perf_counter() - t0, info)
        logs.append(entry)
        log.info("stage %d: train error %.3f%%, val error %.3f%% (%.1fs)", k + 1, entry.train_error, entry.val_error, entry.seconds)

    model = CascadeModel(stages, scheme, mean, extractor.kind, extractor.side,
                         basift=getattr(extractor, "model", None),
                         meta={"perturbation": asdict(pert), "train": _cfg_dict(cfg), "regressor": regressor_kind},
                         smooth_sigma=cfg.smooth_sigma)
    return model, logs, traces


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["lambda_bracket"] = list(cfg.lambda_bracket)
    return d


def initial_errors(samples, pert: PerturbationParams, scheme, mean) -> float:
    inits = generate_perturbations(samples, pert, mean, scheme, pert.n_val_perturb, seed=pert.rng_seed + 1)
    return _mean_normalized_error(samples, inits, scheme)
