"""Command-line interface.

Exit codes: 0 success, 1 a check failed (``verify``), 2 bad usage or input
(unknown flag, unreadable file, malformed config).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import bench, container, dataio, evaluation, features, scr, synth, training
from .align import fit

log = logging.getLogger("scrsdm")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- config ---------------------------------------------------------------------

CONFIG_KEYS = {"regressor", "extractor", "basift_model", "val_fraction", "split_seed", "train", "perturbation"}


def _dataclass_from(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise UsageError(f"config: unknown key(s) in {where}: {', '.join(sorted(extra))}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config: invalid {where}: {exc}") from exc


def load_config(path) -> dict:
    """Read and validate a training config (JSON).

    Keys: ``regressor`` (scr|dense), ``extractor`` (sift|basift),
    ``basift_model`` (path, relative to the config file; required for basift),
    ``val_fraction`` (default 0.25), ``split_seed`` (default 0), ``train``
    (TrainConfig fields), ``perturbation`` (PerturbationParams fields).
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    extra = set(raw) - CONFIG_KEYS
    if extra:
        raise UsageError(f"config: unknown key(s): {', '.join(sorted(extra))}")
    cfg = {
        "regressor": raw.get("regressor", "scr"),
        "extractor": raw.get("extractor", "basift"),
        "val_fraction": raw.get("val_fraction", 0.25),
        "split_seed": raw.get("split_seed", 0),
    }
    if cfg["regressor"] not in ("scr", "dense"):
        raise UsageError("config: regressor must be 'scr' or 'dense'")
    if cfg["extractor"] not in ("sift", "basift"):
        raise UsageError("config: extractor must be 'sift' or 'basift'")
    if not (isinstance(cfg["val_fraction"], (int, float)) and 0 < cfg["val_fraction"] < 1):
        raise UsageError("config: val_fraction must be in (0, 1)")
    train = dict(raw.get("train", {}))
    if "lambda_bracket" in train:
        train["lambda_bracket"] = tuple(train["lambda_bracket"])
    cfg["train"] = _dataclass_from(training.TrainConfig, train, "train")
    cfg["perturbation"] = _dataclass_from(training.PerturbationParams, dict(raw.get("perturbation", {})), "perturbation")
    if cfg["extractor"] == "basift":
        if "basift_model" not in raw:
            raise UsageError("config: extractor 'basift' needs basift_model")
        cfg["basift_model"] = (path.parent / raw["basift_model"]).resolve()
    return cfg


# -- helpers ----------------------------------------------------------------------

@contextlib.contextmanager
def _threads(n: int | None):
    """Pin BLAS to ``n`` threads (one by default, for reproducible reductions)."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n or 1):
        yield


def _load_set(path) -> list:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"data directory {path} does not exist")
    samples = dataio.load_annotated_set(path)
    if not samples:
        raise UsageError(f"no annotated images in {path}")
    return samples


def _load_model(path):
    try:
        return container.load_model(path)
    except OSError as exc:
        raise UsageError(f"cannot read model {path}: {exc}") from exc


def _write_stage_logs(out_dir: Path, logs, traces, kind: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "stages.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["stage", "train_error_percent", "val_error_percent"])
        for entry in logs:
            w.writerow([entry.stage, f"{entry.train_error:.6f}", f"{entry.val_error:.6f}"])
    for entry, trace in zip(logs, traces):
        with open(out_dir / f"stage_{entry.stage}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            if kind == "scr":
                w.writerow(["iteration", "train_loss", "val_loss"])
                for it, tl, vl in trace.rows():
                    w.writerow([it, f"{tl:.10e}", f"{vl:.10e}"])
            else:
                w.writerow(["evaluation", "lambda", "val_loss"])
                for i, (lam, vl) in enumerate(trace):
                    w.writerow([i, f"{lam:.10e}", f"{vl:.10e}"])


# -- subcommands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    samples, pts68 = synth.make_dataset(args.subjects, args.per_subject, seed=args.seed, size=args.size)
    out = Path(args.out)
    if args.test_fraction:
        rest, test = dataio.split_by_subject(samples, args.test_fraction, seed=args.seed)
        by_id = {s.id: p for s, p in zip(samples, pts68)}
        dataio.save_annotated_set(rest, out / "train", [by_id[s.id] for s in rest])
        dataio.save_annotated_set(test, out / "test", [by_id[s.id] for s in test])
        print(f"wrote {len(rest)} training and {len(test)} test images under {out}")
    else:
        dataio.save_annotated_set(samples, out, pts68)
        print(f"wrote {len(samples)} images to {out}")
    return EXIT_OK


def cmd_train_basift(args) -> int:
    images = None
    if args.patch_dir:
        d = Path(args.patch_dir)
        if not d.is_dir():
            raise UsageError(f"patch directory {d} does not exist")
        images = [dataio.load_image(p) for p in sorted(d.iterdir()) if p.suffix.lower() in dataio.IMAGE_SUFFIXES]
        if not images:
            raise UsageError(f"no images in {d}")
    with _threads(args.threads):
        model = features.train_basift(n_patches=args.patches, ridge=args.ridge, seed=args.seed,
                                      smooth_sigma=args.smooth_sigma, images=images)
    container.save_basift(model, args.out)
    diag = {k: v for k, v in model.diagnostics.items()}
    Path(str(args.out) + ".json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
    print(json.dumps(diag, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    samples = _load_set(args.data)
    train_set, val_set = dataio.split_by_subject(samples, cfg["val_fraction"], seed=cfg["split_seed"])
    if cfg["extractor"] == "basift":
        try:
            extractor = features.BasiftExtractor(container.load_basift(cfg["basift_model"]))
        except OSError as exc:
            raise UsageError(f"cannot read BASIFT model: {exc}") from exc
    else:
        extractor = features.SiftExtractor()
    scheme = dataio.canonical_scheme()
    with _threads(args.threads):
        model, logs, traces = training.train_cascade(train_set, val_set, cfg["train"], cfg["perturbation"],
                                                     extractor, cfg["regressor"], scheme)
    container.save_model(model, args.out)
    logs_dir = Path(args.logs) if args.logs else Path(str(args.out) + ".logs")
    _write_stage_logs(logs_dir, logs, traces, cfg["regressor"])
    for entry in logs:
        print(f"stage {entry.stage}: train {entry.train_error:.3f}%  val {entry.val_error:.3f}%  ({entry.seconds:.1f}s)")
    return EXIT_OK


def cmd_fit(args) -> int:
    model = _load_model(args.model)
    try:
        image = dataio.load_image(args.image)
        init = dataio.to_scheme(dataio.read_pts(args.init), model.scheme)
    except OSError as exc:
        raise UsageError(str(exc)) from exc
    res = fit(image, init, model)
    out = Path(args.out) if args.out else Path(args.image).with_suffix(".fit.pts")
    dataio.write_pts(out, res.final)
    report = {"out": str(out), "stage_seconds": res.timings, "total_seconds": float(sum(res.timings))}
    print(json.dumps(report))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    test = _load_set(args.data)
    with _threads(args.threads):
        report = evaluation.evaluate(model, test, n_inits=args.inits, seed=args.seed)
    report.write(args.out)
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


def verify_model(model, rng=None) -> list[tuple[str, bool, str]]:
    """Self-consistency checks on a loaded cascade. Returns ``(name, ok, detail)`` rows."""
    rng = rng or np.random.default_rng(0)
    checks = []
    P = model.scheme.n_points
    mean_ok = model.mean_shape.shape == (P, 2) and bool(np.all(np.isfinite(model.mean_shape)))
    checks.append(("mean_shape", mean_ok, f"shape {model.mean_shape.shape}"))
    if model.extractor_kind == "basift":
        b = model.basift
        ok = b is not None and set(np.unique(b.sign_map)).issubset({-1, 0, 1})
        checks.append(("basift_model", ok, "sign map entries in {-1, 0, 1}" if ok else "missing or invalid"))
    d_in = P * (model.basift.d_sift if model.basift is not None and model.extractor_kind == "basift" else features.D_SIFT)
    for k, st in enumerate(model.stages, 1):
        reg = st.regressor
        if isinstance(reg, scr.SparseComposition):
            dims_ok = reg.in_dim == d_in and reg.out_dim == 2 * P
            dense = scr.densify(reg)
            v = rng.normal(size=(8, reg.in_dim))
            ref = v @ dense.T
            err = float(np.max(np.abs(reg.apply(v) - ref)) / max(np.max(np.abs(ref)), 1e-300))
            checks.append((f"stage{k}_dims", dims_ok, f"{reg.in_dim} -> {reg.out_dim}"))
            checks.append((f"stage{k}_densify", err <= 1e-9, f"max relative difference {err:.2e}"))
        else:
            checks.append((f"stage{k}_dims", reg.shape == (2 * P, d_in), f"{reg.shape}"))
        arrays = [p for comp in reg.payloads() for p in comp] if isinstance(reg, scr.SparseComposition) else [reg]
        finite = all(np.all(np.isfinite(a)) for a in arrays)
        checks.append((f"stage{k}_finite", bool(finite), ""))
        if st.offset is not None:
            checks.append((f"stage{k}_offset", st.offset.shape == (d_in,) and bool(np.all(np.isfinite(st.offset))), ""))
    blob = container.model_to_bytes(model)
    again = container.model_to_bytes(container.model_from_bytes(blob))
    checks.append(("container_round_trip", blob == again, f"{len(blob)} bytes"))
    return checks


def cmd_verify(args) -> int:
    model = _load_model(args.model)
    checks = verify_model(model, np.random.default_rng(args.seed))
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_FAILED


def cmd_bench(args) -> int:
    if not (args.regressor or args.features):
        args.regressor = args.features = True
    rows = []
    if args.regressor:
        rows += bench.bench_regressor(reps=args.reps, seed=args.seed, single_thread=not args.multi_thread)
    if args.features:
        model = container.load_basift(args.basift) if args.basift else None
        rows += bench.bench_features(model, n_patches=args.patches, seed=args.seed, single_thread=not args.multi_thread)
    bench.write_csv(rows, args.out)
    for t in rows:
        print(f"{t.case:26s} median {t.median_ns / 1e3:10.1f} us   p10 {t.p10_ns / 1e3:10.1f}   p90 {t.p90_ns / 1e3:10.1f}"
              + (f"   flops {t.flops}" if t.flops is not None else ""))
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scrsdm", description="Cascaded face alignment with sparse compositional regressors.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic annotated face set")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int, default=60)
    s.add_argument("--per-subject", type=int, default=5)
    s.add_argument("--size", type=int, default=192)
    s.add_argument("--test-fraction", type=float, default=0.0,
                   help="if set, write subject-disjoint train/ and test/ subdirectories")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-basift", help="learn the sign-quantized BASIFT map")
    s.add_argument("--patch-dir", help="images to sample patches from (default: bundled natural images)")
    s.add_argument("--out", required=True)
    s.add_argument("--ridge", type=float, default=1.0, help="ridge weight relative to the mean Gram diagonal")
    s.add_argument("--patches", type=int, default=20000)
    s.add_argument("--smooth-sigma", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=None)
    s.set_defaults(func=cmd_train_basift)

    s = sub.add_parser("train", help="train a cascade from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--logs", help="directory for per-stage CSV logs (default: <out>.logs)")
    s.add_argument("--threads", type=int, default=None,
                   help="BLAS threads; more than one is faster but not bit-reproducible")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("fit", help="align one image from an initial shape")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--init", required=True, help="initial shape (.pts, 68 or scheme points)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("eval", help="multi-initialization evaluation")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--inits", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int, default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("verify", help="consistency checks on a stored model")
    s.add_argument("--model", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("bench", help="timing of regressor apply and feature extraction")
    s.add_argument("--regressor", action="store_true")
    s.add_argument("--features", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--reps", type=int, default=1000)
    s.add_argument("--patches", type=int, default=10000)
    s.add_argument("--basift", help="BASIFT model to time (default: random sign map)")
    s.add_argument("--multi-thread", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"scrsdm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dataio.AnnotationError, container.ContainerError) as exc:
        print(f"scrsdm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"scrsdm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
