"""Images, landmark annotations and the canonical 49-point scheme.

Images are plain 2-D ``float64`` arrays in ``[0, 1]`` (row-major, ``[row, col]``)
and shapes are ``(P, 2)`` arrays of ``(x, y)`` pixel coordinates.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm")

# ITU-R BT.601 luma weights
LUMA_601 = np.array([0.299, 0.587, 0.114])


class AnnotationError(ValueError):
    """Malformed or out-of-bounds landmark annotation."""


@dataclass(frozen=True)
class LandmarkScheme:
    """Landmark count, neighborhood partition and inter-ocular reference pair.

    ``from_68`` maps each scheme point to its index in a 68-point annotation
    (``None`` when annotations already carry ``n_points`` points).
    """

    name: str
    n_points: int
    neighborhoods: dict[str, tuple[int, ...]]
    interocular: tuple[int, int]
    from_68: tuple[int, ...] | None = None

    def __post_init__(self):
        seen = sorted(i for g in self.neighborhoods.values() for i in g)
        if seen != list(range(self.n_points)):
            raise ValueError(f"neighborhoods of scheme {self.name!r} do not partition 0..{self.n_points - 1}")
        a, b = self.interocular
        if not (0 <= a < self.n_points and 0 <= b < self.n_points) or a == b:
            raise ValueError(f"bad interocular pair {self.interocular}")
        if self.from_68 is not None and len(self.from_68) != self.n_points:
            raise ValueError("from_68 length must equal n_points")

    @property
    def group_sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.neighborhoods.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "LandmarkScheme":
        return cls(
            name=d.get("name", "custom"),
            n_points=int(d["n_points"]),
            neighborhoods={k: tuple(int(i) for i in v) for k, v in d["neighborhoods"].items()},
            interocular=tuple(int(i) for i in d["interocular"]),
            from_68=tuple(int(i) for i in d["from_68"]) if d.get("from_68") is not None else None,
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_points": self.n_points,
            "from_68": list(self.from_68) if self.from_68 is not None else None,
            "neighborhoods": {k: list(v) for k, v in self.neighborhoods.items()},
            "interocular": list(self.interocular),
        }

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LandmarkScheme":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def canonical_scheme() -> LandmarkScheme:
    """The shipped 49-point scheme (68-point layout without jaw and inner mouth corners)."""
    text = resources.files("scrsdm").joinpath("data/ibug49.json").read_text()
    return LandmarkScheme.from_dict(json.loads(text))


def single_group_scheme(n_points: int) -> LandmarkScheme:
    """A scheme where every landmark belongs to one neighborhood (tests, toy problems)."""
    return LandmarkScheme("single", n_points, {"all": tuple(range(n_points))}, (0, n_points - 1))


@dataclass(frozen=True)
class AnnotatedSample:
    image: np.ndarray
    ground_truth: np.ndarray
    id: str
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def subject(self) -> str:
        """Subject key used for subject-disjoint splits: file stem up to the last ``_``."""
        return self.id.rsplit("_", 1)[0] if "_" in self.id else self.id


# -- shapes -----------------------------------------------------------------

def vectorize(points: np.ndarray) -> np.ndarray:
    """(P, 2) -> (x1, y1, ..., xP, yP)."""
    return np.asarray(points, dtype=np.float64).reshape(-1)


def devectorize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.size % 2:
        raise ValueError(f"shape vector must be 1-D with even length, got {vec.shape}")
    return vec.reshape(-1, 2)


def interocular_distance(shape: np.ndarray, scheme: LandmarkScheme) -> float:
    shape = np.asarray(shape, dtype=np.float64)
    if shape.shape != (scheme.n_points, 2):
        raise ValueError(f"expected {scheme.n_points} points, got {shape.shape}")
    a, b = scheme.interocular
    d = float(np.hypot(*(shape[a] - shape[b])))
    if not d > 0:
        raise ValueError("degenerate annotation: inter-ocular distance is zero")
    return d


# -- pts files ---------------------------------------------------------------

def read_pts(path: str | os.PathLike) -> np.ndarray:
    """Parse an iBUG ``.pts`` file into a ``(n_points, 2)`` array."""
    path = Path(path)
    try:
        lines = [ln.strip() for ln in path.read_text().splitlines()]
        lines = [ln for ln in lines if ln]
        header = {}
        i = 0
        while i < len(lines) and lines[i] != "{":
            key, _, val = lines[i].partition(":")
            header[key.strip()] = val.strip()
            i += 1
        n = int(header["n_points"])
        end = lines.index("}", i)
        rows = [tuple(float(t) for t in ln.split()) for ln in lines[i + 1:end]]
    except (KeyError, ValueError, IndexError) as exc:
        raise AnnotationError(f"malformed pts file {path}: {exc}") from exc
    if len(rows) != n or any(len(r) != 2 for r in rows):
        raise AnnotationError(f"malformed pts file {path}: expected {n} 'x y' rows")
    pts = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise AnnotationError(f"malformed pts file {path}: non-finite coordinate")
    return pts


def write_pts(path: str | os.PathLike, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64)
    body = "\n".join(f"{x:.6f} {y:.6f}" for x, y in points)
    Path(path).write_text(f"version: 1\nn_points: {len(points)}\n{{\n{body}\n}}\n")


def to_scheme(points: np.ndarray, scheme: LandmarkScheme) -> np.ndarray:
    """Reduce a 68-point annotation to ``scheme`` (pass through if already sized)."""
    if len(points) == scheme.n_points:
        return points.copy()
    if len(points) == 68 and scheme.from_68 is not None:
        return points[list(scheme.from_68)].copy()
    raise AnnotationError(f"cannot map {len(points)} points onto scheme {scheme.name!r}")


# -- images ------------------------------------------------------------------

def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load an image as grayscale float64 in [0, 1] using BT.601 luma."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I", "F"):
            arr = np.asarray(im, dtype=np.float64)
            scale = 65535.0 if im.mode == "I;16" else 255.0
            return np.clip(arr / scale, 0.0, 1.0)
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return rgb @ LUMA_601


def save_image(path: str | os.PathLike, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_annotated_set(image_dir, annotation_dir=None, scheme: LandmarkScheme | None = None) -> list[AnnotatedSample]:
    """Pair images with ``<stem>.pts`` annotations.

    Images without an annotation (and vice versa) are skipped with a warning.
    A malformed annotation, or one with points outside its image, raises
    :class:`AnnotationError` naming the file.
    """
    scheme = scheme or canonical_scheme()
    image_dir = Path(image_dir)
    annotation_dir = Path(annotation_dir) if annotation_dir is not None else image_dir
    if not image_dir.is_dir():
        return []
    images = {p.stem: p for p in sorted(image_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    annots = {p.stem: p for p in sorted(annotation_dir.glob("*.pts"))} if annotation_dir.is_dir() else {}
    for stem in sorted(set(images) ^ set(annots)):
        log.warning("skipping %s: no matching %s", stem, "annotation" if stem in images else "image")

    samples = []
    for stem in sorted(set(images) & set(annots)):
        pts = to_scheme(read_pts(annots[stem]), scheme)
        img = load_image(images[stem])
        h, w = img.shape
        if np.any(pts < 0) or np.any(pts[:, 0] > w - 1) or np.any(pts[:, 1] > h - 1):
            raise AnnotationError(f"sample {stem}: landmarks fall outside the {w}x{h} image")
        samples.append(AnnotatedSample(img, pts, stem))
    return samples


def save_annotated_set(samples: Sequence[AnnotatedSample], out_dir, points_68: Sequence[np.ndarray] | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        save_image(out_dir / f"{s.id}.png", s.image)
        write_pts(out_dir / f"{s.id}.pts", s.ground_truth if points_68 is None else points_68[i])


def split_by_subject(samples: Sequence[AnnotatedSample], fraction: float, seed: int = 0):
    """Split into ``(rest, held_out)`` with no subject on both sides.

    ``round(fraction * n_subjects)`` subjects (at least one) are held out.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    subjects = sorted({s.subject for s in samples})
    if len(subjects) < 2:
        raise ValueError("need at least two subjects to split")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    k = min(max(1, round(fraction * len(subjects))), len(subjects) - 1)
    held = set(order[:k])
    return [s for s in samples if s.subject not in held], [s for s in samples if s.subject in held]


# -- patches -----------------------------------------------------------------

def round_half_up(v):
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(np.int64)


def extract_patches(image: np.ndarray, centers: np.ndarray, side: int = 32) -> np.ndarray:
    """Cut ``side x side`` patches at each rounded ``(x, y)`` center.

    Rows ``cy - side/2 .. cy + side/2 - 1`` (same for columns); pixels beyond
    the border replicate the nearest edge pixel. Returns ``(n, side, side)``.
    """
    if side % 2 or side < 8:
        raise ValueError(f"patch side must be even and >= 8, got {side}")
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    c = round_half_up(centers)
    off = np.arange(side) - side // 2
    h, w = image.shape
    rows = np.clip(c[:, 1, None] + off, 0, h - 1)
    cols = np.clip(c[:, 0, None] + off, 0, w - 1)
    return image[rows[:, :, None], cols[:, None, :]]


def extract_patch(image: np.ndarray, center, side: int = 32) -> np.ndarray:
    return extract_patches(image, np.asarray(center, dtype=np.float64)[None], side)[0]
