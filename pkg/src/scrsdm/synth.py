"""Procedurally rendered face images with 68-point annotations.

Stand-in corpus for desk-scale training and evaluation when no annotated
face dataset is at hand. Each subject has a fixed identity (geometry, skin
tone, feature darkness); each image varies pose, expression, lighting,
background and noise. Landmarks follow the iBUG 68-point layout and sit on
the rendered contours.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .dataio import AnnotatedSample, LandmarkScheme, canonical_scheme, to_scheme

# 68-point template in a face frame: x right, y down, outer eye corners at x = +-0.5
_JAW = [(0.72 * np.cos(np.pi - i * np.pi / 16), -0.15 + 0.9 * np.sin(np.pi - i * np.pi / 16)) for i in range(17)]
_BROW_R = [(-0.62 + 0.125 * i, -0.38 - 0.08 * np.sin(np.pi * (i / 4) * 0.9 + 0.15)) for i in range(5)]
_BROW_L = [(-x, y) for x, y in reversed(_BROW_R)]
_NOSE = [(0.0, -0.15), (0.0, -0.05), (0.0, 0.05), (0.0, 0.15),
         (-0.13, 0.2), (-0.065, 0.225), (0.0, 0.24), (0.065, 0.225), (0.13, 0.2)]
_EYE_R = [(-0.5, -0.15), (-0.4, -0.2), (-0.26, -0.2), (-0.16, -0.15), (-0.26, -0.11), (-0.4, -0.11)]
_EYE_L = [(0.16, -0.15), (0.26, -0.2), (0.4, -0.2), (0.5, -0.15), (0.4, -0.11), (0.26, -0.11)]
_MOUTH_OUT = [(-0.25, 0.45), (-0.15, 0.40), (-0.05, 0.38), (0.0, 0.39), (0.05, 0.38), (0.15, 0.40),
              (0.25, 0.45), (0.15, 0.52), (0.05, 0.55), (0.0, 0.555), (-0.05, 0.55), (-0.15, 0.52)]
_MOUTH_IN = [(-0.2, 0.45), (-0.08, 0.44), (0.0, 0.44), (0.08, 0.44), (0.2, 0.45), (0.08, 0.46), (0.0, 0.46), (-0.08, 0.46)]
TEMPLATE_68 = np.array(_JAW + _BROW_R + _BROW_L + _NOSE + _EYE_R + _EYE_L + _MOUTH_OUT + _MOUTH_IN)


@dataclass
class Identity:
    face_width: float
    face_height: float
    eye_spacing: float
    eye_size: float
    brow_height: float
    brow_thickness: float
    nose_length: float
    mouth_width: float
    mouth_height: float
    lip_thickness: float
    skin: float
    feature_dark: float
    lip_tone: float

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Identity":
        u = rng.uniform
        return cls(face_width=u(0.9, 1.1), face_height=u(0.9, 1.1), eye_spacing=u(0.9, 1.1),
                   eye_size=u(0.8, 1.25), brow_height=u(-0.04, 0.04), brow_thickness=u(0.035, 0.07),
                   nose_length=u(0.85, 1.15), mouth_width=u(0.85, 1.2), mouth_height=u(-0.04, 0.04),
                   lip_thickness=u(0.8, 1.3), skin=u(0.45, 0.8), feature_dark=u(0.05, 0.3), lip_tone=u(0.25, 0.5))


def face_shape(ident: Identity, rng: np.random.Generator) -> np.ndarray:
    """Template deformed by identity and a random expression, in the face frame."""
    pts = TEMPLATE_68.copy()
    pts[:17, 0] *= ident.face_width
    pts[:17, 1] = -0.15 + (pts[:17, 1] + 0.15) * ident.face_height

    eye_open = rng.uniform(0.4, 1.4)
    for sl, cx in ((slice(36, 42), -0.33), (slice(42, 48), 0.33)):
        e = pts[sl]
        e[:, 0] = cx * ident.eye_spacing + (e[:, 0] - cx) * ident.eye_size
        e[:, 1] = -0.15 + (e[:, 1] + 0.15) * ident.eye_size * eye_open
    # outer eye corners define the unit inter-ocular distance before pose scaling
    brow_raise = rng.uniform(-0.03, 0.05)
    pts[17:27, 1] += ident.brow_height - brow_raise
    pts[17:27, 0] *= ident.eye_spacing ** 0.5

    pts[27:36, 1] = -0.15 + (pts[27:36, 1] + 0.15) * ident.nose_length
    mouth_open = rng.uniform(0.0, 0.12) * (rng.random() < 0.6)
    smile = rng.uniform(-0.03, 0.04)
    m = pts[48:68]
    mcx, mcy = 0.0, 0.45
    m[:, 0] = mcx + (m[:, 0] - mcx) * ident.mouth_width * (1 + smile)
    m[:, 1] = mcy + (m[:, 1] - mcy) * ident.lip_thickness
    # offsets into 48..67: 7-11 lower outer lip, 17-19 lower inner lip, 0/6/12/16 corners
    for k in range(20):
        if k in (7, 8, 9, 10, 11, 17, 18, 19):
            m[k, 1] += mouth_open
        elif k in (0, 6, 12, 16):
            m[k, 1] += mouth_open / 2 - smile
    m[:, 1] += ident.mouth_height
    pts[48:68] = m
    pts += rng.normal(0, 0.006, size=pts.shape)
    return pts


def _smooth_noise(rng, h, w, scale):
    base = rng.normal(size=(max(2, h // scale + 2), max(2, w // scale + 2)))
    return ndimage.zoom(base, (h / (base.shape[0] - 1), w / (base.shape[1] - 1)), order=3)[:h, :w]


def _shading(pts, iod, S, s, rng):
    """Multiplicative face shading: a curved-surface falloff, side lighting,
    eye sockets, a nose ridge, cheek highlights and low-amplitude skin texture.
    Coordinates are in a face frame (origin between the eyes, unit = IOD)."""
    eye_r, eye_l = pts[36:42].mean(axis=0), pts[42:48].mean(axis=0)
    o = (eye_r + eye_l) / 2
    ax = (eye_l - eye_r) / np.linalg.norm(eye_l - eye_r)
    ay = np.array([-ax[1], ax[0]])
    yy, xx = np.mgrid[0:S, 0:S] / s
    dx, dy = xx - o[0], yy - o[1]
    u = (dx * ax[0] + dy * ax[1]) / iod
    v = (dx * ay[0] + dy * ay[1]) / iod

    def bump(cu, cv, su, sv):
        return np.exp(-((u - cu) ** 2) / (2 * su * su) - ((v - cv) ** 2) / (2 * sv * sv))

    light = rng.normal(0, 0.35, 2)
    shade = 1.0 - 0.35 * np.clip((u / 0.85) ** 2 + ((v - 0.45) / 1.25) ** 2, 0, 1.5)
    shade += 0.12 * (light[0] * u + light[1] * (v - 0.4))
    shade -= 0.16 * (bump(-0.5, 0.02, 0.2, 0.14) + bump(0.5, 0.02, 0.2, 0.14))
    shade += 0.07 * bump(0, 0.35, 0.06, 0.35)
    side = 1 if light[0] > 0 else -1
    shade -= 0.08 * bump(-0.12 * side, 0.45, 0.06, 0.2)
    shade += 0.06 * (bump(-0.45, 0.55, 0.18, 0.15) + bump(0.45, 0.55, 0.18, 0.15))
    shade += 0.025 * _smooth_noise(rng, S, S, 4 * s)
    return shade


def render(ident: Identity, shape_face: np.ndarray, rng: np.random.Generator, size: int = 192,
           iod_px: tuple[float, float] = (58.0, 72.0), supersample: int = 2):
    """Draw one face; returns ``(image, points_68)`` with points in pixels."""
    iod = rng.uniform(*iod_px)
    angle = np.deg2rad(rng.uniform(-12, 12))
    centre = np.array([size / 2, size / 2 - 0.1 * iod]) + rng.normal(0, 0.04 * iod, 2)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    pts = shape_face @ rot.T * iod + centre

    s = supersample
    S = size * s
    bg = 0.5 + 0.18 * _smooth_noise(rng, S, S, 24 * s) + 0.06 * _smooth_noise(rng, S, S, 5 * s)
    canvas = Image.fromarray(np.clip(bg * 255, 0, 255).astype(np.uint8), mode="L")
    d = ImageDraw.Draw(canvas)
    P = [tuple(p) for p in pts * s]

    def tone(v):
        return int(np.clip(v, 0, 1) * 255)

    skin = ident.skin
    jaw = pts[:17]
    forehead_c = (jaw[0] + jaw[16]) / 2
    top = [forehead_c + (jaw[16] - forehead_c) @ np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]).T * np.array([1.0, 1.1])
           for t in np.linspace(0, -np.pi, 12)]
    outline = [tuple(p * s) for p in list(jaw) + top[1:-1]]
    d.polygon(outline, fill=tone(skin))

    dark = ident.feature_dark
    bw = max(1, int(ident.brow_thickness * iod * s))
    d.line(P[17:22], fill=tone(dark + 0.1), width=bw, joint="curve")
    d.line(P[22:27], fill=tone(dark + 0.1), width=bw, joint="curve")

    d.line(P[27:31], fill=tone(skin - 0.12), width=max(1, int(0.03 * iod * s)))
    d.line(P[31:36], fill=tone(skin - 0.22), width=max(1, int(0.025 * iod * s)), joint="curve")
    for k in (32, 34):
        r = 0.025 * iod * s
        x, y = P[k]
        d.ellipse([x - r, y - r * 0.7, x + r, y + r * 0.7], fill=tone(dark + 0.05))

    for sl in (slice(36, 42), slice(42, 48)):
        poly = P[sl]
        d.polygon(poly, fill=tone(0.92), outline=tone(dark))
        c = pts[sl].mean(axis=0) + rng.normal(0, 0.02 * iod, 2)
        r = 0.055 * iod * s
        d.ellipse([c[0] * s - r, c[1] * s - r, c[0] * s + r, c[1] * s + r], fill=tone(dark + 0.15))
        d.line(poly[:4], fill=tone(dark), width=max(1, int(0.02 * iod * s)))

    lip = ident.lip_tone
    d.polygon(P[48:60], fill=tone(lip))
    inner = P[60:68]
    d.polygon(inner, fill=tone(0.08) if np.ptp(pts[60:68, 1]) > 0.03 * iod else tone(lip - 0.15))

    mask = Image.new("L", (S, S), 0)
    ImageDraw.Draw(mask).polygon(outline, fill=255)
    m = ndimage.gaussian_filter(np.asarray(mask, dtype=np.float64) / 255.0, 1.5 * s)
    img = np.asarray(canvas, dtype=np.float64) / 255.0
    img = img * (1 - m + m * _shading(pts, iod, S, s, rng))
    img = img.reshape(size, s, size, s).mean(axis=(1, 3))
    yy, xx = np.mgrid[0:size, 0:size] / size
    g = rng.normal(0, 0.15, 2)
    img = img * (1 + g[0] * (xx - 0.5) + g[1] * (yy - 0.5))
    img = ndimage.gaussian_filter(img, rng.uniform(0.4, 0.9))
    img = img + rng.normal(0, rng.uniform(0.002, 0.008), img.shape)
    return np.clip(img, 0, 1), pts


def make_dataset(n_subjects: int, images_per_subject: int, seed: int = 0, size: int = 192,
                 scheme: LandmarkScheme | None = None):
    """Render ``n_subjects * images_per_subject`` samples; ids are ``sNNN_MM``.

    Returns ``(samples, points_68)``; the samples carry the scheme's subset.
    """
    scheme = scheme or canonical_scheme()
    rng = np.random.default_rng(seed)
    samples, full = [], []
    for sid in range(n_subjects):
        ident = Identity.random(rng)
        for k in range(images_per_subject):
            img, pts = render(ident, face_shape(ident, rng), rng, size=size)
            margin = 1.0
            if np.any(pts < margin) or np.any(pts > size - 1 - margin):
                pts = np.clip(pts, margin, size - 1 - margin)
            samples.append(AnnotatedSample(img, to_scheme(pts, scheme), f"s{sid:03d}_{k:02d}"))
            full.append(pts)
    return samples, full
