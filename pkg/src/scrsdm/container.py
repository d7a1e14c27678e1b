"""Versioned binary model container.

Layout (all integers little-endian)::

    magic    b"SCRSDM\\x00\\x01"
    version  u16
    count    u16                      number of sections
    table    count x (tag: 4 bytes, offset: u64, length: u64)
    bodies   section payloads, in table order

Sections:

``META``  UTF-8 JSON (sorted keys): scheme, extractor, patch side, training metadata.
``MEAN``  mean shape, ``P x 2`` float64.
``BSFT``  BASIFT model: ``u32 d_sift, u32 dim, u32 side``, 8 x u8 LUT, ``d_sift*dim`` int8 sign map.
``Snnn``  stage ``nnn`` regressor, see :func:`_pack_regressor`.
``Onnn``  optional feature offset of stage ``nnn``, float32.

Regressor payloads are float32; loading widens them to float64, so a loaded
model re-saves to identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from . import scr
from .dataio import LandmarkScheme
from .features import BasiftModel
from .training import CascadeModel, CascadeStage

MAGIC = b"SCRSDM\x00\x01"
VERSION = 1
_KIND_SCR, _KIND_DENSE = 0, 1
_COMP_KINDS = {scr.BLOCK_DIAGONAL: 0, scr.DENSE: 1}
_COMP_NAMES = {v: k for k, v in _COMP_KINDS.items()}


class ContainerError(ValueError):
    pass


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _pack_regressor(reg) -> bytes:
    """``u8 kind``; dense: ``u32 out, u32 in`` + payload; composition: ``u32 L``
    then per component ``u8 kind, u32 out, u32 in, u32 n_blocks``, the block
    table (4 x u32 each) and the block payloads row-major.
    """
    buf = io.BytesIO()
    if isinstance(reg, scr.SparseComposition):
        buf.write(struct.pack("<BI", _KIND_SCR, reg.L))
        for c in reg.components:
            buf.write(struct.pack("<BIII", _COMP_KINDS[c.kind], c.out_dim, c.in_dim, len(c.blocks)))
            for b in c.blocks:
                buf.write(struct.pack("<IIII", b.row_offset, b.col_offset, b.rows, b.cols))
            for p in c.payloads:
                buf.write(_f32(p))
    else:
        reg = np.asarray(reg)
        buf.write(struct.pack("<BII", _KIND_DENSE, *reg.shape))
        buf.write(_f32(reg))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ContainerError("truncated section")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def array(self, dtype, shape):
        count = int(np.prod(shape))
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.data):
            raise ContainerError("truncated section")
        a = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos).reshape(shape)
        self.pos += size
        return a


def _unpack_regressor(data: bytes):
    r = _Reader(data)
    (kind,) = r.unpack("<B")
    if kind == _KIND_DENSE:
        out_dim, in_dim = r.unpack("<II")
        return r.array("<f4", (out_dim, in_dim)).astype(np.float64)
    if kind != _KIND_SCR:
        raise ContainerError(f"unknown regressor kind {kind}")
    (L,) = r.unpack("<I")
    comps = []
    for _ in range(L):
        ck, out_dim, in_dim, nb = r.unpack("<BIII")
        blocks = [scr.BlockSpec(*r.unpack("<IIII")) for _ in range(nb)]
        payloads = [r.array("<f4", (b.rows, b.cols)).astype(np.float64) for b in blocks]
        comps.append(scr.BlockSparseComponent(out_dim, in_dim, blocks, payloads, _COMP_NAMES[ck]))
    return scr.SparseComposition(comps)


def _pack_basift(m: BasiftModel) -> bytes:
    return (struct.pack("<III", m.d_sift, m.dim, m.side) + np.asarray(m.lut, dtype=np.uint8).tobytes()
            + np.ascontiguousarray(m.sign_map, dtype=np.int8).tobytes())


def _unpack_basift(data: bytes, diagnostics=None) -> BasiftModel:
    r = _Reader(data)
    d, dim, side = r.unpack("<III")
    lut = r.array(np.uint8, (8,)).astype(np.int64)
    sign_map = r.array(np.int8, (d, dim)).copy()
    return BasiftModel(sign_map, side=side, lut=lut, diagnostics=diagnostics or {})


def pack_sections(sections: list[tuple[bytes, bytes]]) -> bytes:
    header = len(MAGIC) + 4 + len(sections) * 20
    table, bodies, offset = [], [], header
    for tag, body in sections:
        if len(tag) != 4:
            raise ValueError(f"section tag must be 4 bytes: {tag!r}")
        table.append(struct.pack("<4sQQ", tag, offset, len(body)))
        bodies.append(body)
        offset += len(body)
    return MAGIC + struct.pack("<HH", VERSION, len(sections)) + b"".join(table) + b"".join(bodies)


def unpack_sections(data: bytes) -> dict[bytes, bytes]:
    if not data.startswith(MAGIC):
        raise ContainerError("not a model container (bad magic)")
    version, count = struct.unpack_from("<HH", data, len(MAGIC))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    out = {}
    pos = len(MAGIC) + 4
    for _ in range(count):
        tag, off, length = struct.unpack_from("<4sQQ", data, pos)
        pos += 20
        if off + length > len(data):
            raise ContainerError(f"section {tag!r} runs past end of file")
        out[tag] = data[off:off + length]
    return out


def _meta_bytes(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()


def model_to_bytes(model: CascadeModel) -> bytes:
    meta = {
        "kind": "cascade",
        "scheme": model.scheme.to_dict(),
        "extractor": model.extractor_kind,
        "patch_side": model.patch_side,
        "stage_extractors": [s.extractor for s in model.stages],
        "smooth_sigma": model.smooth_sigma,
        "info": model.meta,
    }
    sections = [(b"META", _meta_bytes(meta)), (b"MEAN", np.ascontiguousarray(model.mean_shape, dtype="<f8").tobytes())]
    if model.basift is not None:
        sections.append((b"BSFT", _pack_basift(model.basift)))
    for k, st in enumerate(model.stages):
        sections.append((b"S%03d" % k, _pack_regressor(st.regressor)))
        if st.offset is not None:
            sections.append((b"O%03d" % k, _f32(st.offset)))
    return pack_sections(sections)


def model_from_bytes(data: bytes) -> CascadeModel:
    sec = unpack_sections(data)
    try:
        meta = json.loads(sec[b"META"])
    except (KeyError, ValueError) as exc:
        raise ContainerError("missing or unreadable META section") from exc
    if meta.get("kind") != "cascade":
        raise ContainerError(f"container holds a {meta.get('kind')!r}, not a cascade model")
    scheme = LandmarkScheme.from_dict(meta["scheme"])
    mean = np.frombuffer(sec[b"MEAN"], dtype="<f8").reshape(scheme.n_points, 2).copy()
    basift = _unpack_basift(sec[b"BSFT"]) if b"BSFT" in sec else None
    stages = []
    for k, ex in enumerate(meta["stage_extractors"]):
        off = sec.get(b"O%03d" % k)
        if off is not None:
            off = np.frombuffer(off, dtype="<f4").astype(np.float64)
        stages.append(CascadeStage(_unpack_regressor(sec[b"S%03d" % k]), ex, off))
    return CascadeModel(stages, scheme, mean, meta["extractor"], meta["patch_side"], basift, meta.get("info", {}),
                        smooth_sigma=float(meta.get("smooth_sigma", 0.0)))


def _write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def save_model(model: CascadeModel, path) -> None:
    _write(path, model_to_bytes(model))


def load_model(path) -> CascadeModel:
    return model_from_bytes(Path(path).read_bytes())


def basift_to_bytes(model: BasiftModel) -> bytes:
    meta = {"kind": "basift", "diagnostics": model.diagnostics}
    return pack_sections([(b"META", _meta_bytes(meta)), (b"BSFT", _pack_basift(model))])


def save_basift(model: BasiftModel, path) -> None:
    _write(path, basift_to_bytes(model))


def load_basift(path) -> BasiftModel:
    sec = unpack_sections(Path(path).read_bytes())
    meta = json.loads(sec[b"META"])
    if meta.get("kind") != "basift" or b"BSFT" not in sec:
        raise ContainerError("not a BASIFT model file")
    return _unpack_basift(sec[b"BSFT"], meta.get("diagnostics"))


def round_trip_float32(model: CascadeModel) -> CascadeModel:
    """The model exactly as it will be after save/load."""
    return model_from_bytes(model_to_bytes(model))
