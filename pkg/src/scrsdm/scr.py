"""Sparse compositional regressors.

A regressor is a product ``S_L ... S_2 S_1`` of structured factors. Each
factor is a :class:`BlockSparseComponent`: either one dense block, or a
block-diagonal layout of dense blocks whose row and column ranges never
overlap. Applying the composition evaluates ``S_L(...(S_2(S_1 v)))`` and never
forms the product.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataio import LandmarkScheme

BLOCK_DIAGONAL = "block_diagonal"
DENSE = "dense"


@dataclass(frozen=True)
class BlockSpec:
    row_offset: int
    col_offset: int
    rows: int
    cols: int

    @property
    def row_slice(self) -> slice:
        return slice(self.row_offset, self.row_offset + self.rows)

    @property
    def col_slice(self) -> slice:
        return slice(self.col_offset, self.col_offset + self.cols)


def _disjoint(spans) -> bool:
    spans = sorted(spans)
    return all(a_end <= b_start for (_, a_end), (b_start, _) in zip(spans, spans[1:]))


class BlockSparseComponent:
    """One structured factor: dense payloads placed on a block-diagonal layout.

    When every block has the same shape and the blocks tile the matrix in
    order, the payloads are kept as one ``(n_blocks, rows, cols)`` array and
    applied with a single batched product.
    """

    def __init__(self, out_dim: int, in_dim: int, blocks: Sequence[BlockSpec], payloads: Sequence[np.ndarray], kind: str = BLOCK_DIAGONAL):
        if kind not in (BLOCK_DIAGONAL, DENSE):
            raise ValueError(f"unknown component kind {kind!r}")
        blocks = list(blocks)
        if len(blocks) != len(payloads):
            raise ValueError("one payload per block required")
        self.out_dim = int(out_dim)
        self.in_dim = int(in_dim)
        self.kind = kind
        self.blocks = blocks
        for spec, p in zip(blocks, payloads):
            p = np.asarray(p)
            if p.shape != (spec.rows, spec.cols):
                raise ValueError(f"payload shape {p.shape} does not match block {spec}")
            if spec.row_offset < 0 or spec.col_offset < 0 or spec.row_offset + spec.rows > out_dim or spec.col_offset + spec.cols > in_dim:
                raise ValueError(f"block {spec} does not fit in a {out_dim}x{in_dim} component")
            if not np.all(np.isfinite(p)):
                raise ValueError("component payloads must be finite")
        if kind == DENSE and (len(blocks) != 1 or blocks[0] != BlockSpec(0, 0, out_dim, in_dim)):
            raise ValueError("a dense component has exactly one block spanning all dims")
        if not _disjoint([(b.row_offset, b.row_offset + b.rows) for b in blocks]) or \
                not _disjoint([(b.col_offset, b.col_offset + b.cols) for b in blocks]):
            raise ValueError("blocks must be pairwise disjoint in rows and columns")

        self._stack = None
        shapes = {(b.rows, b.cols) for b in blocks}
        if len(shapes) == 1 and len(blocks) > 1:
            r, c = shapes.pop()
            tiled = all(b.row_offset == i * r and b.col_offset == i * c for i, b in enumerate(blocks))
            if tiled and len(blocks) * r == out_dim and len(blocks) * c == in_dim:
                self._stack = np.ascontiguousarray(np.stack([np.asarray(p, dtype=np.float64) for p in payloads]))
        if self._stack is not None:
            self.payloads = list(self._stack)
        else:
            self.payloads = [np.ascontiguousarray(p, dtype=np.float64) for p in payloads]

    # -- construction helpers ---------------------------------------------------

    @classmethod
    def dense(cls, matrix: np.ndarray) -> "BlockSparseComponent":
        matrix = np.asarray(matrix, dtype=np.float64)
        r, c = matrix.shape
        return cls(r, c, [BlockSpec(0, 0, r, c)], [matrix], kind=DENSE)

    @classmethod
    def identity(cls, n: int) -> "BlockSparseComponent":
        return cls(n, n, [BlockSpec(i, i, 1, 1) for i in range(n)], [np.ones((1, 1))] * n)

    @classmethod
    def block_diagonal(cls, blocks: Sequence[BlockSpec], payloads, out_dim: int, in_dim: int) -> "BlockSparseComponent":
        return cls(out_dim, in_dim, blocks, payloads, kind=BLOCK_DIAGONAL)

    def with_payloads(self, payloads: Sequence[np.ndarray]) -> "BlockSparseComponent":
        return BlockSparseComponent(self.out_dim, self.in_dim, self.blocks, payloads, self.kind)

    # -- properties ---------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return self.out_dim, self.in_dim

    @property
    def nnz(self) -> int:
        return sum(b.rows * b.cols for b in self.blocks)

    @property
    def density(self) -> float:
        return self.nnz / (self.out_dim * self.in_dim)

    @property
    def uniform(self) -> bool:
        return self._stack is not None

    def support_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for b in self.blocks:
            mask[b.row_slice, b.col_slice] = True
        return mask

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for b, p in zip(self.blocks, self.payloads):
            out[b.row_slice, b.col_slice] = p
        return out

    # -- apply --------------------------------------------------------------------

    def apply(self, v: np.ndarray) -> np.ndarray:
        """``S @ v`` for a vector, or ``v @ S.T`` row-wise for a ``(n, in_dim)`` batch."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.in_dim:
            raise ValueError(f"input length {v.shape[-1]} does not match in_dim {self.in_dim}")
        if v.ndim == 1:
            return self._apply_vector(v)
        if self.kind == DENSE:
            return v @ self.payloads[0].T
        if self._stack is not None:
            nb, r, c = self._stack.shape
            # (n, nb, c) -> (nb, n, c) @ (nb, c, r) -> (nb, n, r)
            vb = v.reshape(-1, nb, c).transpose(1, 0, 2)
            return np.matmul(vb, self._stack.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(-1, self.out_dim)
        out = np.zeros(v.shape[:-1] + (self.out_dim,))
        for b, p in zip(self.blocks, self.payloads):
            out[..., b.row_slice] = v[..., b.col_slice] @ p.T
        return out

    def _apply_vector(self, v):
        if self.kind == DENSE:
            return self.payloads[0] @ v
        if self._stack is not None:
            nb, r, c = self._stack.shape
            return np.matmul(self._stack, v.reshape(nb, c, 1)).reshape(self.out_dim)
        out = np.zeros(self.out_dim)
        for b, p in zip(self.blocks, self.payloads):
            out[b.row_slice] = p @ v[b.col_slice]
        return out

    def apply_transpose(self, g: np.ndarray) -> np.ndarray:
        """``S.T @ g`` (row-wise for batches); used to backpropagate gradients."""
        g = np.asarray(g, dtype=np.float64)
        if self.kind == DENSE:
            return g @ self.payloads[0]
        if self._stack is not None:
            nb, r, c = self._stack.shape
            gb = g.reshape(-1, nb, r).transpose(1, 0, 2)
            return np.matmul(gb, self._stack).transpose(1, 0, 2).reshape(g.shape[:-1] + (self.in_dim,))
        out = np.zeros(g.shape[:-1] + (self.in_dim,))
        for b, p in zip(self.blocks, self.payloads):
            out[..., b.col_slice] = g[..., b.row_slice] @ p
        return out

    def __repr__(self):
        return f"BlockSparseComponent({self.out_dim}x{self.in_dim}, kind={self.kind}, blocks={len(self.blocks)}, density={self.density:.4f})"


class SparseComposition:
    """Ordered factors ``[S_1, ..., S_L]`` representing ``S_L ... S_1``."""

    def __init__(self, components: Sequence[BlockSparseComponent]):
        components = list(components)
        if not components:
            raise ValueError("a composition needs at least one component")
        for i, (a, b) in enumerate(zip(components, components[1:])):
            if a.out_dim != b.in_dim:
                raise ValueError(f"component {i} outputs {a.out_dim} values but component {i + 1} expects {b.in_dim}")
        self.components = components

    @property
    def L(self) -> int:
        return len(self.components)

    @property
    def in_dim(self) -> int:
        return self.components[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.components[-1].out_dim

    @property
    def shape(self) -> tuple[int, int]:
        return self.out_dim, self.in_dim

    def apply(self, v: np.ndarray) -> np.ndarray:
        for c in self.components:
            v = c.apply(v)
        return v

    __call__ = apply

    def with_payloads(self, payloads: Sequence[Sequence[np.ndarray]]) -> "SparseComposition":
        return SparseComposition([c.with_payloads(p) for c, p in zip(self.components, payloads)])

    def payloads(self) -> list[list[np.ndarray]]:
        return [[p.copy() for p in c.payloads] for c in self.components]

    def __repr__(self):
        return "SparseComposition(" + " -> ".join(str(c.in_dim) for c in self.components) + f" -> {self.out_dim})"


def apply_component(S: BlockSparseComponent, v: np.ndarray) -> np.ndarray:
    return S.apply(v)


def apply_composition(c: SparseComposition, v: np.ndarray) -> np.ndarray:
    return c.apply(v)


def densify(c: SparseComposition | BlockSparseComponent) -> np.ndarray:
    """Multiply the factors out into one dense matrix (oracle use only)."""
    if isinstance(c, BlockSparseComponent):
        return c.to_dense()
    out = c.components[0].to_dense()
    for comp in c.components[1:]:
        out = comp.to_dense() @ out
    return out


def flop_count(c) -> int:
    """Multiply-adds of the apply path.

    Compositions count ``rows * cols`` per block; a block that is a 1x1 unit
    (an identity copy) counts 0. Dense matrices count ``out * in``.
    """
    if isinstance(c, SparseComposition):
        return sum(flop_count(comp) for comp in c.components)
    if isinstance(c, BlockSparseComponent):
        return sum(b.rows * b.cols for b, p in zip(c.blocks, c.payloads)
                   if not (b.rows == b.cols == 1 and p[0, 0] == 1.0))
    r, k = np.shape(c)
    return int(r * k)


# -- structure builders ------------------------------------------------------------

def _init_payload(rng, rows, cols, init):
    if init == "zeros" or rng is None:
        return np.zeros((rows, cols))
    if init == "scaled_random":
        return rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols))
    raise ValueError(f"unknown init {init!r}")


def build_component1(P: int, feat_per_lm: int = 128, out_per_lm: int = 16, rng=None, init: str = "zeros") -> BlockSparseComponent:
    """Per-landmark reduction: ``P`` blocks of ``out_per_lm x feat_per_lm``."""
    blocks = [BlockSpec(i * out_per_lm, i * feat_per_lm, out_per_lm, feat_per_lm) for i in range(P)]
    return BlockSparseComponent(P * out_per_lm, P * feat_per_lm, blocks,
                                [_init_payload(rng, out_per_lm, feat_per_lm, init) for _ in blocks])


def neighborhood_spans(scheme: LandmarkScheme) -> list[tuple[str, int, int]]:
    """``(name, first, count)`` per neighborhood, ordered by first landmark.

    Raises if a neighborhood is not a contiguous run of landmark indices.
    """
    spans = []
    for name, idx in scheme.neighborhoods.items():
        idx = sorted(idx)
        if idx != list(range(idx[0], idx[0] + len(idx))):
            raise ValueError(f"neighborhood {name!r} is not contiguous in landmark order")
        spans.append((name, idx[0], len(idx)))
    return sorted(spans, key=lambda s: s[1])


def build_component2(scheme: LandmarkScheme, in_per_lm: int = 16, out_per_lm: int = 8, rng=None, init: str = "zeros") -> BlockSparseComponent:
    """Neighborhood mixing: a group of ``g`` landmarks becomes one ``(8g x 16g)`` block."""
    blocks = [BlockSpec(first * out_per_lm, first * in_per_lm, g * out_per_lm, g * in_per_lm)
              for _, first, g in neighborhood_spans(scheme)]
    P = scheme.n_points
    return BlockSparseComponent(P * out_per_lm, P * in_per_lm, blocks,
                                [_init_payload(rng, b.rows, b.cols, init) for b in blocks])


def build_component3(P: int, in_dim: int = 392, rng=None, init: str = "zeros") -> BlockSparseComponent:
    """Dense rectification onto the ``2P`` shape update."""
    return BlockSparseComponent.dense(_init_payload(rng, 2 * P, in_dim, init))


def build_paper_structure(scheme: LandmarkScheme, feat_per_lm: int = 128, mid1: int = 16, mid2: int = 8,
                          rng=None, init: str = "zeros") -> SparseComposition:
    """Local -> neighborhood -> global composition (6272 -> 784 -> 392 -> 98 for 49 points)."""
    P = scheme.n_points
    return SparseComposition([
        build_component1(P, feat_per_lm, mid1, rng, init),
        build_component2(scheme, mid1, mid2, rng, init),
        build_component3(P, P * mid2, rng, init),
    ])


def random_composition(dims: Sequence[int], rng, max_blocks: int = 4) -> SparseComposition:
    """Random block-diagonal factors (last one dense) chaining ``dims[0] -> ... -> dims[-1]``."""
    comps = []
    for i, (din, dout) in enumerate(zip(dims, dims[1:])):
        if i == len(dims) - 2:
            comps.append(BlockSparseComponent.dense(rng.normal(size=(dout, din))))
            continue
        nb = int(rng.integers(1, min(max_blocks, din, dout) + 1))
        rcuts = np.sort(rng.choice(np.arange(1, dout), nb - 1, replace=False)) if nb > 1 else np.array([], int)
        ccuts = np.sort(rng.choice(np.arange(1, din), nb - 1, replace=False)) if nb > 1 else np.array([], int)
        redges = np.r_[0, rcuts, dout]
        cedges = np.r_[0, ccuts, din]
        blocks, payloads = [], []
        for k in range(nb):
            if rng.random() < 0.2 and nb > 1:
                continue  # leave some rows/cols uncovered
            spec = BlockSpec(int(redges[k]), int(cedges[k]), int(redges[k + 1] - redges[k]), int(cedges[k + 1] - cedges[k]))
            blocks.append(spec)
            payloads.append(rng.normal(size=(spec.rows, spec.cols)))
        comps.append(BlockSparseComponent(dout, din, blocks, payloads))
    return SparseComposition(comps)
