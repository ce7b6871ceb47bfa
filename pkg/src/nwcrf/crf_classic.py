"""Hand-crafted fully-connected CRF energies and window partitioning.

These are reference implementations: they score a labelled patch grid with
the classic log-probability unary term and the color/position weighted
pairwise term, either over every ordered node pair or only over pairs that
share a window.  The window machinery (:class:`WindowPartition`) is reused
by the neural CRF layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ContractError, DomainError, ShapeError


@dataclass
class GridGraph:
    """Patch grid with one value, one RGB color and an implicit (row, col) position per node.

    ``prob`` holds the probability each node assigns to its own value; when
    omitted every node is certain and the unary energy vanishes.
    """

    values: np.ndarray
    colors: np.ndarray
    prob: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"values must be [H_p, W_p], got {self.values.shape}")
        if self.colors.shape != self.values.shape + (3,):
            raise ShapeError(f"colors must be {self.values.shape + (3,)}, got {self.colors.shape}")
        if self.prob is not None:
            self.prob = np.asarray(self.prob, dtype=np.float64)
            if self.prob.shape != self.values.shape:
                raise ShapeError(f"prob must be {self.values.shape}, got {self.prob.shape}")

    @property
    def extents(self) -> tuple[int, int]:
        return self.values.shape

    def positions(self) -> np.ndarray:
        h, w = self.extents
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return np.stack([yy, xx], axis=-1).astype(np.float64)


@dataclass(frozen=True)
class ClassicCrfParams:
    sigma: float = 1.0
    # Square the color/position distances inside the kernels (conventional
    # bilateral form) instead of using them as printed.
    squared: bool = False

    def __post_init__(self):
        if not self.sigma > 0:
            raise ContractError(f"sigma must be positive, got {self.sigma}")


@dataclass
class WindowPartition:
    """Assignment of an H_p x W_p grid to non-overlapping N x N windows.

    The grid is zero-padded at the bottom/right to multiples of N.  With a
    shift, the padded grid is cyclically rolled by ``-shift`` before tiling,
    so window slot (r, c) of the rolled grid holds padded cell
    ((r + s_y) mod Hpad, (c + s_x) mod Wpad).

    Attributes:
        slot_node: [k, N*N] flat node index (row-major over the real grid) held
            by each window slot, or -1 for padding.
        node_slot: [H_p * W_p] flat slot position (window * N*N + slot) of each node.
        region: [k, N*N] wrap class of each slot; nodes may only exchange
            messages with nodes of the same class.
    """

    extents: tuple[int, int]
    window: int
    shift: tuple[int, int]
    padded: tuple[int, int]
    slot_node: np.ndarray
    node_slot: np.ndarray
    region: np.ndarray
    _mask_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_windows(self) -> int:
        return self.slot_node.shape[0]

    @property
    def is_shifted(self) -> bool:
        return self.shift != (0, 0)

    @property
    def valid(self) -> np.ndarray:
        """[k, N*N] True where the slot holds a real node."""
        return self.slot_node >= 0

    def node_window(self) -> np.ndarray:
        """[H_p, W_p] window index of every real node."""
        n2 = self.window * self.window
        return (self.node_slot // n2).reshape(self.extents)

    def attention_mask(self) -> np.ndarray:
        """[k, N*N, N*N] pair mask: valid columns of the query's wrap class.

        Rows of padding slots carry a lone self entry so that every row stays
        well defined; their outputs are discarded on un-partitioning.
        """
        if "attn" not in self._mask_cache:
            valid = self.valid
            same = self.region[:, :, None] == self.region[:, None, :]
            mask = same & valid[:, None, :]
            eye = np.eye(valid.shape[1], dtype=bool)
            mask = np.where(valid[:, :, None], mask, eye[None])
            self._mask_cache["attn"] = mask
        return self._mask_cache["attn"]


@lru_cache(maxsize=64)
def partition_windows(h: int, w: int, n: int, shift: bool = False) -> WindowPartition:
    """Tile an h x w grid with N x N windows, optionally shifted by N // 2.

    Results are cached and shared; treat them as read-only.
    """
    if n < 1 or h < 1 or w < 1:
        raise ContractError(f"grid ({h}, {w}) and window {n} must be positive")
    hp = -(-h // n) * n
    wp = -(-w // n) * n
    s = n // 2 if shift else 0
    rows = (np.arange(hp) + s) % hp  # padded row shown at rolled row r
    cols = (np.arange(wp) + s) % wp
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    real = (rr < h) & (cc < w)
    flat = np.where(real, rr * w + cc, -1)
    wrapped = (np.arange(hp) + s >= hp)[:, None] * 2 + (np.arange(wp) + s >= wp)[None, :]
    ky, kx = hp // n, wp // n

    def tile(a):
        return a.reshape(ky, n, kx, n).transpose(0, 2, 1, 3).reshape(ky * kx, n * n)

    slot_node = tile(flat)
    region = tile(np.broadcast_to(wrapped, (hp, wp)).copy())
    node_slot = np.empty(h * w, dtype=np.int64)
    pos = np.flatnonzero(slot_node.reshape(-1) >= 0)
    node_slot[slot_node.reshape(-1)[pos]] = pos
    return WindowPartition(
        extents=(h, w), window=n, shift=(s, s), padded=(hp, wp),
        slot_node=slot_node, node_slot=node_slot, region=region,
    )


def shifted_mask(partition: WindowPartition) -> np.ndarray:
    """Pair mask [k, N*N, N*N] keeping wrapped and non-wrapped nodes apart.

    Combined with padding validity; only defined for shifted partitions.
    """
    if not partition.is_shifted:
        raise ContractError("shifted_mask requires a partition built with shift")
    return partition.attention_mask()


def unary_energy_classic(prob) -> np.ndarray:
    prob = np.asarray(prob, dtype=np.float64)
    if np.any(prob <= 0) or np.any(prob > 1):
        raise DomainError("probabilities must lie in (0, 1]")
    return -np.log(prob)


def _kernel(dist: np.ndarray, params: ClassicCrfParams) -> np.ndarray:
    d = dist * dist if params.squared else dist
    return np.exp(-d / (2.0 * params.sigma**2))


def pairwise_energy_classic(g: GridGraph, params: ClassicCrfParams,
                            i: tuple[int, int], j: tuple[int, int]) -> float:
    h, w = g.extents
    for node in (i, j):
        if not (0 <= node[0] < h and 0 <= node[1] < w):
            raise ContractError(f"node {node} outside grid {g.extents}")
    if tuple(i) == tuple(j):
        return 0.0
    dx = abs(g.values[i] - g.values[j])
    dcol = np.linalg.norm(g.colors[i] - g.colors[j])
    dpos = np.hypot(i[0] - j[0], i[1] - j[1])
    return float(dx * _kernel(dcol, params) * _kernel(dpos, params))


def _pair_matrix(x: np.ndarray, col: np.ndarray, pos: np.ndarray, params: ClassicCrfParams) -> np.ndarray:
    """Ordered-pair energies among the given nodes (diagonal is zero)."""
    dx = np.abs(x[:, None] - x[None, :])
    dcol = np.linalg.norm(col[:, None, :] - col[None, :, :], axis=-1)
    dpos = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    e = dx * _kernel(dcol, params) * _kernel(dpos, params)
    np.fill_diagonal(e, 0.0)
    return e


def total_energy(g: GridGraph, params: ClassicCrfParams,
                 partition: WindowPartition | None = None) -> float:
    """Unary sum plus pairwise sum over ordered distinct pairs.

    Without a partition every pair is connected; with one, only pairs that
    share a window contribute.
    """
    unary = 0.0 if g.prob is None else float(unary_energy_classic(g.prob).sum())
    x = g.values.reshape(-1)
    col = g.colors.reshape(-1, 3)
    pos = g.positions().reshape(-1, 2)
    if partition is None:
        return unary + float(_pair_matrix(x, col, pos, params).sum())
    if partition.extents != g.extents:
        raise ShapeError(f"partition covers {partition.extents}, graph is {g.extents}")
    pair = 0.0
    for slots in partition.slot_node:
        nodes = slots[slots >= 0]
        if len(nodes) > 1:
            pair += float(_pair_matrix(x[nodes], col[nodes], pos[nodes], params).sum())
    return unary + pair


def count_pairwise_edges(h: int, w: int, n: int, fully_connected: bool) -> int:
    """Ordered pairwise-potential evaluations for one pass over an h x w patch grid."""
    if min(h, w, n) < 1:
        raise ContractError("extents and window size must be positive")
    if n > min(h, w):
        raise ContractError(f"window size {n} exceeds grid ({h}, {w})")
    hw = h * w
    if fully_connected:
        return hw * (hw - 1)
    if h % n or w % n:
        raise ContractError(f"window size {n} does not tile grid ({h}, {w}) exactly")
    return hw * (n * n - 1)
