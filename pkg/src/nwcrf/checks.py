"""Self-checks for the window CRF: dense oracle, shift connectivity, gradients, edge counts.

Each check returns a ``CheckResult``; the command-line ``check`` command
runs them all on a small grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Variable, gradcheck
from .crf_classic import count_pairwise_edges, partition_windows
from .errors import ContractError
from .neural_crf import (CrfBlockInput, NeuralCrfBlock, NeuralCrfBlockParams, StageTrace,
                         crf_block_forward, crf_stage)

MAX_CHECK_EXTENT = 12


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def random_stage_params(rng: np.random.Generator, channels: int, n_heads: int, head_dim: int,
                        window: int) -> NeuralCrfBlockParams:
    """Stage parameters with a non-zero relative-position table."""
    p = NeuralCrfBlockParams.init(rng, channels, n_heads, head_dim, window)
    p.bias_table.value[...] = rng.normal(0.0, 0.5, p.bias_table.shape)
    return p


def _layer_norm_rows(f: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = f.mean(axis=-1, keepdims=True)
    var = ((f - mu) ** 2).mean(axis=-1, keepdims=True)
    return (f - mu) / np.sqrt(var + eps)


def dense_messages(features: np.ndarray, prediction: np.ndarray,
                   params: NeuralCrfBlockParams) -> np.ndarray:
    """All-pairs attention messages over an [H, W] grid, one node at a time.

    Node j is visible to node i when both fall in the same N x N tile of the
    unshifted grid; with N covering the grid this is plain dense attention.
    The relative bias is read from the table by coordinate offset.
    """
    h, w, c = features.shape
    n, nh, dh = params.window, params.n_heads, params.head_dim
    f = _layer_norm_rows(features.reshape(h * w, c))
    q = f @ params.w_q.value
    k = f @ params.w_k.value
    x = prediction.reshape(h * w, -1)
    table = params.bias_table.value
    ys, xs = np.divmod(np.arange(h * w), w)
    tile = (ys // n) * 10_000 + xs // n
    out = np.zeros_like(x)
    for i in range(h * w):
        cols = np.flatnonzero(tile == tile[i])
        rel = (ys[cols] - ys[i] + n - 1) * (2 * n - 1) + (xs[cols] - xs[i] + n - 1)
        for head in range(nh):
            sl = slice(head * dh, (head + 1) * dh)
            logits = k[cols, sl] @ q[i, sl] / np.sqrt(dh) + table[rel, head]
            a = np.exp(logits - logits.max())
            a /= a.sum()
            out[i, sl] = a @ x[cols, sl]
    return out.reshape(h, w, -1)


def check_dense_equivalence(h: int, w: int, n: int, seed: int = 0, channels: int = 6,
                            n_heads: int = 2, head_dim: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    params = random_stage_params(rng, channels, n_heads, head_dim, n)
    feats = rng.normal(size=(h, w, channels))
    pred = rng.normal(size=(h, w, n_heads * head_dim))
    trace: list[StageTrace] = []
    crf_stage(feats, pred, params, partition_windows(h, w, n), trace=trace)
    windowed = trace[0].pairwise.value.reshape(h, w, -1)
    diff = float(np.max(np.abs(windowed - dense_messages(feats, pred, params))))
    return CheckResult("dense-equivalence", diff < 1e-10, f"max |window - dense| = {diff:.3e}")


def _adjacent_pairs(h: int, w: int) -> list[tuple[int, int]]:
    pairs = [(y * w + x, y * w + x + 1) for y in range(h) for x in range(w - 1)]
    pairs += [(y * w + x, (y + 1) * w + x) for y in range(h - 1) for x in range(w)]
    return pairs


def check_shift_connectivity(h: int, w: int, n: int, seed: int = 0, channels: int = 4,
                             n_heads: int = 2, head_dim: int = 2) -> CheckResult:
    """Every 4-neighbour pair shares a window in one of the two stages with weight > 0."""
    rng = np.random.default_rng(seed)
    block = NeuralCrfBlock(random_stage_params(rng, channels, n_heads, head_dim, n),
                           random_stage_params(rng, channels, n_heads, head_dim, n))
    feats = rng.normal(size=(h, w, channels))
    pred = rng.normal(size=(h, w, n_heads * head_dim))
    trace: list[StageTrace] = []
    crf_block_forward(CrfBlockInput(feats, pred, partition_windows(h, w, n)), block, trace=trace)
    stages = [(partition_windows(h, w, n, shift=s), t.weights.value[0])
              for s, t in zip((False, True), trace)]
    m = n * n
    missing = []
    for i, j in _adjacent_pairs(h, w):
        linked = False
        for part, weights in stages:
            wi, si = divmod(int(part.node_slot[i]), m)
            wj, sj = divmod(int(part.node_slot[j]), m)
            if wi == wj and np.all(weights[wi, :, si, sj] > 0) and np.all(weights[wi, :, sj, si] > 0):
                linked = True
                break
        if not linked:
            missing.append((i, j))
    detail = f"{len(_adjacent_pairs(h, w)) - len(missing)}/{len(_adjacent_pairs(h, w))} adjacent pairs connected"
    if missing:
        detail += f"; first unconnected pair {missing[0]}"
    return CheckResult("shift-connectivity", not missing, detail)


def check_block_gradients(h: int, w: int, n: int, seed: int = 0, tol: float = 1e-4) -> CheckResult:
    """Central finite differences for every parameter tensor of one CRF block."""
    rng = np.random.default_rng(seed)
    channels, n_heads, head_dim = 3, 2, 2
    block = NeuralCrfBlock(random_stage_params(rng, channels, n_heads, head_dim, n),
                           random_stage_params(rng, channels, n_heads, head_dim, n))
    feats = Variable(rng.normal(size=(h, w, channels)))
    pred = Variable(rng.normal(size=(h, w, n_heads * head_dim)))
    probe = rng.normal(size=(h, w, n_heads * head_dim))
    part = partition_windows(h, w, n)

    def loss():
        out = crf_block_forward(CrfBlockInput(feats, pred, part), block)
        return ops.sum(ops.mul(out, probe))

    params = list(block.named().values()) + [feats, pred]
    err = gradcheck(loss, params, max_entries=12, seed=seed)
    return CheckResult("gradients", bool(err < tol), f"max relative error {err:.3e} (tolerance {tol:g})")


def measured_logit_counts(h: int, w: int, n: int) -> tuple[int, int]:
    """Off-diagonal logits among real nodes: (window stage, whole-grid dense attention)."""

    def off_diagonal(window: int) -> int:
        part = partition_windows(h, w, window)
        mask = part.attention_mask() & part.valid[:, :, None]
        return int(mask.sum()) - h * w

    # A single window spanning the longer side sees every real node.
    return off_diagonal(n), off_diagonal(max(h, w))


def check_edge_counts(h: int, w: int, n: int) -> CheckResult:
    window, dense = measured_logit_counts(h, w, n)
    expected_dense = count_pairwise_edges(h, w, n, fully_connected=True)
    if h % n or w % n:
        return CheckResult("edge-counts", dense == expected_dense,
                           f"dense formula {expected_dense} vs measured {dense}; window formula "
                           f"needs N to divide the grid (measured {window} with padding)")
    expected_window = count_pairwise_edges(h, w, n, fully_connected=False)
    ok = window == expected_window and dense == expected_dense
    return CheckResult("edge-counts", ok,
                       f"window formula {expected_window} vs measured {window}; "
                       f"dense formula {expected_dense} vs measured {dense}")


def run_all(h: int, w: int, n: int, seed: int = 0) -> list[CheckResult]:
    if max(h, w) > MAX_CHECK_EXTENT:
        raise ContractError(f"grid ({h}, {w}) exceeds {MAX_CHECK_EXTENT}x{MAX_CHECK_EXTENT}")
    if n < 1 or n > min(h, w):
        raise ContractError(f"window size {n} must lie in 1..{min(h, w)} for grid ({h}, {w})")
    return [
        check_dense_equivalence(h, w, n, seed),
        check_shift_connectivity(h, w, n, seed),
        check_block_gradients(min(h, 2 * n), min(w, 2 * n), n, seed),
        check_edge_counts(h, w, n),
    ]
