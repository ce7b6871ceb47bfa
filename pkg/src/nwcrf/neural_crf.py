"""Neural window fully-connected CRF optimization.

One *stage* builds a per-node energy from an image feature map F and a
multi-channel prediction X:

* unary: a 3x3 convolution over concat(F, X);
* pairwise: per window and per head, softmax(Q K^T / sqrt(d_h) + P) X_h, where
  Q and K are projections of (layer-normalized) F, P is a relative position
  bias and X_h is the head's channel slice of X;

and maps concat(unary, pairwise) through a two-layer network to X'.  A
*block* runs one stage on the regular windows and a second, independently
parameterized stage on the shifted windows.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import ops
from .autodiff import Variable, as_variable, uniform_init
from .crf_classic import WindowPartition, partition_windows
from .errors import ContractError, DegenerateRowError, ShapeError


@dataclass
class NeuralCrfBlockParams:
    """Learnable weights of one CRF optimization stage.

    Query/key projections pack all heads side by side: columns
    ``h*d_h:(h+1)*d_h`` of ``w_q`` are head h's [C x d_h] projection.
    """

    w_q: Variable            # [C, n_heads * d_h]
    w_k: Variable            # [C, n_heads * d_h]
    bias_table: Variable     # [(2N-1)^2, n_heads]
    unary_kernel: Variable   # [3, 3, C + C_x, C_x]
    unary_bias: Variable     # [C_x]
    fc1_w: Variable          # [2 C_x, C_mlp]
    fc1_b: Variable          # [C_mlp]
    fc2_w: Variable          # [C_mlp, C_x]
    fc2_b: Variable          # [C_x]
    n_heads: int
    head_dim: int
    window: int

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, n_heads: int, head_dim: int,
             window: int, mlp_ratio: int = 4) -> "NeuralCrfBlockParams":
        c, cx = channels, n_heads * head_dim
        hidden = mlp_ratio * cx
        return cls(
            w_q=Variable(uniform_init(rng, (c, cx), c)),
            w_k=Variable(uniform_init(rng, (c, cx), c)),
            bias_table=Variable(np.zeros(((2 * window - 1) ** 2, n_heads))),
            unary_kernel=Variable(uniform_init(rng, (3, 3, c + cx, cx), 9 * (c + cx))),
            unary_bias=Variable(uniform_init(rng, (cx,), 9 * (c + cx))),
            fc1_w=Variable(uniform_init(rng, (2 * cx, hidden), 2 * cx)),
            fc1_b=Variable(uniform_init(rng, (hidden,), 2 * cx)),
            fc2_w=Variable(uniform_init(rng, (hidden, cx), hidden)),
            fc2_b=Variable(uniform_init(rng, (cx,), hidden)),
            n_heads=n_heads, head_dim=head_dim, window=window,
        )

    @property
    def pred_channels(self) -> int:
        return self.n_heads * self.head_dim

    def named(self) -> dict[str, Variable]:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if isinstance(getattr(self, f.name), Variable)}


@dataclass
class CrfBlockInput:
    features: Variable | np.ndarray   # [B?, H_p, W_p, C]
    prediction: Variable | np.ndarray  # [B?, H_p, W_p, C_x]
    partition: WindowPartition


@dataclass(frozen=True)
class AttentionOptions:
    scale_logits: bool = True
    normalize_features: bool = True


def relative_position_index(n: int) -> np.ndarray:
    """[N*N, N*N] table row for each (query, key) slot pair of an N x N window."""
    yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    coords = np.stack([yy.reshape(-1), xx.reshape(-1)], axis=1)
    delta = coords[None, :, :] - coords[:, None, :]  # offset of key b from query a
    return (delta[..., 0] + n - 1) * (2 * n - 1) + (delta[..., 1] + n - 1)


def relative_bias_lookup(table, n: int) -> Variable:
    """Expand a [(2N-1)^2, heads] table to per-head pair biases [heads, N*N, N*N]."""
    table = as_variable(table)
    if table.ndim != 2 or table.shape[0] != (2 * n - 1) ** 2:
        raise ShapeError(f"bias table {table.shape} does not match window size {n}")
    idx = relative_position_index(n)
    p = ops.take(table, idx, axis=0)  # [N2, N2, heads]
    return ops.transpose(p, (2, 0, 1))


def window_attention(q, k, x, bias, mask: np.ndarray, scale: float) -> tuple[Variable, Variable]:
    """Batched masked attention with values taken straight from the prediction.

    Shapes: q, k [..., heads, M, d_h]; x [..., heads, M, d_x]; bias
    broadcastable to [..., heads, M, M]; mask broadcastable to the logits.
    Returns (messages [..., heads, M, d_x], weights [..., heads, M, M]).
    """
    logits = ops.matmul(q, ops.transpose(k, _swap_last(k.ndim)))
    if scale != 1.0:
        logits = ops.mul(logits, scale)
    logits = ops.add(logits, bias)
    weights = ops.softmax_rows(logits, mask)
    return ops.matmul(weights, x), weights


def _swap_last(ndim: int) -> tuple[int, ...]:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


def _project_qk(features, params: NeuralCrfBlockParams, opts: AttentionOptions):
    f = ops.layer_norm(features) if opts.normalize_features else features
    return ops.linear(f, params.w_q), ops.linear(f, params.w_k)


def _split_heads(t: Variable, n_heads: int) -> Variable:
    """[..., M, heads*d] -> [..., heads, M, d]."""
    *lead, m, c = t.shape
    t = ops.reshape(t, (*lead, m, n_heads, c // n_heads))
    nl = len(lead)
    return ops.transpose(t, tuple(range(nl)) + (nl + 1, nl, nl + 2))


def _merge_heads(t: Variable) -> Variable:
    """[..., heads, M, d] -> [..., M, heads*d]."""
    *lead, nh, m, d = t.shape
    nl = len(lead)
    t = ops.transpose(t, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return ops.reshape(t, (*lead, m, nh * d))


def attention_pairwise(f_win, x_win, bias, mask, params: NeuralCrfBlockParams,
                       opts: AttentionOptions = AttentionOptions()) -> Variable:
    """Pairwise messages for a single flattened window.

    ``f_win`` [M, C], ``x_win`` [M, C_x], ``bias`` [heads, M, M] and node
    validity ``mask`` [M].  Returns [M, C_x].
    """
    f_win, x_win = as_variable(f_win), as_variable(x_win)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DegenerateRowError("window has no valid node")
    if x_win.shape[-1] != params.pred_channels or f_win.shape[0] != x_win.shape[0]:
        raise ShapeError(f"window extents {f_win.shape} / {x_win.shape} do not match parameters")
    q, k = _project_qk(f_win, params, opts)
    scale = params.head_dim ** -0.5 if opts.scale_logits else 1.0
    out, _ = window_attention(
        _split_heads(q, params.n_heads), _split_heads(k, params.n_heads),
        _split_heads(x_win, params.n_heads), bias, mask[None, None, :], scale,
    )
    return _merge_heads(out)


def _batched(t) -> tuple[Variable, bool]:
    t = as_variable(t)
    if t.ndim == 3:
        return ops.reshape(t, (1,) + t.shape), True
    if t.ndim != 4:
        raise ShapeError(f"expected [H, W, C] or [B, H, W, C], got {t.shape}")
    return t, False


def to_windows(t: Variable, partition: WindowPartition) -> Variable:
    """[B, H, W, C] -> [B, k, N*N, C] with zeros in padding slots."""
    b, h, w, c = t.shape
    flat = ops.reshape(t, (b, h * w, c))
    return ops.take(flat, partition.slot_node, axis=1)


def from_windows(t: Variable, partition: WindowPartition) -> Variable:
    """[B, k, N*N, C] -> [B, H, W, C], dropping padding slots."""
    b, k, m, c = t.shape
    h, w = partition.extents
    flat = ops.reshape(t, (b, k * m, c))
    return ops.reshape(ops.take(flat, partition.node_slot, axis=1), (b, h, w, c))


@dataclass
class StageTrace:
    unary: Variable
    pairwise: Variable
    weights: Variable

    @property
    def logit_entries_per_head(self) -> int:
        """Logits evaluated per head and sample: k * (N^2)^2."""
        b, k, nh, m, _ = self.weights.shape
        return k * m * m


def neural_unary(features, prediction, params: NeuralCrfBlockParams) -> Variable:
    """3x3 convolution over the concatenated features and prediction."""
    return ops.conv2d(ops.concat([features, prediction], axis=-1), params.unary_kernel,
                      params.unary_bias)


def crf_stage(features, prediction, params: NeuralCrfBlockParams, partition: WindowPartition,
              opts: AttentionOptions = AttentionOptions(),
              trace: list | None = None) -> Variable:
    """One CRF optimization over the given partition; returns X' like ``prediction``."""
    f, squeeze = _batched(features)
    x, _ = _batched(prediction)
    b, h, w, c = f.shape
    if x.shape[:3] != (b, h, w) or x.shape[3] != params.pred_channels:
        raise ShapeError(f"prediction {x.shape} does not match features {f.shape} "
                         f"and {params.pred_channels} prediction channels")
    if partition.extents != (h, w) or partition.window != params.window:
        raise ShapeError(f"partition {partition.extents}/N={partition.window} does not match "
                         f"grid {(h, w)}/N={params.window}")

    unary = neural_unary(f, x, params)

    q, k = _project_qk(f, params, opts)
    nh = params.n_heads
    qw = _split_heads(to_windows(q, partition), nh)   # [B, k, nh, M, d]
    kw = _split_heads(to_windows(k, partition), nh)
    xw = _split_heads(to_windows(x, partition), nh)
    bias = relative_bias_lookup(params.bias_table, params.window)   # [nh, M, M]
    mask = partition.attention_mask()[:, None]                      # [k, 1, M, M]
    scale = params.head_dim ** -0.5 if opts.scale_logits else 1.0
    msgs, weights = window_attention(qw, kw, xw, bias, mask, scale)
    pairwise = from_windows(_merge_heads(msgs), partition)

    energy = ops.concat([unary, pairwise], axis=-1)
    hidden = ops.gelu(ops.linear(energy, params.fc1_w, params.fc1_b))
    out = ops.linear(hidden, params.fc2_w, params.fc2_b)
    if trace is not None:
        trace.append(StageTrace(unary, pairwise, weights))
    if squeeze:
        out = ops.reshape(out, out.shape[1:])
    return out


@dataclass
class NeuralCrfBlock:
    """Regular-window stage followed by a shifted-window stage."""

    regular: NeuralCrfBlockParams
    shifted: NeuralCrfBlockParams
    use_shift: bool = True

    @classmethod
    def init(cls, rng, channels: int, n_heads: int, head_dim: int, window: int,
             use_shift: bool = True) -> "NeuralCrfBlock":
        return cls(NeuralCrfBlockParams.init(rng, channels, n_heads, head_dim, window),
                   NeuralCrfBlockParams.init(rng, channels, n_heads, head_dim, window),
                   use_shift)

    def named(self) -> dict[str, Variable]:
        out = {f"regular.{k}": v for k, v in self.regular.named().items()}
        out.update({f"shifted.{k}": v for k, v in self.shifted.named().items()})
        return out


def crf_block_forward(inp: CrfBlockInput, block: NeuralCrfBlock,
                      opts: AttentionOptions = AttentionOptions(),
                      trace: list | None = None) -> Variable:
    """Regular then shifted optimization; ``inp.partition`` must be unshifted."""
    part = inp.partition
    if part.is_shifted:
        raise ContractError("crf_block_forward expects the unshifted partition")
    x = crf_stage(inp.features, inp.prediction, block.regular, part, opts, trace)
    h, w = part.extents
    second = partition_windows(h, w, part.window, shift=block.use_shift)
    return crf_stage(inp.features, x, block.shifted, second, opts, trace)
