"""Bottom-up/top-down depth network with neural window CRF decoder levels.

Data flow for an H x W image (H, W divisible by 32)::

    encoder  -> features at 1/4, 1/8, 1/16, 1/32
    PPM head -> initial prediction X at 1/32 (width heads[0] * head_dim)
    for each level, top to bottom:
        X <- CRF block(F_level, X)              (regular + shifted windows)
        X <- 1x1 conv(pixel_rearrange(X))        (top three levels only)
    depth = max_depth * sigmoid(1x1 conv(X))    at 1/4 resolution

``decoder="conv"`` swaps each CRF block for two 3x3 convolutions over
concat(F, X); everything else is shared, which makes it the ablation
baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .autodiff import Variable, as_variable, uniform_init
from .crf_classic import partition_windows
from .errors import ContractError, NumericError, ShapeError
from .neural_crf import AttentionOptions, CrfBlockInput, NeuralCrfBlock, crf_block_forward

PATCH_SCALES = (4, 8, 16, 32)
# Keeps the sigmoid output inside the open interval (0, 1) in float64.
_SIGMOID_EPS = 1e-12


@dataclass
class ModelConfig:
    levels: int = 4
    window_size: int = 7
    heads: tuple[int, ...] = (32, 16, 8, 4)
    head_dim: int = 32
    encoder_widths: tuple[int, ...] = (64, 128, 256, 512)
    ppm_scales: tuple[int, ...] = (1, 2, 3, 6)
    max_depth: float = 10.0
    seed: int = 0
    decoder: str = "crf"
    use_shift: bool = True
    scale_logits: bool = True
    normalize_features: bool = True
    # Fixed brightness normalization applied to the input image.
    input_mean: float = 0.0
    input_std: float = 1.0

    def __post_init__(self):
        self.heads = tuple(int(h) for h in self.heads)
        self.encoder_widths = tuple(int(c) for c in self.encoder_widths)
        self.ppm_scales = tuple(int(s) for s in self.ppm_scales)
        self.validate()

    def validate(self) -> None:
        if self.levels != 4:
            raise ContractError(f"levels must be 4, got {self.levels}")
        if len(self.heads) != 4 or len(self.encoder_widths) != 4:
            raise ContractError("heads and encoder_widths need one entry per level")
        if min(self.heads + self.encoder_widths) < 1 or self.head_dim < 1 or self.window_size < 1:
            raise ContractError("all widths, head counts and the window size must be positive")
        if not self.ppm_scales or min(self.ppm_scales) < 1:
            raise ContractError("ppm_scales must be a non-empty list of positive sizes")
        if not self.input_std > 0:
            raise ContractError("input_std must be positive")
        if not self.max_depth > 0:
            raise ContractError("max_depth must be positive")
        if self.decoder not in ("crf", "conv"):
            raise ContractError(f"decoder must be 'crf' or 'conv', got {self.decoder!r}")
        for lvl in range(3):
            if (self.heads[lvl] * self.head_dim) % 4:
                raise ContractError(f"level {lvl} width must be divisible by 4 for rearrange")

    def pred_width(self, level: int) -> int:
        return self.heads[level] * self.head_dim

    @classmethod
    def wide(cls, **kw) -> "ModelConfig":
        """Wider encoder variant; the decoder widths are the same as the default."""
        return cls(encoder_widths=(128, 256, 512, 1024), **kw)


@dataclass
class FeaturePyramid:
    maps: list[Variable]  # 1/4, 1/8, 1/16, 1/32

    def __iter__(self) -> Iterator[Variable]:
        return iter(self.maps)

    def __getitem__(self, i: int) -> Variable:
        return self.maps[i]


def _conv_params(rng, k: int, cin: int, cout: int) -> tuple[Variable, Variable]:
    fan_in = k * k * cin
    return (Variable(uniform_init(rng, (k, k, cin, cout), fan_in)),
            Variable(uniform_init(rng, (cout,), fan_in)))


@dataclass
class DepthNet:
    """Parameters plus forward pass; ``params`` is the ordered name -> Variable map."""

    config: ModelConfig
    params: dict[str, Variable] = field(default_factory=dict)
    blocks: list[NeuralCrfBlock] = field(default_factory=list)

    @classmethod
    def init(cls, config: ModelConfig) -> "DepthNet":
        rng = np.random.default_rng(config.seed)
        net = cls(config)
        p = net.params
        widths = config.encoder_widths
        cin = 48  # 3 channels after two 2x space-to-depth steps
        for s, c in enumerate(widths):
            p[f"enc{s}.down.w"], p[f"enc{s}.down.b"] = _conv_params(rng, 3, cin, c)
            p[f"enc{s}.res1.w"], p[f"enc{s}.res1.b"] = _conv_params(rng, 3, c, c)
            p[f"enc{s}.res2.w"], p[f"enc{s}.res2.b"] = _conv_params(rng, 3, c, c)
            cin = c
        top = widths[3]
        ppm_in = top * (1 + len(config.ppm_scales))
        p["ppm.w"], p["ppm.b"] = _conv_params(rng, 3, ppm_in, config.pred_width(0))
        for lvl in range(4):
            feat = widths[3 - lvl]
            cx = config.pred_width(lvl)
            if config.decoder == "crf":
                block = NeuralCrfBlock.init(rng, feat, config.heads[lvl], config.head_dim,
                                            config.window_size, config.use_shift)
                net.blocks.append(block)
                for name, var in block.named().items():
                    p[f"dec{lvl}.{name}"] = var
            else:
                p[f"dec{lvl}.conv1.w"], p[f"dec{lvl}.conv1.b"] = _conv_params(rng, 3, feat + cx, cx)
                p[f"dec{lvl}.conv2.w"], p[f"dec{lvl}.conv2.b"] = _conv_params(rng, 3, cx, cx)
            if lvl < 3:
                p[f"up{lvl}.w"], p[f"up{lvl}.b"] = _conv_params(rng, 1, cx // 4, config.pred_width(lvl + 1))
        p["head.w"], p["head.b"] = _conv_params(rng, 1, config.pred_width(3), 1)
        for name, var in p.items():
            var.name = name
        return net

    def named_parameters(self) -> dict[str, Variable]:
        return self.params

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(tensors)
        extra = set(tensors) - set(self.params)
        if missing or extra:
            raise ShapeError(f"parameter names differ: missing {sorted(missing)[:3]}, "
                             f"unexpected {sorted(extra)[:3]}")
        for k, v in self.params.items():
            t = np.asarray(tensors[k], dtype=np.float64)
            if t.shape != v.shape:
                raise ShapeError(f"{k}: stored extents {t.shape} != model extents {v.shape}")
            v.value[...] = t

    # -- forward pieces ---------------------------------------------------

    def _conv(self, x, name: str, stride: int = 1) -> Variable:
        return ops.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=stride)

    def encode(self, image) -> FeaturePyramid:
        image = as_variable(image)
        h, w = image.shape[-3], image.shape[-2]
        if h % 32 or w % 32:
            raise ShapeError(f"image extents ({h}, {w}) must be divisible by 32; pad the input first")
        if self.config.input_mean != 0.0 or self.config.input_std != 1.0:
            image = ops.mul(ops.add(image, -self.config.input_mean), 1.0 / self.config.input_std)
        x = ops.pixel_rearrange_inverse(ops.pixel_rearrange_inverse(image))
        maps = []
        for s in range(4):
            x = ops.gelu(self._conv(x, f"enc{s}.down", stride=1 if s == 0 else 2))
            r = self._conv(ops.gelu(self._conv(x, f"enc{s}.res1")), f"enc{s}.res2")
            x = ops.add(x, r)
            maps.append(x)
        return FeaturePyramid(maps)

    def effective_ppm_scales(self, h: int, w: int) -> tuple[int, ...]:
        scales = tuple(s for s in self.config.ppm_scales if s <= min(h, w))
        if not scales:
            raise ShapeError(f"top feature ({h}, {w}) is smaller than every PPM scale")
        return scales

    def ppm_head(self, top) -> Variable:
        h, w = top.shape[-3], top.shape[-2]
        c = top.shape[-1]
        present = self.effective_ppm_scales(h, w)
        branches = [top]
        channels = [np.arange(c)]
        for i, s in enumerate(self.config.ppm_scales):
            if s in present:
                branches.append(ops.resize_nearest(ops.avg_pool_to(top, s), h, w))
                channels.append(np.arange(c) + (i + 1) * c)
        kernel = self.params["ppm.w"]
        if len(branches) < 1 + len(self.config.ppm_scales):
            # Scales larger than the map are dropped together with their kernel slices.
            kernel = ops.take(kernel, np.concatenate(channels), axis=2)
        return ops.conv2d(ops.concat(branches, axis=-1), kernel, self.params["ppm.b"])

    def _decode_level(self, lvl: int, feat, x, trace) -> Variable:
        cfg = self.config
        if cfg.decoder == "conv":
            y = ops.gelu(self._conv(ops.concat([feat, x], axis=-1), f"dec{lvl}.conv1"))
            return self._conv(y, f"dec{lvl}.conv2")
        h, w = feat.shape[-3], feat.shape[-2]
        opts = AttentionOptions(cfg.scale_logits, cfg.normalize_features)
        part = partition_windows(h, w, cfg.window_size, shift=False)
        return crf_block_forward(CrfBlockInput(feat, x, part), self.blocks[lvl], opts, trace)

    def forward(self, image, trace: list | None = None) -> Variable:
        """Depth at 1/4 resolution, [H/4, W/4] or [B, H/4, W/4]."""
        image = as_variable(image)
        feats = self.encode(image)
        _check(feats[3], "encoder")
        x = self.ppm_head(feats[3])
        _check(x, "ppm_head")
        for lvl in range(4):
            x = self._decode_level(lvl, feats[3 - lvl], x, trace)
            _check(x, f"decoder level {lvl}")
            if lvl < 3:
                x = self._conv(ops.pixel_rearrange(x), f"up{lvl}")
                _check(x, f"upscale {lvl}")
        z = self._conv(x, "head")
        depth = ops.mul(ops.clip(ops.sigmoid(z), _SIGMOID_EPS, 1.0 - _SIGMOID_EPS), self.config.max_depth)
        _check(depth, "depth head")
        return ops.reshape(depth, depth.shape[:-1])

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Forward pass without recording; returns a plain array."""
        return self.forward(image).value


def _check(v: Variable, stage: str) -> None:
    if not np.isfinite(v.value).all():
        raise NumericError(stage)
