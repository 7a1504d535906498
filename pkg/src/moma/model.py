"""Frozen image transformer with Divide+Modulate adapters for video input.

Pixels (B, T, P, P[, ch]) are cut into p x p patches and embedded by a frozen
affine map plus frozen per-position embeddings (shared across frames). Each
layer of the pattern then runs either

* a plain layer: FFN(per-frame attention(V)), or
* a modulated layer: x = windowed attention(V); x = fuse(x, SSM(x)) for each
  stacked adapter; V = FFN(x), or
* a standalone SSM layer (decoder-style patterns): V = V + scale(SSM(V)).

The video feature is the mean over all tokens of the last layer's output,
fed to a trainable linear classifier.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from moma import attention as attn
from moma.attention import AttentionWeights, VideoTensor, WindowSpec
from moma.core import ops, rng as rngs
from moma.core.serialize import digest
from moma.core.tensor import Tensor
from moma.errors import ConfigError, DimensionError
from moma.fusion import FusionParams, ModulationPair, fuse, init_fusion
from moma.pattern import LayerPattern, parse_pattern
from moma.ssm import ScanPlan, SSMParams, init_ssm_params, ssm_forward


@dataclass
class ModelConfig:
    frames: int = 8
    image: int = 32
    patch: int = 4
    in_channels: int = 1
    dim: int = 32
    heads: int = 4
    mlp_ratio: int = 4
    pattern: str = "[TM]4"
    window: str = "4x4"
    fusion: str = "seqmod"
    fusion_half: str = "scale"
    fusion_weights: tuple[float, float] = (1.0, 1.0)
    scan_plan: str = field(default_factory=lambda: ScanPlan.default().render())
    state: int = 8
    hidden: int = 0          # 0 means 2 * dim
    conv_width: int = 4
    gate: str = "gelu"
    classes: int = 4
    backbone_seed: int = 0

    @property
    def grid(self) -> tuple[int, int, int]:
        return (self.frames, self.image // self.patch, self.image // self.patch)

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)


@dataclass
class Adapter:
    ssm: SSMParams
    fusion: FusionParams


class MoMaModel:
    """Parameters plus forward pass. Backbone tensors never require gradients."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        cfg = config
        if cfg.image % cfg.patch:
            raise DimensionError(f"image size {cfg.image} not divisible by patch {cfg.patch}")
        self.pattern: LayerPattern = parse_pattern(cfg.pattern)
        self.window = WindowSpec.parse(cfg.window)
        self.plan = ScanPlan.parse(cfg.scan_plan)
        T, H, W = cfg.grid
        self.window.resolve(T, H, W)
        C = cfg.dim
        bb = rngs.stream(cfg.backbone_seed, "backbone")
        patch_in = cfg.patch * cfg.patch * cfg.in_channels
        self.embed_w = Tensor(bb.normal(0.0, 1.0 / np.sqrt(patch_in), (patch_in, C)))
        self.embed_b = Tensor(bb.normal(0.0, 0.02, C))
        self.pos = Tensor(bb.normal(0.0, 0.5, (H * W, C)))
        self.ln_pre_g = Tensor(1.0 + bb.normal(0.0, 0.1, C))
        self.ln_pre_b = Tensor(bb.normal(0.0, 0.02, C))
        self.layers: list[AttentionWeights] = [
            attn.init_attention_weights(C, cfg.heads, rngs.stream(cfg.backbone_seed, "layer", i), cfg.mlp_ratio)
            for i in range(self.pattern.depth)
        ]

        # adapters: one list per pattern entry (empty for plain layers)
        self.adapters: list[list[Adapter]] = []
        self.decoders: list[SSMParams] = []
        hidden = cfg.hidden or 2 * C
        k = 0
        for spec in self.pattern.layers:
            if spec.kind == "decoder":
                self.decoders.append(self._new_ssm(seed, k, hidden))
                k += 1
                continue
            mods = []
            for _ in range(spec.modulators):
                mods.append(Adapter(self._new_ssm(seed, k, hidden),
                                    init_fusion(cfg.fusion, C, weights=cfg.fusion_weights, half=cfg.fusion_half)))
                k += 1
            self.adapters.append(mods)
        self.head_w = Tensor(np.zeros((C, cfg.classes)))
        self.head_b = Tensor(np.zeros(cfg.classes))
        for t in self.trainable().values():
            t.requires_grad = True

    def _new_ssm(self, seed: int, k: int, hidden: int) -> SSMParams:
        cfg = self.config
        return init_ssm_params(cfg.dim, rngs.stream(seed, "ssm", k), hidden=hidden, state=cfg.state,
                               directions=len(self.plan), conv_width=cfg.conv_width)

    # -- parameter views ---------------------------------------------------

    def frozen(self) -> dict[str, Tensor]:
        out = {"embed.w": self.embed_w, "embed.b": self.embed_b, "embed.pos": self.pos,
               "embed.ln_g": self.ln_pre_g, "embed.ln_b": self.ln_pre_b}
        for i, w in enumerate(self.layers):
            out.update({f"layers.{i}.{k}": v for k, v in w.tensors().items()})
        return out

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        for i, mods in enumerate(self.adapters):
            for j, a in enumerate(mods):
                out.update({f"adapters.{i}.{j}.ssm.{k}": v for k, v in a.ssm.tensors().items()})
                out.update({f"adapters.{i}.{j}.fusion.{k}": v for k, v in a.fusion.tensors.items()})
        for i, d in enumerate(self.decoders):
            out.update({f"decoders.{i}.{k}": v for k, v in d.tensors().items()})
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def frozen_digest(self) -> str:
        return digest({k: v.data for k, v in self.frozen().items()})

    def uses_ssm(self) -> bool:
        return self.config.fusion != "skip" or bool(self.decoders)

    # -- forward -----------------------------------------------------------

    def embed(self, pixels) -> VideoTensor:
        """(B, T, P, P[, ch]) pixels -> (B, T*H*W, C) tokens."""
        x = np.asarray(pixels, dtype=np.float64)
        if x.ndim == 4:
            x = x[..., None]
        cfg = self.config
        B, T, P, P2, ch = x.shape
        p = cfg.patch
        if (T, P, P2, ch) != (cfg.frames, cfg.image, cfg.image, cfg.in_channels):
            raise DimensionError(f"input {x.shape} does not match config "
                                 f"(frames={cfg.frames}, image={cfg.image}, channels={cfg.in_channels})")
        H = W = P // p
        patches = x.reshape(B, T, H, p, W, p, ch).transpose(0, 1, 2, 4, 3, 5, 6).reshape(B, T * H * W, p * p * ch)
        tokens = patches @ self.embed_w.data + self.embed_b.data + np.tile(self.pos.data, (T, 1))
        tokens = ops.layer_norm(Tensor(tokens), self.ln_pre_g, self.ln_pre_b)
        return VideoTensor(tokens, T, H, W)

    def run_layers(self, v: VideoTensor, adapters: bool = True) -> VideoTensor:
        cfg = self.config
        li = 0
        for spec in self.pattern.layers:
            if spec.kind == "decoder":
                continue
            w = self.layers[li]
            mods = self.adapters[li]
            li += 1
            if not spec.modulated:
                v = attn.transformer_layer(v, w)
                continue
            a = attn.attend(v, w, self.window)
            x = a.data
            if adapters and cfg.fusion != "skip":
                for ad in mods:
                    y1, y2 = ssm_forward(x, ad.ssm, self.plan, v.grid, cfg.gate)
                    x = fuse(x, ModulationPair(y1, y2), ad.fusion)
            v = v.with_data(attn.ffn(x, w))
        if adapters:
            for d in self.decoders:
                y1, _ = ssm_forward(v.data, d, self.plan, v.grid, cfg.gate)
                v = v.with_data(ops.add(v.data, y1))
        return v

    def features(self, pixels, adapters: bool = True) -> Tensor:
        """Mean-pooled final token features, (B, C)."""
        return ops.mean(self.run_layers(self.embed(pixels), adapters).data, axis=-2)

    def logits(self, feats: Tensor) -> Tensor:
        return ops.linear(feats, self.head_w, self.head_b)

    def forward(self, pixels) -> Tensor:
        single = np.ndim(pixels) in (3,) or (np.ndim(pixels) == 4 and self.config.in_channels > 1)
        x = np.asarray(pixels)[None] if single else pixels
        out = self.logits(self.features(x))
        return out[0] if single else out

    __call__ = forward

    def teacher_features(self, pixels) -> np.ndarray:
        """Frozen backbone in its native regime: per-frame attention, no adapters."""
        v = self.embed(pixels)
        for w in self.layers:
            v = attn.transformer_layer(v, w)
        return ops.mean(v.data, axis=-2).data

    # -- state -------------------------------------------------------------

    def state(self) -> tuple[dict[str, np.ndarray], dict[str, str]]:
        tensors, roles = {}, {}
        for k, v in self.frozen().items():
            tensors[k], roles[k] = v.data, "frozen"
        for k, v in self.trainable().items():
            tensors[k], roles[k] = v.data, "trainable"
        return tensors, roles

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        own = {**self.frozen(), **self.trainable()}
        missing = set(own) - set(tensors)
        if missing:
            raise ConfigError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        for k, t in own.items():
            arr = np.asarray(tensors[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = arr.copy()


def count_parameters(tensors: dict[str, Tensor]) -> int:
    return int(sum(t.size for t in tensors.values()))
