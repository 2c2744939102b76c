"""Spatio-temporal corner network: 3D-conv backbone, attention-fused
multi-scale features, frame projections, and four corner prediction heads."""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field

import numpy as np

from . import engine, geometry, nn
from .engine import ContractError

FRAME_SLOTS = ("first", "last")
CORNER_KINDS = ("tl", "br")


@dataclass
class ModelConfig:
    categories: int = 2
    clip_len: int = 4
    working_hw: tuple = (24, 36)  # output grid at stride 4
    scales: int = 3
    base_channels: int = 16
    fused_channels: int = 64
    use_multi_frame: bool = True
    use_geometry_prediction: bool = True
    use_geometry_fusion: bool = True

    def __post_init__(self):
        self.working_hw = tuple(self.working_hw)
        if not self.use_multi_frame:
            self.clip_len = 1
        if self.use_multi_frame and self.clip_len < 2:
            raise ContractError("multi-frame model needs clip_len >= 2")
        h, w = self.input_hw
        if h % 16 or w % 16:
            raise ContractError(f"input size {h}x{w} must be divisible by 16")

    @property
    def input_hw(self):
        return (self.working_hw[0] * 4, self.working_hw[1] * 4)

    @property
    def uses_geometry(self):
        return self.use_geometry_prediction or self.use_geometry_fusion

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls(**json.load(f))


@dataclass
class CornerFieldSet:
    """Per (frame slot, corner kind): heatmaps [N,H',W'] in (0,1), embeddings [1,H',W']."""

    heatmaps: dict = field(default_factory=dict)
    embeddings: dict = field(default_factory=dict)


class CornerNetwork(nn.Module):
    def __init__(self, config, seed=0, dtype=np.float32):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config.fused_channels
        bc = config.base_channels
        self.stages = [
            nn.ConvBnRelu3d(rng, 3, bc, 3, padding=(1, 1, 1), dtype=dtype),
            nn.ConvBnRelu3d(rng, bc, 2 * bc, 3, padding=(1, 1, 1), dtype=dtype),
            nn.ConvBnRelu3d(rng, 2 * bc, 4 * bc, 3, padding=(1, 1, 1), dtype=dtype),
        ]
        self.scale_projs = [
            nn.Conv3d(rng, ch, c, 1, dtype=dtype) for ch in (bc, 2 * bc, 4 * bc)
        ]
        self.first_proj = nn.ConvBnRelu2d(rng, 2 * c, c, 3, padding=1, dtype=dtype)
        self.last_proj = nn.ConvBnRelu2d(rng, 2 * c, c, 3, padding=1, dtype=dtype)
        self.encoder = None
        if config.uses_geometry:
            self.encoder = geometry.GeometryEncoder(
                rng, config.categories, scales=config.scales,
                pred_channels=c // 4, dtype=dtype,
            )
        head_cin = c + (c // 4 if config.use_geometry_prediction else 0)
        self.heads = [
            nn.Conv2d(rng, head_cin, config.categories + 1, 3, padding=1, dtype=dtype)
            for _ in range(4)
        ]
        self.geometry_accesses = 0  # incremented whenever a prior is consumed

    def _head(self, slot, kind):
        return self.heads[FRAME_SLOTS.index(slot) * 2 + CORNER_KINDS.index(kind)]

    # -- stages -------------------------------------------------------------

    def backbone_forward(self, clip):
        """Clip [3,T,H,W] -> S aligned features [C,T,H/4,W/4]."""
        cfg = self.config
        if clip.shape[0] != 3:
            raise ContractError(f"clip must have 3 color channels, got {clip.shape[0]}")
        h, w = clip.shape[2], clip.shape[3]
        if h % 16 or w % 16:
            raise ContractError(f"clip size {h}x{w} must be divisible by 16")
        x = clip
        raw = []
        for stage in self.stages:
            x = engine.maxpool3d(stage(x), (1, 2, 2))
            raw.append(x)  # strides 2, 4, 8
        feats = []
        for feat, proj, factor in zip(raw, self.scale_projs, (0.5, 1.0, 2.0)):
            if factor != 1.0:
                feat = engine.upsample_bilinear(feat, factor)
            feats.append(proj(feat))
        return feats

    def fuse_scales(self, feats, attn=None):
        """F = sum_i attn[i] * feats[i]; uniform mean when attention is absent."""
        s = len(feats)
        if attn is None:
            out = feats[0]
            for f in feats[1:]:
                out = out + f
            return out * (1.0 / s)
        if attn.shape[0] != s:
            raise ContractError(
                f"attention has {attn.shape[0]} scale channels, expected {s}"
            )
        out = None
        for i, f in enumerate(feats):
            a = engine.reshape(attn[i], (1, 1) + tuple(attn.shape[1:]))
            term = f * a
            out = term if out is None else out + term
        return out

    def project_frames(self, fused):
        """[C,T,H',W'] -> per-slot [C,H',W'] via anchor slice + temporal mean."""
        t = fused.shape[1]
        ctx = fused.mean(axis=1)
        first = self.first_proj(engine.concat([fused[:, 0], ctx], axis=0))
        last = self.last_proj(engine.concat([fused[:, t - 1], ctx], axis=0))
        return first, last

    def predict_corners(self, f_first, f_last, t_g=None):
        cfg = self.config
        n = cfg.categories
        if cfg.use_geometry_prediction:
            if t_g is None:
                raise ContractError("geometry prediction enabled but no prior given")
            g = self.encoder.pred_proj(t_g)
        fields = CornerFieldSet()
        for slot, feat in (("first", f_first), ("last", f_last)):
            if cfg.use_geometry_prediction:
                feat = engine.concat([feat, g], axis=0)
            for kind in CORNER_KINDS:
                out = self._head(slot, kind)(feat)
                fields.heatmaps[(slot, kind)] = engine.sigmoid(out[:n])
                fields.embeddings[(slot, kind)] = out[n : n + 1]
        return fields

    def __call__(self, clip, prior_stack=None):
        cfg = self.config
        t_g = None
        attn = None
        if cfg.uses_geometry:
            if prior_stack is None:
                raise ContractError("geometry toggles enabled but no prior supplied")
            self.geometry_accesses += 1
            t_g = geometry.encode_geometry(prior_stack, self.encoder)
            if cfg.use_geometry_fusion:
                attn = geometry.attention_maps(t_g, self.encoder)
        feats = self.backbone_forward(clip)
        fused = self.fuse_scales(feats, attn)
        f_first, f_last = self.project_frames(fused)
        return self.predict_corners(
            f_first, f_last, t_g if cfg.use_geometry_prediction else None
        )
