"""Branch features across stages, semantic attention, and the full pipeline.

A fusion branch at stage ``s`` temporally fuses that stage's frame maps
and re-encodes the result through the shared backbone suffix, giving one
embedding per branch. Branch embeddings are weighted by a softmax
classifier (semantic attention, mean of the per-branch probability rows)
and averaged into the final tracklet embedding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    ATTENTION_VARIANTS,
    AttentionWeights,
    IntraAttentionHead,
    RelationNetwork,
    compute_attention,
    temporal_fuse,
    uniform_weights,
)
from .autodiff import Tensor, mul, reshape, softmax, stack, tmean, tsum
from .backbone import Backbone, BackboneConfig
from .nn import Linear, Module

FUSION_VARIANTS = (
    "feature_average",
    "early_fusion",
    "late_fusion",
    "ms_average",
    "ms_semantic_attention",
)

EARLY_FUSION_STAGE = 2


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rn_hidden: int = 64
    rn_dim: int = 32
    fusion_variant: str = "ms_semantic_attention"
    attention_variant: str = "intra_inter_rn"
    num_classes: int = 0

    def __post_init__(self):
        if self.fusion_variant not in FUSION_VARIANTS:
            raise ValueError(f"unknown fusion variant '{self.fusion_variant}', "
                             f"expected one of {FUSION_VARIANTS}")
        if self.attention_variant not in ATTENTION_VARIANTS:
            raise ValueError(f"unknown attention variant '{self.attention_variant}', "
                             f"expected one of {ATTENTION_VARIANTS}")
        if self.rn_hidden <= 0 or self.rn_dim <= 0:
            raise ValueError("relation network sizes must be positive")

    @property
    def branch_stages(self) -> tuple[int, ...]:
        """Stages that own a fusion branch under this configuration."""
        s_max = self.backbone.num_stages
        if self.fusion_variant == "early_fusion":
            return (min(EARLY_FUSION_STAGE, s_max),)
        if self.fusion_variant in ("late_fusion", "feature_average"):
            return (s_max,)
        return tuple(range(1, s_max + 1))


@dataclass
class PipelineDiagnostics:
    branch_stages: tuple[int, ...]
    per_stage: list[AttentionWeights]
    semantic_weights: np.ndarray


class SemanticClassifier(Module):
    """Softmax classifier over branches: rows of probabilities per branch."""

    def __init__(self, d_g: int, num_branches: int, rng: np.random.Generator):
        self.head = Linear(d_g, num_branches, rng, init_scale=np.sqrt(1.0 / d_g))
        self._k = num_branches

    @property
    def num_branches(self) -> int:
        return self._k

    def __call__(self, g: Tensor) -> Tensor:
        if g.ndim != 2:
            raise ValueError(f"expected branch features [K, d_g], got {g.shape}")
        return softmax(self.head(g), axis=1)


def semantic_attention(g: Tensor, classifier: SemanticClassifier) -> Tensor:
    """Branch weights: column mean of the per-branch probability rows."""
    if g.shape[0] != classifier.num_branches:
        raise ValueError(f"{g.shape[0]} branch features for a "
                         f"{classifier.num_branches}-branch classifier")
    return tmean(classifier(g), axis=0)


def semantic_fuse(g: Tensor, u: Tensor) -> Tensor:
    """Weighted average of branch features; ``u`` must sum to one."""
    if g.ndim != 2 or u.ndim != 1 or g.shape[0] != u.shape[0]:
        raise ValueError(f"branch/weight mismatch: {g.shape} vs {u.shape}")
    return tsum(mul(g, reshape(u, (u.shape[0], 1))), axis=0)


class FusionModel(Module):
    """Backbone, per-stage attention heads, semantic classifier, id head.

    Attention heads exist for every stage regardless of the configured
    branch subset, so checkpoints have one stable layout; stages outside
    the branch subset simply never receive gradient.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self._cfg = cfg
        bb = cfg.backbone
        self.backbone = Backbone(bb, rng)
        self._intra_heads: list[IntraAttentionHead] = []
        self._relation_nets: list[RelationNetwork] = []
        for s in range(1, bb.num_stages + 1):
            d_f = bb.channels[s - 1]
            intra = IntraAttentionHead(d_f, rng)
            rn = RelationNetwork(d_f, cfg.rn_hidden, cfg.rn_dim, rng)
            setattr(self, f"intra{s}", intra)
            setattr(self, f"relation{s}", rn)
            self._intra_heads.append(intra)
            self._relation_nets.append(rn)
        self.semantic = SemanticClassifier(bb.embed_dim, len(cfg.branch_stages), rng)
        if cfg.num_classes > 0:
            self.classifier = Linear(bb.embed_dim, cfg.num_classes, rng,
                                     init_scale=np.sqrt(1.0 / bb.embed_dim))

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def embed_dim(self) -> int:
        return self._cfg.backbone.embed_dim

    def intra_head(self, s: int) -> IntraAttentionHead:
        return self._intra_heads[s - 1]

    def relation_net(self, s: int) -> RelationNetwork:
        return self._relation_nets[s - 1]

    def _as_frames(self, tracklet) -> Tensor:
        frames = tracklet if isinstance(tracklet, Tensor) else Tensor(tracklet)
        if frames.ndim != 4 or frames.shape[0] < 1:
            raise ValueError(
                f"expected a non-empty tracklet [L, C, H, W], got {frames.shape}")
        return frames

    def forward_pipeline(self, tracklet, fusion_variant: str | None = None,
                         attention_variant: str | None = None,
                         ) -> tuple[Tensor, PipelineDiagnostics]:
        """Full multi-stage fusion of one tracklet into an embedding.

        Single-frame tracklets bypass the attention modules (the weight is
        1 by definition). Deterministic given parameters and input.
        """
        fv = fusion_variant or self._cfg.fusion_variant
        av = attention_variant or self._cfg.attention_variant
        if fv not in FUSION_VARIANTS:
            raise ValueError(f"unknown fusion variant '{fv}', "
                             f"expected one of {FUSION_VARIANTS}")
        if av not in ATTENTION_VARIANTS:
            raise ValueError(f"unknown attention variant '{av}', "
                             f"expected one of {ATTENTION_VARIANTS}")
        frames = self._as_frames(tracklet)
        length = frames.shape[0]

        if fv == "feature_average":
            g_fused = tmean(self.backbone.frame_embeddings(frames), axis=0)
            s_max = self._cfg.backbone.num_stages
            diag = PipelineDiagnostics(
                (s_max,),
                [AttentionWeights(s_max, None, None, None,
                                  np.full(length, 1.0 / length))],
                np.array([1.0]))
            return g_fused, diag

        if fv == "early_fusion":
            branches = (min(EARLY_FUSION_STAGE, self._cfg.backbone.num_stages),)
        elif fv == "late_fusion":
            branches = (self._cfg.backbone.num_stages,)
        else:
            branches = self._cfg.branch_stages

        taps = self.backbone.encode_stages(frames, upto=max(branches))
        branch_feats = []
        stage_diags = []
        for s in branches:
            maps = taps[s - 1]
            if length == 1:
                weights = Tensor(np.ones(1))
                stage_diags.append(
                    AttentionWeights(s, None, None, None, np.ones(1)))
            else:
                pooled = self.backbone.pool_frame_features(maps)
                weights, diag_s = compute_attention(
                    pooled, av, self._intra_heads[s - 1],
                    self._relation_nets[s - 1], stage=s)
                stage_diags.append(diag_s)
            fused_map = temporal_fuse(maps, weights)
            branch_feats.append(self.backbone.continue_from_stage(fused_map, s))

        g = stack(branch_feats, axis=0)
        if fv == "ms_semantic_attention":
            if len(branches) != self.semantic.num_branches:
                raise ValueError(
                    f"semantic classifier expects {self.semantic.num_branches} "
                    f"branches, pipeline produced {len(branches)}")
            u = semantic_attention(g, self.semantic)
        else:
            u = uniform_weights(len(branches))
        g_fused = semantic_fuse(g, u)
        return g_fused, PipelineDiagnostics(branches, stage_diags, u.data.copy())

    def logits(self, embeddings: Tensor) -> Tensor:
        if not hasattr(self, "classifier"):
            raise RuntimeError("model was built without an identity classifier")
        return self.classifier(embeddings)


def ablation_forward(tracklet, model: FusionModel, fusion_variant: str,
                     attention_variant: str = "avg_pool") -> Tensor:
    """Embedding under an explicit (fusion, attention) variant pair."""
    g_fused, _ = model.forward_pipeline(
        tracklet, fusion_variant=fusion_variant,
        attention_variant=attention_variant)
    return g_fused


def embed_tracklet(model: FusionModel, frames: np.ndarray,
                   fusion_variant: str | None = None,
                   attention_variant: str | None = None) -> np.ndarray:
    """Forward-only embedding of one tracklet (no tape)."""
    g_fused, _ = model.forward_pipeline(
        frames, fusion_variant=fusion_variant,
        attention_variant=attention_variant)
    return g_fused.data.copy()


def attention_dump_lines(tracklet_id, diag: PipelineDiagnostics) -> list[str]:
    """Line-delimited records of the attention state for one tracklet."""
    lines = []
    for stage_diag in diag.per_stage:
        rec = {
            "tracklet_id": tracklet_id,
            "stage": stage_diag.stage,
            "w": None if stage_diag.w is None else stage_diag.w.tolist(),
            "v": None if stage_diag.v is None else stage_diag.v.tolist(),
            "a_hat": stage_diag.normalized.tolist(),
        }
        if stage_diag.matrix is not None:
            rec["matrix"] = stage_diag.matrix.tolist()
        lines.append(json.dumps(rec))
    lines.append(json.dumps({
        "tracklet_id": tracklet_id,
        "semantic_u": diag.semantic_weights.tolist(),
        "branch_stages": list(diag.branch_stages),
    }))
    return lines
