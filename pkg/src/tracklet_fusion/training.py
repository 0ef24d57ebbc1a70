"""End-to-end optimization: losses, momentum SGD, staircase schedule.

Training runs in two phases. The warm-up phase trains the backbone alone
with frame-level identity classification; the main phase trains the whole
model end-to-end on tracklet embeddings with cross-entropy plus batch-hard
triplet loss. Batches follow the P x T pattern (P identities, T tracklets
each) that the triplet loss requires. The learning rate follows
``base * decay_factor ** floor(epoch / decay_period)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    log,
    pairwise_distances,
    relu,
    scale,
    softmax,
    stack,
    tmax,
    tmean,
    tsum,
)
from .data import TrackletRecord, sample_frames_train
from .fusion import FusionModel
from .nn import save_checkpoint

logger = logging.getLogger(__name__)

_MASK_OFFSET = 1e6


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.05
    momentum: float = 0.9
    decay_factor: float = 0.8
    decay_period: int = 20
    epochs: int = 30
    warmup_epochs: int = 5
    batch_identities: int = 4
    batch_tracklets: int = 2
    frames_per_tracklet: int = 8
    ce_weight: float = 1.0
    triplet_weight: float = 1.0
    margin: float = 0.3
    checkpoint_period: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay_factor must be in (0, 1)")
        if self.decay_period < 1:
            raise ValueError("decay_period must be >= 1")
        if self.triplet_weight > 0:
            if self.batch_identities < 2 or self.batch_tracklets < 2:
                raise ValueError("triplet loss needs at least 2 identities and "
                                 "2 tracklets per identity in every batch")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be non-negative")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Staircase schedule: decayed by the factor every decay period."""
    return cfg.base_lr * cfg.decay_factor ** (epoch // cfg.decay_period)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} vs labels {labels.shape}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    probs = softmax(logits, axis=1)
    p_true = tsum(probs * Tensor(onehot), axis=1)
    return scale(tmean(log(p_true)), -1.0)


def batch_hard_triplet(embeddings: Tensor, labels: np.ndarray,
                       margin: float) -> Tensor:
    """Hinge on hardest-positive minus hardest-negative distance per anchor."""
    labels = np.asarray(labels)
    n = embeddings.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"{n} embeddings but {labels.shape} labels")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    if not pos_mask.any(axis=1).all() or not neg_mask.any(axis=1).all():
        raise ValueError("triplet loss needs a positive and a negative for "
                         "every anchor; got a degenerate batch")
    dist = pairwise_distances(embeddings)
    pos_off = Tensor(np.where(pos_mask, 0.0, -_MASK_OFFSET))
    neg_off = Tensor(np.where(neg_mask, 0.0, -_MASK_OFFSET))
    d_pos = tmax(dist + pos_off, axis=1)
    d_neg = scale(tmax(scale(dist, -1.0) + neg_off, axis=1), -1.0)
    return tmean(relu(d_pos - d_neg + Tensor(np.full(n, margin))))


def total_loss(embeddings: Tensor, logits: Tensor | None, labels: np.ndarray,
               cfg: TrainConfig) -> tuple[Tensor, dict[str, float]]:
    parts = {}
    terms = []
    if cfg.ce_weight > 0:
        if logits is None:
            raise ValueError("cross-entropy enabled but no classifier logits")
        ce = cross_entropy(logits, labels)
        parts["loss_ce"] = ce.item()
        terms.append(scale(ce, cfg.ce_weight))
    if cfg.triplet_weight > 0:
        tri = batch_hard_triplet(embeddings, labels, cfg.margin)
        parts["loss_triplet"] = tri.item()
        terms.append(scale(tri, cfg.triplet_weight))
    if not terms:
        raise ValueError("both loss terms disabled")
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    parts["loss"] = loss.item()
    return loss, parts


class SGD:
    """Momentum SGD over a named parameter dict.

    Updates parameter data in place (the single sanctioned mutation of
    tensor values). A NaN gradient aborts the whole step and names the
    offending parameter.
    """

    def __init__(self, named_params: dict[str, Tensor], momentum: float = 0.9):
        self.named_params = dict(named_params)
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data)
                         for name, p in self.named_params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name in self.named_params:
            g = grads[name]
            if np.isnan(g).any():
                raise RuntimeError(f"NaN gradient for parameter '{name}'; "
                                   "step aborted")
        for name, p in self.named_params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += grads[name]
            p.data -= lr * v


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    classes: list[int] = field(default_factory=list)
    checkpoint_path: Path | None = None

    def epoch_mean_loss(self, epoch: int) -> float:
        rows = [r["loss"] for r in self.history if r["epoch"] == epoch]
        return float(np.mean(rows)) if rows else float("nan")


def _pk_batches(by_identity: dict[int, list[int]], p: int, t: int,
                rng: np.random.Generator) -> list[list[int]]:
    """One epoch of P x T batches covering every identity once."""
    ids = list(by_identity)
    order = [ids[i] for i in rng.permutation(len(ids))]
    if len(order) % p:
        order += order[:p - len(order) % p]
    batches = []
    for start in range(0, len(order), p):
        batch = []
        for identity in order[start:start + p]:
            pool = by_identity[identity]
            picks = [pool[j] for j in rng.permutation(len(pool))[:t]]
            while len(picks) < t:
                picks.append(pool[int(rng.integers(0, len(pool)))])
            batch.extend(picks)
        batches.append(batch)
    return batches


def train(records: list[TrackletRecord], model: FusionModel, cfg: TrainConfig,
          out_dir=None) -> TrainResult:
    """Two-phase training loop; returns per-step history and a checkpoint.

    With ``fusion_variant == "feature_average"`` every epoch runs the
    frame-level phase, matching an image-only model with no end-to-end
    temporal training.
    """
    if not records:
        raise ValueError("empty training dataset")
    classes = sorted({r.identity for r in records})
    label_of = {identity: i for i, identity in enumerate(classes)}
    by_identity: dict[int, list[int]] = {}
    for i, rec in enumerate(records):
        by_identity.setdefault(rec.identity, []).append(i)

    named = model.named_parameters()
    params = list(named.values())
    names = list(named.keys())
    optimizer = SGD(named, momentum=cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 31])
    result = TrainResult(classes=classes)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = (out_dir / "metrics.jsonl").open("w", encoding="utf-8")

    frames_only = model.config.fusion_variant == "feature_average"
    step = 0
    try:
        for epoch in range(cfg.epochs):
            lr = learning_rate(cfg, epoch)
            warmup = frames_only or epoch < cfg.warmup_epochs
            for batch in _pk_batches(by_identity, cfg.batch_identities,
                                     cfg.batch_tracklets, rng):
                chosen = [records[i] for i in batch]
                sampled = [sample_frames_train(r.frames, cfg.frames_per_tracklet,
                                               rng) for r in chosen]
                labels = np.array([label_of[r.identity] for r in chosen])
                with Tape() as tape:
                    if warmup:
                        loss, parts = _frame_level_loss(model, sampled, labels)
                    else:
                        loss, parts = _tracklet_level_loss(model, sampled,
                                                           labels, cfg)
                grads = tape.gradients(loss, params)
                optimizer.step(dict(zip(names, grads)), lr)
                row = {"epoch": epoch, "step": step, "lr": lr,
                       "phase": "warmup" if warmup else "fusion", **parts}
                result.history.append(row)
                if log_fh is not None:
                    log_fh.write(json.dumps(row) + "\n")
                step += 1
            if (out_dir is not None and cfg.checkpoint_period > 0
                    and (epoch + 1) % cfg.checkpoint_period == 0):
                save_checkpoint(out_dir / f"checkpoint_epoch{epoch + 1}.npz",
                                named)
    finally:
        if log_fh is not None:
            log_fh.close()

    _warn_if_warmup_stalled(result, cfg, frames_only)
    if out_dir is not None:
        path = out_dir / "checkpoint.npz"
        save_checkpoint(path, named)
        result.checkpoint_path = path
    return result


def _frame_level_loss(model, sampled, labels):
    # Warm-up is plain frame classification: no temporal structure yet, so
    # the triplet term stays off regardless of configuration.
    all_frames = Tensor(np.concatenate(sampled, axis=0))
    per_frame = np.repeat(labels, [s.shape[0] for s in sampled])
    emb = model.backbone.frame_embeddings(all_frames)
    ce = cross_entropy(model.logits(emb), per_frame)
    return ce, {"loss": ce.item(), "loss_ce": ce.item()}


def _tracklet_level_loss(model, sampled, labels, cfg):
    embeddings = stack([model.forward_pipeline(s)[0] for s in sampled], axis=0)
    return total_loss(embeddings, model.logits(embeddings), labels, cfg)


def _warn_if_warmup_stalled(result: TrainResult, cfg: TrainConfig,
                            frames_only: bool) -> None:
    last_warmup = cfg.epochs - 1 if frames_only else cfg.warmup_epochs - 1
    if last_warmup < 1:
        return
    first = result.epoch_mean_loss(0)
    last = result.epoch_mean_loss(last_warmup)
    if np.isfinite(first) and np.isfinite(last) and last >= first:
        logger.warning("warm-up loss did not decrease (%.4f -> %.4f)",
                       first, last)
