"""Training objectives: task cross-entropy over both paths, supervised
contrastive alignment, and class-relation distillation, combined into one
weighted local loss."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError
from .model import Head, head_only_forward

_f32 = np.float32


@dataclass(frozen=True)
class LossWeights:
    lambda_con: float
    lambda_cdrm: float
    tau_supcon: float = 0.07
    tau_cdrm: float = 2.0
    # ablation cells drop components by zeroing their weight
    allow_zero: bool = False

    def __post_init__(self):
        for name in ("lambda_con", "lambda_cdrm"):
            value = getattr(self, name)
            if value < 0 or (value == 0 and not self.allow_zero):
                raise ContractError(f"{name} must be strictly positive")
        for name in ("tau_supcon", "tau_cdrm"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be strictly positive")


def log_softmax(logits: T.Tensor) -> T.Tensor:
    """Row-wise log-softmax, stabilized by subtracting the detached row max."""
    shifted = logits - T.max_(logits, axes=1, keepdims=True).detach()
    return shifted - T.log(T.sum_(T.exp(shifted), axes=1, keepdims=True))


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=_f32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(logits: T.Tensor, labels) -> T.Tensor:
    """Mean negative log-likelihood of the labels under softmax(logits)."""
    if logits.ndim != 2:
        raise ContractError(f"logits must be B x K, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, k = logits.shape
    if len(labels) != b:
        raise ContractError(f"{len(labels)} labels for batch of {b}")
    if b == 0:
        raise ContractError("empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"labels must lie in [0, {k})")
    picked = T.sum_(log_softmax(logits) * T.Tensor(_one_hot(labels, k)), axes=1)
    return -T.mean(picked)


def task_loss(model, x: T.Tensor, f_hat: T.Tensor, split_id: int, labels) -> T.Tensor:
    """Half the sum of the cross-entropies on the original and augmented paths."""
    cfg = model.config
    expect = (cfg.block_channels[split_id - 1],
              cfg.image_size // (2 ** split_id), cfg.image_size // (2 ** split_id))
    if f_hat.ndim != 4 or f_hat.shape[1:] != expect:
        raise ContractError(
            f"augmented feature {f_hat.shape} was not produced at split {split_id} "
            f"(expected trailing dims {expect})")
    ce_orig = cross_entropy(model.forward(x), labels)
    ce_aug = cross_entropy(model.forward_from_split(f_hat, split_id), labels)
    return _f32(0.5) * (ce_orig + ce_aug)


def supcon_loss(z_all: T.Tensor, labels_all, tau: float = 0.07) -> T.Tensor:
    """Supervised contrastive loss over original+augmented embeddings.

    Embeddings are L2-normalized internally.  Each anchor j with a nonempty
    positive set P(j) (same label, excluding j) contributes
    -(1/|P(j)|) * sum_p log( exp(z_j.z_p / tau) / sum_{a != j} exp(z_j.z_a / tau) );
    the result is the SUM over anchors.  Anchors without positives are
    skipped; if every anchor is skipped the loss is 0 and a RuntimeWarning
    is issued.
    """
    labels_all = np.asarray(labels_all, dtype=np.int64).reshape(-1)
    n = z_all.shape[0]
    if z_all.ndim != 2 or n < 2:
        raise ContractError(f"need at least two embeddings, got shape {z_all.shape}")
    if len(labels_all) != n:
        raise ContractError(f"{len(labels_all)} labels for {n} embeddings")

    sq = T.sum_(z_all * z_all, axes=1, keepdims=True)
    zn = z_all / T.sqrt(sq + _f32(1e-12))
    sim = T.matmul(zn, T.transpose(zn)) * _f32(1.0 / tau)

    not_self = (1.0 - np.eye(n, dtype=_f32))
    same = (labels_all[:, None] == labels_all[None, :]).astype(_f32)
    positives = same * not_self
    counts = positives.sum(axis=1)
    if not counts.any():
        warnings.warn("supcon_loss: every anchor lacks positives, returning 0",
                      RuntimeWarning, stacklevel=2)
        return T.Tensor(_f32(0.0))

    row_max = T.max_(sim, axes=1, keepdims=True).detach()
    exp_masked = T.exp(sim - row_max) * T.Tensor(not_self)
    log_denom = T.log(T.sum_(exp_masked, axes=1, keepdims=True)) + row_max
    log_prob = sim - log_denom

    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    weights = (positives * inv[:, None]).astype(_f32)
    return -T.sum_(log_prob * T.Tensor(weights))


@dataclass
class ClassRelationTable:
    """Per-class probability rows over the K classes, for classes present
    in the batch.  ``probs``/``log_probs`` are numpy for the detached
    ensemble table and Tensors for the current-model tables."""

    classes: tuple[int, ...]
    probs: object
    log_probs: object
    source: str

    def row(self, k: int):
        return self.probs[self.classes.index(k)]


def _class_matrix(labels: np.ndarray) -> tuple[tuple[int, ...], np.ndarray]:
    classes = tuple(int(c) for c in np.unique(labels))
    m = np.zeros((len(classes), len(labels)), dtype=_f32)
    for i, c in enumerate(classes):
        members = labels == c
        m[i, members] = 1.0 / members.sum()
    return classes, m


def ensemble_class_relations(embeddings, heads: list[Head], labels,
                             tau_cdrm: float) -> ClassRelationTable:
    """Detached distillation targets: per class, the tempered softmax of the
    head-ensemble's mean logits over that class's samples."""
    emb = embeddings.data if isinstance(embeddings, T.Tensor) else np.asarray(embeddings)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise ContractError("ensemble relations need a nonempty B x D embedding batch")
    if not heads:
        raise ContractError("ensemble relations need at least one head")
    mean_logits = np.zeros((emb.shape[0], heads[0].bias.shape[0]), dtype=np.float64)
    for head in heads:
        mean_logits += emb @ head.weight.data + head.bias.data
    mean_logits /= len(heads)
    classes, m = _class_matrix(labels)
    per_class = (m @ mean_logits) / tau_cdrm
    shifted = per_class - per_class.max(axis=1, keepdims=True)
    log_rows = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return ClassRelationTable(classes, np.exp(log_rows).astype(_f32),
                              log_rows.astype(_f32), "ensemble")


def _tempered_rows(logits: T.Tensor, m: np.ndarray, tau: float):
    per_class = T.matmul(T.Tensor(m), logits) * _f32(1.0 / tau)
    log_rows = log_softmax(per_class)
    return T.exp(log_rows), log_rows


def current_class_relations(logits_orig: T.Tensor, logits_aug: T.Tensor, labels,
                            tau_cdrm: float) -> tuple[ClassRelationTable, ClassRelationTable]:
    """Differentiable class-relation tables for the original and augmented
    paths of the current model (same recipe as the ensemble table)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits_orig.shape != logits_aug.shape or logits_orig.ndim != 2:
        raise ContractError("both logit batches must share a B x K shape")
    if logits_orig.shape[0] == 0:
        raise ContractError("current relations need a nonempty batch")
    classes, m = _class_matrix(labels)
    p_cur, lp_cur = _tempered_rows(logits_orig, m, tau_cdrm)
    p_aug, lp_aug = _tempered_rows(logits_aug, m, tau_cdrm)
    return (ClassRelationTable(classes, p_cur, lp_cur, "current-original"),
            ClassRelationTable(classes, p_aug, lp_aug, "current-augmented"))


def cdrm_loss(p_ens: ClassRelationTable, p_cur: ClassRelationTable,
              p_hat_cur: ClassRelationTable) -> T.Tensor:
    """Cross-entropy of both current tables against the detached ensemble
    table, summed over class rows.  Minimized at p_cur == p_hat_cur == p_ens,
    where it equals twice the summed ensemble entropy."""
    if not (p_ens.classes == p_cur.classes == p_hat_cur.classes):
        raise ContractError(
            f"class rows differ: {p_ens.classes} / {p_cur.classes} / {p_hat_cur.classes}")
    targets = T.Tensor(np.asarray(p_ens.probs, dtype=_f32))
    return -(T.sum_(targets * p_cur.log_probs) + T.sum_(targets * p_hat_cur.log_probs))


def local_loss(task: T.Tensor, supcon: T.Tensor | None, cdrm: T.Tensor | None,
               weights: LossWeights) -> tuple[T.Tensor, dict[str, float]]:
    """Weighted sum of the enabled components, plus their values for logging."""
    parts = {"task": task, "supcon": supcon, "cdrm": cdrm}
    for name, part in parts.items():
        if part is not None and not np.isfinite(part.data).all():
            raise NumericError(f"non-finite loss component {name!r}")
    total = task
    if supcon is not None:
        total = total + _f32(weights.lambda_con) * supcon
    if cdrm is not None:
        total = total + _f32(weights.lambda_cdrm) * cdrm
    logged = {name: (float(part.data) if part is not None else 0.0)
              for name, part in parts.items()}
    logged["total"] = float(total.data)
    return total, logged
