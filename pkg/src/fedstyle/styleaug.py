"""Feature-statistic styles: extraction, transfer and augmentation policies.

The style of a feature map is its per-sample per-channel mean and standard
deviation; transferring a style re-normalizes the map to target statistics:

    f_hat = sigma_new * (f - mu) / sigma + mu_new

``csa_augment`` searches for an adversarial style by gradient ascent on the
averaged cross-entropy of frozen classifier heads received from the other
clients.  ``dsu_augment``, ``advstyle_augment`` and ``mixstyle_augment`` are
comparison policies sharing the same transfer primitive.  All policies
detach the final statistics, so downstream gradients reach the input only
through the content path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError
from .losses import cross_entropy
from .model import Head, head_only_forward

EPSILON = float(np.float32(1e-5))
_f32 = np.float32


@dataclass
class ChannelStats:
    """Per-sample per-channel (mu, sigma); sigma is never below EPSILON."""

    mu: T.Tensor
    sigma: T.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ContractError(f"mu shape {self.mu.shape} != sigma shape {self.sigma.shape}")

    def detach(self) -> "ChannelStats":
        return ChannelStats(self.mu.detach(), self.sigma.detach())


@dataclass(frozen=True)
class CsaConfig:
    eta: float = 1.0
    steps: int = 1
    split_ids: tuple[int, ...] = (1, 2)
    epsilon: float = EPSILON
    # drop the client's own head from the discriminator set
    exclude_own: bool = False

    def __post_init__(self):
        object.__setattr__(self, "split_ids", tuple(sorted(int(s) for s in self.split_ids)))
        if self.eta < 0:
            raise ContractError("eta must be non-negative")
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if not self.split_ids or not set(self.split_ids) <= {1, 2, 3}:
            raise ContractError(f"split_ids must be a nonempty subset of {{1,2,3}}")


def _per_channel(v: T.Tensor) -> T.Tensor:
    b, c = v.shape
    return T.reshape(v, (b, c, 1, 1))


def compute_stats(f: T.Tensor, epsilon: float = EPSILON) -> ChannelStats:
    """Spatial mean and standard deviation per sample and channel.

    sigma = sqrt(var + epsilon^2) clamped to >= epsilon, so a constant map
    yields exactly epsilon and the transfer denominator is always valid.
    """
    if f.ndim != 4:
        raise ContractError(f"expected B x C x H x W feature map, got shape {f.shape}")
    mu = T.mean(f, axes=(2, 3))
    centered = f - _per_channel(mu)
    var = T.mean(centered * centered, axes=(2, 3))
    sigma_raw = T.sqrt(var + _f32(epsilon) ** 2)
    sigma = T.relu(sigma_raw - _f32(epsilon)) + _f32(epsilon)
    return ChannelStats(mu, sigma)


def style_transfer(f: T.Tensor, stats: ChannelStats, new_stats: ChannelStats) -> T.Tensor:
    """Re-normalize ``f`` from ``stats`` to ``new_stats`` per sample/channel.

    Gradient flows through ``f``; whether it also flows through the
    statistics is up to the caller (pass detached stats to stop it).
    """
    b, c = f.shape[0], f.shape[1]
    for s in (stats, new_stats):
        if s.mu.shape != (b, c):
            raise ContractError(f"stats shape {s.mu.shape} does not match feature ({b}, {c})")
        if float(s.sigma.data.min()) < EPSILON:
            raise ContractError(
                f"sigma below {EPSILON:g}: min {float(s.sigma.data.min()):g}")
    normalized = (f - _per_channel(stats.mu)) / _per_channel(stats.sigma)
    return _per_channel(new_stats.sigma) * normalized + _per_channel(new_stats.mu)


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    return labels


def csa_augment(f: T.Tensor, labels: np.ndarray, rest_of_network,
                heads: list[Head], cfg: CsaConfig) -> tuple[T.Tensor, ChannelStats]:
    """Collaborative style augmentation.

    Starting from the input's own statistics, performs ``cfg.steps`` ascent
    updates on (mu_hat, sigma_hat), each adding eta times the gradient of
    the mean cross-entropy of the frozen ``heads`` applied to
    ``rest_of_network(style_transfer(f, stats, (mu_hat, sigma_hat)))``.
    sigma_hat is clamped to >= epsilon after every step.  The returned
    statistics are detached; the returned f_hat is differentiable w.r.t.
    ``f`` through the content path only.  Deterministic: no internal
    randomness.

    ``rest_of_network`` maps a split feature map to the pooled embedding.
    """
    if not heads:
        raise ContractError("csa_augment needs at least one head")
    num_classes = heads[0].bias.shape[0]
    labels = _check_labels(labels, num_classes)
    f_const = f.detach()
    with T.no_grad():
        stats = compute_stats(f_const, cfg.epsilon)
    mu_hat = T.Tensor(stats.mu.data.copy(), requires_grad=True)
    sigma_hat = T.Tensor(stats.sigma.data.copy(), requires_grad=True)

    for _ in range(cfg.steps):
        with T.Tape():
            trial = ChannelStats(mu_hat, sigma_hat)
            emb = rest_of_network(style_transfer(f_const, stats, trial))
            ces = []
            for j, head in enumerate(heads):
                ce = cross_entropy(head_only_forward(head, emb), labels)
                if not np.isfinite(ce.data):
                    raise NumericError(f"non-finite adversarial loss from head {j}")
                ces.append(ce)
            loss = ces[0]
            for ce in ces[1:]:
                loss = loss + ce
            loss = loss * _f32(1.0 / len(ces))
            g_mu, g_sigma = T.grad(loss, [mu_hat, sigma_hat])
            if not (np.isfinite(g_mu).all() and np.isfinite(g_sigma).all()):
                # diagnose which head's pathway blew up
                for j, ce in enumerate(ces):
                    per_head = T.grad(ce, [mu_hat, sigma_hat])
                    if not all(np.isfinite(g).all() for g in per_head):
                        raise NumericError(f"non-finite style gradient from head {j}")
                raise NumericError("non-finite combined style gradient")
        mu_hat.data += _f32(cfg.eta) * g_mu
        sigma_hat.data += _f32(cfg.eta) * g_sigma
        np.maximum(sigma_hat.data, _f32(cfg.epsilon), out=sigma_hat.data)

    learned = ChannelStats(T.Tensor(mu_hat.data.copy()), T.Tensor(sigma_hat.data.copy()))
    return style_transfer(f, stats, learned), learned


def advstyle_augment(f: T.Tensor, labels: np.ndarray, own_pathway,
                     eta: float, steps: int = 1,
                     epsilon: float = EPSILON) -> T.Tensor:
    """Adversarial style search against the CURRENT model's own loss.

    ``own_pathway`` maps a split feature map to this client's own logits.
    Same ascent/detach structure as csa_augment but self-guided.
    """
    f_const = f.detach()
    with T.no_grad():
        stats = compute_stats(f_const, epsilon)
    mu_hat = T.Tensor(stats.mu.data.copy(), requires_grad=True)
    sigma_hat = T.Tensor(stats.sigma.data.copy(), requires_grad=True)
    for _ in range(steps):
        with T.Tape():
            trial = ChannelStats(mu_hat, sigma_hat)
            logits = own_pathway(style_transfer(f_const, stats, trial))
            labels = _check_labels(labels, logits.shape[1])
            loss = cross_entropy(logits, labels)
            g_mu, g_sigma = T.grad(loss, [mu_hat, sigma_hat])
        mu_hat.data += _f32(eta) * g_mu
        sigma_hat.data += _f32(eta) * g_sigma
        np.maximum(sigma_hat.data, _f32(epsilon), out=sigma_hat.data)
    learned = ChannelStats(T.Tensor(mu_hat.data.copy()), T.Tensor(sigma_hat.data.copy()))
    return style_transfer(f, stats, learned)


def dsu_augment(f: T.Tensor, rng: np.random.Generator,
                epsilon: float = EPSILON) -> T.Tensor:
    """Statistic perturbation with Gaussian noise scaled by the batch-level
    standard deviation of each statistic (per channel)."""
    with T.no_grad():
        stats = compute_stats(f.detach(), epsilon)
    mu, sigma = stats.mu.data, stats.sigma.data
    mu_scale = mu.std(axis=0)
    sigma_scale = sigma.std(axis=0)
    eps_mu = rng.standard_normal(mu.shape).astype(_f32)
    eps_sigma = rng.standard_normal(sigma.shape).astype(_f32)
    new_mu = mu + eps_mu * mu_scale[None, :]
    new_sigma = np.maximum(sigma + eps_sigma * sigma_scale[None, :], _f32(epsilon))
    new = ChannelStats(T.Tensor(new_mu), T.Tensor(new_sigma))
    return style_transfer(f, stats, new)


def mixstyle_augment(f: T.Tensor, rng: np.random.Generator, alpha: float = 0.1,
                     epsilon: float = EPSILON) -> T.Tensor:
    """Convex mix of each sample's statistics with a shuffled batchmate's,
    weight drawn from Beta(alpha, alpha) per sample."""
    b = f.shape[0]
    if b < 2:
        raise ContractError("mixstyle needs a batch of at least 2")
    with T.no_grad():
        stats = compute_stats(f.detach(), epsilon)
    lam = rng.beta(alpha, alpha, size=(b, 1)).astype(_f32)
    perm = rng.permutation(b)
    mu, sigma = stats.mu.data, stats.sigma.data
    new_mu = lam * mu + (1.0 - lam) * mu[perm]
    new_sigma = np.maximum(lam * sigma + (1.0 - lam) * sigma[perm], _f32(epsilon))
    new = ChannelStats(T.Tensor(new_mu), T.Tensor(new_sigma))
    return style_transfer(f, stats, new)
