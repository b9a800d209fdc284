"""Round-based decentralized training.

Each round: every client trains its copy of the global model on its own
domain shard, uploads the serialized parameters, the server averages them
weighted by shard size, and the new global model is broadcast together with
every client's own classifier head from the round that just finished.  Those
previous-round heads drive the collaborative augmentation and the relation
distillation in the next round.

Clients are in-process actors, but all model state crosses the client/server
boundary as serialized bytes, so the protocol surface matches what a
networked deployment would exchange.  Training metrics stay on the client
side and are collected out of band.
"""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import ModelCheckpoint, head_from_checkpoint
from .data import DomainDataset, batch_iter
from .errors import (CheckpointError, ContractError, FedstyleError,
                     NumericError, ProtocolError, ShapeError,
                     TruncatedPayloadError)
from .losses import (LossWeights, cdrm_loss, cross_entropy,
                     current_class_relations, ensemble_class_relations,
                     local_loss, supcon_loss)
from .model import (BackboneConfig, Model, head_only_forward, init_model)
from .styleaug import (CsaConfig, advstyle_augment, csa_augment, dsu_augment,
                       mixstyle_augment)

_f32 = np.float32

AUGMENTERS = ("csa", "dsu", "advstyle", "mixstyle", "none")


@dataclass(frozen=True)
class RoundConfig:
    rounds: int = 40
    local_epochs: int = 1
    batch_size: int = 16
    lr_initial: float = 0.001
    lr_final: float = 0.0001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    csa: CsaConfig = field(default_factory=CsaConfig)
    weights: LossWeights = field(default_factory=lambda: LossWeights(1.0, 4.0))
    augmenter: str = "csa"
    use_supcon: bool = True
    use_cdrm: bool = True
    mixstyle_alpha: float = 0.1

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 1:
            raise ContractError("rounds and local epochs must be at least 1")
        if self.batch_size < 1:
            raise ContractError("batch size must be at least 1")
        if self.lr_initial < 0 or self.lr_final < 0:
            raise ContractError("learning rates must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ContractError("weight decay must be nonnegative")
        if self.augmenter not in AUGMENTERS:
            raise ContractError(
                f"unknown augmenter {self.augmenter!r}, expected one of {AUGMENTERS}")


def fedavg_config(**overrides) -> RoundConfig:
    """Plain weighted-averaging baseline: no augmentation, task loss only."""
    merged = dict(augmenter="none", use_supcon=False, use_cdrm=False)
    merged.update(overrides)
    return RoundConfig(**merged)


def cosine_lr(cfg: RoundConfig, epoch_index: int) -> float:
    """Cosine decay over all rounds*local_epochs epochs of the run."""
    total = cfg.rounds * cfg.local_epochs
    frac = epoch_index / max(1, total - 1)
    return cfg.lr_final + 0.5 * (cfg.lr_initial - cfg.lr_final) * (1.0 + math.cos(math.pi * frac))


@dataclass
class ClientState:
    client_id: str
    model: Model
    num_samples: int
    seed: int
    heads: list = field(default_factory=list)     # [(client_id, frozen Head)]
    momentum_buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_samples <= 0:
            raise ContractError("client shard must hold at least one sample")


@dataclass
class ClientUpdate:
    client_id: str
    checkpoint: ModelCheckpoint
    num_samples: int
    round_index: int
    metrics: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        blob = self.checkpoint.to_bytes()
        cid = self.client_id.encode("utf-8")
        return (struct.pack("<I", self.round_index)
                + struct.pack("<H", len(cid)) + cid
                + struct.pack("<II", self.num_samples, len(blob)) + blob)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ClientUpdate":
        view = memoryview(blob)

        def take(n):
            nonlocal view
            if len(view) < n:
                raise TruncatedPayloadError("client update ends mid-field")
            out, view = view[:n], view[n:]
            return out

        round_index = struct.unpack("<I", take(4))[0]
        (id_len,) = struct.unpack("<H", take(2))
        client_id = bytes(take(id_len)).decode("utf-8")
        num_samples, ckpt_len = struct.unpack("<II", take(8))
        checkpoint = ModelCheckpoint.from_bytes(bytes(take(ckpt_len)))
        if len(view):
            raise CheckpointError(f"{len(view)} trailing bytes after client update")
        return cls(client_id, checkpoint, num_samples, round_index)


@dataclass
class BroadcastBundle:
    round_index: int
    global_checkpoint: ModelCheckpoint
    heads: list      # [(client_id, head-only ModelCheckpoint)], sorted by id

    def to_bytes(self) -> bytes:
        parts = [struct.pack("<I", self.round_index)]
        blob = self.global_checkpoint.to_bytes()
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
        parts.append(struct.pack("<I", len(self.heads)))
        for client_id, ckpt in self.heads:
            cid = client_id.encode("utf-8")
            head_blob = ckpt.to_bytes()
            parts.append(struct.pack("<H", len(cid)) + cid)
            parts.append(struct.pack("<I", len(head_blob)))
            parts.append(head_blob)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "BroadcastBundle":
        view = memoryview(blob)

        def take(n):
            nonlocal view
            if len(view) < n:
                raise TruncatedPayloadError("broadcast bundle ends mid-field")
            out, view = view[:n], view[n:]
            return out

        round_index = struct.unpack("<I", take(4))[0]
        (global_len,) = struct.unpack("<I", take(4))
        global_ckpt = ModelCheckpoint.from_bytes(bytes(take(global_len)))
        (count,) = struct.unpack("<I", take(4))
        heads = []
        for _ in range(count):
            (id_len,) = struct.unpack("<H", take(2))
            client_id = bytes(take(id_len)).decode("utf-8")
            (head_len,) = struct.unpack("<I", take(4))
            heads.append((client_id, ModelCheckpoint.from_bytes(bytes(take(head_len)))))
        if len(view):
            raise CheckpointError(f"{len(view)} trailing bytes after broadcast bundle")
        return cls(round_index, global_ckpt, heads)


def _augment(cfg: RoundConfig, state: ClientState, model: Model, f, labels,
             split: int, rng):
    if cfg.augmenter == "csa":
        heads = [h for cid, h in state.heads
                 if not (cfg.csa.exclude_own and cid == state.client_id)]
        f_hat, _ = csa_augment(f, labels,
                               lambda ff: model.features_from_split(ff, split),
                               heads, cfg.csa)
        return f_hat
    if cfg.augmenter == "advstyle":
        return advstyle_augment(f, labels,
                                lambda ff: model.forward_from_split(ff, split),
                                cfg.csa.eta, cfg.csa.steps)
    if cfg.augmenter == "dsu":
        return dsu_augment(f, rng)
    if cfg.augmenter == "mixstyle":
        if f.shape[0] < 2:
            return f    # a trailing batch of one has no batchmate to mix with
        return mixstyle_augment(f, rng, cfg.mixstyle_alpha)
    raise ContractError(f"unknown augmenter {cfg.augmenter!r}")


def local_train_round(state: ClientState, dataset: DomainDataset,
                      cfg: RoundConfig, round_index: int) -> ClientUpdate:
    """One client's contribution to a round: E local epochs of SGD on the
    combined objective, then upload of the trained parameters."""
    needs_heads = cfg.augmenter == "csa" or cfg.use_cdrm
    if needs_heads and not state.heads:
        raise ProtocolError(
            f"client {state.client_id!r} has no previous-round heads but the "
            f"configuration requires them")
    model = state.model
    use_aug_path = cfg.augmenter != "none"
    aug_rng = np.random.default_rng([state.seed, round_index, 1])
    ensemble_heads = [h for _, h in state.heads]

    sums = {"task": 0.0, "supcon": 0.0, "cdrm": 0.0, "total": 0.0}
    seen = 0
    round_lr = cosine_lr(cfg, round_index * cfg.local_epochs)
    for epoch in range(cfg.local_epochs):
        epoch_index = round_index * cfg.local_epochs + epoch
        lr = cosine_lr(cfg, epoch_index)
        batches = batch_iter(dataset, "train", cfg.batch_size, state.seed, epoch_index)
        for batch_index, (x, labels) in enumerate(batches):
            try:
                with T.Tape():
                    if use_aug_path:
                        split = int(aug_rng.choice(cfg.csa.split_ids))
                        f = model.forward_to_split(x, split)
                        f_hat = _augment(cfg, state, model, f, labels, split, aug_rng)
                        z = model.features_from_split(f, split)
                        z_hat = model.features_from_split(f_hat, split)
                        logits = head_only_forward(model.head, z)
                        logits_hat = head_only_forward(model.head, z_hat)
                        task = _f32(0.5) * (cross_entropy(logits, labels)
                                            + cross_entropy(logits_hat, labels))
                    else:
                        z = model.embed(x)
                        z_hat = z
                        logits = logits_hat = head_only_forward(model.head, z)
                        task = cross_entropy(logits, labels)
                    supcon = None
                    if cfg.use_supcon:
                        z_all = T.concat([z, z_hat], axis=0)
                        supcon = supcon_loss(z_all, np.concatenate([labels, labels]),
                                             cfg.weights.tau_supcon)
                    cdrm = None
                    if cfg.use_cdrm:
                        ens = ensemble_class_relations(z, ensemble_heads, labels,
                                                       cfg.weights.tau_cdrm)
                        cur, cur_hat = current_class_relations(
                            logits, logits_hat, labels, cfg.weights.tau_cdrm)
                        cdrm = cdrm_loss(ens, cur, cur_hat)
                    total, logged = local_loss(task, supcon, cdrm, cfg.weights)
                    T.backward(total)
            except NumericError as exc:
                raise NumericError(f"batch {batch_index} of epoch {epoch_index}: "
                                   f"{exc}") from exc
            _sgd_step(model, state.momentum_buffers, lr, cfg)
            n = x.shape[0]
            for key in sums:
                sums[key] += logged[key] * n
            seen += n

    metrics = {f"loss_{key}": sums[key] / seen for key in ("task", "supcon", "cdrm", "total")}
    metrics["lr"] = round_lr
    metrics["source_val_acc"] = accuracy(model, dataset, "test")
    return ClientUpdate(state.client_id, ModelCheckpoint.from_model(model),
                        state.num_samples, round_index, metrics)


def _sgd_step(model: Model, buffers: dict, lr: float, cfg: RoundConfig) -> None:
    for name, p in model.parameters():
        if p.grad is None:
            continue
        g = p.grad + _f32(cfg.weight_decay) * p.data
        buf = buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p.data)
            buffers[name] = buf
        buf *= _f32(cfg.momentum)
        buf += g
        p.data -= _f32(lr) * buf
    model.zero_grad()


def accuracy(model: Model, dataset: DomainDataset, which: str,
             batch_size: int = 64) -> float:
    """Fraction of correct argmax predictions; ties resolve to the lowest
    class index."""
    idx = dataset.split(which)
    if len(idx) == 0:
        raise ContractError(f"{which} split of {dataset.name!r} is empty")
    correct = 0
    with T.no_grad():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            logits = model.forward(T.Tensor(dataset.images.data[chunk]))
            pred = np.argmax(logits.data, axis=1)
            correct += int((pred == dataset.labels[chunk]).sum())
    return correct / len(idx)


def aggregate(updates: list[ClientUpdate]) -> ModelCheckpoint:
    """Average parameters weighted by shard size, accumulated in float64 and
    cast once, so the result is independent of client ordering."""
    if not updates:
        raise ContractError("nothing to aggregate")
    rounds = {u.round_index for u in updates}
    if len(rounds) > 1:
        raise ProtocolError(f"updates span rounds {sorted(rounds)}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    reference = [(name, arr.shape) for name, arr in ordered[0].checkpoint.entries]
    for u in ordered[1:]:
        layout = [(name, arr.shape) for name, arr in u.checkpoint.entries]
        if layout != reference:
            raise ShapeError(
                f"update from {u.client_id!r} does not match the shared layout")
    total = float(sum(u.num_samples for u in ordered))
    acc = [np.zeros(shape, dtype=np.float64) for _, shape in reference]
    for u in ordered:
        w = u.num_samples / total
        for slot, (_, arr) in zip(acc, u.checkpoint.entries):
            slot += w * arr.astype(np.float64)
    return ModelCheckpoint([(name, slot.astype(_f32))
                            for (name, _), slot in zip(reference, acc)])


def make_broadcast(global_ckpt: ModelCheckpoint,
                   updates: list[ClientUpdate]) -> BroadcastBundle:
    """Bundle for the NEXT round: new global parameters plus each client's own
    uploaded head (not the averaged one)."""
    if not updates:
        raise ContractError("no updates to broadcast from")
    heads = []
    for u in sorted(updates, key=lambda u: u.client_id):
        head_ckpt = u.checkpoint.select("head.")
        if not head_ckpt.entries:
            raise CheckpointError(
                f"update from {u.client_id!r} carries no head parameters")
        heads.append((u.client_id, head_ckpt))
    return BroadcastBundle(updates[0].round_index + 1, global_ckpt, heads)


def run_federation(domains: list[DomainDataset], cfg: RoundConfig, seed: int,
                   backbone: BackboneConfig | None = None, observer=None,
                   parallel: bool = False) -> tuple[Model, list[dict]]:
    """Full protocol over the source domains.  Returns the final global model
    and one metrics row per (round, client).  Deterministic in (domains,
    cfg, seed, backbone); the parallel mode trains clients in threads but
    aggregates in canonical order, so the result is identical.
    """
    if len(domains) < 2:
        raise ContractError("federation needs at least two source domains")
    if len({d.name for d in domains}) != len(domains):
        raise ContractError("domain names must be unique")
    backbone = backbone or BackboneConfig()
    for d in domains:
        if d.image_size != backbone.image_size:
            raise ContractError(
                f"domain {d.name!r} images are {d.image_size}px, model wants "
                f"{backbone.image_size}px")
        if d.num_classes > backbone.num_classes:
            raise ContractError(
                f"domain {d.name!r} has {d.num_classes} classes, model head "
                f"has {backbone.num_classes}")

    global_model = init_model(backbone, seed)
    global_ckpt = ModelCheckpoint.from_model(global_model)
    states = [ClientState(client_id=d.name,
                          model=init_model(backbone, seed),
                          num_samples=len(d.train_idx),
                          seed=seed + 7919 * (i + 1))
              for i, d in enumerate(domains)]
    by_id = sorted(range(len(states)), key=lambda i: states[i].client_id)
    init_head = global_ckpt.select("head.")
    bundle = BroadcastBundle(0, global_ckpt,
                             [(states[i].client_id, init_head) for i in by_id])

    metrics_rows: list[dict] = []
    for round_index in range(cfg.rounds):
        blob = bundle.to_bytes()

        def run_client(pair):
            state, shard = pair
            received = BroadcastBundle.from_bytes(blob)
            received.global_checkpoint.load_into(state.model)
            state.heads = [(cid, head_from_checkpoint(c, backbone))
                           for cid, c in received.heads]
            state.momentum_buffers.clear()
            try:
                update = local_train_round(state, shard, cfg, round_index)
            except FedstyleError as exc:
                raise type(exc)(
                    f"round {round_index}, client {state.client_id!r}: {exc}"
                ) from exc
            return update.to_bytes(), update.metrics

        work = list(zip(states, domains))
        if parallel:
            with ThreadPoolExecutor(max_workers=len(work)) as pool:
                results = list(pool.map(run_client, work))
        else:
            results = [run_client(pair) for pair in work]

        updates = [ClientUpdate.from_bytes(raw) for raw, _ in results]
        metrics_by_id = {u.client_id: m for u, (_, m) in zip(updates, results)}
        global_ckpt = aggregate(updates)
        bundle = make_broadcast(global_ckpt, updates)
        for u in sorted(updates, key=lambda u: u.client_id):
            metrics_rows.append({"round": round_index, "client_id": u.client_id,
                                 **metrics_by_id[u.client_id]})
        if observer is not None:
            observer(round_index, updates, bundle)

    final = init_model(backbone, seed)
    global_ckpt.load_into(final)
    return final, metrics_rows
