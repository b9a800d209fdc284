import numpy as np
import pytest

from fedstyle import tensor as T
from fedstyle.checkpoint import ModelCheckpoint, head_from_checkpoint
from fedstyle.data import batch_iter, default_styles, make_domains
from fedstyle.errors import (CheckpointError, ContractError, NumericError,
                             ProtocolError, ShapeError)
from fedstyle.federation import (AUGMENTERS, BroadcastBundle, ClientState,
                                 ClientUpdate, RoundConfig, accuracy,
                                 aggregate, cosine_lr, fedavg_config,
                                 local_train_round, make_broadcast,
                                 run_federation)
from fedstyle.losses import (LossWeights, cdrm_loss, cross_entropy,
                             current_class_relations,
                             ensemble_class_relations, local_loss,
                             supcon_loss)
from fedstyle.model import (BackboneConfig, head_only_forward, init_model)
from fedstyle.styleaug import CsaConfig, csa_augment

BB = BackboneConfig(in_channels=3, block_channels=(4, 8, 16), image_size=8,
                    embedding_dim=16, num_classes=5)


def tiny_domains(n=30, seed=3, count=2):
    return make_domains(default_styles()[:count], n, 5, 8, seed=seed)


def make_update(client_id, values, n, round_index=0):
    entries = [(name, np.array(vals, dtype=np.float32))
               for name, vals in values]
    return ClientUpdate(client_id, ModelCheckpoint(entries), n, round_index)


class TestCosineSchedule:
    def test_endpoints(self):
        cfg = fedavg_config(rounds=10, lr_initial=0.001, lr_final=0.0001)
        assert cosine_lr(cfg, 0) == pytest.approx(0.001)
        assert cosine_lr(cfg, 9) == pytest.approx(0.0001)

    def test_monotone_decay(self):
        cfg = fedavg_config(rounds=8)
        values = [cosine_lr(cfg, e) for e in range(8)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_single_round(self):
        cfg = fedavg_config(rounds=1)
        assert cosine_lr(cfg, 0) == pytest.approx(cfg.lr_initial)


class TestAggregate:
    def test_weighted_mean_example(self):
        a = make_update("a", [("w", [1.0, 2.0])], n=1)
        b = make_update("b", [("w", [3.0, 4.0])], n=3)
        merged = aggregate([a, b])
        assert np.allclose(merged.entries[0][1], [2.5, 3.5], atol=1e-7)

    def test_identical_inputs_identity(self):
        model = init_model(BB, seed=0)
        ckpt = ModelCheckpoint.from_model(model)
        ups = [ClientUpdate(f"c{i}", ckpt, 10, 0) for i in range(3)]
        merged = aggregate(ups)
        assert merged.to_bytes() == ckpt.to_bytes()

    def test_equal_weights_match_bruteforce_mean(self):
        rng = np.random.default_rng(0)
        models = [init_model(BB, seed=s) for s in range(4)]
        ups = [ClientUpdate(f"c{s}", ModelCheckpoint.from_model(m), 7, 1)
               for s, m in enumerate(models)]
        merged = aggregate(ups)
        for i, (name, arr) in enumerate(merged.entries):
            stack = np.stack([u.checkpoint.entries[i][1].astype(np.float64)
                              for u in ups])
            assert np.abs(arr - stack.mean(axis=0)).max() <= 1e-7

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        ups = [make_update(f"c{i}", [("w", rng.normal(size=6))], n=i + 1)
               for i in range(4)]
        fwd = aggregate(ups)
        rev = aggregate(ups[::-1])
        assert np.abs(fwd.entries[0][1] - rev.entries[0][1]).max() <= 1e-7

    def test_single_update_passthrough(self):
        u = make_update("solo", [("w", [0.1, -0.7, 2.0])], n=5)
        merged = aggregate([u])
        assert np.allclose(merged.entries[0][1], u.checkpoint.entries[0][1],
                           atol=1e-7)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            aggregate([])

    def test_mixed_rounds_rejected(self):
        a = make_update("a", [("w", [1.0])], n=1, round_index=0)
        b = make_update("b", [("w", [2.0])], n=1, round_index=1)
        with pytest.raises(ProtocolError):
            aggregate([a, b])

    def test_shape_mismatch_rejected(self):
        a = make_update("a", [("w", [1.0, 2.0])], n=1)
        b = make_update("b", [("w", [1.0, 2.0, 3.0])], n=1)
        with pytest.raises(ShapeError):
            aggregate([a, b])


class TestWireFormats:
    def test_client_update_round_trip(self):
        model = init_model(BB, seed=1)
        u = ClientUpdate("ember", ModelCheckpoint.from_model(model), 24, 7)
        back = ClientUpdate.from_bytes(u.to_bytes())
        assert back.client_id == "ember"
        assert back.num_samples == 24 and back.round_index == 7
        assert back.checkpoint.to_bytes() == u.checkpoint.to_bytes()

    def test_broadcast_bundle_round_trip(self):
        model = init_model(BB, seed=2)
        ckpt = ModelCheckpoint.from_model(model)
        bundle = BroadcastBundle(3, ckpt, [("a", ckpt.select("head.")),
                                           ("b", ckpt.select("head."))])
        blob = bundle.to_bytes()
        back = BroadcastBundle.from_bytes(blob)
        assert back.round_index == 3
        assert back.to_bytes() == blob

    def test_truncation_and_trailing_detected(self):
        model = init_model(BB, seed=3)
        u = ClientUpdate("x", ModelCheckpoint.from_model(model), 1, 0)
        blob = u.to_bytes()
        with pytest.raises(CheckpointError):
            ClientUpdate.from_bytes(blob[:-3])
        with pytest.raises(CheckpointError):
            ClientUpdate.from_bytes(blob + b"\x00")


class TestMakeBroadcast:
    def test_heads_come_from_own_uploads(self):
        models = [init_model(BB, seed=s) for s in (4, 5)]
        ups = [ClientUpdate(n, ModelCheckpoint.from_model(m), 10, 2)
               for n, m in zip(("beta", "alpha"), models)]
        merged = aggregate(ups)
        bundle = make_broadcast(merged, ups)
        assert bundle.round_index == 3
        assert [cid for cid, _ in bundle.heads] == ["alpha", "beta"]
        for cid, head_ckpt in bundle.heads:
            own = next(u for u in ups if u.client_id == cid)
            assert head_ckpt.to_bytes() == own.checkpoint.select("head.").to_bytes()
        # diverged clients: per-client heads differ from the averaged head
        assert bundle.heads[0][1].to_bytes() != merged.select("head.").to_bytes()

    def test_missing_head_slice_rejected(self):
        u = make_update("a", [("stem.weight", [1.0])], n=1)
        with pytest.raises(CheckpointError):
            make_broadcast(u.checkpoint, [u])


def client_for(domain, cfg, seed=0, with_heads=True):
    model = init_model(BB, seed=seed)
    state = ClientState(client_id=domain.name, model=model,
                        num_samples=len(domain.train_idx), seed=seed + 50)
    if with_heads:
        ckpt = ModelCheckpoint.from_model(init_model(BB, seed=seed + 9))
        head = head_from_checkpoint(ckpt.select("head."), BB)
        state.heads = [("peer_a", head), ("peer_b", head)]
    return state


class TestLocalTrainRound:
    def test_zero_lr_returns_input_bitwise(self):
        domain = tiny_domains()[0]
        cfg = fedavg_config(rounds=2, batch_size=8, lr_initial=0.0, lr_final=0.0,
                            weight_decay=0.0)
        state = client_for(domain, cfg, with_heads=False)
        before = ModelCheckpoint.from_model(state.model).to_bytes()
        update = local_train_round(state, domain, cfg, 0)
        assert update.checkpoint.to_bytes() == before

    def test_missing_heads_protocol_error(self):
        domain = tiny_domains()[0]
        cfg = RoundConfig(rounds=1, batch_size=8)
        state = client_for(domain, cfg, with_heads=False)
        with pytest.raises(ProtocolError):
            local_train_round(state, domain, cfg, 0)

    def test_nan_parameter_reports_batch(self):
        domain = tiny_domains()[0]
        cfg = fedavg_config(rounds=1, batch_size=8)
        state = client_for(domain, cfg, with_heads=False)
        state.model.params["stem.weight"].data[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericError, match="batch 0"):
            local_train_round(state, domain, cfg, 0)

    def test_metrics_match_component_replay(self):
        # replay the same seeded batch stream with the public loss functions
        # and a twin model, stepping identically
        domain = tiny_domains(n=40)[0]
        cfg = RoundConfig(rounds=2, batch_size=8,
                          csa=CsaConfig(eta=0.5, split_ids=(1, 2)),
                          weights=LossWeights(1.0, 4.0))
        state = client_for(domain, cfg, seed=4)
        twin = init_model(BB, seed=4)
        heads = state.heads
        round_index = 1
        update = local_train_round(state, domain, cfg, round_index)

        rng = np.random.default_rng([state.seed, round_index, 1])
        ensemble = [h for _, h in heads]
        sums = {"task": 0.0, "supcon": 0.0, "cdrm": 0.0, "total": 0.0}
        seen = 0
        buffers = {}
        lr = cosine_lr(cfg, round_index)
        for x, labels in batch_iter(domain, "train", 8, state.seed, round_index):
            with T.Tape():
                split = int(rng.choice(cfg.csa.split_ids))
                f = twin.forward_to_split(x, split)
                f_hat, _ = csa_augment(
                    f, labels, lambda ff: twin.features_from_split(ff, split),
                    ensemble, cfg.csa)
                z = twin.features_from_split(f, split)
                z_hat = twin.features_from_split(f_hat, split)
                logits = head_only_forward(twin.head, z)
                logits_hat = head_only_forward(twin.head, z_hat)
                task = np.float32(0.5) * (cross_entropy(logits, labels)
                                          + cross_entropy(logits_hat, labels))
                con = supcon_loss(T.concat([z, z_hat], axis=0),
                                  np.concatenate([labels, labels]),
                                  cfg.weights.tau_supcon)
                ens = ensemble_class_relations(z, ensemble, labels,
                                               cfg.weights.tau_cdrm)
                cur, cur_hat = current_class_relations(logits, logits_hat, labels,
                                                       cfg.weights.tau_cdrm)
                dist = cdrm_loss(ens, cur, cur_hat)
                total, logged = local_loss(task, con, dist, cfg.weights)
                T.backward(total)
            for name, p in twin.parameters():
                g = p.grad + np.float32(cfg.weight_decay) * p.data
                buf = buffers.setdefault(name, np.zeros_like(p.data))
                buf *= np.float32(cfg.momentum)
                buf += g
                p.data -= np.float32(lr) * buf
            twin.zero_grad()
            n = x.shape[0]
            for key in sums:
                sums[key] += logged[key] * n
            seen += n

        for key in ("task", "supcon", "cdrm", "total"):
            assert update.metrics[f"loss_{key}"] == pytest.approx(sums[key] / seen)
        assert update.metrics["lr"] == pytest.approx(lr)
        assert update.metrics["source_val_acc"] == pytest.approx(
            accuracy(twin, domain, "test"))
        assert update.checkpoint.to_bytes() == \
            ModelCheckpoint.from_model(twin).to_bytes()

    def test_fedavg_ignores_heads_and_aug(self):
        domain = tiny_domains()[0]
        cfg = fedavg_config(rounds=1, batch_size=8)
        a = client_for(domain, cfg, seed=6, with_heads=True)
        b = client_for(domain, cfg, seed=6, with_heads=False)
        ua = local_train_round(a, domain, cfg, 0)
        ub = local_train_round(b, domain, cfg, 0)
        assert ua.checkpoint.to_bytes() == ub.checkpoint.to_bytes()


class TestAccuracy:
    def test_perfect_and_tied_predictions(self):
        domain = tiny_domains()[0]
        model = init_model(BB, seed=0)
        model.params["head.weight"].data[:] = 0
        model.params["head.bias"].data[:] = 0
        # all-zero logits tie; argmax resolves to class 0
        expected = float(np.mean(domain.labels[domain.test_idx] == 0))
        assert accuracy(model, domain, "test") == pytest.approx(expected)

    def test_empty_split_rejected(self):
        domain = tiny_domains()[0]
        domain.test_idx = np.array([], dtype=np.int64)
        model = init_model(BB, seed=0)
        with pytest.raises(ContractError):
            accuracy(model, domain, "test")


class TestRunFederation:
    def test_zero_lr_final_equals_initialization(self):
        domains = tiny_domains()
        cfg = fedavg_config(rounds=1, batch_size=8, lr_initial=0.0,
                            lr_final=0.0, weight_decay=0.0)
        model, _ = run_federation(domains, cfg, seed=5, backbone=BB)
        init = init_model(BB, seed=5)
        assert ModelCheckpoint.from_model(model).to_bytes() == \
            ModelCheckpoint.from_model(init).to_bytes()

    def test_identical_domains_symmetric_updates(self):
        # two clients over the same shard with the same stream seed produce
        # identical uploads, and averaging them changes nothing
        base = tiny_domains(n=30)[0]
        cfg = fedavg_config(rounds=2, batch_size=8)
        updates = []
        for cid in ("first", "second"):
            model = init_model(BB, seed=9)
            state = ClientState(cid, model, len(base.train_idx), seed=77)
            update = local_train_round(state, base, cfg, 0)
            updates.append(ClientUpdate(cid, update.checkpoint,
                                        update.num_samples, update.round_index))
        assert updates[0].checkpoint.to_bytes() == updates[1].checkpoint.to_bytes()
        merged = aggregate(updates)
        assert merged.to_bytes() == updates[0].checkpoint.to_bytes()

    def test_deterministic_metrics_across_runs(self):
        domains = tiny_domains(n=30)
        cfg = RoundConfig(rounds=2, batch_size=8, csa=CsaConfig(eta=0.5))
        _, rows_a = run_federation(domains, cfg, seed=3, backbone=BB)
        _, rows_b = run_federation(domains, cfg, seed=3, backbone=BB)
        assert rows_a == rows_b

    def test_parallel_matches_serial_bitwise(self):
        domains = tiny_domains(n=30)
        cfg = RoundConfig(rounds=2, batch_size=8)
        serial, rows_s = run_federation(domains, cfg, seed=4, backbone=BB)
        threaded, rows_t = run_federation(domains, cfg, seed=4, backbone=BB,
                                          parallel=True)
        assert ModelCheckpoint.from_model(serial).to_bytes() == \
            ModelCheckpoint.from_model(threaded).to_bytes()
        assert rows_s == rows_t

    def test_heads_in_round_t_are_uploads_of_previous_round(self):
        domains = tiny_domains(n=30)
        uploads, consumed = {}, {}

        def observer(r, updates, bundle):
            uploads[r] = {u.client_id: u.checkpoint.select("head.").to_bytes()
                          for u in updates}
            consumed[r + 1] = {cid: c.to_bytes() for cid, c in bundle.heads}

        cfg = RoundConfig(rounds=3, batch_size=8)
        run_federation(domains, cfg, seed=6, backbone=BB, observer=observer)
        for r in (1, 2):
            assert consumed[r] == uploads[r - 1]

    def test_metrics_rows_cover_every_round_and_client(self):
        domains = tiny_domains(n=30)
        cfg = fedavg_config(rounds=3, batch_size=8)
        _, rows = run_federation(domains, cfg, seed=8, backbone=BB)
        assert len(rows) == 3 * len(domains)
        assert [r["round"] for r in rows] == [0, 0, 1, 1, 2, 2]
        names = sorted(d.name for d in domains)
        assert [r["client_id"] for r in rows[:2]] == names
        for row in rows:
            for key in ("loss_task", "loss_supcon", "loss_cdrm", "loss_total",
                        "lr", "source_val_acc"):
                assert key in row

    def test_needs_two_domains(self):
        with pytest.raises(ContractError):
            run_federation(tiny_domains()[:1], fedavg_config(rounds=1), 0,
                           backbone=BB)

    def test_image_size_mismatch_rejected(self):
        domains = make_domains(default_styles()[:2], 20, 5, 16, seed=1)
        with pytest.raises(ContractError):
            run_federation(domains, fedavg_config(rounds=1), 0, backbone=BB)


class TestRoundConfigValidation:
    def test_bad_values(self):
        with pytest.raises(ContractError):
            RoundConfig(rounds=0)
        with pytest.raises(ContractError):
            RoundConfig(local_epochs=0)
        with pytest.raises(ContractError):
            RoundConfig(momentum=1.0)
        with pytest.raises(ContractError):
            RoundConfig(augmenter="cutmix")
        assert set(AUGMENTERS) == {"csa", "dsu", "advstyle", "mixstyle", "none"}
