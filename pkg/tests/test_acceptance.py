"""Acceptance suite: one check per shipped guarantee.

Every test prints a single verdict line (PASS or FAIL with the measured
numbers) before asserting, so a full run yields a readable scorecard.
Criteria 7 to 9 share one set of benchmark sweeps executed once per
session; expect several minutes of quiet while they run.
"""
import math
import statistics
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import gradcheck
import oracles
from fedstyle import tensor as T
from fedstyle.checkpoint import ModelCheckpoint, save_checkpoint, load_checkpoint
from fedstyle.data import default_styles, make_domains
from fedstyle.federation import (ClientUpdate, aggregate, fedavg_config,
                                 run_federation)
from fedstyle.harness import benchmark_config, run_experiment, serialize_config
from fedstyle.losses import (ClassRelationTable, cdrm_loss,
                             current_class_relations,
                             ensemble_class_relations, supcon_loss)
from fedstyle.model import BackboneConfig, init_model
from fedstyle.styleaug import (CsaConfig, EPSILON, ChannelStats, compute_stats,
                               csa_augment, style_transfer)

SEEDS = (42, 88, 707)


def verdict(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {number}: {detail}"


# -- 1. gradients --------------------------------------------------------

def test_c1_gradients_match_finite_differences(capsys):
    t0 = time.monotonic()
    instances, worst = 0, 0.0
    for seed in range(8):
        rng = np.random.default_rng(seed)
        for name, t_fn, r_fn, arrays in gradcheck.op_cases(rng):
            worst = max(worst, gradcheck.run_case(t_fn, r_fn, arrays, tol=1e-3))
            instances += 1
    elapsed = time.monotonic() - t0
    ok = instances >= 100 and worst < 1e-3 and elapsed < 60.0
    verdict(capsys, 1, ok,
            f"{instances} op instances, worst relative error {worst:.2e} "
            f"(limit 1e-3), {elapsed:.1f}s")


# -- 2. style statistic algebra ------------------------------------------

def test_c2_style_transfer_algebra(capsys):
    rng = np.random.default_rng(5)
    identity_err = norm_mu = norm_sigma = round_trip = 0.0
    clamp_ok = True
    for _ in range(20):
        f = T.Tensor((2.0 * rng.normal(size=(3, 4, 6, 6))).astype(np.float32))
        stats = compute_stats(f)

        same = style_transfer(f, stats, stats)
        identity_err = max(identity_err, float(np.abs(same.data - f.data).max()))

        unit = ChannelStats(T.Tensor(np.zeros_like(stats.mu.data)),
                            T.Tensor(np.ones_like(stats.sigma.data)))
        normed = style_transfer(f, stats, unit).data
        norm_mu = max(norm_mu, float(np.abs(normed.mean(axis=(2, 3))).max()))
        norm_sigma = max(norm_sigma, float(
            np.abs(normed.std(axis=(2, 3)) - 1.0).max()))

        target = ChannelStats(
            T.Tensor(rng.normal(size=stats.mu.shape).astype(np.float32)),
            T.Tensor(rng.uniform(0.5, 2.0, size=stats.sigma.shape)
                     .astype(np.float32)))
        away = style_transfer(f, stats, target)
        back = style_transfer(away, compute_stats(away), stats)
        round_trip = max(round_trip, float(np.abs(back.data - f.data).max()))

        clamp_ok &= float(stats.sigma.data.min()) >= EPSILON
    flat = compute_stats(T.Tensor(np.full((2, 3, 4, 4), 0.7, np.float32)))
    clamp_ok &= bool(np.all(flat.sigma.data == np.float32(EPSILON)))

    ok = (identity_err <= 1e-6 and norm_mu <= 1e-5 and norm_sigma <= 1e-3
          and round_trip <= 1e-4 and clamp_ok)
    verdict(capsys, 2, ok,
            f"identity {identity_err:.1e} (<=1e-6), normalized mean "
            f"{norm_mu:.1e} (<=1e-5) / sigma dev {norm_sigma:.1e} (<=1e-3), "
            f"round trip {round_trip:.1e} (<=1e-4), sigma floor "
            f"{'held' if clamp_ok else 'violated'}")


# -- 3. adversarial style ascent -----------------------------------------

def test_c3_style_ascent_raises_head_loss(capsys):
    t0 = time.monotonic()
    increased = 0
    for seed in range(100):
        before, after = oracles.csa_ascent_trial(seed, eta=1e-3)
        increased += after > before

    rng = np.random.default_rng(123)
    model = init_model(oracles.TINY_CFG, seed=9)
    x = T.Tensor(rng.uniform(0, 1, size=(4, 3, 8, 8)).astype(np.float32))
    labels = rng.integers(0, 3, size=4)
    heads = oracles.random_frozen_heads(rng, 3, 16, 3)
    with T.no_grad():
        f = model.forward_to_split(x, 2)
    csa_augment(f, labels, lambda ff: model.features_from_split(ff, 2), heads,
                CsaConfig(eta=1e-3, steps=1, split_ids=(2,)))
    frozen = all(h.weight.grad is None and h.bias.grad is None for h in heads)
    elapsed = time.monotonic() - t0

    ok = increased >= 90 and frozen and elapsed < 60.0
    verdict(capsys, 3, ok,
            f"loss rose in {increased}/100 trials (need >=90), head "
            f"gradients {'absent' if frozen else 'PRESENT'}, {elapsed:.1f}s")


# -- 4. training losses --------------------------------------------------

def test_c4_loss_values_match_references(capsys):
    brute_err = 0.0
    rng = np.random.default_rng(11)
    for b in range(2, 9):
        for _ in range(4):
            z = rng.normal(size=(b, 6)).astype(np.float32)
            labels = rng.integers(0, 3, size=b)
            got = float(supcon_loss(T.Tensor(z), labels, 0.07).data)
            want = oracles.ref_supcon(z, labels, 0.07)
            brute_err = max(brute_err, abs(got - want))

    z_same = T.Tensor(np.tile(np.array([0.3, -1.2, 0.8], np.float32), (4, 1)))
    supcon_pin = abs(float(supcon_loss(z_same, [1, 1, 1, 1], 0.07).data)
                     - 4 * math.log(3))

    ens = ClassRelationTable((0,), np.array([[0.5, 0.5]], np.float32),
                             np.log(np.array([[0.5, 0.5]], np.float32)),
                             "ensemble")
    lg = T.Tensor(np.zeros((2, 2), np.float32))
    cur, hat = current_class_relations(lg, lg, [0, 0], 1.0)
    cdrm_pin = abs(float(cdrm_loss(ens, cur, hat).data) - 2 * math.log(2))

    worst_excess = 0.0
    for seed in range(30):
        rng = np.random.default_rng(1000 + seed)
        b = int(rng.integers(3, 7))
        emb = rng.normal(size=(b, 6)).astype(np.float32)
        labels = rng.integers(0, 3, size=b)
        if len(set(labels.tolist())) < 2:
            labels[0], labels[1] = 0, 1
        heads = oracles.random_frozen_heads(rng, 2, 6, 3)
        table = ensemble_class_relations(T.Tensor(emb), heads, labels, 2.0)
        logits = T.Tensor(rng.normal(size=(b, 3)).astype(np.float32))
        logits_hat = T.Tensor(rng.normal(size=(b, 3)).astype(np.float32))
        cur, hat = current_class_relations(logits, logits_hat, labels, 2.0)
        excess = oracles.cdrm_excess(table.probs, cur.probs.data,
                                     hat.probs.data)
        worst_excess = min(worst_excess, excess)
        matched = oracles.cdrm_excess(table.probs, table.probs, table.probs)
        assert matched == 0.0

    ok = (brute_err <= 1e-5 and supcon_pin <= 1e-5 and cdrm_pin <= 1e-5
          and worst_excess >= -1e-7)
    verdict(capsys, 4, ok,
            f"contrastive brute-force gap {brute_err:.1e} (<=1e-5), pins off "
            f"by {supcon_pin:.1e} / {cdrm_pin:.1e} (<=1e-5), distillation "
            f"floor margin {worst_excess:.1e} (>=-1e-7)")


# -- 5. aggregation ------------------------------------------------------

def _random_updates(rng, n_clients=3):
    layout = [("a.weight", (4, 3)), ("a.bias", (4,)), ("b.weight", (2, 4))]
    updates = []
    for i in range(n_clients):
        entries = [(name, rng.normal(size=shape).astype(np.float32))
                   for name, shape in layout]
        updates.append(ClientUpdate(f"c{i}", ModelCheckpoint(entries),
                                    int(rng.integers(1, 50)), 0))
    return updates


def test_c5_aggregation_is_weighted_mean(capsys):
    oracle_err, weight_err = 0.0, 0.0
    perm_ok = True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        updates = _random_updates(rng)
        merged = aggregate(updates)
        total = sum(u.num_samples for u in updates)
        weight_err = max(weight_err, abs(
            1.0 - sum(u.num_samples / total for u in updates)))
        for k, (name, got) in enumerate(merged.entries):
            want = sum((u.num_samples / total)
                       * u.checkpoint.entries[k][1].astype(np.float64)
                       for u in updates)
            oracle_err = max(oracle_err, float(np.abs(got - want).max()))
        shuffled = aggregate(updates[::-1])
        perm_ok &= all(np.array_equal(a[1], b[1]) for a, b in
                       zip(merged.entries, shuffled.entries))

    pair = [ClientUpdate("p", ModelCheckpoint(
                [("w", np.array([1.0, 2.0], np.float32))]), 1, 0),
            ClientUpdate("q", ModelCheckpoint(
                [("w", np.array([3.0, 4.0], np.float32))]), 3, 0)]
    fixed = aggregate(pair).entries[0][1]
    fixed_ok = np.allclose(fixed, [2.5, 3.5], atol=1e-7)

    ok = oracle_err <= 1e-7 and perm_ok and weight_err <= 1e-9 and fixed_ok
    verdict(capsys, 5, ok,
            f"float64 oracle gap {oracle_err:.1e} (<=1e-7), order "
            f"{'invariant' if perm_ok else 'SENSITIVE'}, weight sum off by "
            f"{weight_err:.1e} (<=1e-9), 1:3 example -> {fixed.tolist()}")


# -- 6. protocol and determinism -----------------------------------------

def test_c6_protocol_round_trips_and_determinism(capsys, tmp_path):
    domains = make_domains(default_styles()[:3], 30, 5, 8, seed=3)
    backbone = BackboneConfig(in_channels=3, block_channels=(4, 8, 16),
                              image_size=8, embedding_dim=16, num_classes=5)
    seen = []
    run_federation(domains, fedavg_config(rounds=3), seed=1,
                   backbone=backbone,
                   observer=lambda t, ups, bundle: seen.append((t, ups, bundle)))
    heads_ok = True
    for t, updates, bundle in seen:
        assert bundle.round_index == t + 1
        uploaded = {u.client_id: u.checkpoint.select("head.").to_bytes()
                    for u in updates}
        broadcast = {cid: ckpt.to_bytes() for cid, ckpt in bundle.heads}
        heads_ok &= uploaded == broadcast

    model = init_model(backbone, seed=4)
    blob = save_checkpoint(model)
    blob2 = save_checkpoint(load_checkpoint(blob, backbone))
    ckpt_ok = blob == blob2

    base = serialize_config(benchmark_config(
        mode="mcsad", samples_per_domain=40, image_size=8,
        block_channels=(4, 8, 16), embedding_dim=16, rounds=3,
        seeds=(3,), targets=(0,)))
    snap = []
    for sub in ("one", "two"):
        out = tmp_path / sub
        cfg_file = tmp_path / f"{sub}.cfg"
        cfg_file.write_text(base + f"out_dir={out}\n")
        code = ("import sys\n"
                "from fedstyle.harness import load_config, run_experiment\n"
                "r = run_experiment(load_config(sys.argv[1]))\n"
                "sys.exit(1 if r.failures else 0)\n")
        proc = subprocess.run([sys.executable, "-c", code, str(cfg_file)],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        snap.append({p.relative_to(out): p.read_bytes()
                     for p in sorted(out.rglob("*"))
                     if p.is_file() and p.name != "config.txt"})
    rerun_ok = snap[0] == snap[1] and len(snap[0]) >= 5

    ok = heads_ok and ckpt_ok and rerun_ok
    verdict(capsys, 6, ok,
            f"broadcast heads {'match' if heads_ok else 'DIFFER from'} prior "
            f"uploads bitwise, checkpoint round trip "
            f"{'bitwise' if ckpt_ok else 'LOSSY'}, separate-process reruns "
            f"{'byte-identical' if rerun_ok else 'DIVERGED'} "
            f"({len(snap[0])} files)")


# -- 7 to 9. benchmark sweeps --------------------------------------------

@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """fedavg and mcsad leave-one-out sweeps plus the two split-placement
    arms, all on the calibrated preset with the shared seed triple."""
    root = tmp_path_factory.mktemp("benchmark")
    accs: dict[str, dict] = {}

    def collect(report):
        for r in report.results:
            assert r.ok, f"{r.cell}/{r.target}/seed {r.seed}: {r.error}"
            accs.setdefault(r.cell, {})[(r.target, r.seed)] = r.accuracy

    t0 = time.monotonic()
    for mode in ("fedavg", "mcsad"):
        collect(run_experiment(benchmark_config(
            mode=mode, seeds=SEEDS, out_dir=str(root / mode))))
    headline_elapsed = time.monotonic() - t0
    collect(run_experiment(benchmark_config(
        mode="split-grid", cells=("s12", "s3"), seeds=SEEDS,
        out_dir=str(root / "split"))))
    return {"accs": accs, "elapsed": headline_elapsed}


def _sweep_mean(cell: dict) -> float:
    return sum(cell.values()) / len(cell)


def _per_seed_means(cell: dict) -> list[float]:
    return [statistics.mean(v for (t, s), v in cell.items() if s == seed)
            for seed in SEEDS]


def _target_means(cell: dict) -> dict[str, float]:
    out: dict[str, list] = {}
    for (t, s), v in cell.items():
        out.setdefault(t, []).append(v)
    return {t: statistics.mean(vs) for t, vs in out.items()}


def test_c7_benchmark_beats_plain_averaging(capsys, benchmark):
    fed, mc = benchmark["accs"]["fedavg"], benchmark["accs"]["mcsad"]
    gain = _sweep_mean(mc) - _sweep_mean(fed)
    fed_t, mc_t = _target_means(fed), _target_means(mc)
    worst_target = min(mc_t[t] - fed_t[t] for t in fed_t)
    elapsed = benchmark["elapsed"]
    ok = gain >= 0.02 and worst_target >= -0.01 and elapsed <= 900.0
    per_target = ", ".join(f"{t} {mc_t[t] - fed_t[t]:+.3f}" for t in fed_t)
    verdict(capsys, 7, ok,
            f"sweep gain {100 * gain:+.1f}pt (need >=+2.0), worst target "
            f"{100 * worst_target:+.1f}pt (floor -1.0), per target "
            f"[{per_target}], {elapsed:.0f}s of 900")


def test_c8_components_stack_monotonically(capsys, benchmark):
    accs = benchmark["accs"]
    arms = [("fedavg", accs["fedavg"]), ("augment only", accs["s12"]),
            ("full method", accs["mcsad"])]
    gaps = []
    for (_, lo), (_, hi) in zip(arms, arms[1:]):
        diffs = [h - l for l, h in
                 zip(_per_seed_means(lo), _per_seed_means(hi))]
        spread = statistics.stdev(diffs) if len(diffs) > 1 else 0.0
        gaps.append((statistics.mean(diffs), spread))
    ok = all(mean >= -spread for mean, spread in gaps)
    chain = " <= ".join(f"{name} {100 * _sweep_mean(cell):.1f}"
                        for name, cell in arms)
    margins = ", ".join(f"{100 * m:+.1f}pt (std {100 * s:.1f})"
                        for m, s in gaps)
    verdict(capsys, 8, ok, f"{chain}; gaps {margins}, each >= -std")


def test_c9_early_splits_beat_late_split(capsys, benchmark):
    s12 = _sweep_mean(benchmark["accs"]["s12"])
    s3 = _sweep_mean(benchmark["accs"]["s3"])
    ok = s12 >= s3
    verdict(capsys, 9, ok,
            f"augmenting at the early splits averages {100 * s12:.1f} vs "
            f"{100 * s3:.1f} at the deep split ({100 * (s12 - s3):+.1f}pt, "
            f"directional)")
