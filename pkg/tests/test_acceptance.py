"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The desk scenario (criteria 4, 5, 6, 10, 11) is run once per session from
scripts/configs/desk_classwise.toml on the 4-digit MNIST IDX subset.
"""

import random
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fedunlearn import config, wclust
from fedunlearn.analysis import (
    UpdateRecord,
    comm_size,
    indistinguishability_report,
    param_mse_drift,
    prediction_gap,
    update_records,
)
from fedunlearn.crypto import dmcfe as fe
from fedunlearn.fedsim import (
    CIPHERTEXT_BYTES,
    PARTIAL_KEY_BYTES,
    WireUpdate,
    full_retrain_baseline,
    read_round_log,
    run_federation,
    strip_timing,
)
from fedunlearn.nn import Arch, Batch, ce_loss, forward, grad_ce, init_model, mas_importance, output_norm_grad
from fedunlearn.nn import pgd_l2_targeted
from fedunlearn.unlearn import ClientSplit, LossWeights, PGDConfig, build_context, unlearn_grad, unlearn_loss

from helpers import central_fd, record_criterion, rel_error

DESK_CONFIG = Path(__file__).resolve().parent.parent / "scripts" / "configs" / "desk_classwise.toml"
B = 2 ** 19


def desk_federation_config():
    return config.load(DESK_CONFIG).federation_config()


def keyed_federation(n, backend, seed):
    pp = fe.setup(256, n, 16, B, backend=backend)
    ids = [f"client-{i:02d}" for i in range(n)]
    boot = fe.TrustedBootstrap(ids, seed=seed)
    keys = [fe.keygen(pp, c, boot) for c in ids]
    return pp, ids, keys


def shares_for(pp, keys, label, participants):
    by_id = {sk.client_id: sk for sk, _ in keys}
    return [fe.dkey_share(pp, by_id[c], fe.SUM, label, participants) for c in participants]


@pytest.fixture(scope="module")
def desk(mnist_bundle):
    cfg = desk_federation_config()
    t0 = time.perf_counter()
    res = run_federation(cfg, mnist_bundle, check_oracle=True, keep_wire=True)
    runtime = time.perf_counter() - t0
    retrain_a = full_retrain_baseline(cfg, mnist_bundle)
    retrain_b = full_retrain_baseline(cfg, mnist_bundle, train_seed=cfg.train_seed + 1)
    return cfg, res, retrain_a, retrain_b, runtime


# ---------------------------------------------------------------------------


def test_criterion_01_dmcfe_correctness():
    rnd = random.Random(2024)
    failures, t0 = 0, time.perf_counter()
    for n in (2, 5, 10):
        pp, ids, keys = keyed_federation(n, "mock", seed=n)
        table = fe.bsgs_table(pp, 2 ** 12)
        for trial in range(1000):
            xs = [rnd.randint(-B, B) for _ in range(n)]
            cts = [fe.encrypt(pp, ek, x, trial) for (_, ek), x in zip(keys, xs)]
            dk = fe.dkey_comb(pp, shares_for(pp, keys, trial, ids), ids)
            failures += fe.decrypt(pp, cts, dk, trial, table) != sum(xs)
    mock_time = time.perf_counter() - t0

    t0 = time.perf_counter()
    pp, ids, keys = keyed_federation(10, "bls12_381", seed=99)
    table = fe.bsgs_table(pp, 2 ** 14)
    real_fail = 0
    for trial in range(50):
        xs = [rnd.randint(-B, B) for _ in range(10)]
        cts = [fe.encrypt(pp, ek, x, trial) for (_, ek), x in zip(keys, xs)]
        dk = fe.dkey_comb(pp, shares_for(pp, keys, trial, ids), ids)
        real_fail += fe.decrypt(pp, cts, dk, trial, table) != sum(xs)
    real_time = time.perf_counter() - t0

    ok = failures == 0 and real_fail == 0 and mock_time < 60 and real_time < 600
    assert record_criterion(
        1, ok, f"mock 3x1000 tuples wrong={failures} ({mock_time:.1f}s); BLS12-381 50 tuples n=10 wrong={real_fail} ({real_time:.1f}s)"
    )


def _tamper_trial(kind, pp, ids, keys, rnd, label, table):
    n = len(ids)
    by_id = {sk.client_id: (sk, ek) for sk, ek in keys}
    xs = [rnd.randint(-B, B) for _ in ids]
    cts = [fe.encrypt(pp, by_id[c][1], x, label) for c, x in zip(ids, xs)]
    shares = shares_for(pp, keys, label, ids)
    # masks cancel exactly for the honest participant set
    total = [[0, 0], [0, 0]]
    for c in ids:
        t = fe.mask_matrix(pp, by_id[c][0], label, ids)
        total = [[(total[i][j] + t[i][j]) % pp.order for j in range(2)] for i in range(2)]
    masks_ok = total == [[0, 0], [0, 0]]

    k = rnd.randrange(n)
    if kind == "omit_ciphertext":
        cts = cts[:k] + cts[k + 1 :]
    elif kind == "omit_share":
        shares = shares[:k] + shares[k + 1 :]
    elif kind == "cross_round_ciphertext":
        foreign = fe.encrypt(pp, by_id[ids[k]][1], xs[k], label + 1)
        cts[k] = fe.Ciphertext(foreign.element, label)  # relabelled so only the arithmetic can object
    elif kind == "cross_round_share":
        shares[k] = fe.dkey_share(pp, by_id[ids[k]][0], fe.SUM, label + 1, ids)
    elif kind == "participant_mismatch":
        subset = [c for c in ids if c != ids[k]]
        shares = shares_for(pp, keys, label, subset)
        shares.append(fe.dkey_share(pp, by_id[ids[k]][0], fe.SUM, label, ids))
    dk = fe.combine_shares_unchecked(pp, shares)
    try:
        fe.Decryptor(pp, dk, label, table).decrypt_element(pp.group.g1_sum([c.element for c in cts]))
    except fe.DecryptionFailure:
        return True, masks_ok
    return False, masks_ok


def test_criterion_02_enforcement():
    kinds = ["omit_ciphertext", "omit_share", "cross_round_ciphertext", "cross_round_share", "participant_mismatch"]
    rnd = random.Random(7)
    detected = silent = trials = 0
    masks_ok = True
    for backend, per_kind, n_choices in (("mock", 24, (2, 5, 10)), ("bls12_381", 2, (3,))):
        for n in n_choices:
            pp, ids, keys = keyed_federation(n, backend, seed=n + 17)
            table = fe.bsgs_table(pp, 2 ** 12)
            for kind in kinds:
                for t in range(per_kind // len(n_choices) if backend == "mock" else per_kind):
                    ok, m = _tamper_trial(kind, pp, ids, keys, rnd, 1000 * t + 3, table)
                    trials += 1
                    detected += ok
                    silent += not ok
                    masks_ok &= m
    ok = trials >= 100 and silent == 0 and masks_ok
    assert record_criterion(
        2, ok, f"{trials} tamper trials over 5 kinds: {detected} DecryptionFailure, {silent} silent successes; sum T_i = 0: {masks_ok}"
    )


def test_criterion_03_aggregation_equivalence(mnist_bundle):
    cfg = replace(desk_federation_config(), rounds=20, unlearn_start=12, unlearn_window=5)
    res = run_federation(cfg, mnist_bundle, check_oracle=True)
    bound = cfg.num_clients * 2.0 ** -cfg.f_bits
    worst = max(res.oracle_deviation)
    ok = len(res.oracle_deviation) == 20 and worst <= bound
    assert record_criterion(3, ok, f"20 rounds, max |secure - plaintext oracle| = {worst:.3g} (bound {bound:.3g})")


def test_criterion_04_indistinguishability(desk):
    cfg, res, *_ = desk
    pp = fe.setup(256, cfg.num_clients, cfg.f_bits, cfg.bound, backend=cfg.backend)
    ct_len, ks_len, layout = {}, {}, {}
    for _, _, phase, wire in res.wire:
        u = WireUpdate.from_bytes(pp, wire, cfg.kappa)
        ct_len.setdefault(phase, set()).update(len(c.to_bytes(pp)) for c in u.ciphertexts)
        ks_len.setdefault(phase, set()).add(len(u.key_share.to_bytes(pp)))
        layout.setdefault(phase, set()).add((len(u.ciphertexts), len(u.mapping)))
    records = update_records(res.rounds)
    rep = indistinguishability_report(records)
    mixed = {"learn", "unlearn"} <= set(ct_len)
    exact = (
        ct_len["learn"] == ct_len["unlearn"] == {CIPHERTEXT_BYTES}
        and ks_len["learn"] == ks_len["unlearn"] == {PARTIAL_KEY_BYTES}
        and layout["learn"] == layout["unlearn"]
    )
    structural = rep.schema_identical and rep.ciphertext_lengths_equal and rep.key_share_lengths_equal
    # negative controls: a phase-dependent extra field and a longer ciphertext block
    injected = [
        UpdateRecord(r.round, r.sender, r.phase, {**r.fields, "unlearn_flag": 1} if r.phase == "unlearn" else r.fields, r.mapping_compressed)
        for r in records
    ]
    longer = [
        UpdateRecord(r.round, r.sender, r.phase, {**r.fields, "ciphertexts": r.fields["ciphertexts"] + 56} if r.phase == "unlearn" else r.fields, r.mapping_compressed)
        for r in records
    ]
    neg_schema = not indistinguishability_report(injected).schema_identical
    neg_len = not indistinguishability_report(longer).ciphertext_lengths_equal
    gap = rep.details["mapping_compressed_relative_gap"]
    ok = mixed and exact and structural and neg_schema and neg_len
    assert record_criterion(
        4, ok, f"{len(res.wire)} updates ({rep.details['counts']}); lengths/schema equal: {exact and structural}; "
        f"negative controls detected: {neg_schema and neg_len}; compressed-mapping gap {gap:.3f}"
    )


def test_criterion_05_unlearning_efficacy(desk, mnist_bundle):
    cfg, res, retrain, _, runtime = desk
    efu, rt = res.rounds[-1], retrain.rounds[-1]
    ok = (
        efu["acc_f"] <= 0.10
        and abs(efu["acc_f"] - rt["acc_f"]) <= 0.10
        and abs(efu["acc"] - rt["acc"]) <= 0.05
        and runtime < 15 * 60
    )
    assert record_criterion(
        5, ok, f"EFU Acc={efu['acc']:.3f} Acc_f={efu['acc_f']:.3f}; retrain Acc={rt['acc']:.3f} Acc_f={rt['acc_f']:.3f}; "
        f"designated={list(res.designated)}; federation runtime {runtime:.0f}s"
    )


def test_criterion_06_epsilon_gap(desk, mnist_bundle):
    _, res, ra, rb, _ = desk
    x = mnist_bundle.test.x
    eps = prediction_gap(res.final, ra.final, x)
    floor = prediction_gap(ra.final, rb.final, x)
    ok = eps <= 1.5 * floor
    assert record_criterion(6, ok, f"eps(EFU, retrain)={eps:.4f}, eps(retrain A, B)={floor:.4f}, ratio {eps / floor:.2f} (limit 1.5)")


def test_criterion_07_gradient_checks():
    t0 = time.perf_counter()
    worst = {"ce": 0.0, "mas": 0.0, "mas_abs": 0.0, "composite": 0.0}
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m = init_model(Arch(4, (6,), (3,)), seed)  # 51 parameters
        x = rng.uniform(size=(6, 4))
        y = rng.integers(0, 3, 6)
        batch = Batch(x, y)
        worst["ce"] = max(worst["ce"], rel_error(grad_ce(m, batch)[0], central_fd(lambda t: ce_loss(m.with_theta(t), batch), m.theta)))

        def sqnorm(t, xs):
            return float(np.sum(forward(m.with_theta(t), xs)[1] ** 2))

        worst["mas"] = max(worst["mas"], rel_error(output_norm_grad(m, x), central_fd(lambda t: sqnorm(t, x), m.theta)))
        fd_abs = np.mean([np.abs(central_fd(lambda t: sqnorm(t, x[i : i + 1]), m.theta)) for i in range(len(x))], axis=0)
        worst["mas_abs"] = max(worst["mas_abs"], rel_error(mas_importance(m, x).raw, fd_abs))

        from fedunlearn.data import Dataset

        forget = Dataset(x, y)
        ctx = build_context(m, ClientSplit(forget.subset([]), forget), 3, PGDConfig(0.5, 0.2, 3), LossWeights(), seed)
        moved = m.with_theta(m.theta + 0.05 * rng.normal(size=m.dim))
        fb, ab = Batch(x, y), Batch(ctx.adv.x_adv, ctx.adv.y_target)
        g, _ = unlearn_grad(moved, fb, ab, ctx)
        fd = central_fd(lambda t: unlearn_loss(moved.with_theta(t), fb, ab, ctx), moved.theta)
        worst["composite"] = max(worst["composite"], rel_error(g, fd))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-3 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record_criterion(7, ok, f"worst relative error over 10 nets of 51 params: {detail} ({elapsed:.1f}s)")


def _reference_lloyd(values, kappa, seed):
    rng = np.random.default_rng(seed)
    c = wclust._kmeans_pp(values, kappa, rng)
    labels = None
    for _ in range(1000):
        new = np.argmin(np.abs(values[:, None] - c[None, :]), axis=1)
        for j in range(kappa):
            if not np.any(new == j):
                new[int(np.argmax(np.abs(values - c[new])))] = j
        c = np.array([values[new == j].mean() for j in range(kappa)])
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    return float(np.sum((values - c[labels]) ** 2))


def test_criterion_08_clustering():
    rng = np.random.default_rng(8)
    monotone = matched = lossless = 0
    worst_gap = 0.0
    for i in range(100):
        d = int(rng.integers(20, 400))
        kappa = int(rng.integers(2, 17))
        values = [rng.normal(size=d), rng.laplace(size=d) * 0.1, rng.uniform(-1, 1, size=d)][i % 3]
        cu = wclust.cluster(values, kappa, seed=i)
        h = np.asarray(cu.history)
        monotone += bool(np.all(np.diff(h) <= 1e-12 * max(1.0, h[0])))
        ref = _reference_lloyd(values, kappa, i)
        gap = abs(wclust.wc_objective(values, cu) - ref) / max(ref, 1e-12)
        worst_gap = max(worst_gap, gap)
        matched += gap <= 1e-6
        discrete = rng.integers(-kappa // 2, kappa // 2 + 1, size=d) * 0.5
        k = len(np.unique(discrete))
        lossless += bool(np.array_equal(wclust.cluster(discrete, k, seed=i).expand(), discrete))
    ok = monotone == matched == lossless == 100
    assert record_criterion(
        8, ok, f"100 instances: monotone {monotone}, objective = reference Lloyd {matched} (worst rel gap {worst_gap:.1e}), lossless {lossless}"
    )


def test_criterion_09_pgd_constraints(mnist_bundle):
    from fedunlearn.unlearn import local_train

    m = init_model(Arch(784, (128,), (4,)), 0)
    m = m.with_theta(local_train(m, mnist_bundle.train, 1, seed=0))
    x = mnist_bundle.train.x[:1000]
    y = mnist_bundle.train.y[:1000]
    rng = np.random.default_rng(9)
    violations = 0
    for eps in (1.0, 0.3, 3.0):
        t = (y + rng.integers(1, 4, size=len(y))) % 4
        adv = pgd_l2_targeted(m, x, t, eps, 0.25, 10, y_true=y)
        violations += int(np.sum(np.linalg.norm(adv.x_adv - x, axis=1) > eps))
        violations += int(np.sum((adv.x_adv < 0) | (adv.x_adv > 1)))
    ok = violations == 0
    assert record_criterion(9, ok, f"3 x 1000 samples (eps 1.0, 0.3, 3.0): {violations} ball/box violations")


def test_criterion_10_communication(desk):
    _, res, *_ = desk
    rows = comm_size(res.rounds, res.final.dim)
    worst = max(r["max_normalized_compressed"] for r in rows)
    window = [r for r in rows if 40 <= r["round"] < 50]
    ok = worst <= 0.10
    assert record_criterion(
        10, ok, f"d={res.final.dim}, kappa=64: worst compressed update / 4d = {worst:.3f} (limit 0.10); "
        f"unlearning window mean {np.mean([r['normalized_compressed'] for r in window]):.3f}; raw {rows[0]['normalized_raw']:.3f}"
    )


def test_criterion_11_drift(desk):
    cfg, res, *_ = desk
    series = param_mse_drift(res.models)
    window = series.normalized[cfg.unlearn_start : cfg.unlearn_start + cfg.unlearn_window]
    peak_at = int(np.argmax(series.mse))
    ok = len(series) == cfg.rounds - 1 and float(window.max()) <= 0.25
    assert record_criterion(
        11, ok, f"max normalized drift in unlearning window {window.max():.3f} (limit 0.25) at round "
        f"{cfg.unlearn_start + int(np.argmax(window))}; series peak at round {peak_at}"
    )


def test_criterion_12_determinism(mnist_bundle, tmp_path):
    cfg = replace(desk_federation_config(), rounds=12, unlearn_start=6, unlearn_window=3)
    a = run_federation(cfg, mnist_bundle, log_path=tmp_path / "a.jsonl")
    b = run_federation(cfg, mnist_bundle, log_path=tmp_path / "b.jsonl")
    la = [strip_timing(r) for r in read_round_log(tmp_path / "a.jsonl")]
    lb = [strip_timing(r) for r in read_round_log(tmp_path / "b.jsonl")]
    ok = a.digest == b.digest and la == lb
    assert record_criterion(12, ok, f"final digests equal: {a.digest == b.digest} ({a.digest[:16]}); round logs equal: {la == lb}")
