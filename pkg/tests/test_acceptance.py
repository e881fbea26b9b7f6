"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines. The two Dyck-20 training criteria are marked slow (several minutes
each); everything else finishes in seconds.
"""

import contextlib
import math
import time

import numpy as np
import pytest

from dptab import autodiff as ad
from dptab import data, dyck, maxent, metrics, model, privacy, trainer

from oracles import (
    catalan,
    dyck_member_by_grammar,
    finite_difference_gradients,
    max_relative_error,
    maxent_bruteforce,
    rdp_subsampled_gaussian_mp,
)


@contextlib.contextmanager
def criterion(n: int, description: str):
    started = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"\n[acceptance {n:02d}] FAIL  {description}")
        raise
    print(f"\n[acceptance {n:02d}] PASS  {description} "
          f"({time.monotonic() - started:.1f}s)")


def tiny_transformer(n_layers=2, d_model=16, seed=0, dtype=np.float64):
    schema = data.Schema((
        data.ColumnSpec(name="x", kind="categorical", categories=("a", "b", "c")),
        data.ColumnSpec(name="y", kind="categorical", categories=("u", "v")),
        data.ColumnSpec(name="z", kind="categorical", categories=("0", "1")),
    ))
    vocab = data.build_vocab(schema)
    cfg = model.ModelConfig(n_columns=3, n_tokens=vocab.n_tokens,
                            n_layers=n_layers, d_model=d_model, n_heads=2)
    return schema, vocab, model.init_params(cfg, seed=seed, dtype=dtype)


def random_rows(vocab, n, seed):
    rng = np.random.default_rng(seed)
    cols = []
    for i in range(len(vocab.sizes)):
        lo, hi = vocab.column_range(i)
        cols.append(rng.integers(lo, hi, size=n))
    return np.stack(cols, axis=1)


def test_c01_gradient_correctness():
    with criterion(1, "finite-difference checks: primitives + tiny transformer"):
        started = time.monotonic()
        rng = np.random.default_rng(0)

        # primitives
        checks = []
        a = ad.parameter(rng.normal(size=(3, 4)), "a")
        b = ad.parameter(rng.normal(size=(4, 5)), "b")
        checks.append((lambda: ad.sum_(ad.gelu(ad.matmul(a, b))), [a, b]))
        x = ad.parameter(rng.normal(size=(4, 6)), "x")
        gain = ad.parameter(rng.normal(size=6) + 1.0, "gain")
        bias = ad.parameter(rng.normal(size=6), "bias")
        checks.append((lambda: ad.sum_(ad.layer_norm(x, gain, bias)), [x, gain, bias]))
        s = ad.parameter(rng.normal(size=(3, 5)), "s")
        w = ad.constant(rng.normal(size=(3, 5)))
        checks.append((lambda: ad.sum_(ad.mul(ad.softmax(s), w)), [s]))
        ce = ad.parameter(rng.normal(size=(4, 6)), "ce")
        targets = rng.integers(0, 6, size=4)
        checks.append((lambda: ad.sum_(ad.softmax_cross_entropy(ce, targets)), [ce]))
        emb = ad.parameter(rng.normal(size=(7, 4)), "emb")
        ids = rng.integers(0, 7, size=(2, 5))
        checks.append((lambda: ad.sum_(ad.gelu(ad.embedding(emb, ids))), [emb]))
        q = ad.parameter(rng.normal(size=(5, 8)), "q")
        k = ad.parameter(rng.normal(size=(5, 8)), "k")
        v = ad.parameter(rng.normal(size=(5, 8)), "v")
        checks.append((lambda: ad.sum_(ad.gelu(ad.causal_self_attention(q, k, v, 2))),
                       [q, k, v]))
        m = ad.parameter(rng.normal(size=(2, 3, 4)), "m")
        cvec = ad.constant(rng.normal(size=4))
        checks.append((
            lambda: ad.sum_(ad.mul(ad.slice_(ad.transpose(ad.reshape(m, (6, 4)),
                                                          (1, 0)), (slice(None), 2)),
                                   cvec)),
            [m],
        ))
        for build, params in checks:
            tape = ad.gradients(build(), {p.name: p for p in params})
            fd = finite_difference_gradients(lambda: float(build().data),
                                             {p.name: p.data for p in params})
            assert max_relative_error(tape, fd) <= 1e-4

        # full tiny transformer: every parameter of the row NLL
        _, vocab, params = tiny_transformer()
        row = np.array([1, 4, 6])
        tape = ad.gradients(model.row_nll(params, row, vocab), params.tensors)
        fd = finite_difference_gradients(
            lambda: float(model.row_nll(params, row, vocab).data), params.arrays()
        )
        assert max_relative_error(tape, fd) <= 1e-4
        assert time.monotonic() - started < 120


def test_c02_per_example_gradient_consistency():
    with criterion(2, "mean per-example gradient == batch gradient, 20 batches"):
        _, vocab, params = tiny_transformer()
        for trial in range(20):
            rows = random_rows(vocab, n=8, seed=trial)
            per = ad.per_example_gradients(
                lambda r: model.row_nll(params, r, vocab), rows, params.tensors
            )
            full = ad.gradients(ad.mean_(model.batch_nll(params, rows, vocab)),
                                params.tensors)
            for key in full:
                mean_grad = np.mean([g[key] for g in per], axis=0)
                assert np.max(np.abs(mean_grad - full[key])) <= 1e-10


def test_c03_accountant():
    with criterion(3, "RDP accountant: closed form, oracle, monotonicity, round trip"):
        # (a) q=1 recovers the plain Gaussian mechanism
        for alpha in privacy.RDP_ORDERS:
            for sigma in (0.5, 1.0, 3.0):
                got = privacy.rdp_subsampled_gaussian(1.0, sigma, alpha)
                assert abs(got - alpha / (2 * sigma ** 2)) <= 1e-9
        # (b) epsilon monotone in steps, q, 1/sigma on a 5^3 grid
        qs = [0.01, 0.05, 0.1, 0.3, 0.6]
        sigmas = [0.8, 1.0, 1.5, 2.5, 4.0]
        steps = [1, 10, 100, 400, 1000]
        grid = {(q, s, t): privacy.compute_epsilon(q, s, t, 1e-9)
                for q in qs for s in sigmas for t in steps}
        for q in qs:
            for s in sigmas:
                series = [grid[(q, s, t)] for t in steps]
                assert all(x <= y + 1e-12 for x, y in zip(series, series[1:]))
        for s in sigmas:
            for t in steps:
                series = [grid[(q, s, t)] for q in qs]
                assert all(x <= y + 1e-12 for x, y in zip(series, series[1:]))
        for q in qs:
            for t in steps:
                series = [grid[(q, s, t)] for s in sigmas]
                assert all(x >= y - 1e-12 for x, y in zip(series, series[1:]))
        # (c) arbitrary-precision oracle at (q=0.01, sigma=1.0, alpha=8)
        got = privacy.rdp_subsampled_gaussian(0.01, 1.0, 8)
        want = rdp_subsampled_gaussian_mp(0.01, 1.0, 8)
        assert abs(got - want) <= 1e-9
        # (d) calibrate -> forward lands in [0.99 eps, eps]
        for eps in (0.5, 1.0, 4.0):
            sigma = privacy.calibrate_sigma(eps, 1e-9, q=256 / 16628, steps=390)
            achieved = privacy.compute_epsilon(256 / 16628, sigma, 390, 1e-9)
            assert 0.99 * eps <= achieved <= eps


def test_c04_maxent_identity():
    with criterion(4, "divergence identity on 100 random joints (IPF tol 1e-10)"):
        started = time.monotonic()
        rng = np.random.default_rng(7)
        for trial in range(100):
            k = int(rng.integers(2, 5))
            cards = tuple(int(rng.integers(2, 5)) for _ in range(k))
            order = int(rng.integers(1, 3)) if k >= 2 else 1
            table = np.random.default_rng(trial).gamma(1.0, size=cards) + 0.01
            joint = maxent.DenseJoint(table / table.sum())
            report = maxent.verify_maxent_identity(joint, order, tol=1e-5,
                                                   ipf_tol=1e-10)
            assert report["identity_residual"] <= 1e-5, report
            assert report["marginal_residual"] <= 1e-8, report
            assert report["corollary_ok"]
        assert time.monotonic() - started < 300


def test_c05_xor_witness():
    with criterion(5, "XOR joint: uniform max-entropy, 1-bit gap, positive divergence"):
        table = np.zeros((2, 2, 2))
        for a in (0, 1):
            for b in (0, 1):
                table[a, b, a ^ b] = 0.25
        ref = maxent.DenseJoint(table)
        ms = maxent.all_marginals(ref, 2)
        q_star = maxent.ipf_maxent(ms, tol=1e-12)
        np.testing.assert_allclose(q_star.table, np.full((2, 2, 2), 0.125),
                                   atol=1e-10)
        oracle_table, oracle_h = maxent_bruteforce((2, 2, 2), ms.subsets, ms.tables)
        np.testing.assert_allclose(oracle_table, q_star.table, atol=1e-4)
        gap = maxent.entropy(q_star) - maxent.entropy(ref)
        assert abs(gap - math.log(2)) <= 1e-6  # exactly one bit
        assert maxent.kl(ref, q_star) > 0.5  # strictly positive divergence gap
        assert maxent.log_loss(ref, q_star) == pytest.approx(
            maxent.entropy(q_star), abs=1e-9
        )


def test_c06_dyck_enumeration():
    with criterion(6, "Dyck-20 enumerates Catalan(10)=16796 valid rows; "
                      "parser == grammar oracle through length 12"):
        strings = dyck.generate_dyck(20)
        assert len(strings) == catalan(10) == 16796
        assert all(dyck.is_valid_dyck(s) for s in strings)
        import itertools
        for n in range(0, 13):
            for combo in itertools.product("()", repeat=n):
                s = "".join(combo)
                assert dyck.is_valid_dyck(s) == dyck_member_by_grammar(s)


@pytest.mark.slow
def test_c07_dyck_nonprivate_training():
    with criterion(7, "non-private Dyck-20: validity >= 0.95 on 5000 samples"):
        started = time.monotonic()
        ds = dyck.dyck_dataset(20)
        cfg = trainer.TrainRunConfig(
            epochs=6.0, n_layers=3, d_model=128, n_heads=4, batch_size=256,
            learning_rate=3e-4, eval_interval=65, seed=0, non_private=True,
            dtype="float32",
        )
        result = trainer.train(cfg, ds)
        samples = model.sample_rows(result.best_params, ds.vocab, n=5000, seed=1)
        rate = dyck.validity_rate(dyck.rows_to_strings(samples))
        elapsed = time.monotonic() - started
        print(f"  non-private validity={rate:.4f} steps={result.steps} "
              f"elapsed={elapsed / 60:.1f} min")
        assert rate >= 0.95, rate
        assert elapsed < 20 * 60


@pytest.mark.slow
def test_c08_dyck_dp_training():
    with criterion(8, "DP Dyck-20 at epsilon=1, delta=1e-9: "
                      "median validity of 3 seeds >= 0.60"):
        started = time.monotonic()
        ds = dyck.dyck_dataset(20)
        rates = []
        for seed in (0, 1, 2):
            cfg = trainer.TrainRunConfig(
                epochs=6.0, n_layers=3, d_model=128, n_heads=4, batch_size=256,
                learning_rate=3e-4, clip_norm=1.0, eval_interval=65, seed=seed,
                epsilon=1.0, delta=1e-9, dtype="float32", micro_batch=32,
            )
            result = trainer.train(cfg, ds)
            assert result.spent_epsilon is not None and result.spent_epsilon <= 1.0
            samples = model.sample_rows(result.best_params, ds.vocab, n=5000,
                                        seed=seed + 10)
            rates.append(dyck.validity_rate(dyck.rows_to_strings(samples)))
            print(f"  seed {seed}: validity={rates[-1]:.4f} "
                  f"spent_eps={result.spent_epsilon:.4f} sigma={result.sigma:.4f} "
                  f"elapsed={(time.monotonic() - started) / 60:.1f} min")
        median = sorted(rates)[1]
        elapsed = time.monotonic() - started
        print(f"  median validity = {median:.4f}")
        assert median >= 0.60, rates
        assert elapsed < 45 * 60


def test_c09_marginal_recovery():
    with criterion(9, "skewed 8-category column: sampled TVD <= 0.02 after "
                      "non-private training"):
        probs = np.array([0.30, 0.22, 0.16, 0.12, 0.08, 0.06, 0.04, 0.02])
        schema = data.Schema((
            data.ColumnSpec(name="c", kind="categorical",
                            categories=tuple("abcdefgh")),
        ))
        vocab = data.build_vocab(schema)
        rows = np.random.default_rng(42).choice(8, size=(4000, 1), p=probs)
        ds = data.EncodedDataset(rows, schema, vocab)
        cfg = trainer.TrainRunConfig(
            epochs=150.0, n_layers=1, d_model=16, n_heads=2, batch_size=512,
            learning_rate=0.02, eval_interval=100, seed=0, non_private=True,
            dtype="float64",
        )
        result = trainer.train(cfg, ds)
        samples = model.sample_rows(result.final_params, vocab, n=20000, seed=5)
        empirical = np.bincount(ds.rows[:, 0], minlength=8) / len(ds)
        sampled = np.bincount(samples[:, 0], minlength=8) / len(samples)
        tvd = 0.5 * float(np.abs(empirical - sampled).sum())
        print(f"  marginal TVD = {tvd:.4f}")
        assert tvd <= 0.02


def test_c10_mask_validity():
    with criterion(10, "100% of 1e5 sampled rows schema-valid across random models"):
        total = 0
        for trial in range(10):
            rng = np.random.default_rng(trial)
            k = int(rng.integers(1, 5))
            shared = bool(rng.integers(0, 2)) and k > 1
            if shared:
                cols = tuple(
                    data.ColumnSpec(name=f"c{i}", kind="categorical",
                                    categories=("0", "1", "2"))
                    for i in range(k)
                )
            else:
                cols = tuple(
                    data.ColumnSpec(
                        name=f"c{i}", kind="categorical",
                        categories=tuple(str(j) for j in range(int(rng.integers(2, 6)))),
                    )
                    for i in range(k)
                )
            schema = data.Schema(cols)
            vocab = data.build_vocab(schema, share_tokens=shared)
            cfg = model.ModelConfig(n_columns=k, n_tokens=vocab.n_tokens,
                                    n_layers=1, d_model=16, n_heads=2)
            params = model.init_params(cfg, seed=trial * 7, dtype=np.float32,
                                       init_std=0.5)  # untrained, wild logits
            rows = model.sample_rows(params, vocab, n=10_000, seed=trial)
            for i in range(k):
                lo, hi = vocab.column_range(i)
                assert rows[:, i].min() >= lo and rows[:, i].max() < hi
            total += rows.shape[0]
        assert total == 100_000


def test_c11_clipping_plateau():
    with criterion(11, "all-clipped trajectories identical for C vs C/10 "
                       "after 50 steps"):
        schema = data.Schema((
            data.ColumnSpec(name="c", kind="categorical", categories=("x", "y")),
        ))
        vocab = data.build_vocab(schema)
        rows = (np.random.default_rng(7).random(150) >= 0.9).astype(np.int64)
        ds = data.EncodedDataset(rows.reshape(-1, 1), schema, vocab)
        n_train = 148
        epochs = 50 * 32 / n_train

        def run(clip):
            cfg = trainer.TrainRunConfig(
                epochs=epochs, n_layers=1, d_model=16, n_heads=2, batch_size=32,
                learning_rate=0.001, clip_norm=clip, adam_eps=0.0, sigma=0.0,
                eval_interval=1000, seed=0, dtype="float64",
            )
            return trainer.train(cfg, ds)

        big, small = run(1e-3), run(1e-4)
        assert big.steps == small.steps == 50

        # premise check: replay the big-C run and confirm every per-example
        # gradient norm stays above C throughout
        seeds = np.random.SeedSequence(0).spawn(4)
        split_seed = int(seeds[0].generate_state(1)[0])
        init_seed = int(seeds[1].generate_state(1)[0])
        batch_rng = np.random.default_rng(seeds[2])
        train_set, _ = data.split_train_val(ds, seed=split_seed, frac=0.01)
        mc = model.ModelConfig(n_columns=1, n_tokens=vocab.n_tokens,
                               n_layers=1, d_model=16, n_heads=2)
        params = model.init_params(mc, seed=init_seed, dtype=np.float64)
        adam = privacy.AdamState.zeros_like(params.arrays())
        floor = np.inf
        for _ in range(50):
            idx = privacy.poisson_sample(len(train_set), 32 / len(train_set), batch_rng)
            if not len(idx):
                continue
            _, grads = model.per_example_grads(params, train_set.rows[idx], vocab)
            sq = sum((g.reshape(g.shape[0], -1) ** 2).sum(axis=1)
                     for g in grads.values())
            norms = np.sqrt(sq)
            floor = min(floor, float(norms.min()))
            scale = np.minimum(1e-3 / norms, 1.0)
            summed = {k: np.tensordot(scale, g, axes=(0, 0))
                      for k, g in grads.items()}
            privacy.adam_step(params.arrays(), {k: v / 32 for k, v in summed.items()},
                              adam, 0.001, eps=0.0)
        print(f"  min per-example gradient norm over 50 steps: {floor:.3g}")
        assert floor > 1e-3

        for key in big.final_params.tensors:
            np.testing.assert_allclose(
                big.final_params[key].data, small.final_params[key].data,
                atol=1e-8, rtol=0,
            )


@pytest.mark.slow
def test_c12_epsilon_sweep_trend():
    with criterion(12, "median best-val NLL non-increasing over "
                       "epsilon in {0.5, 1, 10, 100} (2% band)"):
        cats4, cats3 = tuple("wxyz"), tuple("pqr")
        schema = data.Schema((
            data.ColumnSpec(name="a", kind="categorical", categories=cats4),
            data.ColumnSpec(name="b", kind="categorical", categories=cats4),
            data.ColumnSpec(name="c", kind="categorical", categories=cats4),
            data.ColumnSpec(name="d", kind="categorical", categories=cats3),
        ))
        vocab = data.build_vocab(schema)
        rng = np.random.default_rng(0)
        raw = []
        for _ in range(2000):
            a = int(rng.integers(0, 4))
            b = a if rng.random() < 0.7 else int(rng.integers(0, 4))
            c = (b + 1) % 4 if rng.random() < 0.8 else int(rng.integers(0, 4))
            d = int(rng.integers(0, 3))
            raw.append([a, 4 + b, 8 + c, 12 + d])
        ds = data.EncodedDataset(np.array(raw), schema, vocab)

        medians = []
        for eps in (0.5, 1.0, 10.0, 100.0):
            nlls = []
            for seed in (0, 1, 2):
                cfg = trainer.TrainRunConfig(
                    epochs=6.0, n_layers=1, d_model=32, n_heads=2, batch_size=64,
                    learning_rate=2e-3, eval_interval=20, seed=seed,
                    epsilon=eps, delta=1e-9, clip_norm=1.0, dtype="float32",
                    val_frac=0.05,
                )
                nlls.append(trainer.train(cfg, ds).best_val_nll)
            medians.append(sorted(nlls)[1])
        print("  medians:", [f"{m:.4f}" for m in medians])
        for lo_eps, hi_eps in zip(medians, medians[1:]):
            assert hi_eps <= lo_eps * 1.02, medians


def test_c13_metrics_sanity():
    with criterion(13, "metric extremes and hand-computed fixtures"):
        schema = data.Schema((
            data.ColumnSpec(name="cat", kind="categorical", categories=("a", "b", "c")),
            data.ColumnSpec(name="num", kind="numeric", min=0.0, max=1.0),
        ))
        rng = np.random.default_rng(3)
        real = [[("a", "b", "c")[rng.integers(0, 3)], float(rng.random())]
                for _ in range(300)]
        report = metrics.compute_report(real, list(real), schema, seed=0)
        assert report.ks == 1.0
        assert report.cs >= 0.99
        assert 0.40 <= report.det <= 0.55

        separable = [[row[0], float(row[1]) * 0.2] for row in real]
        shifted = [[row[0], 0.8 + float(row[1]) * 0.2] for row in real]
        assert metrics.detection_score(separable, shifted, schema, seed=0) <= 0.05

        # hand-computed fixtures at 1e-9
        assert abs(metrics.ks_complement(np.array([1.0, 2.0, 3.0, 4.0]),
                                         np.array([1.0, 2.0])) - 0.5) <= 1e-9
        from scipy.special import gammaincc
        stat = 20.0 ** 2 / 500 + 20.0 ** 2 / 500
        expected_p = float(gammaincc(0.5, stat / 2.0))
        got_p = metrics.cs_pvalue(["x"] * 500 + ["y"] * 500,
                                  ["x"] * 520 + ["y"] * 480)
        assert abs(got_p - expected_p) <= 1e-9
        tvd = metrics.marginal_tvd(["u"] * 75 + ["v"] * 25, ["u"] * 50 + ["v"] * 50)
        assert abs(tvd - 0.25) <= 1e-9
