import math

import numpy as np
import pytest

from cmm.errors import SingleClass, SingularCovariance, TooFewSamples
from cmm.gap import (
    GaussianStats,
    compute_gap_report,
    gaussian_mle,
    kl_gaussian,
    similarity_stats,
    wasserstein2_gaussian,
)
from cmm.rng import SplitMix64


def stats(mean, cov):
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    return GaussianStats(mean=mean, cov=cov, n=2, ridge=0.0)


def rotation(d, seed):
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


class TestGaussianMle:
    def test_two_points_closed_form(self):
        a = np.array([1.0, 2.0, 3.0])
        b = np.array([3.0, 0.0, 1.0])
        fit = gaussian_mle(np.stack([a, b]))
        np.testing.assert_allclose(fit.mean, (a + b) / 2)
        half = (a - b) / 2
        expected = np.outer(half, half)
        expected += fit.ridge * np.eye(3)
        np.testing.assert_allclose(fit.cov, expected, atol=1e-12)

    def test_recovers_known_diagonal_gaussian(self):
        rng = SplitMix64(123)
        n, d = 10000, 3
        sigmas = np.array([0.5, 1.0, 2.0])
        mu = np.array([1.0, -2.0, 0.5])
        points = mu + rng.normal(n * d).reshape(n, d) * sigmas
        fit = gaussian_mle(points)
        np.testing.assert_allclose(fit.mean, mu, atol=0.1)
        for j in range(d):
            assert abs(fit.cov[j, j] - sigmas[j] ** 2) <= 0.1 * sigmas[j] ** 2

    def test_identical_points_ridge_only(self):
        points = np.tile([1.0, 2.0], (5, 1))
        fit = gaussian_mle(points)
        np.testing.assert_allclose(fit.cov, fit.ridge * np.eye(2), atol=1e-30)

    def test_too_few_samples(self):
        with pytest.raises(TooFewSamples):
            gaussian_mle(np.ones((1, 3)))


class TestKlGaussian:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(0)
        points = rng.normal(size=(40, 4))
        fit = gaussian_mle(points)
        assert 0.0 <= kl_gaussian(fit, fit) <= 1e-10

    def test_one_dim_unit_variance_mean_shift(self):
        p = stats([0.0], [[1.0]])
        q = stats([1.0], [[1.0]])
        assert kl_gaussian(p, q) == pytest.approx(0.5, abs=1e-12)

    def test_one_dim_general_closed_form(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            mp, mq = rng.normal(size=2)
            sp, sq = np.exp(rng.normal(size=2) * 0.5)
            p = stats([mp], [[sp**2]])
            q = stats([mq], [[sq**2]])
            expected = (
                math.log(sq / sp) + (sp**2 + (mp - mq) ** 2) / (2 * sq**2) - 0.5
            )
            assert kl_gaussian(p, q) == pytest.approx(expected, abs=1e-9)

    def test_diagonal_case_separates_into_one_dim_sum(self):
        p = stats([0.0, 1.0], np.diag([1.0, 4.0]))
        q = stats([1.0, -1.0], np.diag([2.0, 1.0]))
        per_dim = 0.0
        for j, (mp, mq, vp, vq) in enumerate(
            [(0.0, 1.0, 1.0, 2.0), (1.0, -1.0, 4.0, 1.0)]
        ):
            per_dim += math.log(math.sqrt(vq / vp)) + (vp + (mp - mq) ** 2) / (2 * vq) - 0.5
        assert kl_gaussian(p, q) == pytest.approx(per_dim, abs=1e-9)

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            p = gaussian_mle(rng.normal(size=(30, 3)))
            q = gaussian_mle(rng.normal(size=(30, 3)) * 2 + 1)
            assert kl_gaussian(p, q) >= 0.0

    def test_singular_covariance(self):
        p = stats([0.0, 0.0], np.zeros((2, 2)))
        with pytest.raises(SingularCovariance):
            kl_gaussian(p, p)


class TestWasserstein2:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(3)
        fit = gaussian_mle(rng.normal(size=(50, 5)))
        assert wasserstein2_gaussian(fit, fit) <= 1e-8

    def test_mean_shift_with_equal_covariance(self):
        m = np.array([1.0, -2.0, 2.0])
        p = stats(np.zeros(3), np.eye(3))
        q = stats(m, np.eye(3))
        assert wasserstein2_gaussian(p, q) == pytest.approx(np.linalg.norm(m), abs=1e-10)

    def test_diagonal_closed_form(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            d = 4
            mp, mq = rng.normal(size=(2, d))
            vp, vq = np.exp(rng.normal(size=(2, d)))
            p = stats(mp, np.diag(vp))
            q = stats(mq, np.diag(vq))
            expected = math.sqrt(
                np.sum((mp - mq) ** 2) + np.sum((np.sqrt(vp) - np.sqrt(vq)) ** 2)
            )
            assert wasserstein2_gaussian(p, q) == pytest.approx(expected, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        p = gaussian_mle(rng.normal(size=(30, 3)))
        q = gaussian_mle(rng.normal(size=(30, 3)) + 2)
        assert wasserstein2_gaussian(p, q) == pytest.approx(
            wasserstein2_gaussian(q, p), abs=1e-8
        )

    def test_triangle_inequality_on_random_triples(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            fits = [
                gaussian_mle(rng.normal(size=(25, 3)) * rng.uniform(0.5, 2) + rng.normal(size=3))
                for _ in range(3)
            ]
            ab = wasserstein2_gaussian(fits[0], fits[1])
            bc = wasserstein2_gaussian(fits[1], fits[2])
            ac = wasserstein2_gaussian(fits[0], fits[2])
            assert ac <= ab + bc + 1e-6

    def test_rotation_invariance_of_both_distances(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(60, 4)) @ np.diag([1.0, 2.0, 0.5, 1.5])
        y = rng.normal(size=(40, 4)) + np.array([1.0, 0.0, -1.0, 0.5])
        q = rotation(4, 8)
        w2_raw = wasserstein2_gaussian(gaussian_mle(x), gaussian_mle(y))
        w2_rot = wasserstein2_gaussian(gaussian_mle(x @ q.T), gaussian_mle(y @ q.T))
        assert w2_rot == pytest.approx(w2_raw, abs=1e-6)
        kl_raw = kl_gaussian(gaussian_mle(x), gaussian_mle(y))
        kl_rot = kl_gaussian(gaussian_mle(x @ q.T), gaussian_mle(y @ q.T))
        assert kl_rot == pytest.approx(kl_raw, abs=1e-6)


class TestSimilarityStats:
    def test_images_on_orthonormal_prototypes(self):
        protos = np.eye(4)
        images = np.eye(4)
        labels = np.arange(4)
        got = similarity_stats(images, protos, labels)
        assert got.matched_mean == pytest.approx(1.0)
        assert got.mismatched_mean == pytest.approx(0.0, abs=1e-12)
        assert got.intra_modal_interclass_mean == pytest.approx(0.0, abs=1e-12)

    def test_all_identical_features(self):
        u = np.array([1.0, 0.0, 0.0])
        images = np.tile(u, (6, 1))
        protos = np.stack([u, u], axis=1)
        labels = np.array([0, 1, 0, 1, 0, 1])
        got = similarity_stats(images, protos, labels)
        assert got.matched_mean == pytest.approx(1.0)
        assert got.mismatched_mean == pytest.approx(1.0)
        assert got.intra_modal_interclass_mean == pytest.approx(1.0)

    def test_matches_exhaustive_pair_enumeration(self):
        rng = np.random.default_rng(9)
        n, k, d = 20, 4, 6
        images = rng.normal(size=(n, d))
        images /= np.linalg.norm(images, axis=1, keepdims=True)
        protos = rng.normal(size=(d, k))
        protos /= np.linalg.norm(protos, axis=0, keepdims=True)
        labels = rng.integers(0, k, size=n)
        got = similarity_stats(images, protos, labels)

        matched = np.mean([images[i] @ protos[:, labels[i]] for i in range(n)])
        mism = np.mean(
            [images[i] @ protos[:, c] for i in range(n) for c in range(k) if c != labels[i]]
        )
        pairs = [
            images[i] @ images[j]
            for i in range(n)
            for j in range(i + 1, n)
            if labels[i] != labels[j]
        ]
        assert got.matched_mean == pytest.approx(matched, abs=1e-12)
        assert got.mismatched_mean == pytest.approx(mism, abs=1e-12)
        assert got.intra_modal_interclass_mean == pytest.approx(np.mean(pairs), abs=1e-9)

    def test_subsampled_path_is_deterministic(self):
        rng = np.random.default_rng(10)
        n, k, d = 300, 3, 4
        images = rng.normal(size=(n, d))
        images /= np.linalg.norm(images, axis=1, keepdims=True)
        protos = np.eye(d)[:, :k]
        labels = rng.integers(0, k, size=n)
        a = similarity_stats(images, protos, labels, max_pairs=1000, seed=5)
        b = similarity_stats(images, protos, labels, max_pairs=1000, seed=5)
        assert a.intra_modal_interclass_mean == b.intra_modal_interclass_mean
        exact = similarity_stats(images, protos, labels)
        assert a.intra_modal_interclass_mean == pytest.approx(
            exact.intra_modal_interclass_mean, abs=0.05
        )

    def test_single_class_rejected(self):
        with pytest.raises(SingleClass):
            similarity_stats(np.eye(3), np.eye(3)[:, :1], np.zeros(3, dtype=int))


class TestGapReport:
    def test_end_to_end_gap_shrinks_after_training(self):
        from cmm.store import SynthConfig, sample_fewshot, synth_generate
        from cmm.trainer import TrainConfig, train

        cache = synth_generate(
            SynthConfig(num_classes=6, dim=32, gap_shift=0.5, rotation_seed=4,
                        noise_sigma=0.02, train_per_class=20, val_per_class=8,
                        test_per_class=20, seed=6)
        )
        task = sample_fewshot(cache, shots=8, seed=2)
        ckpt = train(
            cache, task,
            TrainConfig(shots=8, seed=2, total_steps=1500, warmup_steps=100,
                        lr=2e-3, lr_min=2e-4),
        )
        report = compute_gap_report(cache, ckpt, "test", seed=0)
        assert report.after is not None
        assert report.after.w2 < report.before.w2
        assert report.n_images == 120
        assert report.n_text == 6
        body = report.to_json_dict()
        assert set(body) == {"split", "n_images", "n_text", "before", "after"}

    def test_without_checkpoint_only_before(self):
        from cmm.store import SynthConfig, synth_generate

        cache = synth_generate(SynthConfig(num_classes=4, dim=16, seed=7))
        report = compute_gap_report(cache, None, "test", seed=0)
        assert report.after is None
        assert report.before.w2 >= 0.0
