import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clmuce.channel_sim import SystemConfig, build_datasets, generate_scene, nu, nu_inv
from clmuce.clnet import (
    GAMMA_EPS,
    ContrastiveBatch,
    ContrastiveConfig,
    TrainingError,
    clnet_arch,
    contrastive_loss,
    contrastive_loss_value,
    csi_similarity,
    csi_similarity_matrix,
    extract_features,
    feature_map,
    pair_similarity,
    sample_positives_negatives,
    similarity_curve,
    standardize,
    train_clnet,
)
from clmuce.numerics import ConfigurationError, DimensionError, Tensor, init_params, stream
from clmuce.numerics.gradcheck import check_params, numeric_grad, relative_error

CFG = SystemConfig()


def eq4_oracle(F, batch, tau):
    """Scalar evaluation of the multi-positive contrastive loss for one anchor."""
    ri = F[batch.anchor]
    s = lambda j: math.exp(sum(a * b for a, b in zip(ri, F[j])) / tau)  # noqa: E731
    denom = sum(s(a) for a in batch.positives) + sum(s(b) for b in batch.negatives)
    return -sum(math.log(s(a) / denom) for a in batch.positives)


class TestNu:
    def test_example(self):
        np.testing.assert_array_equal(nu(np.array([1 + 2j, 3 - 4j])), [1.0, 3.0, 2.0, -4.0])

    def test_zero(self):
        np.testing.assert_array_equal(nu(np.zeros(3, complex)), np.zeros(6))

    def test_round_trip(self):
        rng = stream(0, "nu")
        for _ in range(100):
            n = int(rng.integers(1, 40))
            z = rng.standard_normal(n) + 1j * rng.standard_normal(n)
            assert np.array_equal(nu_inv(nu(z)), z)


class TestArchitecture:
    def test_conv_lengths(self):
        arch = clnet_arch(CFG)
        assert arch.in_len == 48
        assert arch.conv_lengths() == [24, 25, 26, 25]
        assert arch.out_len == 112

    def test_wrong_input_length(self):
        arch = clnet_arch(CFG)
        params = init_params(arch, stream(1))
        with pytest.raises(DimensionError):
            extract_features(arch, params, np.ones(47))

    def test_deterministic_and_unit_norm(self):
        arch = clnet_arch(CFG)
        params = init_params(arch, stream(1))
        y = stream(2).standard_normal((6, 48))
        a = extract_features(arch, params, y)
        assert np.array_equal(a, extract_features(arch, params, y))
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, rtol=1e-12)
        # single-vector path: same values up to BLAS summation order
        np.testing.assert_allclose(extract_features(arch, params, y[0]), a[0], rtol=1e-12, atol=1e-15)

    def test_invariant_to_measurement_gain(self):
        arch = clnet_arch(CFG)
        params = init_params(arch, stream(1))
        y = stream(3).standard_normal((4, 48))
        np.testing.assert_allclose(extract_features(arch, params, 7.5 * y), extract_features(arch, params, y),
                                   rtol=1e-10, atol=1e-13)


class TestSampling:
    CFG1 = ContrastiveConfig(d=1.0, n_negatives=5)

    def test_line_example(self):
        pos = np.array([[0.0, 0], [0.5, 0], [3.0, 0], [9.0, 0]])
        b = sample_positives_negatives(pos, 0, self.CFG1, stream(0))
        assert b.positives == (1,)
        assert set(b.negatives) == {2, 3}

    def test_no_positive_skips(self):
        pos = np.array([[0.0, 0], [5.0, 0], [10.0, 0]])
        assert sample_positives_negatives(pos, 0, self.CFG1, stream(0)) is None

    def test_no_negative_is_error(self):
        pos = np.array([[0.0, 0], [0.5, 0]])
        with pytest.raises(ConfigurationError):
            sample_positives_negatives(pos, 0, self.CFG1, stream(0))

    @pytest.mark.parametrize("n", [200, 500])
    def test_brute_force_ball(self, n):
        rng = stream(n, "ball")
        pos = rng.uniform(0, 20, (n, 2))
        cfg = ContrastiveConfig(d=2.0, max_positives=10**6, n_negatives=8)
        for i in range(n):
            truth = {j for j in range(n) if j != i and np.hypot(*(pos[j] - pos[i])) <= 2.0}
            b = sample_positives_negatives(pos, i, cfg, rng)
            if not truth:
                assert b is None
                continue
            assert set(b.positives) == truth
            assert all(np.hypot(*(pos[j] - pos[i])) > 2.0 for j in b.negatives)
            assert len(set(b.negatives)) == len(b.negatives)

    def test_cap_keeps_nearest(self):
        rng = stream(4)
        pos = rng.uniform(0, 3, (60, 2))
        b = sample_positives_negatives(pos, 0, ContrastiveConfig(d=2.0, max_positives=8), rng)
        dist = np.linalg.norm(pos - pos[0], axis=1)
        inside = [j for j in np.argsort(dist, kind="stable") if j != 0 and dist[j] <= 2.0]
        assert list(b.positives) == inside[:8]

    def test_batch_invariants(self):
        with pytest.raises(ValueError):
            ContrastiveBatch(0, (), (1,))
        with pytest.raises(ValueError):
            ContrastiveBatch(0, (1,), (1,))
        with pytest.raises(ValueError):
            ContrastiveBatch(0, (0,), (1,))


class TestSimilarities:
    def test_pair_examples(self):
        assert pair_similarity([1.0, 0.0], [0.0, 1.0], 0.3) == 1.0
        assert pair_similarity([1.0, 0.0], [1.0, 0.0], 1.0) == pytest.approx(math.e, rel=1e-15)
        assert pair_similarity([1.0, 0.0], [2.0, 0.0], 0.5) == pytest.approx(math.exp(4), rel=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.1, 10.0), st.floats(0.05, 5.0))
    def test_pair_scale_law(self, seed, c, tau):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((2, 5))
        assert pair_similarity(c * a, b, c * tau) == pytest.approx(pair_similarity(a, b, tau), rel=1e-12)

    def test_gamma_examples(self):
        assert csi_similarity([0.0, 0.0], [3.0, 4.0]) == pytest.approx(0.2, rel=1e-15)
        assert csi_similarity([1.0, 2.0], [1.0, 2.0]) == 1.0 / GAMMA_EPS

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31))
    def test_gamma_symmetric_positive(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((2, 7))
        g = csi_similarity(a, b)
        assert g > 0 and g == csi_similarity(b, a)
        assert g == pytest.approx(1.0 / math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b))), rel=1e-12)

    def test_matrix_matches_pairwise(self):
        R = stream(5).standard_normal((9, 4))
        R[3] = R[1]
        G = csi_similarity_matrix(R)
        for i in range(9):
            for j in range(9):
                assert G[i, j] == pytest.approx(csi_similarity(R[i], R[j]), rel=1e-9)


class TestContrastiveLoss:
    def test_symmetric_case_is_log2(self):
        F = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        loss = contrastive_loss_value(F, [ContrastiveBatch(0, (1,), (2,))], 1.0)
        assert loss == pytest.approx(math.log(2), rel=1e-14)

    def test_dominant_positive_goes_to_zero(self):
        F = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        loss = contrastive_loss_value(F, [ContrastiveBatch(0, (1,), (2,))], 0.1)
        # log(1 + e^-20)
        assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-6)
        assert 0 < loss < 1e-8

    def test_two_positive_oracle(self):
        F = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        batch = ContrastiveBatch(0, (1, 2), (3,))
        e = math.e
        denom = e + 1 + 1 / e
        expected = -(math.log(e / denom) + math.log(1 / denom))
        assert contrastive_loss_value(F, [batch], 1.0) == pytest.approx(expected, rel=1e-14)

    def test_random_batches_match_oracle(self):
        rng = stream(6)
        for _ in range(50):
            F = rng.standard_normal((12, 5))
            tau = float(rng.uniform(0.2, 2.0))
            batches = []
            for a in rng.choice(12, 3, replace=False):
                others = [j for j in range(12) if j != a]
                rng.shuffle(others)
                k = int(rng.integers(1, 4))
                batches.append(ContrastiveBatch(int(a), tuple(others[:k]), tuple(others[k : k + int(rng.integers(1, 5))])))
            expected = np.mean([eq4_oracle(F, b, tau) for b in batches])
            assert contrastive_loss_value(F, batches, tau) == pytest.approx(expected, rel=1e-12)

    def test_positive_and_monotone(self):
        F = np.array([[1.0, 0.0], [0.2, 0.3], [0.5, -0.5]])
        batch = [ContrastiveBatch(0, (1,), (2,))]
        prev = math.inf
        for x in np.linspace(0.0, 3.0, 10):
            F[1, 0] = x
            v = contrastive_loss_value(F, batch, 0.5)
            assert 0 < v < prev
            prev = v

    def test_all_skipped(self):
        with pytest.raises(TrainingError):
            contrastive_loss(Tensor(np.ones((2, 2))), [None], 1.0)

    def test_gradient_wrt_features(self):
        rng = stream(7)
        F0 = rng.standard_normal((8, 4))
        batches = [ContrastiveBatch(0, (1, 2), (3, 4, 5)), ContrastiveBatch(6, (7,), (1, 2))]
        F = Tensor(F0.copy(), requires_grad=True)
        contrastive_loss(F, batches, 0.4).backward()
        num = numeric_grad(lambda: contrastive_loss_value(F0, batches, 0.4), F0)
        assert relative_error(F.grad, num) < 1e-7

    def test_gradient_through_clnet(self):
        arch = clnet_arch(SystemConfig(pilot_len=8), hidden=12)
        params = init_params(arch, stream(8))
        y = stream(9).standard_normal((6, arch.in_len))
        batches = [ContrastiveBatch(0, (1,), (2, 3)), ContrastiveBatch(4, (5, 1), (0,))]
        err = check_params(lambda p: contrastive_loss(feature_map(arch, p, y), batches, 0.5), params, step=1e-5,
                           max_coords=40)
        assert err < 1e-5


class TestSimilarityCurve:
    def test_zero_variance(self):
        pos = stream(1).uniform(0, 50, (30, 2))
        vecs = np.ones((30, 4))
        pairs = np.array([(i, j) for i in range(30) for j in range(i + 1, 30)])
        curve = similarity_curve(vecs, pos, pairs, (0, 10, 20, 80))
        assert all(v == 0.0 for v in curve if v is not None)

    def test_raw_mode_brute_force(self):
        rng = stream(2)
        pos = rng.uniform(0, 60, (50, 2))
        y = rng.standard_normal((50, 48))
        pairs = np.array([(i, j) for i in range(50) for j in range(i + 1, 50)])
        bins = (0, 5, 20, 40, 100)
        curve = similarity_curve(y, pos, pairs, bins)
        g, dist = [], []
        for i, j in pairs:
            g.append(1.0 / math.sqrt(sum((a - b) ** 2 for a, b in zip(y[i], y[j]))))
            dist.append(math.dist(pos[i], pos[j]))
        g = np.array(g)
        z = (g - g.mean()) / g.std()
        dist = np.array(dist)
        for k, (lo, hi) in enumerate(zip(bins[:-1], bins[1:])):
            sel = (dist >= lo) & (dist < hi)
            if sel.any():
                assert curve[k] == pytest.approx(z[sel].mean(), rel=1e-9, abs=1e-12)
            else:
                assert curve[k] is None

    def test_standardize(self):
        np.testing.assert_array_equal(standardize(np.full(4, 3.0)), np.zeros(4))
        z = standardize(np.array([1.0, 2.0, 3.0]))
        assert z.mean() == pytest.approx(0.0, abs=1e-15) and z.std() == pytest.approx(1.0)


class TestTraining:
    @pytest.fixture(scope="class")
    @classmethod
    def small(cls):
        cfg = SystemConfig(pilot_len=8)
        scene = generate_scene(cfg, 10, 3, area=(0.0, 15.0, 0.0, 15.0))
        return cfg, build_datasets(scene, cfg, (80, 2, 2), 20.0, 3)["contrastive"]

    def test_zero_epochs_is_init(self, small):
        cfg, ds = small
        arch = clnet_arch(cfg, 16)
        r = train_clnet(ds, ContrastiveConfig(hidden=16), 0, 5, arch)
        init = init_params(arch, stream(5, "init", "clnet"))
        assert all(np.array_equal(r.params[k].data, init[k].data) for k in init)
        assert r.losses == []

    def test_deterministic(self, small):
        cfg, ds = small
        arch = clnet_arch(cfg, 16)
        a = train_clnet(ds, ContrastiveConfig(hidden=16, batch_size=16, lr=1e-3), 2, 5, arch)
        b = train_clnet(ds, ContrastiveConfig(hidden=16, batch_size=16, lr=1e-3), 2, 5, arch)
        assert np.array_equal(a.params.flat(), b.params.flat())
        assert a.losses == b.losses and len(a.losses) == 2

    def test_loss_decreases(self, small):
        cfg, ds = small
        r = train_clnet(ds, ContrastiveConfig(hidden=16, batch_size=16, lr=1e-3), 15, 5, clnet_arch(cfg, 16))
        best = np.minimum.accumulate(r.losses)
        assert best[-1] < r.losses[0]

    def test_no_neighbors(self, small):
        cfg, ds = small
        with pytest.raises(TrainingError):
            train_clnet(ds, ContrastiveConfig(d=1e-9), 1, 0)
