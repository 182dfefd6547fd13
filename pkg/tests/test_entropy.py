import math

import numpy as np
import pytest
import torch

from feds.entropy import (
    LIKELIHOOD_MIN,
    SIGMA_MIN,
    ChannelContextModel,
    FactorizedPrior,
    GaussianParams,
    channel_entropy_profile,
    charm_predict_slice,
    discretized_gaussian,
    factorized_likelihood,
    gaussian_likelihood,
    mean_channel_entropy,
    quantize,
    rank_channels_topk,
    rate_bits,
    slice_layout,
)


def erf_cdf(x):
    """Independent standard-normal CDF via the C library's erf."""
    return 0.5 * (1.0 + np.vectorize(math.erf)(np.asarray(x) / math.sqrt(2.0)))


class TestQuantize:
    def test_eval_rounding(self):
        v = torch.tensor([2.4])
        assert quantize(v, torch.tensor([0.0]), mode="eval").item() == pytest.approx(2.0)

    def test_eval_mean_offset(self):
        v = torch.tensor([2.4])
        out = quantize(v, torch.tensor([0.4]), mode="eval")
        assert out.item() == pytest.approx(2.4)

    def test_train_noise_bound(self):
        gen = torch.Generator().manual_seed(0)
        v = torch.randn(10_000, generator=gen)
        out = quantize(v, None, mode="train", generator=gen)
        assert torch.all((out - v).abs() <= 0.5)

    def test_none_passthrough(self):
        v = torch.randn(16)
        assert torch.equal(quantize(v, None, mode="none"), v)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            quantize(torch.zeros(1), None, mode="help")


class TestGaussianLikelihood:
    def test_centered_unit_sigma(self):
        p = gaussian_likelihood(torch.tensor([0.0]), mu=torch.tensor([0.0]),
                                sigma=torch.tensor([1.0]))
        assert p.item() == pytest.approx(0.3829249226, abs=1e-7)

    def test_centered_minimum_sigma(self):
        p = gaussian_likelihood(torch.tensor([5.0]), mu=torch.tensor([5.0]),
                                sigma=torch.tensor([0.11]))
        assert p.item() == pytest.approx(0.9999945, abs=1e-6)

    def test_symmetry(self):
        k = torch.linspace(0.0, 6.0, 25)
        mu = torch.zeros_like(k)
        sigma = torch.full_like(k, 1.7)
        hi = gaussian_likelihood(k, mu=mu, sigma=sigma)
        lo = gaussian_likelihood(-k, mu=mu, sigma=sigma)
        assert torch.allclose(hi, lo)

    def test_matches_erf_oracle(self):
        rng = np.random.default_rng(0)
        v = rng.integers(-30, 31, size=5000).astype(np.float64)
        mu = rng.uniform(-3, 3, size=5000)
        sigma = rng.uniform(SIGMA_MIN, 16.0, size=5000)
        got = gaussian_likelihood(torch.from_numpy(v), mu=torch.from_numpy(mu),
                                  sigma=torch.from_numpy(sigma)).numpy()
        want = erf_cdf((v - mu + 0.5) / sigma) - erf_cdf((v - mu - 0.5) / sigma)
        want = np.clip(want, LIKELIHOOD_MIN, 1.0)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_clamped_floor(self):
        p = gaussian_likelihood(torch.tensor([100.0]), mu=torch.tensor([0.0]),
                                sigma=torch.tensor([0.11]))
        assert p.item() == pytest.approx(LIKELIHOOD_MIN, rel=1e-6)

    def test_mass_sums_to_one(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            mu = rng.uniform(-10, 10)
            sigma = rng.uniform(SIGMA_MIN, 64.0)
            lo = math.ceil(mu - 40 * sigma)
            hi = math.floor(mu + 40 * sigma)
            k = torch.arange(lo, hi + 1, dtype=torch.float64)
            pmf = discretized_gaussian(k, torch.tensor(mu, dtype=torch.float64),
                                       torch.tensor(sigma, dtype=torch.float64))
            total = math.fsum(pmf.numpy().tolist())
            assert 1.0 - 1e-6 <= total <= 1.0 + 1e-12


class TestRateBits:
    def test_reference_values(self):
        p = torch.tensor([0.5, 1.0, 0.3829249226])
        bits = rate_bits(p)
        assert bits[0].item() == pytest.approx(1.0)
        assert bits[1].item() == pytest.approx(0.0)
        assert bits[2].item() == pytest.approx(1.38486, abs=1e-4)

    def test_nonnegative_for_clamped_probs(self):
        p = torch.rand(1000).clamp(LIKELIHOOD_MIN, 1.0)
        assert torch.all(rate_bits(p) >= 0)


class TestFactorizedPrior:
    def test_channel_mass_telescopes(self):
        torch.manual_seed(0)
        prior = FactorizedPrior(8)
        z = torch.arange(-300, 301, dtype=torch.float32)
        z = z.repeat(8, 1)[None].permute(0, 1, 2).reshape(1, 8, 1, -1)
        p = factorized_likelihood(z, prior)
        per_channel = p.sum(dim=(0, 2, 3))
        assert torch.all(per_channel > 1 - 1e-4)
        assert torch.all(per_channel < 1 + 1e-4)

    def test_cdf_nondecreasing(self):
        torch.manual_seed(1)
        prior = FactorizedPrior(4)
        x = torch.linspace(-50, 50, 501).repeat(4, 1)
        cdf = prior.cdf(x)
        assert torch.all(cdf[:, 1:] >= cdf[:, :-1] - 1e-7)

    def test_fresh_prior_concentrates_near_zero(self):
        torch.manual_seed(2)
        prior = FactorizedPrior(16)
        z = torch.zeros(1, 16, 1, 3)
        z[..., 1] = 20.0
        z[..., 2] = -20.0
        p = factorized_likelihood(z, prior)
        assert torch.all(p[..., 0] > p[..., 1])
        assert torch.all(p[..., 0] > p[..., 2])

    def test_likelihoods_positive(self):
        torch.manual_seed(3)
        prior = FactorizedPrior(6)
        z = torch.randint(-100, 100, (2, 6, 4, 4)).float()
        p = factorized_likelihood(z, prior)
        assert torch.all(p >= LIKELIHOOD_MIN)
        assert torch.all(p <= 1.0)


class TestSliceLayout:
    def test_teacher_and_student_presets(self):
        assert slice_layout(400, 8).channels_per_slice == [50] * 8
        assert slice_layout(160, 5).channels_per_slice == [32] * 5

    def test_remainder_goes_last(self):
        assert slice_layout(10, 3).channels_per_slice == [3, 3, 4]

    def test_boundaries_partition(self):
        layout = slice_layout(37, 4)
        assert layout.boundaries() == [0, 9, 18, 27, 37]
        assert sum(layout.channels_per_slice) == 37

    def test_too_many_slices(self):
        with pytest.raises(ValueError):
            slice_layout(4, 5)


class TestChannelContext:
    @pytest.fixture()
    def charm(self):
        torch.manual_seed(0)
        return ChannelContextModel(m=12, num_slices=4)

    def side(self, charm, seed=0):
        gen = torch.Generator().manual_seed(seed)
        s_mean = torch.randn(1, 12, 4, 4, generator=gen)
        s_scale = torch.rand(1, 12, 4, 4, generator=gen) + 0.1
        return s_mean, s_scale

    def test_full_pass_partitions_channels(self, charm):
        s_mean, s_scale = self.side(charm)
        y = torch.randn(1, 12, 4, 4)
        y_hat, params = charm(y, s_mean, s_scale, mode="eval")
        assert y_hat.shape == y.shape
        assert params.mu.shape == y.shape
        assert torch.all(params.sigma >= SIGMA_MIN)

    def test_slice_zero_ignores_later_slices(self, charm):
        s_mean, s_scale = self.side(charm)
        params0 = charm_predict_slice(charm, s_mean, s_scale, [], 0)
        params0_again = charm_predict_slice(charm, s_mean, s_scale, [], 0)
        assert torch.equal(params0.mu, params0_again.mu)

    def test_causality_under_perturbation(self, charm):
        gen = torch.Generator().manual_seed(5)
        s_mean, s_scale = self.side(charm, seed=5)
        slices = [torch.randn(1, c, 4, 4, generator=gen)
                  for c in charm.layout.channels_per_slice]

        def all_params(slice_list):
            out = []
            for i in range(charm.num_slices):
                mu, sigma = charm.predict_slice(s_mean, s_scale, slice_list[:i], i)
                out.append((mu, sigma))
            return out

        base = all_params(slices)
        for j in range(charm.num_slices):
            perturbed = [s.clone() for s in slices]
            perturbed[j] += 3.0
            got = all_params(perturbed)
            for i in range(charm.num_slices):
                same = torch.equal(base[i][0], got[i][0]) and \
                    torch.equal(base[i][1], got[i][1])
                if i <= j:
                    assert same, f"slice {i} params changed by perturbing slice {j}"

    def test_out_of_order_slices_rejected(self, charm):
        s_mean, s_scale = self.side(charm)
        with pytest.raises(ValueError):
            charm.predict_slice(s_mean, s_scale, [], 1)
        wrong_width = [torch.randn(1, 5, 4, 4)]
        with pytest.raises(ValueError):
            charm.predict_slice(s_mean, s_scale, wrong_width, 1)


class TestEntropyProfile:
    def test_constant_probability_channels(self):
        # build (y_hat, params) whose likelihoods are exactly 0.5 / 1.0-ish
        y_hat = torch.zeros(2, 1, 1, dtype=torch.float64)
        # sigma chosen so p(0 | 0, sigma) == 0.5: 2*Phi(0.5/sigma) - 1 = 0.5
        from scipy.stats import norm
        sigma_half = 0.5 / norm.ppf(0.75)
        params = GaussianParams(mu=torch.zeros(2, 1, 1, dtype=torch.float64),
                                sigma=torch.tensor([[[sigma_half]], [[0.11]]],
                                                   dtype=torch.float64))
        entropy_map, ranking = channel_entropy_profile(y_hat, params)
        assert entropy_map[0, 0, 0] == pytest.approx(1.0, abs=1e-9)
        assert ranking.mean_entropy[0] == pytest.approx(1.0, abs=1e-9)
        assert ranking.order[0] == 0  # higher-entropy channel ranks first

    def test_two_position_mean(self):
        # channel with p = {0.5, 0.25} -> mean entropy 1.5 bits
        p = torch.tensor([[[0.5, 0.25]]], dtype=torch.float64)
        e = rate_bits(p)
        assert e.mean().item() == pytest.approx(1.5)

    def test_map_nonnegative(self):
        torch.manual_seed(0)
        y_hat = torch.randn(6, 5, 5).round()
        params = GaussianParams(mu=torch.randn(6, 5, 5),
                                sigma=torch.rand(6, 5, 5) * 3 + SIGMA_MIN)
        entropy_map, _ = channel_entropy_profile(y_hat, params)
        assert np.all(entropy_map >= 0)

    def test_mean_matches_direct_average(self):
        torch.manual_seed(1)
        y_hat = torch.randn(8, 6, 7, dtype=torch.float64).round()
        params = GaussianParams(
            mu=torch.randn(8, 6, 7, dtype=torch.float64),
            sigma=torch.rand(8, 6, 7, dtype=torch.float64) * 2 + SIGMA_MIN)
        entropy_map, ranking = channel_entropy_profile(y_hat, params)
        direct = entropy_map.reshape(8, -1).mean(axis=1)
        assert np.max(np.abs(direct - ranking.mean_entropy)) < 1e-12


class TestTopK:
    def test_examples(self):
        assert rank_channels_topk(np.array([3.0, 1.0, 2.0]), 2).tolist() == [0, 2]
        assert rank_channels_topk(np.array([2.0, 2.0, 1.0]), 1).tolist() == [0]

    def test_full_sort(self):
        e = np.array([0.5, 3.0, 3.0, 1.0])
        assert rank_channels_topk(e, 4).tolist() == [1, 2, 3, 0]

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(99)
        for _ in range(1000):
            n = int(rng.integers(1, 24))
            values = rng.choice([0.0, 0.5, 1.0, 2.0, rng.random()], size=n)
            k = int(rng.integers(1, n + 1))
            oracle = [i for _, i in sorted(((-v, i) for i, v in enumerate(values)))][:k]
            assert rank_channels_topk(values, k).tolist() == oracle

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            rank_channels_topk(np.ones(3), 0)
        with pytest.raises(ValueError):
            rank_channels_topk(np.ones(3), 4)


class TestTrainEvalRateConsistency:
    def test_noise_rate_near_eval_rate(self, trained_student):
        from conftest import smooth_image
        from feds.networks import pad_image, image_to_tensor

        buf = pad_image(smooth_image(np.random.default_rng(31), 96, 96))
        x = image_to_tensor(buf)
        model = trained_student
        with torch.no_grad():
            out = model(x, mode="eval")
            eval_bits = float(rate_bits(out["p_y"]).sum() + rate_bits(out["p_z"]).sum())
            gen = torch.Generator().manual_seed(123)
            draws = []
            for _ in range(256):
                out = model(x, mode="train", generator=gen)
                draws.append(float(rate_bits(out["p_y"]).sum()
                                   + rate_bits(out["p_z"]).sum()))
        mean_noise = float(np.mean(draws))
        assert abs(mean_noise - eval_bits) / eval_bits <= 0.05
