import numpy as np
import pytest

from dwp.autodiff import Tensor, finite_diff_check
from dwp.data import LabeledDataset
from dwp.errors import DivergenceError
from dwp.kernels import TrainConfig, train_deterministic
from dwp.layers import BayesConv2d, build_network, copy_kernels, entropy_q, mnist_spec
from dwp.priors import Dwp, StandardNormal, kl_q_standard_normal
from dwp.vae import build_vae
from dwp import vi

LOG_2PI = np.log(2 * np.pi)


class ConstantDecoderVae:
    """A kernel 'VAE' whose decoder ignores z: ``p(w | z) = N(mu0, exp(lv0))``."""

    def __init__(self, kernel_size, z_dim=2, mu0=0.0, lv0=0.0):
        self.kernel_size, self.z_dim = kernel_size, z_dim
        self.mu0, self.lv0 = mu0, lv0
        self.shift, self.scale = 0.0, 1.0

    def freeze(self):
        return self

    def decode(self, z):
        shape = (z.shape[0], self.kernel_size, self.kernel_size)
        return Tensor(np.full(shape, self.mu0)), Tensor(np.full(shape, self.lv0))


def _closed_form_neg_kl(theta, log_var, mu0, lv0):
    var = np.exp(log_var)
    return -0.5 * np.sum((var + (theta - mu0) ** 2) / np.exp(lv0) - 1.0 - log_var + lv0)


def _tiny_net(dtype=np.float64, seed=0):
    # 20x20 input: conv7 -> 14, pool -> 7, conv5 -> 3, pool -> 1
    return build_network(mnist_spec(1 / 16, input_shape=(1, 20, 20)), "bayesian",
                         rng=np.random.default_rng(seed), dtype=dtype)


def _tiny_data(n=20, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.random((n, 1, 20, 20)), np.arange(n) % 10)


class TestAuxiliaryBound:
    def test_degenerate_decoder_matches_closed_form(self):
        rng = np.random.default_rng(0)
        layer = BayesConv2d(2, 3, 5, rng=rng, dtype=np.float64)
        layer.log_var.data[:] = rng.uniform(-3, 0, layer.log_var.shape)
        vae = ConstantDecoderVae(5, mu0=0.1, lv0=np.log(0.5))
        kl_r, recon = vi.layer_bound_terms(layer.theta, layer.log_var, vae, vi.PriorReverse(2), rng, 10_000)
        draws = recon.data - kl_r.data + entropy_q(layer.log_var).item()
        expected = _closed_form_neg_kl(layer.theta.data, layer.log_var.data, 0.1, np.log(0.5))
        se = draws.std(ddof=1) / np.sqrt(len(draws))
        assert np.all(kl_r.data == 0.0)
        assert abs(draws.mean() - expected) < 3 * se

    def test_standard_normal_decoder_matches_standard_normal_prior(self):
        rng = np.random.default_rng(1)
        layer = BayesConv2d(1, 2, 7, rng=rng, dtype=np.float64)
        kl_r, recon = vi.layer_bound_terms(layer.theta, layer.log_var, ConstantDecoderVae(7), vi.PriorReverse(2),
                                           rng, 10_000)
        draws = recon.data - kl_r.data + entropy_q(layer.log_var).item()
        kl = kl_q_standard_normal(layer.theta, layer.log_var).item()
        assert abs(draws.mean() + kl) < 3 * draws.std(ddof=1) / 100

    def test_reverse_models_start_at_encoder(self):
        vae = build_vae(5)
        prior = Dwp({7: build_vae(7), 5: vae})
        net = build_network(mnist_spec(0.125), "bayesian")
        revs = vi.make_reverse_models(net, prior)
        assert len(revs) == 2
        w = np.random.default_rng(2).standard_normal((6, 5, 5)).astype(np.float32)
        mu_a, lv_a = revs[1](Tensor(w))
        mu_b, lv_b = vae.encode(w)
        np.testing.assert_allclose(mu_a.data, mu_b.data, rtol=1e-6)
        np.testing.assert_allclose(lv_a.data, np.clip(lv_b.data, -7, 7), rtol=1e-6)
        assert all(p.requires_grad for p in revs[1].parameters())
        assert revs[1].encoder is not vae.encoder

    def test_aux_elbo_gradient(self):
        model = _tiny_net()
        prior = Dwp({7: build_vae(7, dtype=np.float64), 5: build_vae(5, dtype=np.float64)})
        revs = vi.make_reverse_models(model, prior)
        data = _tiny_data(4)

        def fn():
            est = vi.aux_elbo_step(data.images, data.labels, model, prior, revs, np.random.default_rng(3), 40)
            return est.total

        params = model.trainable_parameters() + revs[0].trainable_parameters()
        assert finite_diff_check(fn, params, max_coords=12, rng=np.random.default_rng(4)) <= 1e-4

    def test_divergence_carries_terms(self):
        model = _tiny_net()
        model.bayes_layers()[0].theta.data[:] = np.nan
        prior = Dwp({7: ConstantDecoderVae(7), 5: ConstantDecoderVae(5)})
        revs = vi.prior_reverse_models(model, prior)
        data = _tiny_data(4)
        with pytest.raises(DivergenceError) as info:
            vi.aux_elbo_step(data.images, data.labels, model, prior, revs, np.random.default_rng(0), 4)
        assert "recon" in info.value.terms


class TestDataTerm:
    def test_batch_rescaling(self):
        model = _tiny_net()
        for layer in model.bayes_layers():
            layer.log_var.data[:] = -20.0
        data = _tiny_data(20)
        full, _ = vi.data_term(model, data.images, data.labels, np.random.default_rng(0), 20)
        parts = 0.0
        for idx in np.array_split(np.random.default_rng(1).permutation(20), 4):
            d, _ = vi.data_term(model, data.images[idx], data.labels[idx], np.random.default_rng(0), 20)
            parts += d.item() * len(idx) / 20
        assert parts == pytest.approx(full.item(), rel=1e-3)

    def test_single_batch_is_unscaled_sum(self):
        model = _tiny_net()
        data = _tiny_data(5)
        d, logits = vi.data_term(model, data.images, data.labels, np.random.default_rng(0), 5, sample="mean")
        lp = logits.data - np.log(np.exp(logits.data).sum(1, keepdims=True))
        assert d.item() == pytest.approx(lp[np.arange(5), data.labels].sum())


class TestIwae:
    @pytest.fixture(scope="class")
    def setup(self):
        vae = build_vae(5, dtype=np.float64).freeze()
        vae.scale = 0.05
        rev = vi.ReverseModel(build_vae(5, dtype=np.float64, rng=np.random.default_rng(9)).encoder, 0.0, 0.05)
        kernels = 0.05 * np.random.default_rng(5).standard_normal((8, 5, 5))
        return vae, rev, kernels

    def test_k1_equals_aux(self, setup):
        vae, rev, kernels = setup
        rng = np.random.default_rng(6)
        aux = np.array([vi.aux_prior_term(kernels, vae, rev, rng) for _ in range(400)])
        iw = np.array([vi.iwae_prior_term(kernels, vae, rev, 1, rng) for _ in range(400)])
        se = np.sqrt(aux.var(ddof=1) / len(aux) + iw.var(ddof=1) / len(iw))
        assert abs(aux.mean() - iw.mean()) < 3 * se

    def test_monotone_in_k(self, setup):
        vae, rev, kernels = setup
        rng = np.random.default_rng(7)
        stats = []
        for k in (1, 10, 100):
            d = np.array([vi.iwae_prior_term(kernels, vae, rev, k, rng) for _ in range(100)])
            stats.append((d.mean(), d.std(ddof=1) / 10))
        for (m0, s0), (m1, s1) in zip(stats, stats[1:]):
            assert m1 >= m0 - 2 * np.hypot(s0, s1)

    def test_chunking_does_not_change_value(self, setup):
        vae, rev, kernels = setup
        a = vi.iwae_prior_term(kernels, vae, rev, 30, np.random.default_rng(8))
        b = vi.iwae_prior_term(kernels, vae, rev, 30, np.random.default_rng(8), chunk=10 ** 6)
        assert a == pytest.approx(b, rel=1e-12)

    def test_bad_k(self, setup):
        vae, rev, kernels = setup
        with pytest.raises(ValueError):
            vi.iwae_prior_term(kernels, vae, rev, 0, np.random.default_rng(0))

    def test_gap_report_fields(self):
        model = _tiny_net(np.float32)
        prior = Dwp({7: build_vae(7), 5: build_vae(5)})
        report = vi.gap_report(model, prior, vi.make_reverse_models(model, prior), k=5, n_outer=3, seed=1)
        d = report.to_dict()
        assert d["k"] == 5 and d["aux_elbo"]["n"] == 3
        assert report.gap_lower_bound == pytest.approx(d["iwae_elbo"]["mean"] - d["aux_elbo"]["mean"])
        again = vi.gap_report(model, prior, vi.make_reverse_models(model, prior), k=5, n_outer=3, seed=1)
        assert again.to_dict() == d


class TestPrediction:
    def test_probabilities(self):
        model = _tiny_net(np.float32)
        x = _tiny_data(7).images
        for mode in ("mean", "mc:3"):
            p = vi.predict(model, x, mode, np.random.default_rng(0))
            assert p.shape == (7, 10)
            np.testing.assert_allclose(p.sum(1), 1.0, rtol=1e-5)

    def test_mc_deterministic_given_rng(self):
        model = _tiny_net(np.float32)
        x = _tiny_data(7).images
        a = vi.predict(model, x, "mc:4", np.random.default_rng(1))
        b = vi.predict(model, x, "mc:4", np.random.default_rng(1))
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("mode", ["median", "mc:x", ""])
    def test_bad_mode(self, mode):
        with pytest.raises(ValueError):
            vi.parse_eval_mode(mode)


class TestTraining:
    def test_zero_kl_weight_tracks_deterministic(self):
        data = _tiny_data(40, seed=3)
        det = build_network(mnist_spec(1 / 16, input_shape=(1, 20, 20)), rng=np.random.default_rng(4),
                            dtype=np.float64)
        bayes = _tiny_net()
        copy_kernels(det, bayes)
        for a, b in zip(det.head_parameters(), bayes.head_parameters()):
            b.data[...] = a.data
        for layer in bayes.bayes_layers():
            layer.log_var.data[:] = -20.0
        d = train_deterministic(data, det, TrainConfig(epochs=3, batch_size=10, seed=5))
        v = vi.train_vi(data, bayes, StandardNormal(), vi.ViConfig(epochs=3, batch_size=10, seed=5, kl_weight=0.0))
        np.testing.assert_allclose(v.step_losses, d.step_losses, atol=1e-3)

    def test_deterministic_and_traced(self):
        data = _tiny_data(30, seed=4)
        prior = Dwp({7: build_vae(7), 5: build_vae(5)})
        runs = []
        for _ in range(2):
            model = _tiny_net(np.float32, seed=2)
            runs.append(vi.train_vi(data, model, prior, vi.ViConfig(epochs=2, batch_size=10, seed=3), test=data))
        assert runs[0].step_losses == runs[1].step_losses
        assert len(runs[0].trace) == 2
        assert set(vi.TRACE_COLUMNS) == set(runs[0].trace[0])
        assert runs[0].trace[-1]["step"] == 6

    def test_log_var_stays_clamped(self):
        data = _tiny_data(20)
        model = _tiny_net(np.float32)
        for layer in model.bayes_layers():
            layer.log_var.data[:] = 4.999
        vi.train_vi(data, model, StandardNormal(), vi.ViConfig(epochs=2, batch_size=10, lr=0.5))
        for layer in model.bayes_layers():
            assert layer.log_var.data.max() <= 5.0 and layer.log_var.data.min() >= -20.0
