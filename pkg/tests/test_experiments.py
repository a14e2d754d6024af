import csv
import json

import numpy as np
import pytest

from dwp import experiments as ex
from dwp.errors import ConfigError
from dwp.kernels import KernelDataset, harvest_kernels
from dwp.layers import build_network, mnist_spec
from dwp.vae import build_vae


def tiny_config(**overrides) -> ex.ExperimentConfig:
    d = {
        "target": {"n_train": 60, "n_test": 30},
        "source": {"alphabet": 1, "n_train": 60, "n_test": 30},
        "train_sizes": [40],
        "priors": ["standard-normal", "log-uniform", "dwp"],
        "widths": [0.125],
        "seeds": [0, 1],
        "epochs": 1,
        "batch_size": 20,
        "eval_every": 1,
    }
    d.update(overrides)
    return ex.config_from_dict(d)


@pytest.fixture(scope="module")
def artifacts():
    """Untrained VAEs and random kernels stand in for a built prior."""
    rng = np.random.default_rng(0)
    return ex.PriorArtifacts(
        kernels={7: KernelDataset(0.1 * rng.standard_normal((64, 7, 7))),
                 5: KernelDataset(0.1 * rng.standard_normal((600, 5, 5)))},
        vaes={7: build_vae(7, rng=rng), 5: build_vae(5, rng=rng)},
    )


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            ex.config_from_dict({"epochz": 3})
        with pytest.raises(ConfigError, match="unknown"):
            ex.config_from_dict({"prior": {"vae_epoch": 3}})

    @pytest.mark.parametrize("bad", [
        {"seeds": []}, {"priors": ["cauchy"]}, {"inits": ["zeros"]}, {"experiment": "cifar"},
        {"eval_mode": "median"}, {"target": {"kind": "idx", "train_images": "/nope"}},
        {"prior": {"vaes": {"7": "/no/such.dwpc"}}}, {"prior": {"vae_epochs": {"7": 0, "5": 1}}},
        {"widths": [0.0]}, {"batch_size": 0},
    ])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            ex.config_from_dict(bad)

    def test_load_config(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"epochs": 3, "seeds": [7]}))
        cfg = ex.load_config(path)
        assert cfg.epochs == 3 and cfg.seeds == [7]
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            ex.load_config(path)
        with pytest.raises(ConfigError):
            ex.load_config(tmp_path / "missing.json")

    def test_fingerprint(self):
        a, b = ex.ExperimentConfig(), ex.ExperimentConfig(epochs=99)
        assert a.fingerprint("prior", "source") == b.fingerprint("prior", "source")
        assert a.fingerprint() != b.fingerprint()

    def test_plan_sizes(self):
        cfg = tiny_config()
        assert len(ex.plan(cfg)) == 1 * 3 * 2
        cfg.experiment = "convergence"
        cfg.vae_variant = True
        assert len(ex.plan(cfg)) == 2 * 3 * 2


class TestInitWeights:
    def test_xavier_bounds(self):
        model = build_network(mnist_spec(0.25))
        ex.init_weights(model, "xavier", np.random.default_rng(0))
        for conv in model.conv_layers():
            o, i, kh, kw = conv.kernels.shape
            a = np.sqrt(6.0 / (i * kh * kw + o * kh * kw))
            assert np.abs(conv.kernels.data).max() <= a

    def test_filters_exact_size_is_permutation(self):
        model = build_network(mnist_spec(0.125))
        ref = build_network(mnist_spec(0.125), rng=np.random.default_rng(5))
        kernels = {7: harvest_kernels([ref], 0), 5: harvest_kernels([ref], 1)}
        ex.init_weights(model, "filters", np.random.default_rng(1), kernels=kernels)
        for conv, k in zip(model.conv_layers(), (7, 5)):
            got = conv.kernels.data.reshape(-1, k * k)
            want = kernels[k].kernels.reshape(-1, k * k)
            assert sorted(map(tuple, got)) == sorted(map(tuple, want))

    def test_filters_with_replacement_when_small(self):
        model = build_network(mnist_spec(0.125))
        small = {7: KernelDataset(np.ones((2, 7, 7))), 5: KernelDataset(np.ones((3, 5, 5)))}
        ex.init_weights(model, "filters", np.random.default_rng(0), kernels=small)
        assert np.all(model.conv_layers()[1].kernels.data == 1.0)

    def test_dwp_sampler_statistics(self, artifacts):
        vaes = artifacts.vaes
        draws = []
        for seed in range(2):
            model = build_network(mnist_spec(1.0))
            ex.init_weights(model, "dwp", np.random.default_rng(seed), vaes=vaes)
            draws.append(model.conv_layers()[1].kernels.data.reshape(-1, 5, 5)[:1000])
        assert not np.array_equal(draws[0], draws[1])
        v0, v1 = draws[0].var(0), draws[1].var(0)
        assert np.all(np.abs(v0 - v1) <= 0.2 * np.maximum(v0, v1))

    def test_missing_source(self):
        model = build_network(mnist_spec(0.125))
        with pytest.raises(ConfigError):
            ex.init_weights(model, "filters", np.random.default_rng(0))
        with pytest.raises(ConfigError):
            ex.init_weights(model, "dwp", np.random.default_rng(0), vaes={7: build_vae(7)})


class TestDrivers:
    def test_classification_rows_and_determinism(self, tmp_path, artifacts):
        cfg = tiny_config()
        a = ex.run_classification(cfg, out=tmp_path / "a", artifacts=artifacts)
        b = ex.run_classification(cfg, out=tmp_path / "b", artifacts=artifacts)
        assert a.read_bytes() == b.read_bytes()
        rows = _rows(a)
        assert rows[0] == ["train_size", "prior", "seed", "test_acc"]
        assert len(rows) - 1 == len(cfg.train_sizes) * len(cfg.priors) * len(cfg.seeds)

    def test_classification_parallel_matches_serial(self, tmp_path, artifacts):
        cfg = tiny_config(priors=["standard-normal"])
        serial = ex.run_classification(cfg, out=tmp_path / "s", artifacts=artifacts)
        cfg.workers = 2
        parallel = ex.run_classification(cfg, out=tmp_path / "p", artifacts=artifacts)
        assert serial.read_bytes() == parallel.read_bytes()

    def test_features(self, tmp_path, artifacts):
        cfg = tiny_config(experiment="features", widths=[0.125, 0.25])
        a = ex.run_random_features(cfg, out=tmp_path / "a", artifacts=artifacts)
        b = ex.run_random_features(cfg, out=tmp_path / "b", artifacts=artifacts)
        assert a.read_bytes() == b.read_bytes()
        rows = _rows(a)
        assert rows[0] == ["k", "init", "seed", "test_acc"]
        assert len(rows) - 1 == 2 * 3 * 2

    def test_convergence(self, tmp_path, artifacts):
        cfg = tiny_config(experiment="convergence", vae_variant=True, epochs=2, eval_every=1)
        paths = ex.run_convergence(cfg, out=tmp_path / "a", artifacts=artifacts)
        again = ex.run_convergence(cfg, out=tmp_path / "b", artifacts=artifacts)
        assert [p.read_bytes() for p in paths] == [p.read_bytes() for p in again]
        steps = 2 * 2  # 40 examples, batch 20, 2 epochs
        for path in paths:
            rows = _rows(path)
            assert rows[0] == ["step", "init", "seed", "metric"]
            assert len(rows) - 1 == (steps + 1) * 3 * 2

    def test_steps_to_threshold(self):
        assert ex.steps_to_threshold([(10, 0.5), (0, 0.1), (20, 0.9)], 0.8) == 20
        assert ex.steps_to_threshold([(0, 0.1)], 0.8) is None

    def test_gap(self, tmp_path, artifacts):
        cfg = tiny_config(experiment="gap", gap_k=3, gap_n_outer=2)
        path = ex.run_gap(cfg, out=tmp_path, artifacts=artifacts)
        doc = json.loads(path.read_text())
        assert {"aux_elbo", "iwae_elbo", "gap_lower_bound", "aux_elbo_prior_reverse"} <= set(doc)

    def test_exports(self, tmp_path, artifacts):
        from dwp.kernels import load_kernels

        vae = artifacts.vaes[5]
        path = ex.export_prior_samples(vae, 10, tmp_path / "s.dwpk", seed=1)
        assert load_kernels(path).kernels.shape == (10, 5, 5)
        assert load_kernels(tmp_path / "s_means.dwpk").kernels.shape == (10, 5, 5)
        emb = ex.export_embeddings(vae, artifacts.kernels[5].kernels[:7], tmp_path / "e.csv")
        rows = _rows(emb)
        assert rows[0] == ["idx", "z0", "z1", "z2", "z3"] and len(rows) == 8


class TestPriorArtifacts:
    def test_build_and_cache(self, tmp_path):
        cfg = tiny_config(prior={"source_models": 2, "source_epochs": 1, "vae_epochs": {"7": 1, "5": 1},
                                 "vae_max_kernels": 200})
        a = ex.build_prior_artifacts(cfg, 0, tmp_path)
        assert len(a.kernels[7]) <= 2 * 32 and a.kernels[5].meta["pruning"]["rule"] == "0.1 x median norm"
        assert a.vaes[5].scale != 1.0  # standardization is on by default
        b = ex.build_prior_artifacts(cfg, 0, tmp_path)
        for k in (5, 7):
            np.testing.assert_array_equal(a.kernels[k].kernels, b.kernels[k].kernels)
            for (_, p), (_, q) in zip(a.vaes[k].named_parameters(), b.vaes[k].named_parameters()):
                np.testing.assert_array_equal(p.data, q.data)

    def test_make_prior(self, artifacts):
        assert ex.make_prior("standard-normal", None).kind == "standard-normal"
        assert ex.make_prior("dwp", artifacts).kind == "dwp"
        with pytest.raises(ConfigError):
            ex.make_prior("dwp", None)
