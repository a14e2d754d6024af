import json

import numpy as np
import pytest

from dwp import cli
from dwp import experiments as ex
from dwp.errors import DivergenceError
from dwp.kernels import KernelDataset, load_kernels, save_checkpoint, save_kernels, vae_checkpoint
from dwp.vae import build_vae

TINY = {
    "target": {"n_train": 60, "n_test": 30},
    "source": {"alphabet": 1, "n_train": 60, "n_test": 30},
    "train_sizes": [40],
    "priors": ["standard-normal", "dwp"],
    "inits": ["xavier", "dwp"],
    "widths": [0.125],
    "seeds": [0],
    "epochs": 1,
    "batch_size": 20,
    "eval_every": 1,
    "prior": {"source_models": 1, "source_epochs": 1, "vae_epochs": {"7": 1, "5": 1}, "vae_max_kernels": 200},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def vae_file(tmp_path):
    path = tmp_path / "vae5x5.dwpc"
    save_checkpoint(vae_checkpoint(build_vae(5, rng=np.random.default_rng(0))), path)
    return path


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"epochz": 1}))
        assert cli.main(["classify-exp", "--config", str(bad)]) == 2
        assert "unknown keys" in capsys.readouterr().err

    def test_corrupt_kernel_file(self, tmp_path):
        path = tmp_path / "k.dwpk"
        path.write_bytes(b"DWPK\x01\x00")
        assert cli.main(["prune", "--kernels", str(path)]) == 2

    def test_missing_required_flag(self):
        assert cli.main(["sample-prior"]) == 2

    def test_divergence(self, config, monkeypatch):
        def boom(*args, **kwargs):
            raise DivergenceError("elbo", {"data_term": float("nan")})

        monkeypatch.setattr(ex, "run_classification", boom)  # the parser is built inside main
        assert cli.main(["classify-exp", "--config", str(config)]) == 3


class TestDryRun:
    @pytest.mark.parametrize("command,cells", [("classify-exp", 2), ("features-exp", 2), ("convergence-exp", 2),
                                               ("gap", 1), ("train-source", 1), ("vi-train", 1)])
    def test_prints_plan_without_outputs(self, command, cells, config, tmp_path, capsys):
        out = tmp_path / "out"
        assert cli.main([command, "--config", str(config), "--out", str(out), "--dry-run"]) == 0
        plan = json.loads(capsys.readouterr().out)
        assert plan["cells"] == cells
        assert not out.exists()

    def test_seed_override(self, config, capsys):
        cli.main(["classify-exp", "--config", str(config), "--seed", "42", "--dry-run"])
        assert json.loads(capsys.readouterr().out)["seed"] == 42


class TestCommands:
    def test_sample_and_embed(self, vae_file, tmp_path):
        assert cli.main(["sample-prior", "--vae", str(vae_file), "-n", "12", "--seed", "3", "--out", str(tmp_path)]) == 0
        samples = tmp_path / "prior_samples5x5.dwpk"
        assert load_kernels(samples).kernels.shape == (12, 5, 5)
        assert (tmp_path / "prior_samples5x5.png").exists()
        assert cli.main(["embed", "--vae", str(vae_file), "--kernels", str(samples), "--out", str(tmp_path)]) == 0
        assert len((tmp_path / "embeddings.csv").read_text().splitlines()) == 13
        assert (tmp_path / "embeddings.png").exists()

    def test_sample_is_deterministic(self, vae_file, tmp_path):
        for d in ("a", "b"):
            cli.main(["sample-prior", "--vae", str(vae_file), "-n", "5", "--seed", "1", "--out", str(tmp_path / d)])
        a = (tmp_path / "a" / "prior_samples5x5.dwpk").read_bytes()
        assert a == (tmp_path / "b" / "prior_samples5x5.dwpk").read_bytes()

    def test_kernel_pipeline(self, config, tmp_path):
        out = tmp_path / "src"
        assert cli.main(["train-source", "--config", str(config), "--out", str(out)]) == 0
        assert cli.main(["harvest", "--checkpoints", str(out / "source0.dwpc"), "--layer", "1", "--out", str(out)]) == 0
        harvested = load_kernels(out / "kernels5x5.dwpk")
        assert len(harvested) == 32 * 64
        assert cli.main(["prune", "--kernels", str(out / "kernels5x5.dwpk")]) == 0
        pruned = load_kernels(out / "kernels5x5_pruned.dwpk")
        assert pruned.meta["pruning"]["rule"] == "0.1 x median norm"
        small = out / "small.dwpk"
        save_kernels(KernelDataset(pruned.kernels[:300], pruned.meta), small)
        assert cli.main(["train-prior", "--config", str(config), "--kernels", str(small), "--out", str(out)]) == 0
        assert (out / "vae5x5.dwpc").exists()

    def test_classify_exp_writes_csv_and_plot(self, config, tmp_path):
        out = tmp_path / "run"
        assert cli.main(["classify-exp", "--config", str(config), "--out", str(out)]) == 0
        lines = (out / "classification.csv").read_text().splitlines()
        assert lines[0] == "train_size,prior,seed,test_acc" and len(lines) == 3
        assert (out / "classification.png").exists()
        first = (out / "classification.csv").read_bytes()
        assert cli.main(["classify-exp", "--config", str(config), "--out", str(out)]) == 0
        assert (out / "classification.csv").read_bytes() == first

    def test_vi_train_trace(self, config, tmp_path):
        out = tmp_path / "vi"
        assert cli.main(["vi-train", "--config", str(config), "--out", str(out)]) == 0
        header = (out / "trace.csv").read_text().splitlines()[0]
        assert header == "step,epoch,aux_elbo,data_term,kl_bound_term,train_acc,test_acc,lr"
        assert (out / "trace.png").exists()
