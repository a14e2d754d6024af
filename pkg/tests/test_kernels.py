import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwp.data import SynthSpec, synth_dataset
from dwp.errors import FormatError
from dwp.kernels import (KERNEL_DIMS_TAIL, KERNEL_HEADER, Checkpoint, KernelDataset, decode_checkpoint,
                         encode_checkpoint, harvest_kernels, kernel_norms, load_checkpoint, load_kernels,
                         meta_path, network_checkpoint, network_from_checkpoint, prune_small_norm,
                         save_checkpoint, save_kernels, train_source_model, vae_checkpoint, vae_from_checkpoint)
from dwp.layers import LayerSpec, NetworkSpec, build_network, mnist_spec
from dwp.vae import build_vae


def _tiny_spec():
    return mnist_spec(1 / 16)


@pytest.fixture(scope="module")
def glyphs():
    return synth_dataset(SynthSpec(n=200, alphabet=1), seed=0)


class TestSourceTraining:
    def test_zero_epochs_is_identity(self, glyphs):
        model = train_source_model(glyphs, l2=0.0, epochs=0, seed=3, spec=_tiny_spec())
        from dwp.rng import stream
        fresh = build_network(_tiny_spec(), rng=stream(3, "source", "init"))
        for (na, a), (nb, b) in zip(model.named_parameters(), fresh.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(a.data, b.data)

    def test_strong_l2_shrinks_kernels(self, glyphs):
        plain = train_source_model(glyphs, l2=0.0, epochs=2, seed=1, spec=_tiny_spec())
        heavy = train_source_model(glyphs, l2=10.0, epochs=2, seed=1, spec=_tiny_spec())
        for a, b in zip(plain.conv_layers(), heavy.conv_layers()):
            assert np.linalg.norm(b.kernels.data) < np.linalg.norm(a.kernels.data)

    def test_deterministic(self, glyphs):
        a = train_source_model(glyphs, epochs=1, seed=2, spec=_tiny_spec())
        b = train_source_model(glyphs, epochs=1, seed=2, spec=_tiny_spec())
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_negative_l2(self, glyphs):
        with pytest.raises(ValueError):
            train_source_model(glyphs, l2=-1.0, epochs=0)


class TestHarvest:
    def test_counts(self):
        model = build_network(mnist_spec(1.0))
        assert len(harvest_kernels([model], 0)) == 32
        assert len(harvest_kernels([model, model], 0)) == 64
        assert len(harvest_kernels([model], 1)) == 32 * 128

    def test_bit_exact_slices(self):
        model = build_network(mnist_spec(0.125), rng=np.random.default_rng(1))
        ds = harvest_kernels([model], 1)
        w = model.conv_layers()[1].kernels.data
        np.testing.assert_array_equal(ds.kernels[5], w[1, 1])  # 4 input channels: index 5 -> (1, 1)
        assert ds.meta["layer_index"] == 1
        np.testing.assert_array_equal(harvest_kernels([model], 1).kernels, ds.kernels)

    def test_size_mismatch(self):
        seven = build_network(mnist_spec(0.125))
        five = build_network(NetworkSpec((LayerSpec("conv", 4, 5), LayerSpec("flatten"), LayerSpec("linear", 10))))
        with pytest.raises(ValueError):
            harvest_kernels([seven, five], 0)
        with pytest.raises(ValueError):
            harvest_kernels([], 0)


class TestPruning:
    def test_equal_norms_keep_all(self):
        ds = KernelDataset(np.ones((10, 3, 3)))
        assert len(prune_small_norm(ds)) == 10

    def test_single_zero_kernel(self):
        k = np.random.default_rng(0).standard_normal((9, 3, 3))
        k[4] = 0.0
        out = prune_small_norm(KernelDataset(k))
        assert len(out) == 8
        assert not np.any(kernel_norms(out.kernels) == 0.0)
        assert out.meta["pruning"]["dropped"] == 1

    def test_mixture(self):
        rng = np.random.default_rng(1)
        k = rng.standard_normal((1000, 5, 5))
        k /= np.linalg.norm(k.reshape(1000, -1), axis=1)[:, None, None]
        small = rng.random(1000) < 0.1
        k[small] *= 0.01
        out = prune_small_norm(KernelDataset(k))
        assert len(k) - len(out) == small.sum()
        assert out.meta["pruning"]["threshold"] == pytest.approx(0.1, rel=1e-6)

    def test_all_pruned(self):
        with pytest.raises(ValueError):
            prune_small_norm(KernelDataset(np.ones((3, 2, 2))), threshold=5.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 60), st.integers(0, 10_000))
    def test_monotone_and_idempotent(self, n, seed):
        k = np.random.default_rng(seed).standard_normal((n, 3, 3)) * np.random.default_rng(seed + 1).random((n, 1, 1))
        once = prune_small_norm(KernelDataset(k))
        twice = prune_small_norm(once, threshold=once.meta["pruning"]["threshold"])
        assert len(once) <= n
        np.testing.assert_array_equal(once.kernels, twice.kernels)


class TestKernelFiles:
    def test_round_trip_and_size(self, tmp_path):
        ds = KernelDataset(np.random.default_rng(0).standard_normal((7, 5, 5)), {"seed": 3})
        path = tmp_path / "k.dwpk"
        save_kernels(ds, path)
        assert path.stat().st_size == 16 + 8 + 7 * 5 * 5 * 4
        assert KERNEL_HEADER.size + KERNEL_DIMS_TAIL.size == 24
        back = load_kernels(path)
        assert back.kernels.tobytes() == ds.kernels.tobytes()
        assert back.meta == {"seed": 3}
        assert meta_path(path).name == "k.meta.json"

    def test_truncated(self, tmp_path):
        path = tmp_path / "k.dwpk"
        save_kernels(KernelDataset(np.ones((4, 3, 3))), path)
        raw = path.read_bytes()
        for cut in (3, 20, len(raw) - 1):
            path.write_bytes(raw[:cut])
            with pytest.raises(FormatError):
                load_kernels(path)

    def test_bad_magic_and_version(self, tmp_path):
        path = tmp_path / "k.dwpk"
        save_kernels(KernelDataset(np.ones((1, 3, 3))), path)
        raw = bytearray(path.read_bytes())
        path.write_bytes(b"XXXX" + bytes(raw[4:]))
        with pytest.raises(FormatError, match="magic"):
            load_kernels(path)
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            load_kernels(path)

    def test_invalid_dataset(self):
        with pytest.raises(ValueError):
            KernelDataset(np.zeros((0, 3, 3)))
        with pytest.raises(ValueError):
            KernelDataset(np.full((2, 3, 3), np.nan))


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        ck = Checkpoint({"a": rng.standard_normal((2, 3)).astype(np.float32), "state/m": np.zeros(4, np.float32),
                         "scalar": np.float32(1.5) * np.ones((), np.float32)}, {"seed": 1, "note": "x"})
        save_checkpoint(ck, tmp_path / "c.dwpc")
        back = load_checkpoint(tmp_path / "c.dwpc")
        assert back.meta == ck.meta
        assert list(back.blobs) == list(ck.blobs)
        for name in ck.blobs:
            assert back.blobs[name].tobytes() == ck.blobs[name].tobytes()
            assert back.blobs[name].shape == ck.blobs[name].shape

    def test_truncation_is_structured(self):
        raw = encode_checkpoint(Checkpoint({"w": np.ones((3, 3), np.float32)}, {"k": 1}))
        for cut in range(0, len(raw), 7):
            with pytest.raises(FormatError):
                decode_checkpoint(raw[:cut])

    def test_network_and_vae(self):
        model = build_network(mnist_spec(0.125), "bayesian", rng=np.random.default_rng(2))
        back = network_from_checkpoint(decode_checkpoint(encode_checkpoint(network_checkpoint(model))))
        for (na, a), (nb, b) in zip(model.named_parameters(), back.named_parameters()):
            assert na == nb and a.data.tobytes() == b.data.tobytes()
        vae = build_vae(5, rng=np.random.default_rng(3))
        vae.shift, vae.scale = 0.01, 0.2
        v2 = vae_from_checkpoint(decode_checkpoint(encode_checkpoint(vae_checkpoint(vae))))
        assert (v2.shift, v2.scale, v2.z_dim) == (0.01, 0.2, 4)
        z = np.random.default_rng(4).standard_normal((3, 4)).astype(np.float32)
        np.testing.assert_array_equal(vae.decode(z)[0].data, v2.decode(z)[0].data)
        with pytest.raises(ValueError):
            vae_from_checkpoint(network_checkpoint(model))
