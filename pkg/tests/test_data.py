import gzip

import numpy as np
import pytest

from dwp.data import LabeledDataset, SynthSpec, load_idx, make_alphabet, synth_dataset, synth_splits, write_idx
from dwp.errors import FormatError


@pytest.fixture
def idx_pair(tmp_path):
    images = np.array([[[0, 255], [128, 1]], [[7, 8], [9, 10]]], dtype=np.uint8)
    labels = np.array([3, 9], dtype=np.uint8)
    img, lab = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(img, lab, images, labels)
    return img, lab, images, labels


class TestIdx:
    def test_fixture_values(self, idx_pair):
        img, lab, images, labels = idx_pair
        # hand-built header: magic 0x803, N=2, rows=2, cols=2
        assert img.read_bytes()[:16] == bytes.fromhex("00000803" "00000002" "00000002" "00000002")
        ds = load_idx(img, lab)
        assert ds.images.shape == (2, 1, 2, 2)
        expected = np.array([[0, 255], [128, 1]], dtype=np.float32) / np.float32(255)
        np.testing.assert_array_equal(ds.images[0, 0], expected)
        np.testing.assert_array_equal(ds.labels, [3, 9])

    def test_gzip(self, idx_pair, tmp_path):
        img, lab, _, _ = idx_pair
        gz = tmp_path / "img.idx.gz"
        gz.write_bytes(gzip.compress(img.read_bytes()))
        np.testing.assert_array_equal(load_idx(gz, lab).images, load_idx(img, lab).images)

    def test_count_mismatch(self, tmp_path):
        img, lab = tmp_path / "i", tmp_path / "l"
        write_idx(img, lab, np.zeros((3, 2, 2)), np.zeros(2))
        with pytest.raises(FormatError):
            load_idx(img, lab)

    def test_bad_magic_and_truncation(self, idx_pair):
        img, lab, _, _ = idx_pair
        with pytest.raises(FormatError, match="magic"):
            load_idx(lab, img)
        img.write_bytes(img.read_bytes()[:-1])
        with pytest.raises(FormatError, match="truncated"):
            load_idx(img, lab)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_idx(tmp_path / "nope", tmp_path / "nope2")

    def test_data_dir_fallback(self, idx_pair, monkeypatch):
        img, lab, _, _ = idx_pair
        monkeypatch.setenv("DWP_DATA_DIR", str(img.parent))
        assert len(load_idx("img.idx", "lab.idx")) == 2


class TestLabeledDataset:
    def test_validation(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.full((2, 1, 3, 3), 1.5), np.zeros(2))
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 1, 3, 3)), np.zeros(3))
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 1, 3, 3)), np.array([0, 10]))

    def test_balanced_subset(self):
        ds = LabeledDataset(np.zeros((100, 1, 2, 2)), np.arange(100) % 10)
        sub = ds.balanced_subset(35, np.random.default_rng(0))
        counts = np.bincount(sub.labels, minlength=10)
        assert counts.sum() == 35 and counts.max() - counts.min() <= 1
        with pytest.raises(ValueError):
            ds.balanced_subset(101, np.random.default_rng(0))


class TestSynthetic:
    def test_deterministic(self):
        spec = SynthSpec(n=50, alphabet=2)
        a, b = synth_dataset(spec, 4), synth_dataset(spec, 4)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert not np.array_equal(a.images, synth_dataset(spec, 5).images)

    def test_uniform_classes(self):
        ds = synth_dataset(SynthSpec(n=2000, alphabet=1), 0)
        freq = np.bincount(ds.labels, minlength=10) / 2000
        assert np.abs(freq - 0.1).max() <= 0.02

    def test_range_and_shape(self):
        ds = synth_dataset(SynthSpec(n=20, alphabet=1, size=20), 0)
        assert ds.images.shape == (20, 1, 20, 20)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_alphabets_differ(self):
        a, b = make_alphabet(SynthSpec(alphabet=1)), make_alphabet(SynthSpec(alphabet=2))
        assert any(x.shape != y.shape or not np.allclose(x, y) for x, y in zip(a, b))

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            synth_dataset(SynthSpec(n=5, classes=1), 0)

    @pytest.mark.slow
    def test_calibration(self):
        from dwp.kernels import TrainConfig, evaluate_accuracy, train_deterministic
        from dwp.layers import build_network, mnist_spec

        train, test = synth_splits(2, 5000, 2000, seed=0)
        model = build_network(mnist_spec(0.25), rng=np.random.default_rng(0))
        train_deterministic(train, model, TrainConfig(epochs=12, seed=0))
        assert evaluate_accuracy(model, test) >= 0.90
