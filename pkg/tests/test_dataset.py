import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from tpsnet.dataset import (AugmentParams, DatasetError, ImageSample, LabelAccessError, augment, augment_array,
                            generate_toy_domain_pair, label_guard, load_domain_directory, read_image,
                            split_holdout, to_grayscale, write_domain_directory)

NO_AUG = AugmentParams(flip_p=0.0, pad=0, erase_p=0.0)


def _write_tree(root, counts):
    rng = np.random.default_rng(0)
    for name, n in counts.items():
        (root / name).mkdir(parents=True)
        for i in range(n):
            arr = (rng.random((8, 8, 3)) * 255).astype(np.uint8)
            Image.fromarray(arr).save(root / name / f"img_{i}.png")


class TestLoader:
    def test_counts_and_categories(self, tmp_path):
        _write_tree(tmp_path, {"cat": 3, "dog": 3})
        ds = load_domain_directory(tmp_path, 0)
        assert len(ds) == 6
        assert ds.num_categories == 2
        assert ds.category_names == ("cat", "dog")
        assert list(ds.labels()) == [0, 0, 0, 1, 1, 1]

    def test_empty_root(self, tmp_path):
        with pytest.raises(DatasetError, match="no category directories"):
            load_domain_directory(tmp_path, 0)

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_domain_directory(tmp_path / "nope", 0)

    def test_repeat_load_is_identical(self, tmp_path):
        _write_tree(tmp_path, {"b": 2, "a": 4})
        one, two = load_domain_directory(tmp_path, 1), load_domain_directory(tmp_path, 1)
        assert [s.sample_id for s in one] == [s.sample_id for s in two]
        assert one.pixel_array().tobytes() == two.pixel_array().tobytes()

    def test_empty_category_skipped(self, tmp_path):
        _write_tree(tmp_path, {"a": 2, "c": 1})
        (tmp_path / "b").mkdir()
        with pytest.warns(UserWarning, match="empty category"):
            ds = load_domain_directory(tmp_path, 0)
        assert ds.num_categories == 2
        assert list(ds.labels()) == [0, 0, 1]

    def test_undecodable_file_names_path(self, tmp_path):
        _write_tree(tmp_path, {"a": 1})
        (tmp_path / "a" / "broken.png").write_bytes(b"not an image")
        with pytest.raises(DatasetError, match="broken.png"):
            load_domain_directory(tmp_path, 0)

    def test_resize_on_load(self, tmp_path):
        _write_tree(tmp_path, {"a": 1})
        ds = load_domain_directory(tmp_path, 0, image_size=16)
        assert ds.image_shape == (16, 16, 3)

    def test_write_then_load_round_trip(self, tmp_path, small_pair):
        a, _ = small_pair
        write_domain_directory(a, tmp_path)
        back = load_domain_directory(tmp_path, 0)
        assert len(back) == len(a)
        assert np.array_equal(back.labels(), a.labels())
        assert np.max(np.abs(back.pixel_array() - a.pixel_array())) <= 0.5 / 255 + 1e-12

    def test_read_single_image(self, tmp_path):
        Image.fromarray(np.full((4, 4, 3), 255, np.uint8)).save(tmp_path / "w.png")
        assert np.all(read_image(tmp_path / "w.png") == 1.0)
        with pytest.raises(FileNotFoundError):
            read_image(tmp_path / "missing.png")


class TestSample:
    def test_rejects_out_of_range_pixels(self):
        with pytest.raises(DatasetError):
            ImageSample(np.full((4, 4, 3), 1.5), 0, "x")

    def test_pixels_read_only(self):
        s = ImageSample(np.zeros((4, 4, 3)), 0, "x", 0)
        with pytest.raises(ValueError):
            s.pixels[0, 0, 0] = 1.0

    def test_label_guard_blocks_label_reads(self):
        s = ImageSample(np.zeros((4, 4, 3)), 0, "x", 3)
        assert s.true_label == 3
        with label_guard():
            with pytest.raises(LabelAccessError):
                _ = s.true_label
        assert s.true_label == 3


class TestToyGenerator:
    def test_sizes(self, toy_pair):
        a, b = toy_pair
        assert len(a) == len(b) == 250
        assert a.num_categories == b.num_categories == 5
        assert a.image_shape == (32, 32, 3)
        assert (a.domain_id, b.domain_id) == (0, 1)

    def test_reproducible(self):
        one = generate_toy_domain_pair(3, 4, 16, 9)
        two = generate_toy_domain_pair(3, 4, 16, 9)
        for x, y in zip(one, two):
            assert x.pixel_array().tobytes() == y.pixel_array().tobytes()

    def test_seed_changes_output(self):
        one = generate_toy_domain_pair(3, 4, 16, 1)[0].pixel_array()
        two = generate_toy_domain_pair(3, 4, 16, 2)[0].pixel_array()
        assert not np.array_equal(one, two)

    def test_linear_probe_separates_domain0(self, toy_pair):
        """Categories are linearly separable in domain 0 raw pixels (held-out accuracy >= 0.9)."""
        a, _ = toy_pair
        x = a.pixel_array().reshape(len(a), -1)
        y = a.labels()
        rng = np.random.default_rng(0)
        perm = rng.permutation(len(a))
        tr, te = perm[:175], perm[175:]
        mu, sd = x[tr].mean(0), x[tr].std(0) + 1e-6
        z = (x - mu) / sd
        # Ridge regression onto one-hot targets is a plain least-squares linear classifier.
        onehot = np.eye(5)[y[tr]]
        w = np.linalg.solve(z[tr].T @ z[tr] + 10.0 * np.eye(z.shape[1]), z[tr].T @ onehot)
        acc = np.mean(np.argmax(z[te] @ w, 1) == y[te])
        assert acc >= 0.9

    def test_rejects_tiny_arguments(self):
        with pytest.raises(ValueError):
            generate_toy_domain_pair(1, 5, 32, 0)


class TestHoldout:
    def test_split_sizes_and_disjoint(self, toy_pair):
        a, _ = toy_pair
        train, hold = split_holdout(a, 0.2, 0)
        assert (len(train), len(hold)) == (200, 50)
        assert not {s.sample_id for s in train} & {s.sample_id for s in hold}

    def test_split_does_not_read_labels(self, toy_pair):
        with label_guard():
            split_holdout(toy_pair[0], 0.3, 1)


class TestAugment:
    def test_identity_when_disabled(self, rng):
        x = rng.random((8, 8, 3))
        assert np.array_equal(augment_array(x, rng, NO_AUG), x)

    def test_forced_flip(self, rng):
        x = np.zeros((6, 6, 3))
        x[:, 0] = 1.0
        out = augment_array(x, rng, AugmentParams(flip_p=1.0, pad=0, erase_p=0.0))
        assert np.all(out[:, -1] == 1.0)
        assert np.all(out[:, 0] == 0.0)

    def test_same_seed_same_output(self):
        x = np.random.default_rng(3).random((12, 12, 3))
        s = ImageSample(x, 0, "x")
        one = augment(s, np.random.default_rng(5)).pixels
        two = augment(s, np.random.default_rng(5)).pixels
        assert np.array_equal(one, two)

    @given(seed=st.integers(0, 2**32 - 1), size=st.sampled_from([8, 16, 32]))
    def test_stays_in_unit_range(self, seed, size):
        r = np.random.default_rng(seed)
        x = r.random((size, size, 3))
        out = augment_array(x, r, AugmentParams(flip_p=0.5, pad=4, erase_p=1.0))
        assert out.shape == x.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestGrayscale:
    def test_known_values(self):
        px = np.array([[[1.0, 1.0, 1.0], [1.0, 0.0, 0.0], [0.4, 0.4, 0.4]]])
        g = to_grayscale(px)
        assert g[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert g[0, 1] == pytest.approx(0.299, abs=1e-12)
        assert g[0, 2] == pytest.approx(0.4, abs=1e-12)

    @given(st.floats(0.0, 1.0))
    def test_gray_input_fixed(self, v):
        assert to_grayscale(np.full((1, 1, 3), v))[0, 0] == pytest.approx(v, abs=1e-12)
