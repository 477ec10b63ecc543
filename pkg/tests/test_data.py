import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frwreid.data import (
    AugmentConfig,
    ReidDataset,
    augment,
    desk_benchmark,
    export_directory,
    generate_synthetic,
    hflip,
    load_directory,
    preprocess,
    read_ppm,
    resize_bilinear,
    split_identities,
    translate,
    write_ppm,
)
from frwreid.errors import ContractError, DatasetError
from frwreid.evaluation import Protocol, evaluate_embeddings


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(4, cams=2, shots_per_cam=2, size=(16, 8), seed=3)


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(5, 2, 3, seed=11)
        b = generate_synthetic(5, 2, 3, seed=11)
        assert a.images.tobytes() == b.images.tobytes()
        np.testing.assert_array_equal(a.ids, b.ids)
        assert a.images.tobytes() != generate_synthetic(5, 2, 3, seed=12).images.tobytes()

    def test_record_count_and_labels(self):
        ds = generate_synthetic(6, cams=3, shots_per_cam=2)
        assert len(ds) == 6 * 3 * 2
        assert ds.num_ids == 6 and ds.num_cams == 3
        assert ds.images.shape[1:] == (3, 32, 16)
        assert ds.images.min() >= 0 and ds.images.max() <= 1

    @settings(max_examples=10, deadline=None)
    @given(st.integers(2, 5), st.integers(2, 3), st.integers(1, 3), st.integers(0, 1000))
    def test_always_valid(self, ids, cams, shots, seed):
        generate_synthetic(ids, cams, shots, size=(16, 8), seed=seed).validate()

    @pytest.mark.parametrize("ids,cams", [(1, 2), (5, 1)])
    def test_degenerate(self, ids, cams):
        with pytest.raises(ContractError):
            generate_synthetic(ids, cams)

    def test_identities_differ_more_than_shots(self):
        ds = generate_synthetic(10, 2, 4, seed=0)
        flat = ds.images.reshape(len(ds), -1)
        same, diff = [], []
        for i in range(len(ds)):
            for j in range(i + 1, len(ds)):
                d = np.linalg.norm(flat[i] - flat[j])
                (same if ds.ids[i] == ds.ids[j] else diff).append(d)
        assert np.mean(same) < np.mean(diff)

    def test_raw_pixels_not_sufficient(self):
        bench = desk_benchmark()
        curve = evaluate_embeddings(bench.test.images.reshape(len(bench.test), -1), bench.test,
                                    Protocol(num_splits=10, max_rank=10))
        assert curve.rank(1) <= 0.60


class TestAugment:
    def test_default_multiplies_by_five(self, small):
        out = augment(small, AugmentConfig(), seed=0)
        assert len(out) == 5 * len(small)
        np.testing.assert_array_equal(out.ids, np.repeat(small.ids, 5))
        np.testing.assert_array_equal(out.cams, np.repeat(small.cams, 5))

    def test_layout_original_then_flip(self, small):
        out = augment(small, AugmentConfig(), seed=0)
        np.testing.assert_array_equal(out.images[0], small.images[0])
        np.testing.assert_array_equal(out.images[4], hflip(small.images[0]))

    def test_zero_shift_copies(self, small):
        out = augment(small, AugmentConfig(max_shift=(0.0, 0.0), horizontal_flip=False), seed=0)
        assert len(out) == 4 * len(small)
        for k in range(len(small)):
            for j in range(4):
                np.testing.assert_array_equal(out.images[4 * k + j], small.images[k])

    def test_deterministic(self, small):
        a = augment(small, seed=5)
        b = augment(small, seed=5)
        assert a.images.tobytes() == b.images.tobytes()

    @pytest.mark.parametrize("shift", [(0.5, 0.0), (-0.1, 0.0)])
    def test_shift_bounds(self, shift):
        with pytest.raises(ContractError):
            AugmentConfig(max_shift=shift)

    def test_flip_involution(self, rng):
        img = rng.random((3, 7, 5)).astype(np.float32)
        np.testing.assert_array_equal(hflip(hflip(img)), img)

    def test_translate_zero_fills(self):
        img = np.ones((1, 4, 4), dtype=np.float32)
        out = translate(img, 1, -2)
        assert out[0, 0].sum() == 0 and out[0, :, 2:].sum() == 0
        assert out[0, 1:, :2].sum() == 6

    @settings(max_examples=30, deadline=None)
    @given(st.integers(-3, 3), st.integers(-3, 3))
    def test_translate_inverse_on_interior(self, dy, dx):
        img = np.arange(1, 1 + 3 * 10 * 8, dtype=np.float32).reshape(3, 10, 8)
        back = translate(translate(img, dy, dx), -dy, -dx)
        inner = (slice(None), slice(3, 7), slice(3, 5))
        np.testing.assert_array_equal(back[inner], img[inner])


class TestPreprocess:
    def test_identity_resize(self, rng):
        images = rng.random((2, 3, 9, 5)).astype(np.float32)
        np.testing.assert_allclose(resize_bilinear(images, (9, 5)), images, atol=1e-6)

    def test_resize_shape_and_constant(self):
        images = np.full((1, 3, 16, 8), 0.25, dtype=np.float32)
        out = resize_bilinear(images, (32, 12))
        assert out.shape == (1, 3, 32, 12)
        np.testing.assert_allclose(out, 0.25, atol=1e-7)

    def test_mean_subtracted(self, small):
        out = preprocess(small)
        assert np.all(np.abs(out.images.astype(np.float64).mean(axis=(0, 2, 3))) < 1e-5)
        np.testing.assert_allclose(out.mean, small.images.astype(np.float64).mean(axis=(0, 2, 3)))

    def test_test_uses_training_mean(self, small):
        train, test = split_identities(small, 2, seed=0)
        ptrain = preprocess(train)
        ptest = preprocess(test, mean=ptrain.mean)
        np.testing.assert_array_equal(ptest.mean, ptrain.mean)
        np.testing.assert_allclose(ptest.images, test.images - ptrain.mean[None, :, None, None].astype(np.float32),
                                   atol=1e-6)
        assert np.abs(ptest.images.mean(axis=(0, 2, 3))).max() > 1e-4

    def test_idempotent(self, small):
        once = preprocess(small)
        twice = preprocess(once)
        np.testing.assert_allclose(twice.images, once.images, atol=1e-5)

    def test_empty(self):
        with pytest.raises(DatasetError):
            preprocess(ReidDataset(np.zeros((0, 3, 4, 4)), [], []))

    def test_benchmark_splits(self):
        bench = desk_benchmark(num_train_ids=4, num_test_ids=3, shots_per_cam=2, size=(16, 8))
        assert bench.train.num_ids == 4 and bench.test.num_ids == 3
        assert len(bench.train) == 4 * 2 * 2 and len(bench.holdout) == 4 * 2
        np.testing.assert_array_equal(bench.test.mean, bench.train.mean)


class TestRasterIO:
    def test_ppm_round_trip(self, tmp_path, small):
        path = tmp_path / "a.ppm"
        write_ppm(path, small.images[0])
        np.testing.assert_array_equal(read_ppm(path), small.images[0])
        assert path.read_bytes().startswith(b"P6\n8 16\n255\n")

    def test_directory_round_trip(self, tmp_path, small):
        export_directory(small, tmp_path)
        loaded = load_directory(tmp_path)
        assert loaded.images.tobytes() == small.images.tobytes()
        np.testing.assert_array_equal(loaded.ids, small.ids)
        np.testing.assert_array_equal(loaded.cams, small.cams)
        assert not list(tmp_path.glob("*.tmp"))

    def write_images(self, root, small, n):
        for k in range(n):
            write_ppm(root / f"{k}.ppm", small.images[k])

    def test_three_lines(self, tmp_path, small):
        self.write_images(tmp_path, small, 3)
        (tmp_path / "manifest.txt").write_text("0.ppm 0 0\n1.ppm 0 1\n# comment\n2.ppm 1 0\n")
        assert len(load_directory(tmp_path)) == 3

    def test_identity_gap(self, tmp_path, small):
        self.write_images(tmp_path, small, 2)
        (tmp_path / "manifest.txt").write_text("0.ppm 0 0\n1.ppm 2 1\n")
        with pytest.raises(DatasetError, match="contiguous"):
            load_directory(tmp_path)

    def test_duplicate_names_line(self, tmp_path, small):
        self.write_images(tmp_path, small, 2)
        (tmp_path / "manifest.txt").write_text("0.ppm 0 0\n1.ppm 1 0\n0.ppm 0 1\n")
        with pytest.raises(DatasetError, match=r":3: duplicate"):
            load_directory(tmp_path)

    def test_missing_file(self, tmp_path, small):
        self.write_images(tmp_path, small, 1)
        (tmp_path / "manifest.txt").write_text("0.ppm 0 0\nnope.ppm 1 0\n")
        with pytest.raises(DatasetError, match=r":2: missing"):
            load_directory(tmp_path)

    @pytest.mark.parametrize("line", ["0.ppm 0", "0.ppm zero 1", "0.ppm 0 0 extra"])
    def test_malformed_line(self, tmp_path, small, line):
        self.write_images(tmp_path, small, 1)
        (tmp_path / "manifest.txt").write_text(line + "\n")
        with pytest.raises(DatasetError, match=r":1:"):
            load_directory(tmp_path)
