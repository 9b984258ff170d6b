import numpy as np
import numpy.testing as npt
import pytest
from PIL import Image

from remotenet.config import IGNORE_INDEX
from remotenet.data import (AugmentSpec, Palette, Sample, augment, crop_sample,
                            default_loveda_palette, default_potsdam_palette,
                            hflip_sample, load_loveda, load_potsdam,
                            remap_loveda_mask, scale_sample, sliding_windows,
                            tile_samples, toy_dataset, vflip_sample)
from remotenet.exceptions import ConfigError, DataError, ShapeError


def _write_loveda_tree(root, n=5, size=32, mask_values=None):
    rng = np.random.default_rng(0)
    (root / "train" / "images").mkdir(parents=True)
    (root / "train" / "masks").mkdir(parents=True)
    for i in range(n):
        img = rng.integers(0, 255, (size, size, 3), dtype=np.uint8)
        Image.fromarray(img).save(root / "train" / "images" / f"im{i}.png")
        if mask_values is None:
            mask = rng.integers(0, 8, (size, size)).astype(np.uint8)
        else:
            mask = np.full((size, size), mask_values[i % len(mask_values)], np.uint8)
        Image.fromarray(mask, mode="L").save(root / "train" / "masks" / f"im{i}.png")


class TestLoveda:
    def test_remap_rule(self):
        raw = np.array([[0, 1], [3, 7]], dtype=np.uint8)
        out = remap_loveda_mask(raw)
        npt.assert_array_equal(out, [[255, 0], [2, 6]])

    def test_stream_length_and_values(self, tmp_path):
        _write_loveda_tree(tmp_path, n=5)
        samples = list(load_loveda(tmp_path, "train"))
        assert len(samples) == 5
        for s in samples:
            values = set(np.unique(s.label))
            assert values <= set(range(7)) | {IGNORE_INDEX}
            assert s.image.shape == (3, 32, 32)
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0

    def test_missing_mask_names_the_sample(self, tmp_path):
        _write_loveda_tree(tmp_path, n=2)
        (tmp_path / "train" / "masks" / "im1.png").unlink()
        with pytest.raises(DataError, match="im1"):
            list(load_loveda(tmp_path, "train"))

    def test_unknown_split_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            list(load_loveda(tmp_path, "trainval"))


def _write_potsdam_tree(root, n=3, size=24):
    palette = default_potsdam_palette()
    rng = np.random.default_rng(1)
    (root / "train" / "images").mkdir(parents=True)
    (root / "train" / "labels").mkdir(parents=True)
    colors = [c for c, _, _ in palette.entries]
    for i in range(n):
        img = rng.integers(0, 255, (size, size, 3), dtype=np.uint8)
        Image.fromarray(img).save(root / "train" / "images" / f"tile{i}.png")
        idx = rng.integers(0, len(colors), (size, size))
        rgb = np.array(colors, dtype=np.uint8)[idx]
        Image.fromarray(rgb).save(root / "train" / "labels" / f"tile{i}.png")


class TestPotsdam:
    def test_palette_decodes_car(self):
        palette = default_potsdam_palette()
        rgb = np.zeros((2, 2, 3), dtype=np.uint8)
        rgb[0, 0] = (255, 255, 0)  # car per the bundled convention
        label = palette.decode(rgb)
        assert label[0, 0] == 4

    def test_unlisted_color_becomes_ignore(self):
        palette = default_potsdam_palette()
        rgb = np.full((2, 2, 3), 7, dtype=np.uint8)
        npt.assert_array_equal(palette.decode(rgb), IGNORE_INDEX)

    def test_tile_ids_enumerate_split(self, tmp_path):
        _write_potsdam_tree(tmp_path, n=3)
        samples = list(load_potsdam(tmp_path, "train"))
        assert [s.id for s in samples] == ["tile0", "tile1", "tile2"]
        for s in samples:
            assert set(np.unique(s.label)) <= set(range(6))

    def test_corrupt_tile_raises(self, tmp_path):
        _write_potsdam_tree(tmp_path, n=1)
        (tmp_path / "train" / "images" / "tile0.png").write_bytes(b"not a png")
        with pytest.raises(DataError):
            list(load_potsdam(tmp_path, "train"))


class TestPalette:
    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "pal.txt"
        path.write_text("10,20,30,0,road\n40,50,60,1,water\n")
        palette = Palette.from_file(path)
        assert palette.num_classes == 2
        assert palette.class_names() == ["road", "water"]

    def test_duplicate_color_rejected(self):
        with pytest.raises(ConfigError):
            Palette([((1, 2, 3), 0, "a"), ((1, 2, 3), 1, "b")])

    def test_sparse_indices_rejected(self):
        with pytest.raises(ConfigError):
            Palette([((1, 2, 3), 0, "a"), ((4, 5, 6), 2, "b")])

    def test_encode_decode_round_trip(self):
        palette = default_loveda_palette()
        label = np.arange(7).reshape(1, 7).astype(np.int64)
        npt.assert_array_equal(palette.decode(palette.encode(label)), label)


def _coded_sample(size=16):
    # image channels carry the label so geometric consistency is checkable
    rng = np.random.default_rng(2)
    label = rng.integers(0, 3, (size, size)).astype(np.int64)
    image = np.stack([label, label, label]).astype(np.float32) / 4.0
    return Sample(image, label, "coded")


class TestAugment:
    def test_identity_spec_returns_input(self, rng):
        s = _coded_sample()
        out = augment(s, AugmentSpec(), rng)
        assert out is s

    def test_hflip_is_involution(self):
        s = _coded_sample()
        back = hflip_sample(hflip_sample(s))
        npt.assert_array_equal(back.image, s.image)
        npt.assert_array_equal(back.label, s.label)

    def test_vflip_is_involution(self):
        s = _coded_sample()
        back = vflip_sample(vflip_sample(s))
        npt.assert_array_equal(back.image, s.image)

    def test_crop_matches_spec_dims(self, rng):
        s = Sample(np.zeros((3, 1024, 1024), np.float32),
                   np.zeros((1024, 1024), np.int64), "big")
        out = augment(s, AugmentSpec(crop=512), rng)
        assert out.image.shape == (3, 512, 512)
        assert out.label.shape == (512, 512)

    def test_crop_pads_small_inputs_with_ignore(self):
        s = _coded_sample(size=16)
        out = crop_sample(s, 32, top=0, left=0)
        assert out.label.shape == (32, 32)
        assert (out.label[16:, :] == IGNORE_INDEX).all()
        assert (out.image[:, 16:, :] == 0).all()

    def test_flip_and_crop_keep_image_label_aligned(self, rng):
        s = _coded_sample(size=32)
        spec = AugmentSpec(hflip=True, vflip=True, crop=16)
        for _ in range(10):
            out = augment(s, spec, rng)
            valid = out.label != IGNORE_INDEX
            recovered = np.round(out.image[0] * 4.0).astype(np.int64)
            npt.assert_array_equal(recovered[valid], out.label[valid])

    def test_scale_resizes_both(self):
        s = _coded_sample(size=16)
        out = scale_sample(s, 1.5)
        assert out.image.shape == (3, 24, 24)
        assert out.label.shape == (24, 24)
        assert set(np.unique(out.label)) <= set(np.unique(s.label))

    def test_degenerate_crop_rejected(self):
        with pytest.raises(ConfigError):
            crop_sample(_coded_sample(), 0, 0, 0)

    def test_bad_scale_range_rejected(self, rng):
        with pytest.raises(ConfigError):
            augment(_coded_sample(), AugmentSpec(scale_range=(1.5, 0.5)), rng)


class TestSlidingWindows:
    def test_potsdam_tile_geometry(self):
        offsets = sliding_windows((6000, 6000), 1024, 512)
        rows = sorted({t for t, _ in offsets})
        assert len(rows) == 11
        assert rows[-1] == 4976
        assert len(offsets) == 121

    def test_single_window(self):
        assert sliding_windows((64, 64), 64, 32) == [(0, 0)]

    def test_window_too_large_rejected(self):
        with pytest.raises(ShapeError):
            sliding_windows((32, 64), 48, 16)

    @pytest.mark.parametrize("dim,window,stride", [
        (100, 10, 30), (37, 8, 8), (64, 17, 5), (50, 50, 1), (33, 4, 100)])
    def test_brute_force_coverage(self, dim, window, stride):
        covered = np.zeros((dim, dim), dtype=bool)
        for top, left in sliding_windows((dim, dim), window, stride):
            assert 0 <= top <= dim - window
            covered[top:top + window, left:left + window] = True
        assert covered.all()


class TestToyDataset:
    def test_basic_contract(self):
        samples = toy_dataset(4, 64, 3, seed=0)
        assert len(samples) == 4
        for s in samples:
            assert set(np.unique(s.label)) <= {0, 1, 2}
            assert s.image.dtype == np.float32
            assert s.image.min() >= 0 and s.image.max() <= 1

    def test_deterministic(self):
        a = toy_dataset(4, 64, 3, seed=5)
        b = toy_dataset(4, 64, 3, seed=5)
        for sa, sb in zip(a, b):
            npt.assert_array_equal(sa.image, sb.image)
            npt.assert_array_equal(sa.label, sb.label)

    def test_histogram_contains_all_classes(self):
        samples = toy_dataset(4, 64, 3, seed=0)
        hist = np.zeros(3, dtype=np.int64)
        for s in samples:
            hist += np.bincount(s.label.ravel(), minlength=3)
        assert (hist > 0).all()

    def test_class_count_bounds(self):
        with pytest.raises(ConfigError):
            toy_dataset(2, 32, 1, seed=0)


def test_tile_samples_covers_large_inputs():
    big = Sample(np.zeros((3, 100, 100), np.float32),
                 np.arange(10000).reshape(100, 100) % 3, "big")
    tiles = list(tile_samples([big], size=64, stride=32))
    assert len(tiles) == 9  # offsets 0, 32, 36 per axis
    assert all(t.label.shape == (64, 64) for t in tiles)
    small = Sample(np.zeros((3, 32, 32), np.float32),
                   np.zeros((32, 32), np.int64), "small")
    assert [t.id for t in tile_samples([small], 64, 32)] == ["small"]
