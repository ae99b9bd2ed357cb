import os

import numpy as np
import pytest

from capsdbn.archive import read_archive, read_manifest, write_archive, write_manifest
from capsdbn.errors import ConfigurationError
from capsdbn.pngio import read_png, write_png
from capsdbn.preprocess import BatchWhitener, ImagePatch


class TestPngIO:
    def test_rgb_roundtrip_exact_on_quantized_values(self, tmp_path):
        rng = np.random.default_rng(1)
        u8 = rng.integers(0, 256, (3, 16, 16)).astype(np.uint8)
        pixels = u8.astype(np.float32) / 255.0
        path = tmp_path / "x.png"
        write_png(path, pixels)
        back = read_png(path, channels=3)
        np.testing.assert_array_equal(back, pixels)

    def test_grayscale_roundtrip(self, tmp_path):
        pixels = np.linspace(0, 1, 64, dtype=np.float32).reshape(1, 8, 8)
        path = tmp_path / "g.png"
        write_png(path, pixels)
        back = read_png(path, channels=1)
        assert back.shape == (1, 8, 8)
        assert np.max(np.abs(back - pixels)) <= 0.5 / 255.0

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError, match="does not exist"):
            read_png(tmp_path / "nope.png")

    def test_bad_shape_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError):
            write_png(tmp_path / "bad.png", np.zeros((2, 4, 4)))


class TestManifest:
    def test_roundtrip(self, tmp_path):
        img = tmp_path / "a.png"
        write_png(img, np.zeros((3, 8, 8)))
        manifest = tmp_path / "manifest.csv"
        write_manifest(manifest, [("a.png", "catB")])
        rows = read_manifest(manifest, ["catA", "catB"])
        assert rows == [(str(img), 1)]

    def test_missing_image_reported_with_line(self, tmp_path):
        manifest = tmp_path / "manifest.csv"
        manifest.write_text("path,label\nmissing.png,catA\n")
        with pytest.raises(ConfigurationError, match=":2:"):
            read_manifest(manifest, ["catA"])

    def test_unknown_label_reported_with_line(self, tmp_path):
        img = tmp_path / "a.png"
        write_png(img, np.zeros((3, 8, 8)))
        manifest = tmp_path / "manifest.csv"
        manifest.write_text("path,label\na.png,catA\na.png,catZ\n")
        with pytest.raises(ConfigurationError, match=":3:.*catZ"):
            read_manifest(manifest, ["catA"])

    def test_bad_header_rejected(self, tmp_path):
        manifest = tmp_path / "manifest.csv"
        manifest.write_text("file,category\n")
        with pytest.raises(ConfigurationError, match="header"):
            read_manifest(manifest, ["catA"])

    def test_empty_manifest_rejected(self, tmp_path):
        manifest = tmp_path / "manifest.csv"
        manifest.write_text("path,label\n")
        with pytest.raises(ConfigurationError, match="no images"):
            read_manifest(manifest, ["catA"])


def make_patches(n, label, prefix, shape=(2, 6, 6), seed=0):
    rng = np.random.default_rng(seed)
    return [ImagePatch(pixels=rng.normal(size=shape).astype(np.float32),
                       label=label, source_id=f"{prefix}-{i}") for i in range(n)]


class TestArchive:
    def test_roundtrip(self, tmp_path):
        train = make_patches(4, 0, "tr", seed=1) + make_patches(3, 1, "tr2", seed=2)
        val = make_patches(2, 1, "va", seed=3)
        whitener = BatchWhitener(eps=1e-5).fit(np.stack([p.pixels for p in train]))
        out = tmp_path / "archive"
        write_archive(out, train, val, whitener, {"categories": "a,b", "extent": 6})
        back = read_archive(out)
        assert len(back.train) == 7 and len(back.val) == 2
        for orig, loaded in zip(train, back.train):
            np.testing.assert_array_equal(orig.pixels, loaded.pixels)
            assert orig.label == loaded.label
            assert orig.source_id == loaded.source_id
        np.testing.assert_array_equal(back.whitener.mean_, whitener.mean_)
        np.testing.assert_array_equal(back.whitener.scale_, whitener.scale_)
        assert back.whitener.eps == 1e-5
        assert back.meta["categories"] == "a,b"

    def test_raw_files_are_plain_f32(self, tmp_path):
        train = make_patches(2, 0, "tr")
        whitener = BatchWhitener().fit(np.stack([p.pixels for p in train]))
        out = tmp_path / "archive"
        write_archive(out, train, [], whitener, {})
        raw = np.fromfile(os.path.join(out, "patches", "train-00000.f32"), dtype="<f4")
        np.testing.assert_array_equal(raw.reshape(2, 6, 6), train[0].pixels)

    def test_non_archive_dir_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not a patch archive"):
            read_archive(tmp_path)
