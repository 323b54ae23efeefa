import numpy as np
import pytest
import torch
from PIL import Image

from boundless import datapipe
from boundless.errors import ConfigError, DataError


def _bilinear_oracle(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear upsampling, written with explicit loops."""
    in_h, in_w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = min(max((i + 0.5) * in_h / out_h - 0.5, 0.0), in_h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, in_h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * in_w / out_w - 0.5, 0.0), in_w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, in_w - 1)
            fx = sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bottom * fy
    return out


def test_checkerboard_upsample_matches_oracle():
    board = (np.indices((4, 4)).sum(0) % 2) * 1.6 - 0.8
    img = torch.from_numpy(np.stack([board] * 3))
    out = datapipe.resize(img, (9, 9))
    ref = _bilinear_oracle(board, 9, 9)
    assert np.allclose(out[0].numpy(), ref, atol=1e-12)


def test_resize_identity_and_range():
    img = torch.rand(3, 8, 8) * 2 - 1
    assert datapipe.resize(img, (8, 8)) is img
    big = datapipe.resize(img, (33, 17))
    assert big.shape == (3, 33, 17) and big.abs().max() <= 1
    small = datapipe.resize(big, (5, 5))
    assert small.shape == (3, 5, 5)


def test_uint8_round_trip():
    pixels = np.arange(256, dtype=np.uint8)[None, :, None].repeat(3, 2).repeat(2, 0)
    unit = datapipe.to_unit_range(pixels)
    assert unit.min() == -1 and unit.max() == 1
    assert np.array_equal(datapipe.to_uint8(unit), pixels)


def test_save_and_load(tmp_path):
    img = datapipe.synthetic_texture("blobs", 17, np.random.default_rng(0))
    datapipe.save_image(tmp_path / "a" / "x.png", img)
    back = datapipe.read_image(tmp_path / "a" / "x.png")
    assert back.shape == (3, 17, 17)
    assert (back - img).abs().max() <= 1 / 127.5 + 1e-6
    again = datapipe.to_unit_range(datapipe.to_uint8(back))
    assert torch.equal(again, back)  # quantization is idempotent
    with pytest.raises(DataError):
        datapipe.read_image(tmp_path / "missing.png")
    (tmp_path / "bad.png").write_bytes(b"garbage")
    with pytest.raises(DataError):
        datapipe.read_image(tmp_path / "bad.png")


def _make_tree(root, counts):
    for name, n in counts.items():
        (root / name).mkdir(parents=True)
        for i in range(n):
            Image.new("RGB", (10, 12), (i * 10 % 255, 0, 0)).save(root / name / f"{i:03d}.png")


def test_build_manifest_top_k_and_holdout(tmp_path):
    _make_tree(tmp_path, {"a": 5, "b": 7, "c": 7, "d": 2})
    train, held = datapipe.build_manifest(tmp_path, top_k=2, holdout_per_class=2, seed=1, target_size=(9, 9))
    assert sorted({r.label for r in train.records}) == ["b", "c"]
    assert len(held) == 4 and len(train) == 10
    assert not set(train.ids) & set(held.ids)
    again = datapipe.build_manifest(tmp_path, top_k=2, holdout_per_class=2, seed=1, target_size=(9, 9))
    assert again[1].ids == held.ids
    other = datapipe.build_manifest(tmp_path, top_k=2, holdout_per_class=2, seed=2, target_size=(9, 9))
    assert other[1].ids != held.ids or other[0].ids != train.ids
    assert all(r.image_id == f"{r.label}/{r.path.split('/')[-1][:-4]}" for r in train.records)


def test_build_manifest_errors(tmp_path):
    _make_tree(tmp_path, {"a": 3})
    with pytest.raises(DataError):
        datapipe.build_manifest(tmp_path, holdout_per_class=4)
    with pytest.raises(DataError):
        datapipe.build_manifest(tmp_path, classes=["zzz"])
    with pytest.raises(DataError):
        datapipe.build_manifest(tmp_path / "nowhere")
    with pytest.raises(ConfigError):
        datapipe.build_manifest(tmp_path, top_k=0)


def test_manifest_round_trip_and_loading(tmp_path):
    _make_tree(tmp_path / "data", {"a": 3, "b": 3})
    train, held = datapipe.build_manifest(tmp_path / "data", holdout_per_class=1, target_size=(9, 9))
    train.save(tmp_path / "train.tsv")
    loaded = datapipe.DatasetManifest.load(tmp_path / "train.tsv")
    assert loaded.records == train.records and loaded.split == "train" and loaded.target_size == (9, 9)
    ids, imgs = datapipe.load_manifest_images(loaded)
    assert ids == loaded.ids and imgs.shape == (4, 3, 9, 9)
    (tmp_path / "data" / train.records[0].path).write_bytes(b"broken")
    with pytest.raises(DataError):
        datapipe.load_manifest_images(loaded)
    ids, imgs = datapipe.load_manifest_images(loaded, on_error="skip")
    assert len(ids) == 3
    with pytest.raises(DataError):
        datapipe.DatasetManifest.load(tmp_path / "missing.tsv")


def test_synthetic_dataset_is_seeded(tmp_path):
    ids, imgs = datapipe.synthetic_dataset(6, size=17, seed=4)
    assert ids[:3] == ["gradient/00000", "stripes/00001", "blobs/00002"]
    assert imgs.shape == (6, 3, 17, 17) and imgs.abs().max() <= 1
    assert torch.equal(imgs, datapipe.synthetic_dataset(6, size=17, seed=4)[1])
    root = datapipe.write_synthetic_dataset(tmp_path / "syn", per_class=2, size=17)
    assert sorted(p.name for p in root.iterdir()) == list(sorted(datapipe.TEXTURE_KINDS))
    with pytest.raises(ConfigError):
        datapipe.synthetic_texture("plaid", 17, np.random.default_rng(0))
