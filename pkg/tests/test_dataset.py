import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facechannel.dataset import (
    DatasetManifest,
    PreprocessConfig,
    Sample,
    batch_stream,
    load_dataset,
    load_image,
    load_keypoint_sidecar,
    parse_manifest,
    preprocess_array,
    write_manifest,
)
from facechannel.errors import DecodeError, EmptyDatasetError, LabelRangeError, SchemaError

from conftest import write_png


def _csv(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_parse_two_rows_in_file_order(tmp_path):
    p = _csv(tmp_path / "m.csv", "image_path,arousal,valence\nb.png,0.5,-0.25\na.png,-1,1\n")
    m = parse_manifest(p)
    assert len(m) == 2
    assert [s.image_path.name for s in m] == ["b.png", "a.png"]
    assert (m[0].arousal, m[0].valence) == (0.5, -0.25)
    assert m[1].image_path == tmp_path / "a.png"
    assert m.split_tag == "train"


def test_out_of_range_label_names_row(tmp_path):
    p = _csv(tmp_path / "m.csv", "image_path,arousal,valence\na.png,0.1,0.2\nb.png,1.5,0\n")
    with pytest.raises(LabelRangeError, match="row 2"):
        parse_manifest(p)


def test_missing_column_is_named(tmp_path):
    p = _csv(tmp_path / "m.csv", "image_path,arousal\na.png,0.1\n")
    with pytest.raises(SchemaError, match="valence"):
        parse_manifest(p)


def test_missing_keypoint_axis_column(tmp_path):
    p = _csv(tmp_path / "m.csv", "image_path,arousal,valence,kp_chin_x\na.png,0,0,3\n")
    with pytest.raises(SchemaError, match="kp_chin_y"):
        parse_manifest(p)


def test_unreadable_file(tmp_path):
    with pytest.raises(OSError):
        parse_manifest(tmp_path / "nope.csv")


def test_empty_file_has_no_header(tmp_path):
    with pytest.raises(SchemaError):
        parse_manifest(_csv(tmp_path / "m.csv", ""))


def test_keypoint_columns(tmp_path):
    p = _csv(
        tmp_path / "m.csv",
        "image_path,arousal,valence,kp_chin_x,kp_chin_y,kp_nose_bridge_x,kp_nose_bridge_y\n"
        "a.png,0,0,10,20,11.5,2\n"
        "b.png,0,0,,,1,1\n",
    )
    m = parse_manifest(p)
    assert m[0].keypoints == {"chin": (10.0, 20.0), "nose_bridge": (11.5, 2.0)}
    assert m[1].keypoints == {"nose_bridge": (1.0, 1.0)}


def test_negative_keypoint_rejected(tmp_path):
    p = _csv(tmp_path / "m.csv", "image_path,arousal,valence,kp_chin_x,kp_chin_y\na.png,0,0,-1,2\n")
    with pytest.raises(ValueError, match="row 1"):
        parse_manifest(p)


def test_duplicate_paths_rejected(tmp_path):
    p = _csv(tmp_path / "m.csv", "image_path,arousal,valence\na.png,0,0\na.png,0.1,0\n")
    with pytest.raises(ValueError, match="duplicate"):
        parse_manifest(p)


def test_round_trip(tmp_path):
    samples = (
        Sample(tmp_path / "x.png", 0.1 + 0.2, -1 / 3, {"chin": (1.25, 2.5), "mouth_left": (0.0, 7.0)}),
        Sample(tmp_path / "sub" / "y.png", -1.0, 1.0, None),
    )
    m = DatasetManifest(samples)
    path = write_manifest(m, tmp_path / "out.csv")
    assert parse_manifest(path) == m


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=20))
def test_round_trip_property(tmp_path_factory, labels):
    d = tmp_path_factory.mktemp("rt")
    m = DatasetManifest(tuple(Sample(d / f"{i}.png", a, v) for i, (a, v) in enumerate(labels)))
    back = parse_manifest(write_manifest(m, d / "m.csv"))
    assert back == m
    assert len(back) == len(labels)


def test_load_image_shape(tmp_path):
    rng = np.random.default_rng(0)
    p = write_png(tmp_path / "a.png", rng.integers(0, 256, (128, 128, 3), dtype=np.uint8))
    t = load_image(Sample(p, 0, 0), PreprocessConfig(96, 1))
    assert t.shape == (96, 96, 1)
    assert t.dtype == np.float32
    assert 0.0 <= t.min() and t.max() <= 1.0


def test_white_maps_to_one(tmp_path):
    p = write_png(tmp_path / "w.png", np.full((40, 40, 3), 255, np.uint8))
    assert np.all(load_image(p, PreprocessConfig(16, 1)) == 1.0)


def test_pure_red_luma(tmp_path):
    img = np.zeros((20, 20, 3), np.uint8)
    img[..., 0] = 255
    p = write_png(tmp_path / "r.png", img)
    t = load_image(p, PreprocessConfig(20, 1))
    # 0.299 * 1.0 + 0.587 * 0 + 0.114 * 0
    np.testing.assert_allclose(t, 0.299, rtol=0, atol=1e-7)


def test_rgb_mode_keeps_channels(tmp_path):
    p = write_png(tmp_path / "c.png", np.full((16, 16, 3), 51, np.uint8))
    t = load_image(p, PreprocessConfig(16, 3))
    assert t.shape == (16, 16, 3)
    np.testing.assert_allclose(t, 0.2, atol=1e-7)


def test_undecodable_image(tmp_path):
    p = tmp_path / "bad.png"
    p.write_bytes(b"not an image")
    with pytest.raises(DecodeError) as info:
        load_image(p)
    assert str(p) in str(info.value)
    assert info.value.path == str(p)


def test_preprocess_idempotent():
    rng = np.random.default_rng(1)
    x = rng.random((24, 24, 1), dtype=np.float32)
    cfg = PreprocessConfig(24, 1)
    once = preprocess_array(x, cfg)
    assert np.array_equal(once, x)
    assert np.array_equal(preprocess_array(once, cfg), once)


def test_image_cache(tmp_path, monkeypatch):
    p = write_png(tmp_path / "a.png", np.full((8, 8, 3), 100, np.uint8))
    cache = tmp_path / "cache"
    monkeypatch.setenv("FACECHANNEL_CACHE", str(cache))
    first = load_image(p, PreprocessConfig(16, 1))
    files = list(cache.glob("*.npy"))
    assert len(files) == 1
    assert np.array_equal(load_image(p, PreprocessConfig(16, 1)), first)


def test_load_dataset_order_and_parallel(faces):
    serial = load_dataset(faces, PreprocessConfig(32, 1))
    parallel = load_dataset(faces, PreprocessConfig(32, 1), jobs=4)
    assert serial.images.shape == (12, 1, 32, 32)
    assert np.array_equal(serial.images.numpy(), parallel.images.numpy())
    np.testing.assert_array_equal(serial.arousal.numpy(), np.float32(faces.arousal))


def test_sidecar(tmp_path):
    p = tmp_path / "kp.json"
    p.write_text('{"image": "a.png", "points": {"mouth_left": [1, 2], "mouth_right": [3, 4], '
                 '"chin": [2, 6], "nose_bridge": [2, 0]}}')
    kp = load_keypoint_sidecar(p)
    assert kp["a.png"]["chin"] == (2.0, 6.0)


def test_batch_sizes():
    assert [len(b) for b in batch_stream(10, 4, seed=0)] == [4, 4, 2]


def test_batch_determinism_and_golden():
    a = batch_stream(10, 4, seed=0)
    b = batch_stream(10, 4, seed=0)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    # PCG64 permutation, identical across platforms
    assert [x.tolist() for x in a] == [[4, 6, 2, 7], [3, 5, 9, 0], [8, 1]]


def test_different_seeds_differ():
    one = np.concatenate(batch_stream(100, 7, seed=1))
    two = np.concatenate(batch_stream(100, 7, seed=2))
    assert not np.array_equal(one, two)


@given(st.integers(1, 300), st.integers(1, 64), st.integers(0, 2**31 - 1), st.integers(0, 50))
def test_batches_partition_indices(n, batch_size, seed, epoch):
    batches = batch_stream(n, batch_size, seed, epoch)
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(n))
    assert all(len(b) == batch_size for b in batches[:-1])


def test_empty_manifest_batches():
    with pytest.raises(EmptyDatasetError):
        batch_stream(DatasetManifest(()), 4, 0)
    with pytest.raises(ValueError):
        batch_stream(5, 0, 0)


def test_sample_label_bounds():
    with pytest.raises(LabelRangeError):
        Sample("a.png", -1.01, 0)
    with pytest.raises(LabelRangeError):
        Sample("a.png", 0, float("nan"))
