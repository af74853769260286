import json

import numpy as np
import pytest

from asp_fscil import data as D
from asp_fscil.exceptions import ConfigError, FormatError


@pytest.fixture(scope="module")
def small():
    return D.generate(12, 10, image_size=8, seed=3)


def test_generate_shapes_and_range(small):
    assert small.images.shape == (120, 8, 8, 3)
    assert small.images.dtype == np.float32
    assert small.images.min() >= 0.0 and small.images.max() <= 1.0
    np.testing.assert_array_equal(np.bincount(small.labels), 10)


def test_generate_deterministic_and_order_independent(small):
    assert D.generate(12, 10, image_size=8, seed=3) == small
    fewer = D.generate(12, 4, image_size=8, seed=3)
    # sample i of class k depends only on (seed, k, i)
    np.testing.assert_array_equal(fewer.images[:4], small.images[:4])
    assert D.generate(12, 10, image_size=8, seed=4) != small


def test_clutter_only_touches_selected_classes(small):
    c = D.generate(12, 10, image_size=8, seed=3, clutter=0.3, clutter_classes=[5])
    same = c.labels != 5
    np.testing.assert_array_equal(c.images[same], small.images[same])
    assert not np.array_equal(c.images[~same], small.images[~same])


def test_styles_apply_known_transforms():
    plain = D.generate(2, 30, image_size=8, seed=1)
    styled = D.generate(2, 30, image_size=8, seed=1, styles=4)
    for a, b in zip(plain.images, styled.images):
        candidates = [a, 1.0 - a, np.roll(a, 1, axis=-1), np.roll(a, 2, axis=-1)]
        assert any(np.allclose(b, c, atol=1e-6) for c in candidates)
    assert not np.array_equal(plain.images, styled.images)


def test_generate_validation():
    with pytest.raises(ConfigError):
        D.generate(0, 5)
    with pytest.raises(ConfigError):
        D.generate(2, 2, clutter=-1)
    with pytest.raises(ConfigError):
        D.generate(2, 2, channels=4)


def test_pixel_centroids_are_weak():
    ds = D.generate(10, 25, image_size=16, seed=0)
    s = D.split_fscil(ds, 0, 10, 0, 0, 0, test_per_class=20)
    tr, te = s.base.train_idx, s.base.test_idx
    X = ds.images.reshape(len(ds), -1)
    cents = np.stack([X[tr][ds.labels[tr] == k].mean(0) for k in range(10)])
    pred = np.argmin(((X[te][:, None] - cents[None]) ** 2).sum(-1), axis=1)
    assert (pred == ds.labels[te]).mean() < 0.8


@pytest.fixture(scope="module")
def stream(small):
    return D.split_fscil(small, 3, 3, 2, 2, 3, test_per_class=4)


def test_split_partitions_classes(stream):
    groups = [stream.pretrain_classes] + [t.classes for t in stream.tasks]
    flat = [k for g in groups for k in g]
    assert len(flat) == len(set(flat)) == 12
    assert [len(t.classes) for t in stream.tasks] == [3, 2, 2, 2]
    assert stream.num_incremental == 3
    assert stream.seen_classes(1) == stream.tasks[0].classes + stream.tasks[1].classes


def test_split_sample_counts(stream, small):
    assert stream.base.train_idx.size == 3 * (10 - 4)
    for t in stream.tasks[1:]:
        assert t.train_idx.size == 2 * 2
        assert t.test_idx.size == 2 * 4
        assert set(small.labels[t.train_idx]) == set(t.classes)
    for t in stream.tasks:
        assert not set(t.train_idx) & set(t.test_idx)
    assert stream.test_indices(2).size == 4 * 7


def test_shots_are_nested(small):
    a = D.split_fscil(small, 3, 3, 2, 1, 3, test_per_class=4)
    b = D.split_fscil(small, 3, 3, 2, 5, 3, test_per_class=4)
    for ta, tb in zip(a.tasks[1:], b.tasks[1:]):
        for k in ta.classes:
            ia = ta.train_idx[small.labels[ta.train_idx] == k]
            ib = tb.train_idx[small.labels[tb.train_idx] == k]
            np.testing.assert_array_equal(ia, ib[:1])
        np.testing.assert_array_equal(ta.test_idx, tb.test_idx)
    np.testing.assert_array_equal(a.base.train_idx, b.base.train_idx)


def test_split_validation(small):
    with pytest.raises(ConfigError):
        D.split_fscil(small, 6, 6, 2, 2, 1)
    with pytest.raises(ConfigError):
        D.split_fscil(small, 3, 3, 2, 7, 3, test_per_class=4)


def test_split_roundtrip(tmp_path, stream):
    p = tmp_path / "s.split.json"
    D.save_split(stream, str(p))
    back = D.load_split(str(p))
    assert back.to_dict() == stream.to_dict()
    p.write_text(json.dumps({"tasks": 1}))
    with pytest.raises(FormatError):
        D.load_split(str(p))
    assert D.split_path("/a/b/data.aspd") == "/a/b/data.split.json"


def test_aspd_roundtrip_bitwise(tmp_path, small):
    p = str(tmp_path / "d.aspd")
    D.save(small, p)
    back = D.load(p)
    assert back == small
    D.save(back, str(tmp_path / "e.aspd"))
    assert open(p, "rb").read() == open(tmp_path / "e.aspd", "rb").read()


def test_aspd_large_seed_roundtrip(tmp_path):
    ds = D.Dataset(np.zeros((1, 2, 2, 1)), [0], 1, seed=2 ** 40 + 7)
    p = str(tmp_path / "d.aspd")
    D.save(ds, p)
    assert D.load(p).seed == 2 ** 40 + 7


def _corrupt(raw, kind):
    raw = bytearray(raw)
    if kind == "magic":
        raw[0:4] = b"XXXX"
    elif kind == "version":
        raw[4] = 9
    elif kind == "truncated":
        raw = raw[:-3]
    elif kind == "extended":
        raw += b"\0"
    elif kind == "header":
        raw = raw[:10]
    elif kind == "label":
        raw[36:40] = (99).to_bytes(4, "little")
    return bytes(raw)


@pytest.mark.parametrize("kind", ["magic", "version", "truncated", "extended", "header", "label"])
def test_aspd_corruption_detected(small, tmp_path, kind):
    p = tmp_path / "d.aspd"
    D.save(small, str(p))
    with pytest.raises(FormatError):
        D.loads(_corrupt(p.read_bytes(), kind))


def test_dataset_validation():
    with pytest.raises(ConfigError):
        D.Dataset(np.zeros((2, 4, 4, 3)), [0], 1)
