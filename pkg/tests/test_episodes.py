import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cmf_fewshot.episodes import (
    Dataset,
    DatasetError,
    EpisodeError,
    desk_benchmark,
    load_dataset,
    make_fixed_support,
    sample_episode,
    synth_domain,
)

FIXTURES = json.loads((Path(__file__).parent / "fixtures" / "checksums.json").read_text())


def tiny(classes=3, per_class=3):
    labels = np.repeat(np.arange(classes), per_class)
    images = np.arange(len(labels) * 4, dtype=np.float32).reshape(-1, 1, 2, 2)
    return Dataset("tiny", images, labels, np.array(["train"] * len(labels)))


# synthetic domains ----------------------------------------------------------------


def test_shapes_domain_checksum_is_stable():
    d = synth_domain("shapes", classes=5, per_class=40, size=32, seed=7)
    assert d.images.shape == (200, 1, 32, 32)
    assert d.checksum() == FIXTURES["shapes-c5-n40-s32-seed7"]


def test_single_class_domain_is_rejected():
    with pytest.raises(DatasetError):
        synth_domain("glyphs", classes=1)


def test_family_enters_the_generator_stream():
    a = synth_domain("glyphs", classes=3, per_class=4, seed=5)
    b = synth_domain("digits", classes=3, per_class=4, seed=5, id="glyphs")
    assert a.checksum() != b.checksum()


def test_images_in_unit_range_and_read_only():
    d = synth_domain("textures", classes=3, per_class=6, seed=2)
    assert d.images.min() >= 0 and d.images.max() <= 1
    with pytest.raises(ValueError):
        d.images[0, 0, 0, 0] = 1.0


def test_desk_benchmark_splits_cover_every_class():
    for d in desk_benchmark(per_class=20):
        assert len(d.classes) == 10
        for split in ("train", "val", "test"):
            counts = np.bincount(d.labels[d.indices(split)], minlength=10)
            assert (counts >= 5).all(), (d.id, split, counts)


# loading ---------------------------------------------------------------------------


def test_class_folders(tmp_path):
    for cls in ("a", "b"):
        (tmp_path / cls).mkdir()
        for i in range(3):
            Image.fromarray(np.full((8, 8), 40 * i, np.uint8)).save(tmp_path / cls / f"{i}.png")
    d = load_dataset(tmp_path)
    assert d.images.shape == (6, 1, 8, 8)
    np.testing.assert_array_equal(d.labels, [0, 0, 0, 1, 1, 1])
    assert d.images[2].max() == pytest.approx(80 / 255)


def test_class_folders_resize(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    Image.fromarray(np.zeros((10, 10), np.uint8)).save(tmp_path / "a" / "0.png")
    Image.fromarray(np.zeros((12, 12), np.uint8)).save(tmp_path / "b" / "0.png")
    with pytest.raises(DatasetError, match="size"):
        load_dataset(tmp_path)
    assert load_dataset(tmp_path, size=8).images.shape == (2, 1, 8, 8)


def test_empty_class_folder_is_rejected(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "a" / "0.png")
    with pytest.raises(DatasetError, match="empty"):
        load_dataset(tmp_path)


def test_idx_header_layout(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(10, 28, 28), dtype=np.uint8)
    labels = np.arange(10, dtype=np.uint8)
    # magic: two zero bytes, type 0x08 (unsigned byte), ndim; then big-endian dims
    (tmp_path / "img.idx").write_bytes(b"\x00\x00\x08\x03" + struct.pack(">3I", 10, 28, 28) + pixels.tobytes())
    (tmp_path / "lab.idx").write_bytes(b"\x00\x00\x08\x01" + struct.pack(">I", 10) + labels.tobytes())
    d = load_dataset(tmp_path / "img.idx", format="idx", labels_path=tmp_path / "lab.idx")
    assert d.images.shape == (10, 1, 28, 28)
    np.testing.assert_allclose(d.images[:, 0], pixels / 255.0, atol=1e-7)
    np.testing.assert_array_equal(d.labels, np.arange(10))


def test_truncated_idx_is_rejected(tmp_path):
    (tmp_path / "bad.idx").write_bytes(b"\x00\x00\x08\x03" + struct.pack(">3I", 10, 28, 28) + b"\x00" * 100)
    with pytest.raises(DatasetError, match="bytes"):
        load_dataset(tmp_path / "bad.idx", format="idx")


# episodes ----------------------------------------------------------------------------


def test_episode_counts():
    ep = sample_episode(tiny(2, 3), way=2, shot=1, query=2, seed=0, split="train")
    assert len(ep.support_images) == 2 and len(ep.target_images) == 4
    np.testing.assert_array_equal(ep.support_labels, [0, 1])
    np.testing.assert_array_equal(ep.target_labels, [0, 0, 1, 1])


def test_episode_is_deterministic():
    d = synth_domain("glyphs", classes=6, per_class=12, seed=0)
    a = sample_episode(d, 5, 1, 3, seed=11)
    b = sample_episode(d, 5, 1, 3, seed=11)
    assert np.array_equal(a.support_index, b.support_index) and np.array_equal(a.target_index, b.target_index)


def test_support_and_target_never_overlap():
    d = tiny(3, 3)
    for seed in range(1000):
        ep = sample_episode(d, way=3, shot=1, query=2, seed=seed)
        assert not set(ep.support_index) & set(ep.target_index)


@given(way=st.integers(1, 5), shot=st.integers(1, 3), query=st.integers(1, 4), seed=st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_every_class_is_balanced(way, shot, query, seed):
    d = synth_domain("digits", classes=6, per_class=16, size=8, seed=1)
    ep = sample_episode(d, way, shot, query, seed=seed)
    assert (np.bincount(ep.support_labels, minlength=way) == shot).all()
    assert (np.bincount(ep.target_labels, minlength=way) == query).all()
    # relabelled classes map back to the chosen dataset classes
    assert (d.labels[ep.target_index] == np.asarray(ep.class_ids)[ep.target_labels]).all()


def test_too_few_classes_is_an_error():
    with pytest.raises(EpisodeError):
        sample_episode(tiny(2, 3), way=3, shot=1, query=1)


# fixed supports -----------------------------------------------------------------------


def test_azs2_fixed_support_is_deterministic():
    ds = desk_benchmark(per_class=12)
    a = make_fixed_support("azs2", "glyphs", datasets=ds, size=10, seed=3)
    b = make_fixed_support("azs2", "glyphs", datasets=ds, size=10, seed=3)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.source == "glyphs" and a.images.shape == (10, 1, 32, 32)


def test_random_matrix_range_and_shape():
    f = make_fixed_support("random-matrix", size=7, seed=0, image_shape=(1, 32, 32))
    assert f.images.shape == (7, 1, 32, 32)
    assert f.images.min() >= 0 and f.images.max() <= 1


def test_azs1_gives_one_support_per_domain():
    ds = desk_benchmark(per_class=12, families=("glyphs", "shapes", "digits"))
    out = make_fixed_support("azs1", datasets=ds, size=10, seed=0)
    assert sorted(out) == ["digits", "glyphs", "shapes"]
    for name, f in out.items():
        d = next(x for x in ds if x.id == name)
        assert f.source == name
        assert any(np.array_equal(f.images[0], im) for im in d.images)


def test_unknown_source_is_rejected():
    with pytest.raises(DatasetError, match="unknown"):
        make_fixed_support("azs2", "nowhere", datasets=desk_benchmark(per_class=4, families=("glyphs",)))
