from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcpa_vit import formats
from tcpa_vit.backbone import ModelConfig
from tcpa_vit.data import (
    Dataset,
    ValueRangeError,
    batch_iter,
    class_templates,
    decode_dataset,
    encode_dataset,
    gen_synthetic,
    load_dataset,
    nearest_template,
    save_dataset,
)

SMALL = ModelConfig(image_h=8, image_w=8, channels=3, patch_h=4, patch_w=4,
                    embed_dim=8, num_layers=1, num_heads=2, ffn_dim=8)


def random_dataset(seed=0, n=5, classes=3):
    r = np.random.default_rng(seed)
    return Dataset(r.random((n, 8, 8, 3)), r.integers(0, classes, n), classes)


def test_round_trip_bit_exact(tmp_path):
    ds = random_dataset()
    save_dataset(ds, tmp_path / "d.tcpd")
    back = load_dataset(tmp_path / "d.tcpd")
    assert back.images.tobytes() == ds.images.tobytes()
    assert np.array_equal(back.labels, ds.labels) and back.num_classes == ds.num_classes


def test_header_layout():
    buf = encode_dataset(random_dataset(n=2, classes=3))
    assert buf[:4] == b"TCPD"
    assert struct.unpack_from("<IIHHBH", buf, 4) == (1, 2, 8, 8, 3, 3)
    assert len(buf) == 4 + 4 + 4 + 2 + 2 + 1 + 2 + 2 * 8 * 8 * 3 * 8 + 2 * 2


def test_label_out_of_range_is_rejected_at_load(tmp_path):
    buf = bytearray(encode_dataset(random_dataset(n=2, classes=3)))
    struct.pack_into("<H", buf, len(buf) - 2, 3)  # label == num_classes
    with pytest.raises(formats.LabelRangeError):
        decode_dataset(bytes(buf))


def test_truncation_magic_version_and_trailing():
    buf = encode_dataset(random_dataset())
    with pytest.raises(formats.TruncationError, match="label"):
        decode_dataset(buf[:-1])
    with pytest.raises(formats.TruncationError, match="image"):
        decode_dataset(buf[:40])
    with pytest.raises(formats.TruncationError):
        decode_dataset(buf[:10])
    with pytest.raises(formats.MagicError):
        decode_dataset(b"TCPW" + buf[4:])
    bad = bytearray(buf)
    struct.pack_into("<I", bad, 4, 9)
    with pytest.raises(formats.VersionError):
        decode_dataset(bytes(bad))
    with pytest.raises(formats.ShapeTableError):
        decode_dataset(buf + b"\x00")


def test_pixel_range_is_enforced():
    ds = random_dataset()
    ds.images[0, 0, 0, 0] = 1.5
    with pytest.raises(ValueRangeError):
        decode_dataset(encode_dataset(ds))


def test_synthetic_determinism_and_range():
    a = gen_synthetic(3, 4, 0.05, 11, SMALL)
    b = gen_synthetic(3, 4, 0.05, 11, SMALL)
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert list(a.labels) == [0] * 4 + [1] * 4 + [2] * 4
    c = gen_synthetic(3, 4, 0.05, 12, SMALL)
    assert a.images.tobytes() != c.images.tobytes()


def test_zero_noise_gives_identical_class_members():
    ds = gen_synthetic(3, 5, 0.0, 1, SMALL)
    for c in range(3):
        members = ds.images[ds.labels == c]
        assert all(m.tobytes() == members[0].tobytes() for m in members)


def test_templates_are_distinct_and_patch_constant():
    t = class_templates(4, 7, ModelConfig())
    patches = t.reshape(4, 8, 4, 8, 4, 3)
    assert np.all(patches == patches[:, :, :1, :, :1, :])
    assert t.min() >= 0.2 and t.max() <= 0.8
    means = patches[:, :, 0, :, 0, :].reshape(4, -1)
    for c in range(1, 4):
        assert not np.array_equal(means[c], means[0])


def test_nearest_template_oracle_is_perfect_at_acceptance_setting():
    cfg = ModelConfig()
    ds = gen_synthetic(4, 64, 0.05, 7, cfg)
    pred = nearest_template(ds.images, class_templates(4, 7, cfg))
    assert np.mean(pred == ds.labels) == 1.0


@pytest.mark.parametrize("kw", [dict(classes=1), dict(noise_std=-0.1), dict(samples_per_class=0)])
def test_generator_rejects_bad_arguments(kw):
    with pytest.raises(ValueError):
        gen_synthetic(**{"config": SMALL, **kw})


def test_full_batch_is_a_permutation():
    (only,) = list(batch_iter(10, 10, seed=3, epoch=0))
    assert sorted(only.tolist()) == list(range(10))


def test_batch_order_depends_only_on_seed_and_epoch():
    a = [b.tolist() for b in batch_iter(20, 6, 1, 4)]
    assert a == [b.tolist() for b in batch_iter(20, 6, 1, 4)]
    assert a != [b.tolist() for b in batch_iter(20, 6, 1, 5)]
    assert [len(b) for b in a] == [6, 6, 6, 2]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 50), st.integers(1, 60), st.integers(0, 1000), st.integers(0, 1000))
def test_batches_partition_indices(n, bs, seed, epoch):
    seen = np.concatenate([b for b in batch_iter(n, bs, seed, epoch)] or [np.zeros(0, int)])
    assert sorted(seen.tolist()) == list(range(n))


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 8, 8, 3)), [0, 3], 3)
    with pytest.raises(ValueError):
        random_dataset().check_config(ModelConfig())
    with pytest.raises(ValueError):
        batch_iter(4, 0, 0, 0).__next__()
