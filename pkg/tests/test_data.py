import numpy as np
import pytest

from msr import data as D


def test_batches_drop_last_and_full_cover():
    b = D.batches(10, 3, epoch_seed=0, drop_last=True)
    assert len(b) == 3 and all(len(x) == 3 for x in b)
    assert len(set(np.concatenate(b).tolist())) == 9
    full = D.batches(10, 3, epoch_seed=0, drop_last=False)
    assert sorted(np.concatenate(full).tolist()) == list(range(10))
    assert [len(x) for x in full] == [3, 3, 3, 1]


def test_batches_are_seeded():
    a, b, c = (D.batches(50, 7, s) for s in (1, 1, 2))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_batches_errors():
    with pytest.raises(ValueError):
        D.batches(5, 6, 0, drop_last=True)
    with pytest.raises(ValueError):
        D.batches(5, 0, 0)
    assert len(D.batches(5, 6, 0, drop_last=False)) == 1


def test_dataset_validation():
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((2, 4, 4, 3)), np.zeros(3, dtype=int), 2)
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((2, 4, 4, 3)), np.array([0, 5]), 2)


def cifar_records(labels, lb, seed=0):
    rng = np.random.default_rng(seed)
    recs = np.zeros((len(labels), lb + 3072), dtype=np.uint8)
    for i, lab in enumerate(labels):
        recs[i, lb - 1] = lab
        recs[i, lb:] = rng.integers(0, 256, size=3072)
    return recs


def test_cifar10_layout_is_planar_rgb(tmp_path):
    recs = cifar_records([3, 7], 1)
    path = tmp_path / "data_batch_1.bin"
    recs.tofile(path)
    ds = D.load_cifar_binary(path)
    assert ds.labels.tolist() == [3, 7] and ds.images.shape == (2, 32, 32, 3)
    # pixel (row 2, col 5) of the green plane in record 1
    assert ds.images[1, 2, 5, 1] == np.float32(recs[1, 1 + 1024 + 2 * 32 + 5]) / np.float32(255)
    assert ds.images[0, 0, 0, 2] == np.float32(recs[0, 1 + 2048]) / np.float32(255)


def test_cifar100_uses_fine_label_and_round_trips(tmp_path):
    recs = cifar_records([0, 0], 2)
    recs[:, 0] = [4, 9]  # coarse labels are ignored
    recs[:, 1] = [61, 99]
    path = tmp_path / "train.bin"
    recs.tofile(path)
    ds = D.load_cifar_binary(path, class_count=100)
    assert ds.labels.tolist() == [61, 99]
    out = tmp_path / "copy.bin"
    D.save_cifar_binary(ds, out)
    again = D.load_cifar_binary(out, class_count=100)
    np.testing.assert_array_equal(again.images, ds.images)
    np.testing.assert_array_equal(again.labels, ds.labels)


def test_cifar_errors(tmp_path):
    bad = tmp_path / "bad.bin"
    np.zeros(3000, dtype=np.uint8).tofile(bad)
    with pytest.raises(D.FormatError, match="multiple"):
        D.load_cifar_binary(bad)
    big = tmp_path / "big.bin"
    recs = cifar_records([12], 1)
    recs.tofile(big)
    with pytest.raises(D.FormatError, match="exceeds"):
        D.load_cifar_binary(big)
    with pytest.raises(FileNotFoundError):
        D.load_cifar_dir(tmp_path)


def test_cifar_dir(tmp_path):
    for i in (1, 2):
        cifar_records([i, i], 1, seed=i).tofile(tmp_path / f"data_batch_{i}.bin")
    cifar_records([5], 1, seed=9).tofile(tmp_path / "test_batch.bin")
    tr, te = D.load_cifar_dir(tmp_path)
    assert tr.labels.tolist() == [1, 1, 2, 2] and te.labels.tolist() == [5]


def test_synth_shape_layout_and_determinism():
    spec = D.SynthSpec(class_count=4, per_class=5, seed=3)
    a, b = D.synth_dataset(spec), D.synth_dataset(spec)
    assert a.images.shape == (20, 32, 32, 3) and a.images.dtype == np.float32
    np.testing.assert_array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [5] * 4
    assert a.images.min() >= 0 and a.images.max() <= 1
    c = D.synth_dataset(D.SynthSpec(class_count=4, per_class=5, seed=4))
    assert not np.array_equal(a.images, c.images)


def test_synth_validation():
    for kw in ({"class_count": 1}, {"class_count": 9}, {"size": 8}, {"contrast": 1.5},
               {"noise": -1}, {"per_class": 0}, {"recipe": "stripes"}):
        with pytest.raises(ValueError):
            D.synth_dataset(D.SynthSpec(**kw))


def test_shapes_are_distinct_masks():
    yy, xx = np.mgrid[0:64, 0:64] + 0.5
    masks = [D._signed_distance(s, xx - 32, yy - 32, 20.0) < 0 for s in D.SHAPES]
    for i in range(len(masks)):
        assert masks[i].sum() > 50
        for j in range(i):
            assert (masks[i] != masks[j]).sum() > 20, (D.SHAPES[i], D.SHAPES[j])


def test_triangle_is_equilateral_with_given_circumradius():
    # vertices of an upward triangle at circumradius r lie on the zero level set
    r = 10.0
    for angle in (-np.pi / 2, np.pi / 6, 5 * np.pi / 6):
        u, v = r * np.cos(angle), r * np.sin(angle)
        assert D._signed_distance("triangle", np.array(u), np.array(v), r) == pytest.approx(0.0, abs=1e-9)


def mean_chroma_angle(images):
    m = images.reshape(len(images), -1, 3).mean(axis=1)
    gray = m.mean(axis=1, keepdims=True)
    c = m - gray
    # project onto a 2-D chroma plane
    x = c[:, 0] - 0.5 * (c[:, 1] + c[:, 2])
    y = np.sqrt(3) / 2 * (c[:, 1] - c[:, 2])
    return np.arctan2(y, x)


def test_full_contrast_is_linearly_separable():
    # independent oracle: least-squares one-vs-rest on [mean chroma, 1] features
    ds = D.synth_dataset(D.SynthSpec(class_count=4, per_class=60, seed=0, contrast=1.0))
    spec = D.SynthSpec(class_count=4)
    assert spec.separable_threshold == pytest.approx(0.75)
    means = ds.images.reshape(len(ds), -1, 3).mean(axis=1)
    X = np.column_stack([means, np.ones(len(ds))])
    Y = np.eye(4)[ds.labels]
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    assert np.mean(np.argmax(X @ W, axis=1) == ds.labels) >= 0.99
    ang = mean_chroma_angle(ds.images)
    for c in range(4):
        sector = np.exp(1j * ang[ds.labels == c])
        assert np.abs(sector.mean()) > 0.8  # tight angular cluster per class


def test_zero_contrast_hides_color_evidence():
    ds = D.synth_dataset(D.SynthSpec(class_count=4, per_class=60, seed=0, contrast=0.0))
    ang = mean_chroma_angle(ds.images)
    for c in range(4):
        assert np.abs(np.exp(1j * ang[ds.labels == c]).mean()) < 0.4


def test_dataset_subset_and_iter_images():
    ds = D.synth_dataset(D.SynthSpec(per_class=3))
    sub = ds.subset([0, 5])
    np.testing.assert_array_equal(sub.images, ds.images[[0, 5]])
    np.testing.assert_array_equal(D.iter_images(ds, [5, 0]), ds.images[[5, 0]])


def test_silhouettes_recipe():
    spec = D.SynthSpec(class_count=4, per_class=30, seed=2, recipe="silhouettes")
    ds = D.synth_dataset(spec)
    np.testing.assert_array_equal(ds.images, D.synth_dataset(spec).images)
    # chroma 0 renders pure gray, so the channels agree pixel by pixel
    np.testing.assert_array_equal(ds.images[..., 0], ds.images[..., 1])
    means = ds.images.reshape(len(ds), -1).mean(axis=1)
    per_class = [means[ds.labels == c].mean() for c in range(4)]
    assert np.ptp(per_class) < 0.1  # brightness is not a class cue
    tinted = D.synth_dataset(D.SynthSpec(per_class=5, recipe="silhouettes", chroma=0.5))
    assert np.abs(tinted.images[..., 0] - tinted.images[..., 2]).max() > 0.05
    with pytest.raises(ValueError):
        D.synth_dataset(D.SynthSpec(recipe="silhouettes", chroma=1.2))
