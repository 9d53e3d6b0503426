"""Synthetic data: rendering determinism, long-tail, corruptions, few-shot."""
import numpy as np
import pytest

from protune.data import (
    CORRUPTION_KINDS,
    MAX_CLASSES,
    Dataset,
    corrupt,
    few_shot_subset,
    longtail_profile,
    make_longtail,
    synth_shapes,
)


def small_ds(n=80, c=10, shift=0.0, seed=0, hw=16):
    return synth_shapes(n, c, shift, seed=seed, hw=hw)


# ---------------------------------------------------------------------------
# rendering


def test_synth_shapes_layout():
    ds = small_ds(n=23, c=10)
    assert ds.images.shape == (23, 3, 16, 16)
    assert ds.images.dtype == np.float32
    assert ds.labels.dtype == np.int64
    assert np.array_equal(ds.labels, np.arange(23) % 10)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_synth_shapes_deterministic():
    a = small_ds(seed=5)
    b = small_ds(seed=5)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.labels, b.labels)
    c = small_ds(seed=6)
    assert a.images.tobytes() != c.images.tobytes()


def test_shift_changes_pixels_not_labels():
    base = small_ds(shift=0.0, seed=3)
    moved = synth_shapes(80, 10, 0.9, seed=3, hw=16)
    assert np.array_equal(base.labels, moved.labels)
    assert base.images.tobytes() != moved.images.tobytes()


def test_shift_rolls_channel_statistics():
    # at full shift the channel content is rolled r<-g<-b<-r, so per-channel
    # means of the shifted set track the rolled means of the base set
    base = synth_shapes(200, 10, 0.0, seed=7, hw=16)
    moved = synth_shapes(200, 10, 1.0, seed=7, hw=16)
    base_means = base.images.mean(axis=(0, 2, 3))
    moved_means = moved.images.mean(axis=(0, 2, 3))
    rolled = base_means[[1, 2, 0]] + 0.12  # brightness term; grating is zero-mean
    assert np.allclose(moved_means, rolled, atol=0.03)


def test_all_sixteen_classes_render():
    ds = synth_shapes(32, MAX_CLASSES, 0.0, seed=1, hw=16)
    assert set(ds.labels.tolist()) == set(range(16))
    per_class = [ds.images[ds.labels == c] for c in range(16)]
    # class geometry actually differs: no two class means coincide
    means = np.stack([p.mean(axis=0) for p in per_class])
    for i in range(16):
        for j in range(i + 1, 16):
            assert not np.allclose(means[i], means[j], atol=1e-3), (i, j)


def test_synth_shapes_validation():
    with pytest.raises(ValueError):
        synth_shapes(10, 1, 0.0, seed=0)
    with pytest.raises(ValueError):
        synth_shapes(10, MAX_CLASSES + 1, 0.0, seed=0)
    with pytest.raises(ValueError):
        synth_shapes(10, 4, 1.5, seed=0)
    with pytest.raises(ValueError):
        synth_shapes(0, 4, 0.0, seed=0)


def test_subset_is_a_copy():
    ds = small_ds(n=10, c=5)
    sub = ds.subset([0, 1])
    sub.images[0] = 0.0
    assert ds.images[0].max() > 0.0


# ---------------------------------------------------------------------------
# long-tail


def test_longtail_profile_closed_form():
    profile = longtail_profile(5000, 100, 10)
    assert profile == [5000, 2997, 1797, 1077, 646, 387, 232, 139, 83, 50]
    assert profile[0] == 5000 and profile[-1] == 50


def test_longtail_profile_identity_ratio():
    assert longtail_profile(300, 1.0, 6) == [300] * 6


def test_longtail_profile_validation():
    with pytest.raises(ValueError):
        longtail_profile(100, 0.5, 10)
    with pytest.raises(ValueError):
        longtail_profile(100, 10, 1)


def test_make_longtail_counts_and_ratio():
    ds = synth_shapes(2000, 10, 0.0, seed=2, hw=16)
    lt = make_longtail(ds, 100, seed=9)
    counts = lt.class_counts()
    assert counts.tolist() == longtail_profile(200, 100, 10)
    assert counts.max() == 200 and counts.min() == 2
    assert lt.meta["longtail_ir"] == 100.0


def test_make_longtail_samples_come_from_source():
    ds = small_ds(n=60, c=6)
    lt = make_longtail(ds, 10, seed=1)
    source = {ds.images[i].tobytes() for i in range(len(ds))}
    for i in range(len(lt)):
        assert lt.images[i].tobytes() in source
        # and the label still matches the source pairing
        j = next(k for k in range(len(ds)) if ds.images[k].tobytes() == lt.images[i].tobytes())
        assert ds.labels[j] == lt.labels[i]


def test_make_longtail_deterministic():
    ds = small_ds(n=100, c=5)
    a = make_longtail(ds, 20, seed=4)
    b = make_longtail(ds, 20, seed=4)
    assert a.images.tobytes() == b.images.tobytes()


def test_make_longtail_missing_class():
    ds = small_ds(n=40, c=4)
    hollowed = ds.subset(np.flatnonzero(ds.labels != 2))
    with pytest.raises(ValueError, match="class 2 has no samples"):
        make_longtail(hollowed, 10, seed=0)


# ---------------------------------------------------------------------------
# corruptions


def test_corrupt_labels_and_meta():
    ds = small_ds(n=16, c=4)
    out = corrupt(ds, "blur", 3, seed=0)
    assert np.array_equal(out.labels, ds.labels)
    assert out.meta["corruption"] == "blur" and out.meta["severity"] == 3
    assert out.images.min() >= 0.0 and out.images.max() <= 1.0


def test_corrupt_deterministic():
    ds = small_ds(n=16, c=4)
    a = corrupt(ds, "gaussian_noise", 2, seed=3)
    b = corrupt(ds, "gaussian_noise", 2, seed=3)
    assert a.images.tobytes() == b.images.tobytes()
    c = corrupt(ds, "gaussian_noise", 2, seed=4)
    assert a.images.tobytes() != c.images.tobytes()


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
def test_corruption_mse_strictly_increases(kind):
    ds = synth_shapes(48, 8, 0.0, seed=11, hw=16)
    mses = []
    for severity in range(1, 6):
        out = corrupt(ds, kind, severity, seed=5)
        mses.append(float(np.mean((out.images - ds.images) ** 2)))
    for lo, hi in zip(mses, mses[1:]):
        assert hi > lo, (kind, mses)


def test_contrast_fixes_uniform_images():
    flat = Dataset(
        images=np.full((2, 3, 8, 8), 0.4, dtype=np.float32),
        labels=np.zeros(2, dtype=np.int64),
        num_classes=2,
    )
    out = corrupt(flat, "contrast", 5, seed=0)
    assert np.allclose(out.images, 0.4, atol=1e-6)


def test_occlusion_paints_half_grey():
    ds = small_ds(n=8, c=4)
    out = corrupt(ds, "occlusion", 5, seed=2)
    changed = np.any(out.images != ds.images, axis=1)  # [N, H, W]
    assert changed.any()
    assert np.all(out.images.transpose(0, 2, 3, 1)[changed] == 0.5)


def test_occlusion_area_grows_with_severity():
    ds = small_ds(n=8, c=4)
    areas = []
    for severity in (1, 3, 5):
        out = corrupt(ds, "occlusion", severity, seed=2)
        areas.append(int(np.sum(np.any(out.images != ds.images, axis=1))))
    assert areas[0] < areas[1] < areas[2]


def test_corrupt_validation():
    ds = small_ds(n=8, c=4)
    with pytest.raises(ValueError, match="unknown corruption"):
        corrupt(ds, "fog", 1, seed=0)
    with pytest.raises(ValueError, match="severity"):
        corrupt(ds, "blur", 0, seed=0)
    with pytest.raises(ValueError, match="severity"):
        corrupt(ds, "blur", 6, seed=0)


# ---------------------------------------------------------------------------
# few-shot


def test_few_shot_counts():
    ds = small_ds(n=100, c=10)
    for k in (1, 2, 4):
        sub = few_shot_subset(ds, k, seed=0)
        assert np.all(sub.class_counts() == k)
        assert len(sub) == 10 * k


def test_few_shot_nesting():
    ds = small_ds(n=100, c=5)
    small = few_shot_subset(ds, 2, seed=7)
    large = few_shot_subset(ds, 4, seed=7)
    large_set = {large.images[i].tobytes() for i in range(len(large))}
    for i in range(len(small)):
        assert small.images[i].tobytes() in large_set


def test_few_shot_deterministic_and_seed_sensitive():
    ds = small_ds(n=100, c=5)
    a = few_shot_subset(ds, 3, seed=1)
    b = few_shot_subset(ds, 3, seed=1)
    assert a.images.tobytes() == b.images.tobytes()
    c = few_shot_subset(ds, 3, seed=2)
    assert a.images.tobytes() != c.images.tobytes()


def test_few_shot_k_too_large():
    ds = small_ds(n=20, c=10)  # 2 per class
    with pytest.raises(ValueError, match="fewer than k"):
        few_shot_subset(ds, 3, seed=0)
