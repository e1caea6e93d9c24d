import numpy as np
import pytest

from urbanalign import calibration as cal
from urbanalign import synthdata as sd


def small_city(seed=0, **kw):
    params = dict(region_count=12, m_max=2, num_indicators=2, latent_dim=2,
                  image_size=(16, 16), city="tiny")
    params.update(kw)
    return sd.generate_synthetic_city(seed, **params)


def dataset_bytes(ds):
    chunks = []
    for r in ds.regions:
        chunks.append(r.satellite.tobytes())
        chunks.append(r.sat_text.encode())
        chunks.append(r.targets.tobytes())
        for v in r.street_views:
            chunks.append(v.image.tobytes())
            chunks.append(v.text.encode())
            chunks.append(np.array([v.lat, v.lon]).tobytes())
    return b"".join(chunks)


def test_same_seed_byte_identical():
    assert dataset_bytes(small_city(5)) == dataset_bytes(small_city(5))
    assert dataset_bytes(small_city(5)) != dataset_bytes(small_city(6))


def test_noiseless_targets_linear_in_latents():
    ds = small_city(1, sigma=0.0)
    u = ds.plant.latents
    y = sd.dataset_targets(ds)
    coef, *_ = np.linalg.lstsq(u, y, rcond=None)
    resid = y - u @ coef
    ss_res = (resid**2).sum(axis=0)
    ss_tot = ((y - y.mean(axis=0)) ** 2).sum(axis=0)
    r2 = 1.0 - ss_res / ss_tot
    np.testing.assert_allclose(r2, 1.0, atol=1e-9)
    np.testing.assert_allclose(ds.plant.r2_ceiling, 1.0)


def test_analytic_ceiling_formula():
    ds = small_city(2, sigma=0.5)
    a = ds.plant.spec.indicator_map
    expected = (a**2).sum(axis=1) / ((a**2).sum(axis=1) + 0.25)
    np.testing.assert_allclose(ds.plant.r2_ceiling, expected, atol=1e-12)
    assert np.all(ds.plant.r2_ceiling < 1.0)


def test_generator_validation():
    with pytest.raises(ValueError, match="at least 10"):
        sd.generate_synthetic_city(0, region_count=5)
    with pytest.raises(ValueError, match="invalid"):
        small_city(0, num_indicators=0)


def test_region_structure():
    ds = small_city(3, m_max=3)
    assert len(ds.regions) == 12
    for r in ds.regions:
        assert r.satellite.shape == (16, 16, 3)
        assert 0 <= len(r.street_views) <= 3
        assert -90 <= r.lat <= 90 and -180 <= r.lon <= 180
        assert r.targets.shape == (2,) and r.target_present.all()
        for v in r.street_views:
            assert v.image.shape == (16, 16, 3)
            parsed = cal.parse_caption_fractions(v.text)
            assert parsed.sum() > 0  # captions carry planted fractions
    # street view counts vary across regions
    counts = {len(r.street_views) for r in ds.regions}
    assert len(counts) > 1


def test_zero_street_view_cap():
    ds = small_city(4, m_max=0)
    assert all(not r.street_views for r in ds.regions)


def test_planted_fractions_visible_to_segmenter():
    ds = small_city(7)
    region = ds.regions[0]
    seg = cal.mock_segmenter(region.satellite)
    planted = sd.planted_fractions(ds.plant.latents[0], ds.plant.spec)
    np.testing.assert_allclose(seg.values, planted, atol=2.0 / (16 * 16))


def test_shared_plant_reuses_structure():
    base = small_city(8)
    other = small_city(9, plant=base.plant.spec, city="other")
    np.testing.assert_array_equal(
        base.plant.spec.indicator_map, other.plant.spec.indicator_map
    )
    assert dataset_bytes(base) != dataset_bytes(other)  # different latents


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def test_split_proportions_100():
    split = sd.split_dataset(100, seed=0)
    assert len(split["train"]) == 70
    assert len(split["val"]) == 10
    assert len(split["test"]) == 20


def test_split_reproducible_disjoint_exhaustive():
    a = sd.split_dataset(37, seed=3)
    b = sd.split_dataset(37, seed=3)
    assert a == b
    union = sorted(a["train"] + a["val"] + a["test"])
    assert union == list(range(37))
    assert sd.split_dataset(37, seed=4) != a


def test_split_too_few_regions():
    with pytest.raises(ValueError, match="at least 10"):
        sd.split_dataset(9, seed=0)


# ---------------------------------------------------------------------------
# indicator preprocessing
# ---------------------------------------------------------------------------


def test_indicator_standardization_train_stats():
    rng = np.random.default_rng(0)
    y = rng.normal(3.0, 2.0, size=(40, 2))
    train = list(range(28))
    tf = sd.IndicatorTransform.fit(y, [False, False], train)
    z = tf.forward(y)
    np.testing.assert_allclose(z[train].mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z[train].std(axis=0), 1.0, atol=1e-12)


def test_indicator_log_flag():
    y = np.full((12, 1), np.e)
    tf = sd.IndicatorTransform.fit(y, [True], list(range(12)))
    # value e maps to 1 before standardization
    np.testing.assert_allclose(tf.means, [1.0], atol=1e-15)


def test_indicator_round_trip():
    rng = np.random.default_rng(1)
    y = np.abs(rng.normal(5.0, 1.0, size=(20, 3))) + 0.1
    tf = sd.IndicatorTransform.fit(y, [True, False, True], list(range(14)))
    back = tf.inverse(tf.forward(y))
    np.testing.assert_allclose(back, y, atol=1e-10)


def test_indicator_log_rejects_nonpositive():
    y = np.array([[1.0], [-2.0]])
    with pytest.raises(ValueError, match="nonpositive"):
        sd.IndicatorTransform.fit(y, [True], [0, 1])


# ---------------------------------------------------------------------------
# disk round trip
# ---------------------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    ds = small_city(11)
    sd.save_dataset(ds, tmp_path / "city")
    loaded = sd.load_dataset(tmp_path / "city")
    assert loaded.city == ds.city
    assert loaded.indicator_names == ds.indicator_names
    assert loaded.split == ds.split
    assert loaded.image_size == ds.image_size
    np.testing.assert_array_equal(loaded.plant.latents, ds.plant.latents)
    np.testing.assert_array_equal(loaded.plant.r2_ceiling, ds.plant.r2_ceiling)
    np.testing.assert_array_equal(
        loaded.plant.spec.indicator_map, ds.plant.spec.indicator_map
    )
    for a, b in zip(loaded.regions, ds.regions):
        assert a.region_id == b.region_id
        np.testing.assert_array_equal(a.targets, b.targets)
        assert a.sat_text == b.sat_text
        # images were quantized at generation, so PNG round trip is exact
        np.testing.assert_array_equal(a.satellite, b.satellite)
        assert len(a.street_views) == len(b.street_views)
        for va, vb in zip(a.street_views, b.street_views):
            np.testing.assert_array_equal(va.image, vb.image)
            assert (va.lat, va.lon, va.text) == (vb.lat, vb.lon, vb.text)


def test_save_is_deterministic(tmp_path):
    import hashlib

    def tree_hash(root):
        h = hashlib.sha256()
        for p in sorted(root.rglob("*")):
            if p.is_file():
                h.update(p.name.encode())
                h.update(p.read_bytes())
        return h.hexdigest()

    sd.save_dataset(small_city(12), tmp_path / "a")
    sd.save_dataset(small_city(12), tmp_path / "b")
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")


def test_load_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest"):
        sd.load_dataset(tmp_path)
