import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from expertnas.data import (
    N_GROUPS,
    DatasetSpec,
    EmptyDatasetError,
    EmptySubsetError,
    GroupCountError,
    GroupRangeError,
    MalformedRowError,
    MissingImageError,
    UnknownSplitError,
    apply_lighting,
    dataset_fingerprint,
    generate,
    ingest_external,
    load_dataset,
    poorly_lit_subset,
    render_scene,
    save_dataset,
)

TINY = DatasetSpec(n_train=60, n_val=40, n_test=80, seed=5)


def test_same_seed_gives_identical_dataset():
    a, b = generate(TINY), generate(TINY)
    for name in ("train", "val", "test"):
        assert a[name].images.tobytes() == b[name].images.tobytes()
        assert a[name].lighting.tobytes() == b[name].lighting.tobytes()
    assert dataset_fingerprint(a) == dataset_fingerprint(b)


def test_different_seed_changes_dataset():
    assert dataset_fingerprint(generate(TINY)) != dataset_fingerprint(generate(DatasetSpec(60, 40, 80, seed=6)))


def test_lighting_scales_pre_noise_scene_exactly():
    scene = render_scene(16, 1, 0.4, np.random.default_rng(0))
    np.testing.assert_array_equal(apply_lighting(scene, 0.3), 0.3 * apply_lighting(scene, 1.0))


def test_empirical_minority_matches_declared():
    ds = generate(DatasetSpec(n_train=400, n_val=200, n_test=400, seed=1))
    for sp in ds.splits.values():
        counts = np.bincount(sp.groups, minlength=N_GROUPS + 1)[1:]
        assert int(np.flatnonzero(counts == counts.min())[-1]) + 1 == ds.spec.minority_group == 10


def test_default_test_split_counts():
    c = DatasetSpec().counts("test")
    assert c.sum() == 2000
    # 2000 * 1/9.5 = 210.53 per light group, 105.26 for the minority; the 5 leftover go to groups 1..5
    assert c.tolist() == [211] * 5 + [210] * 4 + [105]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5000), st.lists(st.floats(0.1, 5.0), min_size=10, max_size=10))
def test_counts_sum_to_split_size(n, weights):
    spec = DatasetSpec(n_train=n, group_weights=weights)
    c = spec.counts("train")
    assert c.sum() == n and np.all(c >= 0)


def test_split_fields_well_formed():
    ds = generate(TINY)
    ids = np.concatenate([s.ids for s in ds.splits.values()])
    assert len(np.unique(ids)) == len(ids)
    for sp in ds.splits.values():
        assert sp.images.shape == (len(sp), 16, 16, 1)
        assert sp.images.min() >= 0 and sp.images.max() <= 1
        assert set(np.unique(sp.labels)) <= {0, 1}
        assert np.all((sp.lighting > 0) & (sp.lighting <= 1))
        assert set(np.unique(sp.groups)) == set(range(1, 11))


def test_group_count_validation():
    with pytest.raises(GroupCountError):
        generate(DatasetSpec(group_weights=[1.0] * 9))
    with pytest.raises(GroupCountError):
        generate(DatasetSpec(n_groups=8))


def test_poorly_lit_subset_boundaries():
    ds = generate(TINY)
    with pytest.raises(EmptySubsetError):
        poorly_lit_subset(ds, float(ds.test.lighting.min()))
    assert len(poorly_lit_subset(ds, 1.0)) == len(ds.test)
    sub = poorly_lit_subset(ds, 0.5)
    assert len(sub) == int(np.sum(ds.test.lighting < 0.5))
    assert np.all(sub.lighting < 0.5)


def test_archive_round_trip(tmp_path):
    ds = generate(TINY)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert dataset_fingerprint(back) == dataset_fingerprint(ds)
    assert back.spec == ds.spec


def test_load_missing_archive(tmp_path):
    with pytest.raises(MissingImageError):
        load_dataset(tmp_path / "nothing")


def _write_manifest(tmp_path, rows):
    path = tmp_path / "manifest.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_path", "label", "group", "lighting", "split"])
        w.writerows(rows)
    return path


def _image(tmp_path, name, value):
    Image.fromarray(np.full((4, 4), value, dtype=np.uint8), mode="L").save(tmp_path / name)
    return name


def test_ingest_valid_manifest(tmp_path):
    rows = [[_image(tmp_path, "a.png", 0), 0, 1, 0.25, "train"],
            [_image(tmp_path, "b.png", 255), 1, 10, 0.75, "test"],
            [_image(tmp_path, "c.png", 51), 1, 4, 1.0, "test"]]
    ds = ingest_external(_write_manifest(tmp_path, rows))
    assert len(ds) == 3
    assert ds.train.labels.tolist() == [0] and ds.train.groups.tolist() == [1]
    assert ds.test.groups.tolist() == [10, 4]
    assert ds.test.lighting.tolist() == [0.75, 1.0]
    assert ds.test.images[0].max() == 1.0 and ds.test.images[1, 0, 0, 0] == pytest.approx(0.2)


def test_ingest_empty_manifest(tmp_path):
    (tmp_path / "m.csv").write_text("")
    with pytest.raises(EmptyDatasetError):
        ingest_external(tmp_path / "m.csv")
    with pytest.raises(EmptyDatasetError):
        ingest_external(_write_manifest(tmp_path, []))


def test_ingest_bad_group_names_rows(tmp_path):
    img = _image(tmp_path, "a.png", 9)
    rows = [[img, 0, 1, 0.5, "train"], [img, 0, 11, 0.5, "train"], [img, 1, 0, 0.5, "val"]]
    with pytest.raises(GroupRangeError) as exc:
        ingest_external(_write_manifest(tmp_path, rows))
    assert exc.value.rows == [3, 4]
    assert "3" in str(exc.value)


def test_ingest_other_errors(tmp_path):
    img = _image(tmp_path, "a.png", 9)
    with pytest.raises(MissingImageError):
        ingest_external(_write_manifest(tmp_path, [["missing.png", 0, 1, 0.5, "train"]]))
    with pytest.raises(UnknownSplitError):
        ingest_external(_write_manifest(tmp_path, [[img, 0, 1, 0.5, "holdout"]]))
    with pytest.raises(MalformedRowError):
        ingest_external(_write_manifest(tmp_path, [[img, "x", 1, 0.5, "train"]]))
    with pytest.raises(MissingImageError):
        ingest_external(tmp_path / "no_manifest.csv")
