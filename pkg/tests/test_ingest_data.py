import json

import numpy as np
import pytest

from dabench.data import load_dataset, predict_volume, slice_pool
from dabench.ingest import ingest_cases, preprocess_pair, read_external
from dabench.models import ModelSpec, build_model
from dabench.volume import Volume


def test_preprocess_moves_axial_axis_last_and_resamples(rng):
    image = rng.random((4, 10, 6)).astype(np.float32) * 100
    mask = (rng.random((4, 10, 6)) > 0.5).astype(np.uint8)
    vol, m = preprocess_pair(image, mask, spacing=(2.0, 1.0, 1.0), axial_axis=0)
    assert vol.shape == m.shape == (10, 6, 8)
    assert vol.spacing == (1.0, 1.0, 1.0)
    assert vol.data.min() == 0.0 and vol.data.max() == 1.0
    # nearest-neighbour along the 2 mm axis duplicates each input slice
    np.testing.assert_array_equal(m.data[:, :, 0], mask[0])
    np.testing.assert_array_equal(m.data[:, :, 1], mask[0])


def test_ingest_npy_cases(tmp_path, rng):
    for cid in ("p1", "p2"):
        np.save(tmp_path / f"{cid}_img.npy", rng.random((8, 8, 4)))
        np.save(tmp_path / f"{cid}_seg.npy", (rng.random((8, 8, 4)) > 0.5).astype(np.uint8))
    (tmp_path / "cases.csv").write_text(
        "id,domain,image,mask,spacing\n"
        "p1,siteA,p1_img.npy,p1_seg.npy,1 1 2\n"
        "p2,siteB,p2_img.npy,p2_seg.npy,1 1 2\n"
    )
    path = ingest_cases(tmp_path / "cases.csv", tmp_path / "out")
    ds = load_dataset(path)
    assert list(ds.domains) == ["siteA", "siteB"]
    v, m = ds.case("p2").load()
    assert v.shape == (8, 8, 8) and m.matches(v)
    assert json.loads(path.read_text())["generator"]["kind"] == "ingest"


def test_ingest_errors(tmp_path):
    np.save(tmp_path / "x.npy", np.zeros((4, 4, 4)))
    with pytest.raises(ValueError, match="spacing"):
        read_external(tmp_path / "x.npy")
    with pytest.raises(ValueError, match="adapter"):
        read_external(tmp_path / "x.mha", (1, 1, 1))
    (tmp_path / "cases.csv").write_text("id,image\nx,x.npy\n")
    with pytest.raises(ValueError, match="missing columns"):
        ingest_cases(tmp_path / "cases.csv", tmp_path / "out")


def test_slice_pool_and_subset(small_benchmark):
    ds = load_dataset(small_benchmark)
    cases = ds.domain_cases("A")[:2]
    pool = slice_pool(cases)
    assert len(pool) == 2 * 16
    sub = slice_pool(cases[:1], {cases[0].id: [0, 6, 12]})
    assert [s.source_index for s in sub] == [0, 6, 12]
    assert all(s.label is not None for s in sub)


def test_predict_volume_pads_odd_sizes():
    model = build_model(ModelSpec(depth=3, base_filters=4))
    vol = Volume(np.random.default_rng(0).random((18, 13, 3)))
    pred = predict_volume(model, vol)
    assert pred.shape == vol.shape
    assert set(np.unique(pred.data)) <= {0, 1}


def test_load_dataset_validation(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"schema_version": 1, "domains": ["A"], "cases": [
        {"id": "x", "domain": "B", "volume_path": "v.json", "mask_path": "m.json"}]}))
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "manifest.json")
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "none.json")
