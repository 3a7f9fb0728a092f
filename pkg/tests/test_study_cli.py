import json
import subprocess
import sys

import pytest

from dabench.cli import main
from dabench.evaluation import RecordStore
from dabench.metrics import dice
from dabench.study import ManifestError, RunLedger, Study, validate_manifest
from dabench.synth import DEFAULT_DOMAINS, build_benchmark
from dabench.volume import Mask, save_native

TINY = {"epochs": 1, "iterations_per_epoch": 1, "batch_size": 2, "crop_size": [16, 16], "lr_drop_epoch": 1}


@pytest.fixture(scope="module")
def tiny_bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("study")
    build_benchmark(DEFAULT_DOMAINS, cases_per_domain=4, shape=(16, 16, 16), seed=1, out_dir=root / "bench")
    return root


def write_manifest(root, name="m.json", **fields):
    doc = {"dataset": "bench/manifest.json", "model": "desk", "profile": "desk",
           "overrides": {"source": TINY, "finetune": TINY},
           "strategies": ["first_layers", "last_layers"], "levels": ["1 scan", "1/6"],
           "seeds": [0, 1], "adapt_scans": 1, "output_dir": f"out_{name[:-5]}"}
    doc.update(fields)
    doc = {k: v for k, v in doc.items() if v is not None}
    path = root / name
    path.write_text(json.dumps(doc))
    return path


def test_manifest_defaults(tiny_bench):
    m = validate_manifest(write_manifest(tiny_bench))
    assert m.domains == ["A", "B", "C"]
    assert m.folds == 3 and m.tolerance_mm == 1.0
    assert m.finetune_config.epochs == 1 and m.finetune_config.lr_initial == 1e-2
    assert [lv.label for lv in m.levels] == ["1 scan", "1/6"]


def test_manifest_rejects_unknown_strategy(tiny_bench):
    with pytest.raises(ManifestError) as info:
        validate_manifest(write_manifest(tiny_bench, strategies=["middle_layers"]))
    assert info.value.field == "strategies"
    assert "middle_layers" in str(info.value)


def test_manifest_requires_seeds(tiny_bench):
    with pytest.raises(ManifestError, match="seeds nonempty"):
        validate_manifest(write_manifest(tiny_bench, seeds=None))
    with pytest.raises(ManifestError, match="seeds nonempty"):
        validate_manifest(write_manifest(tiny_bench, seeds=[]))


@pytest.mark.parametrize("fields, field_name", [
    ({"domains": ["A"]}, "domains"),
    ({"domains": ["A", "Z"]}, "domains"),
    ({"levels": ["1/5 scans"]}, "levels"),
    ({"colour": "blue"}, "colour"),
    ({"adapt_scans": 4}, "adapt_scans"),
])
def test_manifest_schema_errors(tiny_bench, fields, field_name):
    with pytest.raises(ManifestError) as info:
        validate_manifest(write_manifest(tiny_bench, **fields))
    assert info.value.field == field_name


def test_manifest_missing_dataset(tiny_bench):
    with pytest.raises(FileNotFoundError):
        validate_manifest(write_manifest(tiny_bench, dataset="nowhere/manifest.json"))


@pytest.fixture(scope="module")
def finished_study(tiny_bench):
    manifest = validate_manifest(write_manifest(tiny_bench, name="full.json"))
    outcomes = Study(manifest, threads=1).run()
    return manifest, outcomes


def test_study_counts_runs(finished_study):
    manifest, outcomes = finished_study
    assert all(o.status == "ok" for o in outcomes), [o for o in outcomes if o.status != "ok"]
    finetunes = [o for o in outcomes if o.step.startswith("finetune/")]
    # 2 strategies x 2 levels x 2 seeds x 6 directed pairs
    assert len(finetunes) == 48
    records = RecordStore(manifest.output_dir / "records.jsonl").read()
    assert len({(r.source_domain, r.target_domain, r.method, r.availability, r.seed)
                for r in records if r.availability}) == 48
    for name in ("transfer_matrix.csv", "trend.csv", "winners.csv"):
        assert (manifest.output_dir / "report" / name).exists()
    prov = json.loads(next(manifest.output_dir.glob("finetune/*/*/*/seed0/model.ckpt.provenance.json")).read_text())
    assert prov["base_checkpoint_hash"]


def test_study_resume_skips_completed_steps(finished_study):
    manifest, _ = finished_study
    n_before = len(RunLedger(manifest.output_dir).entries())
    outcomes = Study(manifest, threads=1).run()
    assert {o.status for o in outcomes} == {"skipped"}
    assert len(RunLedger(manifest.output_dir).entries()) == n_before


def test_study_reruns_step_with_tampered_output(finished_study):
    manifest, _ = finished_study
    target = next(manifest.output_dir.glob("finetune/A_B/first_layers/1_6/seed0/records.jsonl"))
    original = target.read_bytes()
    target.write_text("")
    outcomes = Study(manifest, threads=1).run(("finetune",), {"source": "A", "target": "B",
                                                              "strategy": "first_layers"})
    status = {o.step: o.status for o in outcomes}
    assert status["finetune/A_B/first_layers/1_6/seed0"] == "ok"
    assert status["finetune/A_B/first_layers/1_6/seed1"] == "skipped"
    assert target.read_bytes() == original


def test_cli_report_missing_store(tmp_path, capsys):
    code = main(["report", "--records", str(tmp_path / "absent.jsonl")])
    err = capsys.readouterr().err.strip()
    assert code != 0
    assert len(err.splitlines()) == 1
    assert str(tmp_path / "absent.jsonl") in err


def test_cli_json_errors(tmp_path, capsys):
    code = main(["report", "--records", str(tmp_path / "absent.jsonl"), "--format", "json"])
    doc = json.loads(capsys.readouterr().err)
    assert code == 2 and doc["error"] == "FileNotFoundError"


def test_cli_manifest_error_exit(tiny_bench, capsys):
    path = write_manifest(tiny_bench, name="bad.json", strategies=["middle_layers"])
    assert main(["study", "--manifest", str(path)]) == 2
    assert "strategies" in capsys.readouterr().err


def test_cli_synth_rerun_is_byte_identical(tmp_path, capsys):
    args = ["--seed", "7", "--cases-per-domain", "1", "--shape", "16", "16", "16"]
    assert main(["synth", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["synth", "--out", str(tmp_path / "a2"), *args]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert any(f.name == "manifest.json" for f in files)
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "a2" / rel).read_bytes()
    first = (tmp_path / "a" / "manifest.json").read_bytes()
    assert main(["synth", "--out", str(tmp_path / "a"), *args]) == 0
    assert (tmp_path / "a" / "manifest.json").read_bytes() == first


def test_cli_evaluate(tmp_path, capsys):
    import numpy as np

    a = np.zeros((6, 6, 6), np.uint8)
    a[1:4, 1:4, 1:4] = 1
    b = np.roll(a, 1, axis=0)
    save_native(Mask(a), tmp_path / "pred")
    save_native(Mask(b), tmp_path / "gt")
    (tmp_path / "pairs.csv").write_text("case_id,prediction,ground_truth\nc1,pred.json,gt.json\n")
    assert main(["evaluate", "--pairs", str(tmp_path / "pairs.csv"), "--format", "json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[0]["case_id"] == "c1"
    assert float(rows[0]["dice"]) == pytest.approx(dice(Mask(a), Mask(b)).value)
    assert float(rows[0]["surface_dice"]) == 1.0


def test_cli_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "dabench.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth", "ingest", "train-source", "oracle", "transfer", "finetune", "evaluate", "report",
                "study"):
        assert cmd in out.stdout
