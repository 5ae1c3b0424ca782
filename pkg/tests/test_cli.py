from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from volseg_eval.cli import main
from volseg_eval.harness import CaseRecord
from volseg_eval.metrics import MetricValue, RegionMetrics
from volseg_eval.volio import load_volume, save_volume
from volseg_eval.volume import ABNORMALITY, KIDNEY, REGIONS, REGION_KIDNEY

from .phantoms import kidney_with_lesion, synthetic_manifest, write_manifest


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def test_evaluate_small_manifest(tmp_path, runner) -> None:
    manifest = synthetic_manifest(tmp_path, n_cases=3)
    out = tmp_path / "run"
    result = runner.invoke(main, ["evaluate", "--manifest", str(manifest), "--out", str(out)])
    assert result.exit_code == 0, result.output
    cases = sorted(p.name for p in (out / "cases").glob("*.json"))
    assert cases == ["case000.json", "case001.json", "case002.json"]
    rows = _read_csv(out / "aggregate.csv")
    assert {r["metric"] for r in rows} == {"dice", "hd95_mm"}
    assert {r["region"] for r in rows} == set(REGIONS)
    assert all(float(r["mean"]) == 1.0 for r in rows if r["metric"] == "dice")
    assert "p5" in rows[0] and "p95" in rows[0]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_cases"] == 3 and summary["n_failed"] == 0
    figures = sorted(p.name for p in (out / "figures").glob("*.png"))
    assert len(figures) == 6  # 2 metrics x 3 regions


def test_evaluate_reports_failures_and_exits_nonzero(tmp_path, runner) -> None:
    manifest = synthetic_manifest(tmp_path, n_cases=2)
    rows = list(csv.DictReader(open(manifest, encoding="utf-8")))
    rows.append(
        {
            "case_id": "broken",
            "pred_path": str(tmp_path / "absent.rvol"),
            "ref_path": rows[0]["ref_path"],
            "dataset": "synthetic",
        }
    )
    write_manifest(manifest, rows)
    out = tmp_path / "run"
    result = runner.invoke(main, ["evaluate", "--manifest", str(manifest), "--out", str(out)])
    assert result.exit_code == 1
    # only the two successful cases get record files; the failure is listed
    assert len(list((out / "cases").glob("*.json"))) == 2
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_failed"] == 1
    assert summary["failed_cases"][0]["case_id"] == "broken"
    assert summary["failed_cases"][0]["reason"]

    ok = runner.invoke(
        main,
        ["evaluate", "--manifest", str(manifest), "--out", str(tmp_path / "run2"), "--allow-failures"],
    )
    assert ok.exit_code == 0


def test_evaluate_worker_counts_give_identical_reports(tmp_path, runner) -> None:
    manifest = synthetic_manifest(tmp_path, n_cases=4, identical=False)
    out1 = tmp_path / "w1"
    out2 = tmp_path / "w2"
    r1 = runner.invoke(main, ["evaluate", "--manifest", str(manifest), "--out", str(out1), "--workers", "1"])
    r2 = runner.invoke(main, ["evaluate", "--manifest", str(manifest), "--out", str(out2), "--workers", "3"])
    assert r1.exit_code == 0 and r2.exit_code == 0
    files1 = sorted(p.relative_to(out1) for p in out1.rglob("*") if p.is_file())
    files2 = sorted(p.relative_to(out2) for p in out2.rglob("*") if p.is_file())
    assert files1 == files2
    for rel in files1:
        assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes(), rel


def test_evaluate_rejects_missing_manifest(tmp_path, runner) -> None:
    result = runner.invoke(
        main, ["evaluate", "--manifest", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")]
    )
    assert result.exit_code != 0


def test_evaluate_no_figures_flag(tmp_path, runner) -> None:
    manifest = synthetic_manifest(tmp_path, n_cases=2)
    out = tmp_path / "run"
    result = runner.invoke(
        main, ["evaluate", "--manifest", str(manifest), "--out", str(out), "--no-figures"]
    )
    assert result.exit_code == 0
    assert not (out / "figures").exists()


def test_aggregate_csv_recomputable_from_case_records(tmp_path, runner) -> None:
    # no hidden state: re-aggregating the per-case JSONs reproduces the CSV
    from volseg_eval.harness import aggregate

    manifest = synthetic_manifest(tmp_path, n_cases=5, identical=False)
    out = tmp_path / "run"
    assert runner.invoke(
        main, ["evaluate", "--manifest", str(manifest), "--out", str(out), "--no-figures"]
    ).exit_code == 0
    records = [
        CaseRecord.from_json_dict(json.loads(p.read_text()))
        for p in sorted((out / "cases").glob("*.json"))
    ]
    recomputed = aggregate(records)
    rows = _read_csv(out / "aggregate.csv")
    assert len(rows) == len(recomputed)
    for row, agg in zip(rows, recomputed):
        assert row["dataset"] == agg.dataset
        assert row["region"] == agg.region
        assert row["metric"] == agg.metric
        assert float(row["mean"]) == agg.mean
        assert float(row["sd"]) == agg.sd
        assert float(row["p95"]) == agg.p95


# ---------------------------------------------------------------------------
# postprocess
# ---------------------------------------------------------------------------


def test_postprocess_removes_detached_lesion(tmp_path, runner) -> None:
    v = kidney_with_lesion()
    labels = v.labels.copy()
    labels[0:2, 0:2, 0:2] = ABNORMALITY  # small detached blob
    dirty = v.with_labels(labels)
    in_path = tmp_path / "pred.nii.gz"
    save_volume(in_path, dirty)
    result = runner.invoke(main, ["postprocess", "--volume", str(in_path)])
    assert result.exit_code == 0, result.output
    out_path = tmp_path / "pred_postprocessed.nii.gz"
    assert out_path.exists()
    cleaned = load_volume(out_path)
    assert not cleaned.labels[0:2, 0:2, 0:2].any()
    report = json.loads((tmp_path / "pred_postprocessed.nii.gz.report.json").read_text())
    assert report["removed_voxel_count"] == 8
    actions = {d["action"] for d in report["decisions"]}
    assert "removed-detached" in actions


def test_postprocess_clean_volume_is_fixed_point(tmp_path, runner) -> None:
    v = kidney_with_lesion()
    in_path = tmp_path / "pred.rvol"
    save_volume(in_path, v)
    out_path = tmp_path / "clean.rvol"
    result = runner.invoke(
        main, ["postprocess", "--volume", str(in_path), "--out", str(out_path)]
    )
    assert result.exit_code == 0
    assert np.array_equal(load_volume(out_path).labels, v.labels)


def test_postprocess_non_canonical_needs_scheme(tmp_path, runner) -> None:
    v = kidney_with_lesion()
    labels = np.where(v.labels == ABNORMALITY, 3, v.labels).astype(np.uint8)
    in_path = tmp_path / "split.rvol"
    save_volume(in_path, v.with_labels(labels))
    bare = runner.invoke(main, ["postprocess", "--volume", str(in_path)])
    assert bare.exit_code != 0
    assert "canonical" in bare.output
    with_scheme = runner.invoke(
        main, ["postprocess", "--volume", str(in_path), "--scheme", "kits"]
    )
    assert with_scheme.exit_code == 0, with_scheme.output


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------


def test_detect_outputs_outcomes(tmp_path, runner) -> None:
    v = kidney_with_lesion()
    pred_path = tmp_path / "pred.rvol"
    ref_path = tmp_path / "ref.rvol"
    save_volume(pred_path, v)
    save_volume(ref_path, v)
    result = runner.invoke(
        main, ["detect", "--pred", str(pred_path), "--ref", str(ref_path)]
    )
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output)
    assert [o["threshold"] for o in payload["outcomes"]] == [0.0, 0.5]
    assert all(o["precision"] == 1.0 for o in payload["outcomes"])


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------


def _write_record_dir(root: Path, dice_by_case: dict, dataset="ds") -> None:
    cases = root / "cases"
    cases.mkdir(parents=True, exist_ok=True)
    for case_id, value in dice_by_case.items():
        metrics = {
            r: RegionMetrics(
                region=r,
                dice=MetricValue.of(value),
                hd95_mm=MetricValue.of(1.0),
                pred_volume_mm3=1.0,
                ref_volume_mm3=1.0,
            )
            for r in REGIONS
        }
        record = CaseRecord(case_id=case_id, dataset=dataset, metadata={}, regions=metrics)
        (cases / f"{case_id}.json").write_text(json.dumps(record.to_json_dict()))


def _plan(tmp_path, stages, models) -> Path:
    plan = {
        "schema_version": "volseg-plan-v1",
        "alpha": 0.05,
        "metric": "dice",
        "gate": "all",
        "models": models,
        "stages": stages,
    }
    path = tmp_path / "plan.json"
    path.write_text(json.dumps(plan))
    return path


def test_stats_dominant_model_rejects(tmp_path, runner) -> None:
    root = tmp_path / "records"
    _write_record_dir(root / "a", {f"c{i}": 0.9 + i / 100 for i in range(5)})
    _write_record_dir(root / "b", {f"c{i}": 0.5 + i / 100 for i in range(5)})
    plan = _plan(
        tmp_path,
        [{"name": "s1", "candidate": "a", "baseline": "b",
          "hypotheses": [{"dataset": "ds", "region": REGION_KIDNEY}]}],
        {"a": "a", "b": "b"},
    )
    result = runner.invoke(main, ["stats", "--records", str(root), "--plan", str(plan)])
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output)
    hyp = payload["stages"][0]["hypotheses"][0]
    assert hyp["reject"] is True
    assert hyp["p_raw"] == pytest.approx(1 / 252)  # 1 / C(10, 5)
    assert hyp["method"] == "exact"


def test_stats_identical_sets_no_rejection(tmp_path, runner) -> None:
    root = tmp_path / "records"
    values = {f"c{i}": 0.6 + i / 50 for i in range(6)}
    _write_record_dir(root / "a", values)
    _write_record_dir(root / "b", values)
    plan = _plan(
        tmp_path,
        [{"name": "s1", "candidate": "a", "baseline": "b",
          "hypotheses": [{"dataset": "ds", "region": REGION_KIDNEY}]}],
        {"a": "a", "b": "b"},
    )
    result = runner.invoke(main, ["stats", "--records", str(root), "--plan", str(plan)])
    payload = json.loads(result.output)
    assert payload["stages"][0]["hypotheses"][0]["reject"] is False


def test_stats_gated_stage_skipped(tmp_path, runner) -> None:
    root = tmp_path / "records"
    _write_record_dir(root / "weak", {f"c{i}": 0.4 + i / 100 for i in range(5)})
    _write_record_dir(root / "strong", {f"c{i}": 0.9 + i / 100 for i in range(5)})
    _write_record_dir(root / "other", {f"c{i}": 0.1 + i / 100 for i in range(5)})
    plan = _plan(
        tmp_path,
        [
            {"name": "s1", "candidate": "weak", "baseline": "strong",
             "hypotheses": [{"dataset": "ds", "region": REGION_KIDNEY}]},
            {"name": "s2", "candidate": "weak", "baseline": "other", "requires": "s1",
             "hypotheses": [{"dataset": "ds", "region": REGION_KIDNEY}]},
        ],
        {"weak": "weak", "strong": "strong", "other": "other"},
    )
    out_path = tmp_path / "stats.json"
    result = runner.invoke(
        main, ["stats", "--records", str(root), "--plan", str(plan), "--out", str(out_path)]
    )
    assert result.exit_code == 0, result.output
    payload = json.loads(out_path.read_text())
    assert payload["stages"][0]["hypotheses"][0]["reject"] is False
    assert payload["stages"][1]["skipped"] is True
    assert payload["stages"][1]["hypotheses"] == []


def test_stats_requires_known_models(tmp_path, runner) -> None:
    root = tmp_path / "records"
    _write_record_dir(root / "a", {"c1": 0.5})
    plan = _plan(
        tmp_path,
        [{"name": "s1", "candidate": "a", "baseline": "ghost",
          "hypotheses": [{"dataset": "ds", "region": REGION_KIDNEY}]}],
        {"a": "a", "b": "a"},
    )
    result = runner.invoke(main, ["stats", "--records", str(root), "--plan", str(plan)])
    assert result.exit_code != 0


# ---------------------------------------------------------------------------
# subgroup
# ---------------------------------------------------------------------------


def test_subgroup_by_sex(tmp_path, runner) -> None:
    manifest = synthetic_manifest(tmp_path, n_cases=6, identical=False)
    run_dir = tmp_path / "run"
    assert runner.invoke(
        main, ["evaluate", "--manifest", str(manifest), "--out", str(run_dir), "--no-figures"]
    ).exit_code == 0
    out = tmp_path / "sub"
    result = runner.invoke(
        main, ["subgroup", "--records", str(run_dir), "--key", "sex", "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    rows = _read_csv(out / "subgroup_sex.csv")
    assert {r["group"] for r in rows} == {"F", "M"}
    svgs = sorted(p.name for p in out.glob("*.svg"))
    assert len(svgs) == 6  # 2 metrics x 3 regions
    svg = (out / svgs[0]).read_text()
    assert svg.count("<rect x=") == 2  # one box per sex


def test_subgroup_age_bins(tmp_path, runner) -> None:
    manifest = synthetic_manifest(tmp_path, n_cases=6, identical=False)
    run_dir = tmp_path / "run"
    runner.invoke(main, ["evaluate", "--manifest", str(manifest), "--out", str(run_dir), "--no-figures"])
    out = tmp_path / "sub"
    result = runner.invoke(
        main,
        ["subgroup", "--records", str(run_dir), "--key", "age",
         "--age-bins", "30,50,70,90", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    rows = _read_csv(out / "subgroup_age.csv")
    groups = {r["group"] for r in rows}
    assert groups <= {"30-50", "50-70", "70-90", "<30", ">=90"}


def test_subgroup_unknown_key_rejected(tmp_path, runner) -> None:
    manifest = synthetic_manifest(tmp_path, n_cases=2)
    run_dir = tmp_path / "run"
    runner.invoke(main, ["evaluate", "--manifest", str(manifest), "--out", str(run_dir), "--no-figures"])
    result = runner.invoke(
        main, ["subgroup", "--records", str(run_dir), "--key", "species", "--out", str(tmp_path / "s")]
    )
    assert result.exit_code != 0


# ---------------------------------------------------------------------------
# crop
# ---------------------------------------------------------------------------


def test_crop_writes_volume_and_box(tmp_path, runner) -> None:
    v = kidney_with_lesion(dims=(40, 40, 40))
    lung = v.with_labels((np.indices((40, 40, 40))[2] >= 35).astype(np.uint8))
    bladder = v.with_labels((np.indices((40, 40, 40))[2] < 3).astype(np.uint8))
    for name, vol in (("v.rvol", v), ("lung.rvol", lung), ("bladder.rvol", bladder)):
        save_volume(tmp_path / name, vol)
    out_path = tmp_path / "cropped.rvol"
    result = runner.invoke(
        main,
        ["crop", "--volume", str(tmp_path / "v.rvol"),
         "--lung-mask", str(tmp_path / "lung.rvol"),
         "--bladder-mask", str(tmp_path / "bladder.rvol"),
         "--margin-mm", "0", "--out", str(out_path)],
    )
    assert result.exit_code == 0, result.output
    box = json.loads(result.output.strip().splitlines()[-1])
    assert box["lo"] == [0, 0, 0]
    assert box["hi"] == [39, 39, 39]
    assert load_volume(out_path).dims == (40, 40, 40)


def test_crop_empty_landmark_fails(tmp_path, runner) -> None:
    v = kidney_with_lesion(dims=(20, 20, 20))
    empty = v.with_labels(np.zeros((20, 20, 20), dtype=np.uint8))
    save_volume(tmp_path / "v.rvol", v)
    save_volume(tmp_path / "lung.rvol", v)
    save_volume(tmp_path / "bladder.rvol", empty)
    result = runner.invoke(
        main,
        ["crop", "--volume", str(tmp_path / "v.rvol"),
         "--lung-mask", str(tmp_path / "lung.rvol"),
         "--bladder-mask", str(tmp_path / "bladder.rvol"),
         "--out", str(tmp_path / "c.rvol")],
    )
    assert result.exit_code != 0
    assert "landmark" in result.output.lower()
