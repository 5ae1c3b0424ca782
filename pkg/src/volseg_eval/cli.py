"""Command-line surface: batch evaluation, post-processing, statistics, reports.

Subcommands: evaluate, postprocess, detect, stats, subgroup, crop.
All file schemas are documented in docs/formats.md. Reports are
deterministic: identical configuration and inputs produce byte-identical
outputs regardless of the worker count.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click

from . import volio
from .detection import match_lesions
from .errors import VolsegError
from .harness import (
    AGGREGATE_METRICS,
    CaseRecord,
    EvaluationOptions,
    aggregate,
    evaluate_case,
    read_manifest,
)
from .morphology import connected_components, roi_crop
from .plots import save_boxplot_figure, write_boxplot_svg
from .postprocess import PostprocessConfig, postprocess
from .stats import (
    GATE_ALL,
    GATE_ANY,
    PlanHypothesis,
    PlanStage,
    run_plan,
    subgroup_summarize,
)
from .volume import (
    REGIONS,
    REGION_ABNORMALITY,
    SCHEMES,
    extract_region,
    foreground_mask,
    harmonize_labels,
)

log = logging.getLogger("volseg_eval")

RUN_SCHEMA_VERSION = "volseg-run-v1"
STATS_SCHEMA_VERSION = "volseg-stats-v1"
PLAN_SCHEMA_VERSION = "volseg-plan-v1"

DEFAULT_AGE_BINS = (20, 30, 40, 50, 60, 70, 80, 90)

METRIC_LABELS = {"dice": "Dice", "hd95_mm": "HD95 (mm)"}


def _dump_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name)


def _parse_float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(",") if part.strip() != "")
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}") from exc


@click.group()
def main() -> None:
    """Evaluation and post-processing toolkit for 3D kidney/abnormality volumes."""
    level = os.environ.get("VOLSEG_EVAL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _evaluate_task(args):
    entry, options = args
    return evaluate_case(entry, options)


def _run_cases(entries, options, workers):
    if workers <= 1 or len(entries) <= 1:
        records = [evaluate_case(e, options) for e in entries]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_evaluate_task, [(e, options) for e in entries]))
    return sorted(records, key=lambda r: r.case_id)


def _write_aggregate_csv(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [
                "dataset",
                "region",
                "metric",
                "n_defined",
                "n_undefined",
                "mean",
                "sd",
                "median",
                "q1",
                "q3",
                "whisker_lo",
                "whisker_hi",
                "p5",
                "p95",
            ]
        )
        for r in rows:
            writer.writerow(
                [
                    r.dataset,
                    r.region,
                    r.metric,
                    r.n_defined,
                    r.n_undefined,
                    r.mean,
                    r.sd,
                    r.median,
                    r.q1,
                    r.q3,
                    r.whisker_lo,
                    r.whisker_hi,
                    r.p5,
                    r.p95,
                ]
            )


def _write_figures(out_dir: Path, records) -> list[str]:
    ok = [r for r in records if not r.failed]
    written = []
    for metric in AGGREGATE_METRICS:
        for region in REGIONS:
            values_by_dataset: dict[str, list[float]] = {}
            for r in ok:
                v = r.metric_value(metric, region)
                if v is not None:
                    values_by_dataset.setdefault(r.dataset, []).append(v)
            values_by_dataset = {k: values_by_dataset[k] for k in sorted(values_by_dataset)}
            if not values_by_dataset:
                continue
            name = f"boxplot_{metric}_{region}.png"
            save_boxplot_figure(
                out_dir / name,
                values_by_dataset,
                title=f"{METRIC_LABELS[metric]} - {region}",
                value_label=METRIC_LABELS[metric],
            )
            written.append(name)
    return written


@main.command("evaluate")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--postprocess/--no-postprocess", "postprocess_enabled", default=True)
@click.option("--thresholds", default="0,0.5", show_default=True,
              help="Comma-separated lesion-detection IoU thresholds.")
@click.option("--roi-crop", "roi_crop_enabled", is_flag=True, default=False,
              help="Crop to the lung/bladder landmark box when landmarks are given.")
@click.option("--margin-mm", default=10.0, show_default=True)
@click.option("--select-annotated-side", "select_side", is_flag=True, default=False,
              help="Keep only prediction components overlapping the reference side.")
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--allow-failures", is_flag=True, default=False)
@click.option("--figures/--no-figures", "figures_enabled", default=True,
              help="Render PNG boxplot figures next to the CSV aggregate.")
@click.option("--volume-exemption-mm3", default=100_000.0, show_default=True)
@click.option("--min-axial-diameter-mm", default=3.0, show_default=True)
@click.option("--connectivity", default=26, type=click.Choice(["6", "26"]), show_default=True)
def cmd_evaluate(
    manifest,
    out,
    postprocess_enabled,
    thresholds,
    roi_crop_enabled,
    margin_mm,
    select_side,
    workers,
    allow_failures,
    figures_enabled,
    volume_exemption_mm3,
    min_axial_diameter_mm,
    connectivity,
):
    """Evaluate every manifest case and write per-case and aggregate reports."""
    try:
        entries = read_manifest(manifest)
    except (OSError, ValueError) as exc:
        raise click.ClickException(str(exc))
    if not entries:
        raise click.ClickException(f"{manifest}: no cases in manifest")

    try:
        options = EvaluationOptions(
            postprocess_enabled=postprocess_enabled,
            postprocess_config=PostprocessConfig(
                volume_exemption_mm3=volume_exemption_mm3,
                min_axial_diameter_mm=min_axial_diameter_mm,
                connectivity=int(connectivity),
            ),
            detection_thresholds=_parse_float_list(thresholds),
            roi_crop_enabled=roi_crop_enabled,
            margin_mm=margin_mm,
            select_annotated_side_enabled=select_side,
        )
    except ValueError as exc:
        raise click.ClickException(str(exc))

    out_dir = Path(out)
    cases_dir = out_dir / "cases"
    cases_dir.mkdir(parents=True, exist_ok=True)

    records = _run_cases(entries, options, workers)
    ok_records = [r for r in records if not r.failed]
    for record in ok_records:
        _dump_json(cases_dir / f"{_safe_name(record.case_id)}.json", record.to_json_dict())

    rows = aggregate(records)
    _write_aggregate_csv(out_dir / "aggregate.csv", rows)

    figures = []
    if figures_enabled:
        figures_dir = out_dir / "figures"
        figures_dir.mkdir(exist_ok=True)
        figures = _write_figures(figures_dir, records)

    failed = [r for r in records if r.failed]
    summary = {
        "schema_version": RUN_SCHEMA_VERSION,
        "n_cases": len(records),
        "n_failed": len(failed),
        "failed_cases": [
            {"case_id": r.case_id, "reason": r.failure_reason} for r in failed
        ],
        "options": {
            "postprocess": options.postprocess_enabled,
            "volume_exemption_mm3": options.postprocess_config.volume_exemption_mm3,
            "min_axial_diameter_mm": options.postprocess_config.min_axial_diameter_mm,
            "connectivity": options.postprocess_config.connectivity,
            "detection_thresholds": sorted(options.detection_thresholds),
            "roi_crop": options.roi_crop_enabled,
            "margin_mm": options.margin_mm,
            "select_annotated_side": options.select_annotated_side_enabled,
        },
        "outputs": {
            "cases": sorted(f"{_safe_name(r.case_id)}.json" for r in ok_records),
            "aggregate": "aggregate.csv",
            "figures": figures,
        },
    }
    _dump_json(out_dir / "summary.json", summary)

    for r in failed:
        click.echo(f"FAILED {r.case_id}: {r.failure_reason}", err=True)
    click.echo(f"evaluated {len(records)} cases ({len(failed)} failed) -> {out_dir}")
    if failed and not allow_failures:
        raise SystemExit(1)


# ---------------------------------------------------------------------------
# postprocess
# ---------------------------------------------------------------------------


@main.command("postprocess")
@click.option("--volume", "volume_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Output volume path; defaults to <input>_postprocessed with the same container.")
@click.option("--report", "report_path", default=None, type=click.Path(dir_okay=False))
@click.option("--scheme", default=None, type=click.Choice(sorted(SCHEMES)),
              help="Source label scheme of the input; required for non-canonical inputs.")
@click.option("--volume-exemption-mm3", default=100_000.0, show_default=True)
@click.option("--min-axial-diameter-mm", default=3.0, show_default=True)
@click.option("--connectivity", default=26, type=click.Choice(["6", "26"]), show_default=True)
def cmd_postprocess(
    volume_path,
    out_path,
    report_path,
    scheme,
    volume_exemption_mm3,
    min_axial_diameter_mm,
    connectivity,
):
    """Clean one prediction volume and write the decision report."""
    cfg = PostprocessConfig(
        volume_exemption_mm3=volume_exemption_mm3,
        min_axial_diameter_mm=min_axial_diameter_mm,
        connectivity=int(connectivity),
    )
    try:
        v = volio.load_volume(volume_path)
        if scheme is not None:
            v = harmonize_labels(v, SCHEMES[scheme])
        cleaned, report = postprocess(v, cfg)
        suffix = volio.container_suffix(volume_path)
        if out_path is None:
            base = volume_path[: -len(suffix)]
            out_path = f"{base}_postprocessed{suffix}"
        volio.save_volume(out_path, cleaned)
    except VolsegError as exc:
        raise click.ClickException(str(exc))
    if report_path is None:
        report_path = f"{out_path}.report.json"
    _dump_json(Path(report_path), report.to_json_dict())
    click.echo(
        f"wrote {out_path} ({report.removed_voxel_count} voxels removed, "
        f"{len(report.decisions)} components) and {report_path}"
    )


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------


@main.command("detect")
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ref", "ref_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--thresholds", default="0,0.5", show_default=True)
@click.option("--scheme", default="canonical", type=click.Choice(sorted(SCHEMES)),
              help="Label scheme of the prediction volume.")
@click.option("--connectivity", default=26, type=click.Choice(["6", "26"]), show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Write the JSON outcome here instead of stdout.")
def cmd_detect(pred_path, ref_path, thresholds, scheme, connectivity, out_path):
    """Score abnormality detection for one prediction/reference pair."""
    from .volume import KITS_SCHEME

    try:
        pred = harmonize_labels(volio.load_volume(pred_path), SCHEMES[scheme])
        ref = harmonize_labels(volio.load_volume(ref_path), KITS_SCHEME)
        pred_cs = connected_components(extract_region(pred, REGION_ABNORMALITY), int(connectivity))
        ref_cs = connected_components(extract_region(ref, REGION_ABNORMALITY), int(connectivity))
        outcomes = [
            match_lesions(pred_cs, ref_cs, t).to_json_dict()
            for t in sorted(_parse_float_list(thresholds))
        ]
    except VolsegError as exc:
        raise click.ClickException(str(exc))
    payload = {"pred": pred_path, "ref": ref_path, "outcomes": outcomes}
    if out_path:
        _dump_json(Path(out_path), payload)
        click.echo(f"wrote {out_path}")
    else:
        click.echo(json.dumps(payload, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------


def _load_records_dir(root: Path) -> list[CaseRecord]:
    cases = root / "cases"
    if not cases.is_dir():
        raise click.ClickException(f"{root}: not an evaluation output (no cases/ directory)")
    records = []
    for path in sorted(cases.glob("*.json")):
        records.append(CaseRecord.from_json_dict(json.loads(path.read_text(encoding="utf-8"))))
    if not records:
        raise click.ClickException(f"{root}: no case records found")
    return records


def _paired_samples(candidate, baseline, dataset, region, metric):
    """Defined metric values of cases present (and defined) in both record sets."""
    cand = {
        r.case_id: r.metric_value(metric, region)
        for r in candidate
        if r.dataset == dataset and not r.failed
    }
    base = {
        r.case_id: r.metric_value(metric, region)
        for r in baseline
        if r.dataset == dataset and not r.failed
    }
    shared = sorted(
        cid for cid in set(cand) & set(base)
        if cand[cid] is not None and base[cid] is not None
    )
    return [cand[c] for c in shared], [base[c] for c in shared]


@main.command("stats")
@click.option("--records", "records_root", required=True, type=click.Path(exists=True, file_okay=False),
              help="Root directory the plan's model record paths are relative to.")
@click.option("--plan", "plan_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False))
def cmd_stats(records_root, plan_path, out_path):
    """Run the hierarchical superiority test plan over model record sets."""
    plan = json.loads(Path(plan_path).read_text(encoding="utf-8"))
    if plan.get("schema_version") != PLAN_SCHEMA_VERSION:
        raise click.ClickException(
            f"{plan_path}: expected schema_version {PLAN_SCHEMA_VERSION!r}"
        )
    alpha = float(plan.get("alpha", 0.05))
    metric = plan.get("metric", "dice")
    gate = plan.get("gate", GATE_ALL)
    if gate not in (GATE_ALL, GATE_ANY):
        raise click.ClickException(f"{plan_path}: gate must be 'all' or 'any'")
    models = plan.get("models", {})
    if len(models) < 2:
        raise click.ClickException(f"{plan_path}: plan must reference at least two model record sets")

    root = Path(records_root)
    loaded: dict[str, list[CaseRecord]] = {}
    for name, rel in models.items():
        path = Path(rel) if os.path.isabs(rel) else root / rel
        loaded[name] = _load_records_dir(path)

    stages = []
    stage_meta = []
    for stage_def in plan.get("stages", []):
        name = stage_def["name"]
        candidate = stage_def["candidate"]
        baseline = stage_def["baseline"]
        for role, model in (("candidate", candidate), ("baseline", baseline)):
            if model not in loaded:
                raise click.ClickException(f"{plan_path}: stage {name!r} {role} {model!r} not in models")
        hypotheses = []
        hypo_meta = []
        for h in stage_def["hypotheses"]:
            dataset, region = h["dataset"], h["region"]
            if region not in REGIONS:
                raise click.ClickException(f"{plan_path}: unknown region {region!r}")
            label = f"{dataset}/{region}"

            def loader(d=dataset, r=region, c=candidate, b=baseline):
                a, bb = _paired_samples(loaded[c], loaded[b], d, r, metric)
                return a, bb

            hypotheses.append(PlanHypothesis(label=label, loader=loader))
            hypo_meta.append({"dataset": dataset, "region": region})
        stages.append(PlanStage(name=name, hypotheses=tuple(hypotheses), requires=stage_def.get("requires")))
        stage_meta.append({"candidate": candidate, "baseline": baseline, "hypotheses": hypo_meta})

    results = run_plan(stages, alpha=alpha, gate=gate)

    stage_payloads = []
    for stage, meta, result in zip(stages, stage_meta, results):
        hypotheses = []
        for hmeta, hres in zip(meta["hypotheses"], result.results):
            entry = {"label": hres.label, **hmeta}
            if hres.test is None:
                entry.update({"error": hres.error, "u": None, "p_raw": None,
                              "p_adjusted": None, "reject": False,
                              "n_candidate": None, "n_baseline": None, "method": None})
            else:
                entry.update(
                    {
                        "u": hres.test.u,
                        "p_raw": hres.test.p,
                        "p_adjusted": hres.p_adjusted,
                        "reject": hres.reject,
                        "n_candidate": hres.test.n_a,
                        "n_baseline": hres.test.n_b,
                        "method": hres.test.method,
                    }
                )
            hypotheses.append(entry)
        stage_payloads.append(
            {
                "name": stage.name,
                "requires": stage.requires,
                "candidate": meta["candidate"],
                "baseline": meta["baseline"],
                "skipped": result.skipped,
                "skip_reason": result.skip_reason,
                "hypotheses": hypotheses,
            }
        )
    payload = {
        "schema_version": STATS_SCHEMA_VERSION,
        "alpha": alpha,
        "metric": metric,
        "gate": gate,
        "stages": stage_payloads,
    }
    if out_path:
        _dump_json(Path(out_path), payload)
        click.echo(f"wrote {out_path}")
    else:
        click.echo(json.dumps(payload, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# subgroup
# ---------------------------------------------------------------------------


@main.command("subgroup")
@click.option("--records", "records_root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--key", required=True,
              type=click.Choice(["sex", "age", "contrast_phase", "subtype"]))
@click.option("--age-bins", default=None,
              help="Comma-separated bin edges for the age key "
                   f"[default: {','.join(str(b) for b in DEFAULT_AGE_BINS)}]")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def cmd_subgroup(records_root, key, age_bins, out_dir):
    """Summarize metrics per patient subgroup and render boxplots."""
    records = [r for r in _load_records_dir(Path(records_root)) if not r.failed]
    if not records:
        raise click.ClickException("no successful cases to summarize")
    bins = None
    if key == "age":
        bins = _parse_float_list(age_bins) if age_bins else DEFAULT_AGE_BINS
    elif age_bins:
        raise click.ClickException("--age-bins only applies to --key age")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"subgroup_{key}.csv"
    plots = []
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["key", "group", "metric", "region", "n", "n_undefined", "mean", "sd",
             "median", "q1", "q3", "whisker_lo", "whisker_hi", "outliers"]
        )
        for metric in AGGREGATE_METRICS:
            for region in REGIONS:
                try:
                    summaries = subgroup_summarize(
                        records,
                        key,
                        value_of=lambda r, m=metric, reg=region: r.metric_value(m, reg),
                        bins=bins,
                    )
                except KeyError as exc:
                    raise click.ClickException(str(exc))
                if not summaries:
                    continue
                for s in summaries:
                    writer.writerow(
                        [s.key, s.group, metric, region, s.n, s.n_undefined, s.mean,
                         s.sd, s.median, s.q1, s.q3, s.whisker_lo, s.whisker_hi,
                         ";".join(str(v) for v in s.outliers)]
                    )
                svg_name = f"boxplot_{metric}_{region}.svg"
                write_boxplot_svg(
                    out / svg_name,
                    summaries,
                    title=f"{METRIC_LABELS[metric]} by {key} - {region}",
                    value_label=METRIC_LABELS[metric],
                )
                plots.append(svg_name)
    click.echo(f"wrote {csv_path} and {len(plots)} boxplots -> {out}")


# ---------------------------------------------------------------------------
# crop
# ---------------------------------------------------------------------------


@main.command("crop")
@click.option("--volume", "volume_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--lung-mask", "lung_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--bladder-mask", "bladder_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--margin-mm", default=10.0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--box-out", "box_path", default=None, type=click.Path(dir_okay=False))
def cmd_crop(volume_path, lung_path, bladder_path, margin_mm, out_path, box_path):
    """Crop a volume to the box spanned by the lung/bladder landmark masks."""
    try:
        v = volio.load_volume(volume_path)
        lung = foreground_mask(volio.load_volume(lung_path))
        bladder = foreground_mask(volio.load_volume(bladder_path))
        cropped, box = roi_crop(v, lung, bladder, margin_mm)
        volio.save_volume(out_path, cropped)
    except VolsegError as exc:
        raise click.ClickException(str(exc))
    box_payload = {"lo": list(box.lo), "hi": list(box.hi), "note": box.note}
    if box_path:
        _dump_json(Path(box_path), box_payload)
    click.echo(json.dumps(box_payload, sort_keys=True))


if __name__ == "__main__":
    main()
