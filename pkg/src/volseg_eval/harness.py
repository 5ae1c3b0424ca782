"""Per-case evaluation orchestration and report assembly.

Glue between the volume/morphology/metric kernels and the batch CLI:
manifest ingestion, the per-case pipeline (optional ROI crop, optional
single-side selection, optional post-processing, region metrics, lesion
detection), and dataset-level aggregation. Cases are independent work
items; a failed case is recorded with its reason, never silently skipped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import volio
from .detection import DetectionOutcome, LesionMatch, match_lesions
from .errors import LandmarkError, VolsegError
from .metrics import MetricValue, RegionMetrics, region_metrics
from .morphology import apply_box, connected_components, roi_crop
from .postprocess import PostprocessConfig, PostprocessReport, postprocess
from .volume import (
    KITS_SCHEME,
    LabelVolume,
    REGIONS,
    REGION_KIDNEY_PLUS_ABNORMALITY,
    REGION_ABNORMALITY,
    SCHEMES,
    assert_same_grid,
    extract_region,
    foreground_mask,
    harmonize_labels,
)

CASE_SCHEMA_VERSION = "volseg-case-v1"

MANIFEST_COLUMNS = (
    "case_id",
    "pred_path",
    "ref_path",
    "lung_mask_path",
    "bladder_mask_path",
    "scheme",
    "sex",
    "age",
    "contrast_phase",
    "subtype",
    "dataset",
)

STATUS_OK = "ok"
STATUS_FAILED = "failed"

DEFAULT_DETECTION_THRESHOLDS = (0.0, 0.5)


@dataclass(frozen=True)
class CaseManifestEntry:
    """One manifest row: file paths plus the cohort metadata of the case."""

    case_id: str
    pred_path: str
    ref_path: str
    lung_mask_path: str | None = None
    bladder_mask_path: str | None = None
    scheme: str = "canonical"
    sex: str = "unknown"
    age: int | None = None
    contrast_phase: str = "unknown"
    subtype: str = "unknown"
    dataset: str = "default"

    @property
    def metadata(self) -> dict:
        return {
            "sex": self.sex,
            "age": self.age,
            "contrast_phase": self.contrast_phase,
            "subtype": self.subtype,
            "scheme": self.scheme,
        }


def read_manifest(path) -> list[CaseManifestEntry]:
    """Parse the evaluation manifest CSV (see docs/formats.md for the schema)."""
    entries = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty manifest")
        missing = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ValueError(f"{path}: manifest is missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            case_id = (row.get("case_id") or "").strip()
            pred = (row.get("pred_path") or "").strip()
            ref = (row.get("ref_path") or "").strip()
            if not case_id or not pred or not ref:
                raise ValueError(
                    f"{path}:{lineno}: case_id, pred_path and ref_path are required"
                )
            scheme = (row.get("scheme") or "").strip() or "canonical"
            if scheme not in SCHEMES:
                raise ValueError(
                    f"{path}:{lineno}: unknown scheme {scheme!r} "
                    f"(expected one of {sorted(SCHEMES)})"
                )
            age_raw = (row.get("age") or "").strip()
            entries.append(
                CaseManifestEntry(
                    case_id=case_id,
                    pred_path=pred,
                    ref_path=ref,
                    lung_mask_path=(row.get("lung_mask_path") or "").strip() or None,
                    bladder_mask_path=(row.get("bladder_mask_path") or "").strip() or None,
                    scheme=scheme,
                    sex=(row.get("sex") or "").strip() or "unknown",
                    age=int(age_raw) if age_raw else None,
                    contrast_phase=(row.get("contrast_phase") or "").strip() or "unknown",
                    subtype=(row.get("subtype") or "").strip() or "unknown",
                    dataset=(row.get("dataset") or "").strip() or "default",
                )
            )
    ids = [e.case_id for e in entries]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"{path}: duplicate case ids {dupes}")
    return entries


@dataclass(frozen=True)
class EvaluationOptions:
    """Per-run pipeline switches applied identically to every case."""

    postprocess_enabled: bool = True
    postprocess_config: PostprocessConfig = field(default_factory=PostprocessConfig)
    detection_thresholds: tuple[float, ...] = DEFAULT_DETECTION_THRESHOLDS
    roi_crop_enabled: bool = False
    margin_mm: float = 10.0
    select_annotated_side_enabled: bool = False
    hd95_symmetrization: str = "max"

    def __post_init__(self):
        for t in self.detection_thresholds:
            if not 0.0 <= t < 1.0:
                raise ValueError(f"detection threshold {t} outside [0, 1)")


@dataclass
class CaseRecord:
    """Everything the reports need to know about one evaluated case."""

    case_id: str
    dataset: str
    metadata: dict
    status: str = STATUS_OK
    failure_reason: str | None = None
    regions: dict = field(default_factory=dict)  # region -> RegionMetrics
    detection: list = field(default_factory=list)  # list[DetectionOutcome]
    postprocess_report: PostprocessReport | None = None
    warnings: list = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.status == STATUS_FAILED

    def metric_value(self, metric: str, region: str) -> float | None:
        """A region metric value by report name ("dice" / "hd95_mm"), or None."""
        rm = self.regions.get(region)
        if rm is None:
            return None
        mv = {"dice": rm.dice, "hd95_mm": rm.hd95_mm}[metric]
        return mv.value

    def to_json_dict(self) -> dict:
        return {
            "schema_version": CASE_SCHEMA_VERSION,
            "case_id": self.case_id,
            "dataset": self.dataset,
            "status": self.status,
            "failure_reason": self.failure_reason,
            "metadata": self.metadata,
            "regions": {r: m.to_json_dict() for r, m in self.regions.items()},
            "detection": [d.to_json_dict() for d in self.detection],
            "postprocess": (
                self.postprocess_report.to_json_dict()
                if self.postprocess_report is not None
                else None
            ),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CaseRecord":
        if d.get("schema_version") != CASE_SCHEMA_VERSION:
            raise ValueError(f"unsupported case record schema {d.get('schema_version')!r}")
        regions = {
            r: RegionMetrics.from_json_dict(r, m) for r, m in d.get("regions", {}).items()
        }
        detection = []
        for o in d.get("detection", []):
            def mv(value_key, reason_key):
                if o.get(value_key) is None:
                    return MetricValue.undefined(o.get(reason_key) or "unknown")
                return MetricValue.of(o[value_key])

            detection.append(
                DetectionOutcome(
                    threshold=o["threshold"],
                    n_pred=o["n_pred"],
                    n_ref=o["n_ref"],
                    matches=tuple(
                        LesionMatch(m["pred_id"], m["ref_id"], m["iou"])
                        for m in o.get("matches", [])
                    ),
                    false_positive_pred_ids=tuple(o.get("false_positive_pred_ids", [])),
                    false_negative_ref_ids=tuple(o.get("false_negative_ref_ids", [])),
                    precision=mv("precision", "precision_undefined_reason"),
                    recall=mv("recall", "recall_undefined_reason"),
                    f1=mv("f1", "f1_undefined_reason"),
                )
            )
        return cls(
            case_id=d["case_id"],
            dataset=d.get("dataset", "default"),
            metadata=d.get("metadata", {}),
            status=d.get("status", STATUS_OK),
            failure_reason=d.get("failure_reason"),
            regions=regions,
            detection=detection,
            postprocess_report=None,  # decision logs are not needed for re-aggregation
            warnings=list(d.get("warnings", [])),
        )


def select_annotated_side(pred: LabelVolume, ref: LabelVolume) -> LabelVolume:
    """Keep only prediction components that overlap the annotated reference side.

    Connected components of the prediction's kidney-plus-abnormality mask
    are retained iff they intersect the reference's kidney-plus-abnormality
    mask. With no overlapping component the returned prediction is empty,
    which downstream metrics score as zero per the one-empty rule.
    """
    assert_same_grid(pred, ref)
    pred_mask = extract_region(pred, REGION_KIDNEY_PLUS_ABNORMALITY)
    ref_mask = extract_region(ref, REGION_KIDNEY_PLUS_ABNORMALITY)
    cs = connected_components(pred_mask)
    if cs.count == 0:
        return pred
    keep = np.zeros(pred.dims, dtype=bool)
    for comp in cs.components:
        comp_bits = cs.labels == comp.id
        if (comp_bits & ref_mask.bits).any():
            keep |= comp_bits
    labels = pred.labels.copy()
    labels[~keep] = 0
    return pred.with_labels(labels)


def _load_canonical(path: str, scheme_name: str) -> LabelVolume:
    return harmonize_labels(volio.load_volume(path), SCHEMES[scheme_name])


def evaluate_case(entry: CaseManifestEntry, options: EvaluationOptions) -> CaseRecord:
    """Run the full pipeline for one case; deterministic for fixed inputs.

    The manifest scheme applies to the prediction volume. References are
    accepted in the canonical or tumor/cyst-split (kits) labelings, both of
    which the kits mapping harmonizes; anything else fails the case.
    """
    record = CaseRecord(
        case_id=entry.case_id, dataset=entry.dataset, metadata=entry.metadata
    )
    try:
        pred = _load_canonical(entry.pred_path, entry.scheme)
        ref = harmonize_labels(volio.load_volume(entry.ref_path), KITS_SCHEME)
        assert_same_grid(pred, ref)

        if options.roi_crop_enabled:
            pred, ref, warning = _apply_roi_crop(entry, pred, ref, options.margin_mm)
            if warning:
                record.warnings.append(warning)

        if options.select_annotated_side_enabled:
            pred = select_annotated_side(pred, ref)

        if options.postprocess_enabled:
            pred, report = postprocess(pred, options.postprocess_config)
            record.postprocess_report = report

        for region in REGIONS:
            rm = region_metrics(region, extract_region(pred, region), extract_region(ref, region))
            record.regions[region] = rm
            for mv, name in ((rm.dice, "dice"), (rm.hd95_mm, "hd95")):
                if not mv.defined:
                    record.warnings.append(f"{region}: {name} undefined ({mv.reason})")

        pred_components = connected_components(
            extract_region(pred, REGION_ABNORMALITY), options.postprocess_config.connectivity
        )
        ref_components = connected_components(
            extract_region(ref, REGION_ABNORMALITY), options.postprocess_config.connectivity
        )
        for threshold in sorted(options.detection_thresholds):
            record.detection.append(
                match_lesions(pred_components, ref_components, threshold)
            )
    except (VolsegError, OSError) as exc:
        record.status = STATUS_FAILED
        record.failure_reason = f"{type(exc).__name__}: {exc}"
        record.regions = {}
        record.detection = []
    return record


def _apply_roi_crop(entry, pred, ref, margin_mm):
    """Crop both volumes to the landmark box; fall back to no crop on trouble.

    The crop exists to speed things up, not to change results: if a
    landmark is missing/empty, or any prediction or reference foreground
    would be clipped, the crop is abandoned with a warning.
    """
    if not entry.lung_mask_path or not entry.bladder_mask_path:
        return pred, ref, "roi-crop skipped: landmark paths not provided"
    try:
        lung = foreground_mask(volio.load_volume(entry.lung_mask_path))
        bladder = foreground_mask(volio.load_volume(entry.bladder_mask_path))
        assert_same_grid(pred, lung)
        assert_same_grid(pred, bladder)
        cropped_ref, box = roi_crop(ref, lung, bladder, margin_mm)
    except (LandmarkError, VolsegError, OSError) as exc:
        return pred, ref, f"roi-crop skipped: {exc}"

    box_keep = np.zeros(ref.dims, dtype=bool)
    box_keep[box.slices] = True
    ref_fg = foreground_mask(ref)
    pred_fg = foreground_mask(pred)
    if (ref_fg.bits & ~box_keep).any():
        return pred, ref, "roi-crop skipped: reference foreground outside landmark box"
    if (pred_fg.bits & ~box_keep).any():
        return pred, ref, "roi-crop skipped: prediction foreground outside landmark box"
    return apply_box(pred, box), cropped_ref, None


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

AGGREGATE_METRICS = ("dice", "hd95_mm")


@dataclass(frozen=True)
class AggregateRow:
    """Summary of one metric over one dataset and region."""

    dataset: str
    region: str
    metric: str
    n_defined: int
    n_undefined: int
    mean: float
    sd: float
    median: float
    q1: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    p5: float
    p95: float


def aggregate(records: list[CaseRecord]) -> list[AggregateRow]:
    """Dataset x region x metric summary rows over non-failed records.

    Statistics cover defined values only; undefined ones are counted.
    The standard deviation uses the sample (n - 1) convention and is
    reported as 0 for a single case. Input order does not matter.
    """
    from .stats import percentile, summarize_values

    ok = [r for r in records if not r.failed]
    datasets = sorted({r.dataset for r in ok})
    rows = []
    for dataset in datasets:
        subset = [r for r in ok if r.dataset == dataset]
        for region in REGIONS:
            for metric in AGGREGATE_METRICS:
                values = []
                undefined = 0
                for r in subset:
                    v = r.metric_value(metric, region)
                    if v is None:
                        undefined += 1
                    else:
                        values.append(v)
                if not values:
                    continue
                s = summarize_values(metric, dataset, values, n_undefined=undefined)
                rows.append(
                    AggregateRow(
                        dataset=dataset,
                        region=region,
                        metric=metric,
                        n_defined=s.n,
                        n_undefined=undefined,
                        mean=s.mean,
                        sd=s.sd,
                        median=s.median,
                        q1=s.q1,
                        q3=s.q3,
                        whisker_lo=s.whisker_lo,
                        whisker_hi=s.whisker_hi,
                        p5=percentile(values, 0.05),
                        p95=percentile(values, 0.95),
                    )
                )
    return rows
