"""Per-lesion detection scoring between predicted and reference components.

Candidate pairs are component pairs whose IoU strictly exceeds the
threshold (threshold 0 therefore means "any overlap"). Matching is
one-to-one and greedy by descending IoU with deterministic tie-breaking,
which prevents one large prediction from "detecting" several reference
lesions. Matched pairs are true positives; unmatched predictions are false
positives; unmatched references are false negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import MetricValue
from .morphology import ComponentSet
from .volume import assert_same_grid

REASON_NO_LESIONS = "no-lesions"
REASON_NO_REFERENCE = "no-reference"
REASON_NO_PREDICTIONS = "no-predictions"


@dataclass(frozen=True)
class LesionMatch:
    pred_id: int
    ref_id: int
    iou: float


@dataclass(frozen=True)
class DetectionOutcome:
    """Matching result and derived scores for one case at one threshold."""

    threshold: float
    n_pred: int
    n_ref: int
    matches: tuple[LesionMatch, ...]
    false_positive_pred_ids: tuple[int, ...]
    false_negative_ref_ids: tuple[int, ...]
    precision: MetricValue
    recall: MetricValue
    f1: MetricValue

    @property
    def tp(self) -> int:
        return len(self.matches)

    @property
    def fp(self) -> int:
        return len(self.false_positive_pred_ids)

    @property
    def fn(self) -> int:
        return len(self.false_negative_ref_ids)

    def to_json_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "n_pred": self.n_pred,
            "n_ref": self.n_ref,
            "matches": [
                {"pred_id": m.pred_id, "ref_id": m.ref_id, "iou": m.iou}
                for m in self.matches
            ],
            "false_positive_pred_ids": list(self.false_positive_pred_ids),
            "false_negative_ref_ids": list(self.false_negative_ref_ids),
            "precision": self.precision.value,
            "precision_undefined_reason": self.precision.reason,
            "recall": self.recall.value,
            "recall_undefined_reason": self.recall.reason,
            "f1": self.f1.value,
            "f1_undefined_reason": self.f1.reason,
        }


def pairwise_iou(pred: ComponentSet, ref: ComponentSet) -> np.ndarray:
    """(n_pred, n_ref) matrix of component IoU values."""
    assert_same_grid(pred, ref)
    np_, nr = pred.count, ref.count
    out = np.zeros((np_, nr), dtype=float)
    if np_ == 0 or nr == 0:
        return out
    both = (pred.labels > 0) & (ref.labels > 0)
    if both.any():
        pair_codes = pred.labels[both].astype(np.int64) * (nr + 1) + ref.labels[both]
        inter = np.bincount(pair_codes, minlength=(np_ + 1) * (nr + 1))
        pred_counts = np.array([c.voxel_count for c in pred.components])
        ref_counts = np.array([c.voxel_count for c in ref.components])
        for p in range(1, np_ + 1):
            for r in range(1, nr + 1):
                ab = inter[p * (nr + 1) + r]
                if ab:
                    out[p - 1, r - 1] = ab / (pred_counts[p - 1] + ref_counts[r - 1] - ab)
    return out


def _scores(tp: int, fp: int, fn: int, n_pred: int, n_ref: int):
    if n_ref == 0 and n_pred == 0:
        reason = REASON_NO_LESIONS
        return (MetricValue.undefined(reason),) * 3
    if n_ref == 0:
        # Detection is only meaningful against abnormality-bearing references.
        reason = REASON_NO_REFERENCE
        return (MetricValue.undefined(reason),) * 3
    recall = MetricValue.of(tp / (tp + fn))
    if n_pred == 0:
        precision = MetricValue.undefined(REASON_NO_PREDICTIONS)
        f1 = MetricValue.undefined(REASON_NO_PREDICTIONS)
        return precision, recall, f1
    precision = MetricValue.of(tp / (tp + fp))
    p, r = precision.value, recall.value
    # P = R = 0 is an honest zero, not a missing value; averaging must keep it.
    f1 = MetricValue.of(0.0 if p + r == 0 else 2 * p * r / (p + r))
    return precision, recall, f1


def match_lesions(
    pred: ComponentSet, ref: ComponentSet, threshold: float = 0.5
) -> DetectionOutcome:
    """One-to-one greedy matching of predicted to reference components.

    Pairs with IoU > threshold are candidates; they are consumed in
    descending IoU order, ties broken by lower pred id then lower ref id.
    """
    if not 0.0 <= threshold < 1.0:
        raise ValueError(f"threshold must be in [0, 1), got {threshold}")
    iou_matrix = pairwise_iou(pred, ref)
    candidates = [
        (float(iou_matrix[p, r]), p + 1, r + 1)
        for p in range(pred.count)
        for r in range(ref.count)
        if iou_matrix[p, r] > threshold
    ]
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))

    used_pred: set[int] = set()
    used_ref: set[int] = set()
    matches = []
    for score, p, r in candidates:
        if p in used_pred or r in used_ref:
            continue
        used_pred.add(p)
        used_ref.add(r)
        matches.append(LesionMatch(pred_id=p, ref_id=r, iou=score))

    fps = tuple(c.id for c in pred.components if c.id not in used_pred)
    fns = tuple(c.id for c in ref.components if c.id not in used_ref)
    precision, recall, f1 = _scores(
        len(matches), len(fps), len(fns), pred.count, ref.count
    )
    return DetectionOutcome(
        threshold=threshold,
        n_pred=pred.count,
        n_ref=ref.count,
        matches=tuple(matches),
        false_positive_pred_ids=fps,
        false_negative_ref_ids=fns,
        precision=precision,
        recall=recall,
        f1=f1,
    )


def detection_metrics(outcome: DetectionOutcome) -> tuple[MetricValue, MetricValue, MetricValue]:
    """(precision, recall, f1) of an outcome."""
    return outcome.precision, outcome.recall, outcome.f1
