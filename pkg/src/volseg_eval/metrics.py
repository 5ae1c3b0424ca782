"""Overlap and boundary metrics between region masks.

Dice and IoU are voxel-count overlap measures; HD95 is the 95th-percentile
surface distance in mm. Metrics that cannot be computed return an undefined
value carrying a machine-readable reason instead of a fabricated sentinel,
so report consumers can tell "perfectly wrong" from "not measurable".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import stats
from .morphology import distance_transform, surface_voxels
from .volume import RegionMask, assert_same_grid

# Undefined reasons are part of the report schema; see docs/formats.md.
REASON_BOTH_EMPTY = "both-empty"
REASON_ONE_EMPTY = "one-empty"
REASON_EMPTY_MASK = "empty-mask"

HD95_SYMMETRIZATION_MAX = "max"     # max of the two directed percentiles
HD95_SYMMETRIZATION_POOLED = "pooled"  # percentile of pooled distances


@dataclass(frozen=True)
class MetricValue:
    """A metric result: either a number or an undefined flag with a reason."""

    value: float | None
    reason: str | None = None

    def __post_init__(self):
        if (self.value is None) == (self.reason is None):
            raise ValueError("exactly one of value/reason must be set")

    @property
    def defined(self) -> bool:
        return self.value is not None

    @classmethod
    def of(cls, value: float) -> "MetricValue":
        return cls(value=float(value))

    @classmethod
    def undefined(cls, reason: str) -> "MetricValue":
        return cls(value=None, reason=reason)


def _overlap_counts(a: RegionMask, b: RegionMask) -> tuple[int, int, int]:
    assert_same_grid(a, b)
    na = a.voxel_count
    nb = b.voxel_count
    inter = int(np.count_nonzero(a.bits & b.bits))
    return na, nb, inter


def dice(a: RegionMask, b: RegionMask) -> MetricValue:
    """Dice overlap 2|A n B| / (|A| + |B|).

    Both masks empty -> undefined("both-empty"); exactly one empty -> 0.
    """
    na, nb, inter = _overlap_counts(a, b)
    if na == 0 and nb == 0:
        return MetricValue.undefined(REASON_BOTH_EMPTY)
    return MetricValue.of(2.0 * inter / (na + nb))


def iou(a: RegionMask, b: RegionMask) -> MetricValue:
    """Intersection over union |A n B| / |A u B|, with dice's empty-mask rules."""
    na, nb, inter = _overlap_counts(a, b)
    if na == 0 and nb == 0:
        return MetricValue.undefined(REASON_BOTH_EMPTY)
    union = na + nb - inter
    return MetricValue.of(inter / union)


def hd95(
    a: RegionMask,
    b: RegionMask,
    q: float = 0.95,
    symmetrization: str = HD95_SYMMETRIZATION_MAX,
) -> MetricValue:
    """95th-percentile Hausdorff distance between the surfaces of two masks, in mm.

    Each directed distance set holds, for every 6-neighbor surface voxel of
    one mask, the exact Euclidean distance to the other mask's surface
    (voxel centers, spacing-weighted). The default symmetrization takes the
    maximum of the two directed percentiles; "pooled" takes one percentile
    of the concatenated distances. Either mask empty -> undefined
    ("empty-mask"); how such cases are scored is a dataset-protocol concern,
    not a metric one.
    """
    assert_same_grid(a, b)
    if a.is_empty() or b.is_empty():
        return MetricValue.undefined(REASON_EMPTY_MASK)
    surf_a = surface_voxels(a)
    surf_b = surface_voxels(b)
    dist_to_b = distance_transform(surf_b).distances
    dist_to_a = distance_transform(surf_a).distances
    d_ab = dist_to_b[surf_a.bits]
    d_ba = dist_to_a[surf_b.bits]
    if symmetrization == HD95_SYMMETRIZATION_MAX:
        return MetricValue.of(max(stats.percentile(d_ab, q), stats.percentile(d_ba, q)))
    if symmetrization == HD95_SYMMETRIZATION_POOLED:
        return MetricValue.of(stats.percentile(np.concatenate([d_ab, d_ba]), q))
    raise ValueError(f"unknown symmetrization {symmetrization!r}")


def mask_volume(a: RegionMask) -> float:
    """Physical mask volume in mm^3 (voxel count times voxel volume)."""
    return a.volume_mm3


@dataclass(frozen=True)
class RegionMetrics:
    """Per-region metric results for one prediction/reference pair."""

    region: str
    dice: MetricValue
    hd95_mm: MetricValue
    pred_volume_mm3: float
    ref_volume_mm3: float

    def to_json_dict(self) -> dict:
        return {
            "dice": self.dice.value,
            "dice_undefined_reason": self.dice.reason,
            "hd95_mm": self.hd95_mm.value,
            "hd95_undefined_reason": self.hd95_mm.reason,
            "pred_volume_mm3": self.pred_volume_mm3,
            "ref_volume_mm3": self.ref_volume_mm3,
        }

    @classmethod
    def from_json_dict(cls, region: str, d: dict) -> "RegionMetrics":
        def mv(value_key, reason_key):
            if d.get(value_key) is None:
                return MetricValue.undefined(d.get(reason_key) or "unknown")
            return MetricValue.of(d[value_key])

        return cls(
            region=region,
            dice=mv("dice", "dice_undefined_reason"),
            hd95_mm=mv("hd95_mm", "hd95_undefined_reason"),
            pred_volume_mm3=d["pred_volume_mm3"],
            ref_volume_mm3=d["ref_volume_mm3"],
        )


def region_metrics(region: str, pred: RegionMask, ref: RegionMask) -> RegionMetrics:
    """Dice, HD95 and absolute volumes for one region pair."""
    return RegionMetrics(
        region=region,
        dice=dice(pred, ref),
        hd95_mm=hd95(pred, ref),
        pred_volume_mm3=mask_volume(pred),
        ref_volume_mm3=mask_volume(ref),
    )
