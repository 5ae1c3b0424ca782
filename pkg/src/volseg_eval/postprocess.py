"""Rule-based cleaning of predicted label volumes.

Two rules run in a single pass over the abnormality components of a
canonical prediction, both evaluated against the ORIGINAL volume and
applied atomically (so no decision depends on another removal):

* a component not attached to the kidney is removed, unless its volume
  exceeds the large-lesion exemption (default 100 cm^3 = 100 000 mm^3);
  very large masses can suppress the kidney so far that nothing is
  predicted as kidney at all, and those must survive;
* an attached component is removed unless its maximal per-slice axial
  diameter exceeds the minimum (default 3 mm).

Kidney voxels are never modified and the pipeline is idempotent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UnknownLabelError
from .morphology import axial_diameter, connected_components, is_attached
from .volume import (
    ABNORMALITY,
    BACKGROUND,
    KIDNEY,
    LabelVolume,
    REGION_ABNORMALITY,
    REGION_KIDNEY,
    extract_region,
)

ACTION_KEPT = "kept"
ACTION_REMOVED_DETACHED = "removed-detached"
ACTION_KEPT_LARGE_DETACHED = "kept-large-detached"
ACTION_REMOVED_SMALL = "removed-small"


@dataclass(frozen=True)
class PostprocessConfig:
    """Thresholds of the cleaning rules; strictly-greater comparisons keep."""

    volume_exemption_mm3: float = 100_000.0
    min_axial_diameter_mm: float = 3.0
    connectivity: int = 26

    def __post_init__(self):
        if self.volume_exemption_mm3 < 0 or self.min_axial_diameter_mm < 0:
            raise ValueError("thresholds must be non-negative")
        if self.connectivity not in (6, 26):
            raise ValueError(f"connectivity must be 6 or 26, got {self.connectivity}")


@dataclass(frozen=True)
class ComponentDecision:
    component_id: int
    voxel_count: int
    volume_mm3: float
    axial_diameter_mm: float
    attached: bool
    action: str

    @property
    def removed(self) -> bool:
        return self.action in (ACTION_REMOVED_DETACHED, ACTION_REMOVED_SMALL)

    def to_json_dict(self) -> dict:
        return {
            "component_id": self.component_id,
            "voxel_count": self.voxel_count,
            "volume_mm3": self.volume_mm3,
            "axial_diameter_mm": self.axial_diameter_mm,
            "attached": self.attached,
            "action": self.action,
        }


@dataclass(frozen=True)
class PostprocessReport:
    """Decision log: every input abnormality component appears exactly once."""

    decisions: tuple[ComponentDecision, ...]
    removed_voxel_count: int

    def to_json_dict(self) -> dict:
        return {
            "removed_voxel_count": self.removed_voxel_count,
            "decisions": [d.to_json_dict() for d in self.decisions],
        }


def postprocess(
    pred: LabelVolume, cfg: PostprocessConfig = PostprocessConfig()
) -> tuple[LabelVolume, PostprocessReport]:
    """Apply the cleaning rules to a canonical prediction.

    Returns the cleaned volume and the per-component decision log. Raises
    UnknownLabelError for volumes outside the canonical scheme.
    """
    values = pred.label_values()
    if values.size and (values.max() > ABNORMALITY or values.min() < BACKGROUND):
        bad = sorted(int(v) for v in values if v not in (BACKGROUND, KIDNEY, ABNORMALITY))
        raise UnknownLabelError(f"prediction is not in the canonical scheme (labels {bad})")

    kidney = extract_region(pred, REGION_KIDNEY)
    abnormality = extract_region(pred, REGION_ABNORMALITY)
    cs = connected_components(abnormality, cfg.connectivity)

    decisions = []
    removal = np.zeros(pred.dims, dtype=bool)
    for comp in cs.components:
        attached = is_attached(cs, comp.id, kidney)
        diameter = axial_diameter(cs.coords_of(comp.id), pred.spacing)
        if not attached:
            action = (
                ACTION_KEPT_LARGE_DETACHED
                if comp.volume_mm3 > cfg.volume_exemption_mm3
                else ACTION_REMOVED_DETACHED
            )
        else:
            action = (
                ACTION_KEPT
                if diameter > cfg.min_axial_diameter_mm
                else ACTION_REMOVED_SMALL
            )
        decisions.append(
            ComponentDecision(
                component_id=comp.id,
                voxel_count=comp.voxel_count,
                volume_mm3=comp.volume_mm3,
                axial_diameter_mm=diameter,
                attached=attached,
                action=action,
            )
        )
        if decisions[-1].removed:
            removal |= cs.labels == comp.id

    removed = int(np.count_nonzero(removal))
    if removed:
        labels = pred.labels.copy()
        labels[removal] = BACKGROUND
        cleaned = pred.with_labels(labels)
    else:
        cleaned = pred
    return cleaned, PostprocessReport(
        decisions=tuple(decisions), removed_voxel_count=removed
    )
