"""Evaluation and post-processing toolkit for 3D kidney/abnormality label volumes."""

from .errors import (
    EmptySourceError,
    GridMismatchError,
    LandmarkError,
    UnknownLabelError,
    VolsegError,
    VolumeFormatError,
)
from .volume import (
    CANONICAL_SCHEME,
    KITS_SCHEME,
    TOTALSEG_SIDE_SCHEME,
    LabelScheme,
    LabelVolume,
    RegionMask,
    REGIONS,
    assert_same_grid,
    extract_region,
    foreground_mask,
    harmonize_labels,
    merge_sides,
)
from .volio import load_volume, save_volume
from .morphology import (
    ComponentSet,
    DistanceField,
    RoiBox,
    axial_diameter,
    connected_components,
    distance_transform,
    is_attached,
    roi_crop,
    surface_voxels,
)
from .metrics import MetricValue, RegionMetrics, dice, hd95, iou, mask_volume
from .detection import DetectionOutcome, detection_metrics, match_lesions
from .postprocess import PostprocessConfig, PostprocessReport, postprocess
from .stats import (
    CorrectionResult,
    StatTestResult,
    SubgroupSummary,
    holm_bonferroni,
    mann_whitney_u_greater,
    percentile,
    run_plan,
    subgroup_summarize,
)
from .harness import (
    CaseManifestEntry,
    CaseRecord,
    EvaluationOptions,
    aggregate,
    evaluate_case,
    read_manifest,
    select_annotated_side,
)

__version__ = "0.1.0"
