"""Label volumes, region masks, and label-scheme harmonization.

All grids are indexed ``[x, y, z]`` with spacing in millimetres per axis.
Dense linearizations (file payloads, scan order) are x-fastest, i.e.
``index = x + nx * (y + ny * z)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import GridMismatchError, UnknownLabelError

# Relative per-axis tolerance when deciding two headers declare the same
# spacing; re-exported files often differ in the last float digits.
SPACING_RTOL = 1e-4

BACKGROUND = 0
KIDNEY = 1
ABNORMALITY = 2

REGION_KIDNEY = "kidney"
REGION_KIDNEY_PLUS_ABNORMALITY = "kidney_plus_abnormality"
REGION_ABNORMALITY = "abnormality"
REGIONS = (REGION_KIDNEY, REGION_KIDNEY_PLUS_ABNORMALITY, REGION_ABNORMALITY)

_REGION_LABELS = {
    REGION_KIDNEY: (KIDNEY,),
    REGION_ABNORMALITY: (ABNORMALITY,),
    REGION_KIDNEY_PLUS_ABNORMALITY: (KIDNEY, ABNORMALITY),
}


@dataclass(frozen=True)
class LabelScheme:
    """Maps integer label values to semantic names and to the canonical scheme.

    Label 0 is always background. ``to_canonical`` sends every label of the
    scheme to one of {background, kidney, abnormality}.
    """

    name: str
    names: dict[int, str]
    to_canonical: dict[int, int]

    def __post_init__(self):
        if self.names.get(0) != "background":
            raise ValueError("label 0 must be named 'background'")
        if len(set(self.names.values())) != len(self.names):
            raise ValueError("label names must be unique")
        if set(self.to_canonical) != set(self.names):
            raise ValueError("to_canonical must cover exactly the scheme labels")
        if any(v not in (BACKGROUND, KIDNEY, ABNORMALITY) for v in self.to_canonical.values()):
            raise ValueError("to_canonical values must be canonical labels")

    @property
    def labels(self) -> frozenset[int]:
        return frozenset(self.names)

    @property
    def max_label(self) -> int:
        return max(self.names)


CANONICAL_SCHEME = LabelScheme(
    name="canonical",
    names={0: "background", 1: "kidney", 2: "abnormality"},
    to_canonical={0: 0, 1: 1, 2: 2},
)

# Source scheme of datasets that annotate tumor and cyst separately.
KITS_SCHEME = LabelScheme(
    name="kits",
    names={0: "background", 1: "kidney", 2: "tumor", 3: "cyst"},
    to_canonical={0: 0, 1: 1, 2: 2, 3: 2},
)

# Multi-organ models emit one label per kidney side and per side cyst class.
# The integer values below are this toolkit's wire convention for such
# exports (documented in docs/formats.md), not the emitting model's raw ids.
TOTALSEG_SIDE_SCHEME = LabelScheme(
    name="totalseg",
    names={
        0: "background",
        1: "kidney_right",
        2: "kidney_left",
        3: "kidney_cyst_right",
        4: "kidney_cyst_left",
    },
    to_canonical={0: 0, 1: 1, 2: 1, 3: 2, 4: 2},
)

SCHEMES = {s.name: s for s in (CANONICAL_SCHEME, KITS_SCHEME, TOTALSEG_SIDE_SCHEME)}


def _as_tuple3(values: Iterable[float]) -> tuple[float, float, float]:
    t = tuple(float(v) for v in values)
    if len(t) != 3:
        raise ValueError(f"expected 3 components, got {len(t)}")
    return t


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """A 3D integer label grid with voxel spacing (mm) and world origin (mm).

    ``labels`` is indexed ``[x, y, z]``. Instances are immutable: the label
    array is made read-only on construction and operations return new volumes.
    """

    labels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 3:
            raise ValueError(f"labels must be 3-D, got {arr.ndim}-D")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"labels must be an integer array, got {arr.dtype}")
        arr = arr.copy() if not arr.flags.owndata or arr.base is not None else arr
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "spacing", _as_tuple3(self.spacing))
        object.__setattr__(self, "origin", _as_tuple3(self.origin))
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def with_labels(self, labels: np.ndarray) -> "LabelVolume":
        return LabelVolume(labels=labels, spacing=self.spacing, origin=self.origin)

    def label_values(self) -> np.ndarray:
        return np.unique(self.labels)


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Binary occupancy mask on the same grid as its source volume."""

    bits: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 3:
            raise ValueError(f"mask must be 3-D, got {arr.ndim}-D")
        if arr.dtype != np.bool_:
            arr = arr.astype(bool)
        arr = arr.copy() if not arr.flags.owndata or arr.base is not None else arr
        arr.setflags(write=False)
        object.__setattr__(self, "bits", arr)
        object.__setattr__(self, "spacing", _as_tuple3(self.spacing))
        object.__setattr__(self, "origin", _as_tuple3(self.origin))
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.bits.shape

    @property
    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    @property
    def volume_mm3(self) -> float:
        return self.voxel_count * self.voxel_volume_mm3

    def is_empty(self) -> bool:
        return not bool(self.bits.any())

    def with_bits(self, bits: np.ndarray) -> "RegionMask":
        return RegionMask(bits=bits, spacing=self.spacing, origin=self.origin)


def grids_match(a, b) -> bool:
    """True iff `a` and `b` share dims and spacing (within SPACING_RTOL)."""
    if tuple(a.dims) != tuple(b.dims):
        return False
    for sa, sb in zip(a.spacing, b.spacing):
        if abs(sa - sb) > SPACING_RTOL * max(abs(sa), abs(sb)):
            return False
    return True


def assert_same_grid(a, b) -> None:
    """Raise GridMismatchError unless the two grids are comparable.

    Comparing metrics across mismatched grids silently changes their values,
    so callers must refuse rather than resample.
    """
    if not grids_match(a, b):
        raise GridMismatchError(
            f"grid mismatch: dims {tuple(a.dims)} spacing {a.spacing} "
            f"vs dims {tuple(b.dims)} spacing {b.spacing}",
            grid_a=(tuple(a.dims), a.spacing),
            grid_b=(tuple(b.dims), b.spacing),
        )


def _canonical_lut(scheme: LabelScheme) -> np.ndarray:
    lut = np.full(scheme.max_label + 1, -1, dtype=np.int16)
    for src, dst in scheme.to_canonical.items():
        lut[src] = dst
    return lut


def harmonize_labels(v: LabelVolume, source: LabelScheme) -> LabelVolume:
    """Rewrite `v` from `source` into the canonical background/kidney/abnormality scheme.

    Raises UnknownLabelError if `v` contains a value outside `source`.
    Idempotent for volumes already in the canonical scheme when `source`
    maps canonical values onto themselves (all shipped schemes except the
    side scheme do).
    """
    lut = _canonical_lut(source)
    lab = v.labels
    if lab.size:
        vmax = int(lab.max())
        if vmax > source.max_label:
            raise UnknownLabelError(
                f"label {vmax} not defined by scheme '{source.name}'"
            )
        mapped = lut[lab]
        if (mapped < 0).any():
            bad = sorted(int(u) for u in np.unique(lab) if lut[int(u)] < 0)
            raise UnknownLabelError(
                f"labels {bad} not defined by scheme '{source.name}'"
            )
    else:
        mapped = lab.astype(np.int16)
    return v.with_labels(mapped.astype(np.uint8))


def merge_sides(tsk_volume: LabelVolume, side_scheme: LabelScheme = TOTALSEG_SIDE_SCHEME) -> LabelVolume:
    """Collapse per-side kidney and per-side cyst labels into the canonical scheme."""
    kidney_sources = [l for l, c in side_scheme.to_canonical.items() if c == KIDNEY]
    abnormality_sources = [l for l, c in side_scheme.to_canonical.items() if c == ABNORMALITY]
    if len(kidney_sources) < 2 or len(abnormality_sources) < 2:
        raise ValueError(
            f"scheme '{side_scheme.name}' does not distinguish left/right "
            "kidney and left/right cyst labels"
        )
    return harmonize_labels(tsk_volume, side_scheme)


def extract_region(v: LabelVolume, region: str) -> RegionMask:
    """Binary mask of one evaluation region of a canonical volume.

    Regions: kidney -> label 1, abnormality -> label 2,
    kidney_plus_abnormality -> labels {1, 2}. Empty masks are valid.
    """
    try:
        wanted = _REGION_LABELS[region]
    except KeyError:
        raise ValueError(f"unknown region {region!r}; expected one of {REGIONS}") from None
    bits = np.isin(v.labels, wanted)
    return RegionMask(bits=bits, spacing=v.spacing, origin=v.origin)


def foreground_mask(v: LabelVolume) -> RegionMask:
    """Mask of all non-background voxels (used for landmark volumes)."""
    return RegionMask(bits=v.labels != BACKGROUND, spacing=v.spacing, origin=v.origin)
