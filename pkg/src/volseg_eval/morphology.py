"""Geometric kernels over voxel grids.

Connected components, 6-neighbor surfaces, exact anisotropic Euclidean
distance fields, per-slice maximal in-plane diameters, and landmark-driven
ROI cropping. Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptySourceError, LandmarkError
from .volume import LabelVolume, RegionMask, assert_same_grid

CONNECTIVITIES = (6, 26)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


@dataclass(frozen=True)
class Component:
    """One connected foreground component.

    `bbox_lo`/`bbox_hi` are inclusive voxel index bounds per axis.
    """

    id: int
    voxel_count: int
    volume_mm3: float
    bbox_lo: tuple[int, int, int]
    bbox_hi: tuple[int, int, int]


@dataclass(frozen=True, eq=False)
class ComponentSet:
    """Deterministic component labeling of a mask.

    `labels` holds 0 for background and ids 1..count for foreground; ids are
    ordered by each component's first voxel in x-fastest scan order, so the
    labeling is reproducible regardless of how it was computed.
    """

    labels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    connectivity: int
    components: tuple[Component, ...]

    @property
    def count(self) -> int:
        return len(self.components)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def mask_of(self, component_id: int) -> np.ndarray:
        if not 1 <= component_id <= self.count:
            raise ValueError(f"component id {component_id} out of range 1..{self.count}")
        return self.labels == component_id

    def coords_of(self, component_id: int) -> np.ndarray:
        """(n, 3) array of [x, y, z] voxel indices of one component."""
        return np.argwhere(self.mask_of(component_id))


def connected_components(m: RegionMask, connectivity: int = 26) -> ComponentSet:
    """Partition the foreground of `m` into connected components.

    Ids are assigned by first-encountered voxel in x-fastest scan order;
    an empty mask yields zero components.
    """
    raw, k = ndimage.label(m.bits, structure=_structure(connectivity))
    if k == 0:
        return ComponentSet(
            labels=np.zeros(m.dims, dtype=np.int32),
            spacing=m.spacing,
            origin=m.origin,
            connectivity=connectivity,
            components=(),
        )

    flat = raw.flatten(order="F")
    first = np.full(k + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat, np.arange(flat.size, dtype=np.int64))
    order = np.argsort(first[1:], kind="stable") + 1  # old ids by first occurrence
    remap = np.zeros(k + 1, dtype=np.int32)
    remap[order] = np.arange(1, k + 1, dtype=np.int32)
    labels = remap[raw]

    counts = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    voxel_volume = m.voxel_volume_mm3
    slices = ndimage.find_objects(labels)
    components = []
    for cid in range(1, k + 1):
        sl = slices[cid - 1]
        components.append(
            Component(
                id=cid,
                voxel_count=int(counts[cid - 1]),
                volume_mm3=float(counts[cid - 1]) * voxel_volume,
                bbox_lo=tuple(int(s.start) for s in sl),
                bbox_hi=tuple(int(s.stop) - 1 for s in sl),
            )
        )
    return ComponentSet(
        labels=labels,
        spacing=m.spacing,
        origin=m.origin,
        connectivity=connectivity,
        components=tuple(components),
    )


def component_volume_mm3(voxel_count: int, spacing: tuple[float, float, float]) -> float:
    """Physical volume of `voxel_count` voxels at the given spacing."""
    sx, sy, sz = spacing
    return voxel_count * sx * sy * sz


# ---------------------------------------------------------------------------
# per-slice maximal diameter
# ---------------------------------------------------------------------------


def _convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Strict convex hull (no collinear boundary points) of integer 2-D points.

    Andrew's monotone chain with exact integer cross products. Returns hull
    vertices in counter-clockwise order; collinear inputs collapse to their
    two extreme points.
    """
    pts = np.unique(points, axis=0)  # sorted lexicographically
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _hull_max_distance(hull: np.ndarray, sx: float, sy: float) -> float:
    """Maximal pairwise distance between hull vertices under (sx, sy) scaling.

    Antipodal pairs are found with exact integer cross products (parallel
    supporting lines are preserved by the axis scaling), then measured in
    physical coordinates.
    """
    h = len(hull)
    if h == 1:
        return 0.0

    def dist(i, j):
        dx = (hull[i][0] - hull[j][0]) * sx
        dy = (hull[i][1] - hull[j][1]) * sy
        return math.hypot(dx, dy)

    if h == 2:
        return dist(0, 1)
    if h <= 4:
        return max(dist(i, j) for i in range(h) for j in range(i + 1, h))

    def area2(i, j, k):
        ax = int(hull[j][0]) - int(hull[i][0])
        ay = int(hull[j][1]) - int(hull[i][1])
        bx = int(hull[k][0]) - int(hull[i][0])
        by = int(hull[k][1]) - int(hull[i][1])
        return abs(ax * by - ay * bx)

    best = 0.0
    k = 1
    for i in range(h):
        j = (i + 1) % h
        while area2(i, j, (k + 1) % h) > area2(i, j, k):
            k = (k + 1) % h
        best = max(best, dist(i, k), dist(j, k))
    return best


def axial_diameter(coords: np.ndarray, spacing: tuple[float, float, float]) -> float:
    """Maximal in-plane extent of a component within any single axial slice, in mm.

    `coords` is an (n, 3) array of [x, y, z] voxel indices. For every
    constant-z slice the maximum pairwise distance between voxel centers is
    computed exactly (convex hull plus antipodal-pair sweep); the result is
    the maximum over slices. A single voxel has diameter 0.
    """
    coords = np.asarray(coords)
    if coords.size == 0:
        raise ValueError("axial_diameter needs a non-empty component")
    sx, sy, _ = spacing
    best = 0.0
    for z in np.unique(coords[:, 2]):
        slice_pts = coords[coords[:, 2] == z, :2]
        hull = _convex_hull_2d(slice_pts)
        best = max(best, _hull_max_distance(hull, sx, sy))
    return best


def is_attached(cs: ComponentSet, component_id: int, kidney: RegionMask) -> bool:
    """True iff any component voxel has a kidney voxel in its 26-neighborhood."""
    assert_same_grid(cs, kidney)
    comp = next(c for c in cs.components if c.id == component_id)
    lo = tuple(max(0, v - 1) for v in comp.bbox_lo)
    hi = tuple(min(d - 1, v + 1) for v, d in zip(comp.bbox_hi, cs.dims))
    window = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
    comp_bits = cs.labels[window] == component_id
    kidney_bits = kidney.bits[window]
    if not kidney_bits.any():
        return False
    grown = ndimage.binary_dilation(comp_bits, structure=_structure(26))
    return bool((grown & kidney_bits).any())


# ---------------------------------------------------------------------------
# surfaces and distance fields
# ---------------------------------------------------------------------------


def surface_voxels(m: RegionMask) -> RegionMask:
    """Voxels of `m` with at least one 6-neighbor outside the mask.

    Voxels on the volume border count as surface. Empty in, empty out.
    """
    interior = ndimage.binary_erosion(m.bits, structure=_structure(6), border_value=0)
    return m.with_bits(m.bits & ~interior)


@dataclass(frozen=True, eq=False)
class DistanceField:
    """Per-voxel Euclidean distance in mm to the nearest source voxel."""

    distances: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.distances.shape


def distance_transform(source: RegionMask) -> DistanceField:
    """Exact spacing-weighted Euclidean distance to the nearest source voxel.

    Raises EmptySourceError for an empty source mask (every distance would
    be infinite).
    """
    if source.is_empty():
        raise EmptySourceError("distance transform of an empty source mask")
    d = ndimage.distance_transform_edt(~source.bits, sampling=source.spacing)
    return DistanceField(distances=d, spacing=source.spacing, origin=source.origin)


# ---------------------------------------------------------------------------
# ROI cropping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoiBox:
    """Inclusive voxel index ranges per axis, with a provenance note."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    note: str = ""

    def __post_init__(self):
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"empty box: lo {self.lo} > hi {self.hi}")

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b + 1) for a, b in zip(self.lo, self.hi))

    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))


def mask_bounding_box(m: RegionMask) -> tuple[tuple[int, int, int], tuple[int, int, int]] | None:
    """Inclusive (lo, hi) of the foreground, or None for an empty mask."""
    if m.is_empty():
        return None
    idx = np.nonzero(m.bits)
    lo = tuple(int(ax.min()) for ax in idx)
    hi = tuple(int(ax.max()) for ax in idx)
    return lo, hi


def roi_crop(
    v: LabelVolume,
    lung_lower_lobes: RegionMask,
    bladder: RegionMask,
    margin_mm: float = 10.0,
) -> tuple[LabelVolume, RoiBox]:
    """Restrict `v` to the box spanning the two landmark structures.

    The box is the union of the landmark bounding boxes, expanded by
    ceil(margin_mm / spacing) voxels per axis and clipped to the volume.
    The returned volume's origin is shifted so world coordinates of the
    retained voxels are unchanged.
    """
    if margin_mm < 0:
        raise ValueError("margin_mm must be non-negative")
    assert_same_grid(v, lung_lower_lobes)
    assert_same_grid(v, bladder)
    lung_box = mask_bounding_box(lung_lower_lobes)
    if lung_box is None:
        raise LandmarkError("lung lower-lobe landmark mask is empty")
    bladder_box = mask_bounding_box(bladder)
    if bladder_box is None:
        raise LandmarkError("bladder landmark mask is empty")

    margin = tuple(math.ceil(margin_mm / s) for s in v.spacing)
    lo = tuple(
        max(0, min(a, b) - m) for a, b, m in zip(lung_box[0], bladder_box[0], margin)
    )
    hi = tuple(
        min(d - 1, max(a, b) + m)
        for a, b, m, d in zip(lung_box[1], bladder_box[1], margin, v.dims)
    )
    box = RoiBox(lo=lo, hi=hi, note=f"lung+bladder bounding boxes, margin {margin_mm} mm")
    cropped = apply_box(v, box)
    return cropped, box


def apply_box(v: LabelVolume, box: RoiBox) -> LabelVolume:
    """Crop `v` to `box`, preserving world coordinates via the origin."""
    if any(b >= d for b, d in zip(box.hi, v.dims)) or any(a < 0 for a in box.lo):
        raise ValueError(f"box {box.lo}..{box.hi} exceeds volume dims {v.dims}")
    new_origin = tuple(o + a * s for o, a, s in zip(v.origin, box.lo, v.spacing))
    return LabelVolume(
        labels=v.labels[box.slices].copy(),
        spacing=v.spacing,
        origin=new_origin,
    )


def apply_box_mask(m: RegionMask, box: RoiBox) -> RegionMask:
    """Crop a mask to `box` with the same origin bookkeeping as apply_box."""
    new_origin = tuple(o + a * s for o, a, s in zip(m.origin, box.lo, m.spacing))
    return RegionMask(bits=m.bits[box.slices].copy(), spacing=m.spacing, origin=new_origin)
