from __future__ import annotations

import numpy as np
import pytest

from volseg_eval.errors import UnknownLabelError
from volseg_eval.postprocess import (
    ACTION_KEPT,
    ACTION_KEPT_LARGE_DETACHED,
    ACTION_REMOVED_DETACHED,
    ACTION_REMOVED_SMALL,
    PostprocessConfig,
    postprocess,
)
from volseg_eval.volume import ABNORMALITY, KIDNEY, REGION_ABNORMALITY, REGION_KIDNEY, extract_region

from .conftest import make_volume


def _phantom(dims, spacing=(1.0, 1.0, 1.0)):
    return np.zeros(dims, dtype=np.uint8), spacing


def test_detached_large_lesion_is_kept() -> None:
    labels, spacing = _phantom((60, 60, 60))
    labels[0:50, 0:50, 0:50] = ABNORMALITY  # 125 000 mm^3 = 125 cm^3
    labels[58, 58, 58] = KIDNEY
    out, report = postprocess(make_volume(labels, spacing))
    assert [d.action for d in report.decisions] == [ACTION_KEPT_LARGE_DETACHED]
    assert np.array_equal(out.labels, labels)


def test_detached_small_lesion_is_removed() -> None:
    labels, spacing = _phantom((30, 30, 30))
    labels[0:20, 0:20, 0:20] = ABNORMALITY  # 8 000 mm^3 = 8 cm^3
    labels[28, 28, 28] = KIDNEY
    out, report = postprocess(make_volume(labels, spacing))
    assert [d.action for d in report.decisions] == [ACTION_REMOVED_DETACHED]
    assert extract_region(out, REGION_ABNORMALITY).voxel_count == 0
    assert out.labels[28, 28, 28] == KIDNEY


def test_exact_volume_threshold_is_removed() -> None:
    # 100 voxels at 10 mm spacing = exactly 100 000 mm^3; ties are removed
    labels, spacing = _phantom((10, 10, 10), spacing=(10.0, 10.0, 10.0))
    labels[0:5, 0:5, 0:4] = ABNORMALITY
    labels[9, 9, 9] = KIDNEY
    _, report = postprocess(make_volume(labels, spacing))
    assert report.decisions[0].volume_mm3 == pytest.approx(100_000.0)
    assert report.decisions[0].action == ACTION_REMOVED_DETACHED


def test_attached_diameter_rule() -> None:
    for sx, expected in ((0.7, ACTION_REMOVED_SMALL), (0.8, ACTION_KEPT)):
        labels, _ = _phantom((10, 5, 5))
        labels[2:7, 2, 2] = ABNORMALITY  # 5 collinear voxels: 4 * sx mm
        labels[2:7, 3, 2] = KIDNEY  # face contact
        v = make_volume(labels, spacing=(sx, sx, 3.0))
        out, report = postprocess(v)
        assert report.decisions[0].attached is True
        assert report.decisions[0].axial_diameter_mm == pytest.approx(4 * sx)
        assert report.decisions[0].action == expected
        removed = expected == ACTION_REMOVED_SMALL
        assert extract_region(out, REGION_ABNORMALITY).voxel_count == (0 if removed else 5)


def test_exact_diameter_threshold_is_removed() -> None:
    labels, _ = _phantom((10, 5, 5))
    labels[2:7, 2, 2] = ABNORMALITY
    labels[2:7, 3, 2] = KIDNEY
    v = make_volume(labels, spacing=(0.75, 0.75, 3.0))  # 4 * 0.75 = 3.0 mm even
    _, report = postprocess(v)
    assert report.decisions[0].axial_diameter_mm == pytest.approx(3.0)
    assert report.decisions[0].action == ACTION_REMOVED_SMALL


def test_large_detached_skips_diameter_check() -> None:
    # a detached large lesion stays even with a tiny per-slice diameter
    labels, _ = _phantom((6, 6, 130))
    labels[2, 2, 0:110] = ABNORMALITY  # one voxel per slice
    labels[5, 5, 125] = KIDNEY
    v = make_volume(labels, spacing=(10.0, 10.0, 10.0))  # 110 voxels * 1000 mm^3
    _, report = postprocess(v)
    assert report.decisions[0].axial_diameter_mm == 0.0
    assert report.decisions[0].action == ACTION_KEPT_LARGE_DETACHED


def test_kidney_voxels_never_modified(rng) -> None:
    labels = rng.integers(0, 3, size=(20, 20, 20)).astype(np.uint8)
    v = make_volume(labels)
    out, _ = postprocess(v)
    assert np.array_equal(
        extract_region(out, REGION_KIDNEY).bits, extract_region(v, REGION_KIDNEY).bits
    )


def test_output_abnormality_subset_of_input(rng) -> None:
    for _ in range(10):
        labels = rng.integers(0, 3, size=(15, 15, 15)).astype(np.uint8)
        v = make_volume(labels, spacing=(0.9, 0.9, 2.0))
        out, _ = postprocess(v)
        before = extract_region(v, REGION_ABNORMALITY).bits
        after = extract_region(out, REGION_ABNORMALITY).bits
        assert not (after & ~before).any()


def test_idempotence(rng) -> None:
    for _ in range(10):
        labels = rng.integers(0, 3, size=(16, 16, 16)).astype(np.uint8)
        v = make_volume(labels, spacing=(0.8, 0.8, 2.5))
        once, _ = postprocess(v)
        twice, report = postprocess(once)
        assert np.array_equal(twice.labels, once.labels)
        assert report.removed_voxel_count == 0


def test_every_component_reported_once() -> None:
    labels, _ = _phantom((40, 20, 10))
    labels[0:2, 0:2, 0:2] = ABNORMALITY       # detached small
    labels[10:12, 0:2, 0:2] = ABNORMALITY     # detached small
    labels[20:26, 0, 0] = ABNORMALITY         # attached line
    labels[20:26, 1, 0] = KIDNEY
    v = make_volume(labels)
    _, report = postprocess(v)
    ids = sorted(d.component_id for d in report.decisions)
    assert ids == [1, 2, 3]
    actions = {d.component_id: d.action for d in report.decisions}
    assert actions[1] == ACTION_REMOVED_DETACHED
    assert actions[2] == ACTION_REMOVED_DETACHED
    assert actions[3] == ACTION_KEPT


def test_rejects_non_canonical_volume() -> None:
    labels, _ = _phantom((4, 4, 4))
    labels[0, 0, 0] = 3
    with pytest.raises(UnknownLabelError):
        postprocess(make_volume(labels))


def test_config_validation() -> None:
    with pytest.raises(ValueError):
        PostprocessConfig(volume_exemption_mm3=-1)
    with pytest.raises(ValueError):
        PostprocessConfig(connectivity=18)


def test_custom_thresholds_respected() -> None:
    labels, _ = _phantom((12, 12, 12))
    labels[0:2, 0:2, 0:2] = ABNORMALITY  # 8 mm^3, detached
    labels[10, 10, 10] = KIDNEY
    v = make_volume(labels)
    _, strict = postprocess(v, PostprocessConfig(volume_exemption_mm3=7.0))
    assert strict.decisions[0].action == ACTION_KEPT_LARGE_DETACHED
    _, default = postprocess(v)
    assert default.decisions[0].action == ACTION_REMOVED_DETACHED
