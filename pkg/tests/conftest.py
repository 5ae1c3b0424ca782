"""Shared fixtures: volume builders and a byte-level NIfTI fixture generator.

The NIfTI generator below builds files field by field with struct.pack and
is intentionally separate from the package's writer, so reader tests have
an independent byte-level reference.
"""

from __future__ import annotations

import gzip
import struct

import numpy as np
import pytest

from volseg_eval.volume import LabelVolume, RegionMask


def make_volume(labels, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> LabelVolume:
    return LabelVolume(
        labels=np.asarray(labels, dtype=np.uint8), spacing=spacing, origin=origin
    )


def make_mask(bits, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> RegionMask:
    return RegionMask(bits=np.asarray(bits, dtype=bool), spacing=spacing, origin=origin)


def empty_volume(dims, spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    return LabelVolume(labels=np.zeros(dims, dtype=np.uint8), spacing=spacing)


def nifti_fixture_bytes(
    labels,
    spacing=(1.0, 1.0, 1.0),
    datatype=2,
    *,
    magic=b"n+1\x00",
    vox_offset=352.0,
    scl_slope=1.0,
    scl_inter=0.0,
    sform=None,
    qform=None,
    payload_override=None,
    dim_override=None,
    gz=False,
) -> bytes:
    """Assemble a NIfTI-1 file byte by byte for reader tests."""
    labels = np.asarray(labels)
    nx, ny, nz = labels.shape
    dtype = {2: "<u1", 4: "<i2", 8: "<i4", 16: "<f4", 512: "<u2"}[datatype]
    bitpix = np.dtype(dtype).itemsize * 8

    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    dim = dim_override or (3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, vox_offset)
    struct.pack_into("<2f", hdr, 112, scl_slope, scl_inter)
    if sform is not None:
        struct.pack_into("<h", hdr, 254, 1)
        struct.pack_into("<12f", hdr, 280, *[v for row in sform for v in row])
    if qform is not None:
        struct.pack_into("<h", hdr, 252, 1)
        b, c, d, ox, oy, oz = qform
        struct.pack_into("<3f", hdr, 256, b, c, d)
        struct.pack_into("<3f", hdr, 268, ox, oy, oz)
    hdr[344:348] = magic

    payload = (
        payload_override
        if payload_override is not None
        else labels.astype(dtype).tobytes(order="F")
    )
    blob = bytes(hdr) + payload
    return gzip.compress(blob, mtime=0) if gz else blob


def rvol_fixture_bytes(labels, spacing=(1.0, 1.0, 1.0)) -> bytes:
    """Assemble a raw-container file independently of the package writer."""
    labels = np.asarray(labels, dtype=np.uint8)
    nx, ny, nz = labels.shape
    header = b"RVOL0001" + struct.pack("<3I", nx, ny, nz) + struct.pack("<3d", *spacing)
    return header + labels.tobytes(order="F")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240911)


# ---------------------------------------------------------------------------
# acceptance-suite reporting: one pass/fail line per criterion
# ---------------------------------------------------------------------------

_acceptance_outcomes: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        _acceptance_outcomes[name] = "PASS" if report.passed else "FAIL"
    elif report.when == "setup" and report.failed:
        _acceptance_outcomes[name] = "ERROR"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance_outcomes):
        label = name.removeprefix("test_").replace("_", " ")
        terminalreporter.write_line(f"{label}: {_acceptance_outcomes[name]}")
