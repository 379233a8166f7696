import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from deoccl.dataset import (  # noqa: E402
    LandmarkDetector,
    MaskSpec,
    SampleSource,
    SyntheticLandmarkProvider,
    make_sample,
    synthesize_hmd_mask,
)
from deoccl.synthetic import toy_face  # noqa: E402


def toy_samples(n, size=32, appearance=0, seed=0, prefix="toy"):
    det = LandmarkDetector(SyntheticLandmarkProvider())
    out = []
    for i in range(n):
        gt = toy_face(size, i, appearance, seed)
        fid = f"{prefix}/{i:06d}"
        mask = synthesize_hmd_mask(det(gt, fid), MaskSpec(), size)
        out.append(make_sample(gt, mask, -1.0, fid))
    return out


@pytest.fixture
def toy_source():
    return SampleSource(toy_samples(6))


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(n: int, ok: bool, detail: str) -> None:
    _ACCEPTANCE[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
