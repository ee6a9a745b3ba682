import numpy as np
import pytest

from deocc.dataset import DatasetConfig, generate_sample
from deocc.scene import ObjectInstance, Placement, RasterImage


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    outcome = "PASS" if report.passed else "FAIL"
    print(f"\nACCEPTANCE {name}: {outcome} ({report.duration:.1f}s)")


def square_object(object_id, rank, y0, x0, side, color, canvas=16):
    """Hand-built axis-aligned opaque square on an otherwise empty canvas."""
    rgba = np.zeros((canvas, canvas, 4))
    rgba[y0:y0 + side, x0:x0 + side, :3] = color
    rgba[y0:y0 + side, x0:x0 + side, 3] = 1.0
    return ObjectInstance(
        object_id=object_id, category="square-flat",
        amodal_rgba=RasterImage(rgba),
        placement=Placement(dx=x0 + side / 2, dy=y0 + side / 2),
        stack_rank=rank,
    )


@pytest.fixture(scope="session")
def small_corpus():
    cfg = DatasetConfig(num_samples=12, seed=1234, canvas_size=64)
    return [generate_sample(cfg, i) for i in range(cfg.num_samples)]
