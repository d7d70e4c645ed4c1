import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from endoview.dataset import Frame, Intervention, Modality, Pose  # noqa: E402
from endoview.synthgen import generate_pair  # noqa: E402

EVAL_SEEDS = tuple(range(42, 52))
FILTER_SEEDS = (100, 101, 102)


def make_frame(fid, position, *, image=None, label=None, modality=Modality.NBI, seed=0, orientation=(1, 0, 0, 0)):
    if image is None:
        image = np.random.default_rng(seed + fid).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    return Frame(fid, image, Pose(position, orientation, float(fid)), modality, label)


def make_intervention(iid="x", n=5, spacing=1.0, landmarks=None):
    frames = tuple(make_frame(i, (0.0, 0.0, i * spacing)) for i in range(n))
    return Intervention(iid, frames, landmarks or {}, "subj")


class Timed(list):
    """List that remembers how long it took to build."""

    seconds = 0.0


def _timed(build):
    start = time.perf_counter()
    out = Timed(build())
    out.seconds = time.perf_counter() - start
    return out


@pytest.fixture(scope="session")
def eval_pairs():
    """Default synthetic pairs used by the end-to-end checks."""
    return _timed(lambda: [generate_pair(s) for s in EVAL_SEEDS])


@pytest.fixture(scope="session")
def filter_interventions():
    """Six labeled synthetic interventions, disjoint from the evaluation seeds."""

    def build():
        out = []
        for s in FILTER_SEEDS:
            p = generate_pair(s)
            out += [p.a, p.b]
        return out

    return _timed(build)


@pytest.fixture(scope="session")
def small_pair():
    return generate_pair(7, 30)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number, name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
