from __future__ import annotations

import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from xmodal.dataio import ManifestEntry, SampleSource, make_synthetic_manifest  # noqa: E402
from xmodal.teachers import MockTeacher  # noqa: E402
from xmodal.trainer import RunState, TrainConfig, train  # noqa: E402

# Settings of the desk-scale synthetic run (see configs/synthetic.cfg).
SYNTH_N = 200
SYNTH_T = 16
SYNTH_CFG = TrainConfig(preset="tiny", epochs=10, batch_size=4, lr0=1e-3, seed=0)


@dataclass
class SyntheticRun:
    entries: list[ManifestEntry]
    source: SampleSource
    teacher: MockTeacher
    cfg: TrainConfig
    state: RunState
    seconds: float


def run_synthetic(run_dir: Path, cfg: TrainConfig = SYNTH_CFG, stop_after_epoch: int | None = None) -> SyntheticRun:
    t0 = time.perf_counter()
    entries = make_synthetic_manifest(SYNTH_N, T=SYNTH_T, seed=cfg.seed)
    source, teacher = SampleSource(), MockTeacher()
    state = train(entries, source, teacher, cfg, run_dir, stop_after_epoch=stop_after_epoch)
    return SyntheticRun(entries, source, teacher, cfg, state, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def synthetic_run(tmp_path_factory) -> SyntheticRun:
    """One full 10-epoch synthetic training run shared across test modules."""
    return run_synthetic(tmp_path_factory.mktemp("synthetic_run"))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
