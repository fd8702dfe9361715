"""Shared, session-scoped pipeline runs.

The end-to-end runs take a few minutes each, so they execute once per test
session and are shared by every test that needs trained models. Setting
``RESLM_PIPELINE_CACHE=<dir>`` keeps the workspaces between sessions (a
workspace with ``results.txt`` is reused as is).
"""

import os
import time
from pathlib import Path

import pytest

from reslm.config import ExperimentConfig
from reslm.experiment import Workspace, read_results, run_pipeline

SEEDS = (0, 1, 2)


class PipelineRuns:
    def __init__(self, root: Path):
        self.root = root
        self.seconds = {}
        self.cached = set()
        self._done = {}

    def get(self, experiment: str, seed: int, tag: str = "", **kw):
        key = (experiment, seed, tag)
        if key not in self._done:
            cfg = ExperimentConfig(experiment=experiment, seed=seed)
            ws = Workspace(self.root / f"{experiment}_s{seed}{tag}")
            t0 = time.perf_counter()
            if ws.path("results.txt").exists():
                wers = read_results(ws)
                self.cached.add(key)
            else:
                wers = run_pipeline(cfg, ws, **kw)
            self.seconds[key] = time.perf_counter() - t0
            self._done[key] = (cfg, ws, wers)
        return self._done[key]

    def crossdomain(self, seed: int):
        return self.get("crossdomain", seed)

    def intradomain(self, seed: int):
        return self.get("intradomain", seed, bench=False, negative_control=False)


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    cache = os.environ.get("RESLM_PIPELINE_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("pipeline")
    root.mkdir(parents=True, exist_ok=True)
    return PipelineRuns(root)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
