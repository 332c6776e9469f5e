from types import SimpleNamespace

import numpy as np
import pytest

from podecm.material import INCLUSION, MATRIX
from podecm.meshgen import composite_rve
from podecm.microfem import MacroLoad, RveModel, stretch_matrix
from podecm.morph import InclusionScaling
from podecm.pipeline import SampleRun, collect_snapshots, train_from_snapshots

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


TRAIN_CASES = [((1.08, 0.95, 0.04), 0.8), ((0.93, 1.06, -0.05), 1.1), ((1.04, 1.05, 0.07), 0.6)]


@pytest.fixture(scope="session")
def small_training():
    """Short plastic histories on a coarse composite cell and a trained ROM (N=6, L=6)."""
    model = RveModel(composite_rve(h=0.15), InclusionScaling(bounds=(0.5, 1.2)), {1: MATRIX, 2: INCLUSION})
    runs = []
    for i, (U, z) in enumerate(TRAIN_CASES):
        load = MacroLoad.triangle_wave(stretch_matrix(*U), 8)
        mu = np.array([z])
        runs.append(SampleRun(i, mu, load, model.solve(mu, load, keep_point_stress=True), 0.0))
    disp, stress = collect_snapshots(model, runs)
    trained = train_from_snapshots(model, disp, stress, N=6, L=6, eps=1e-3)
    return SimpleNamespace(model=model, runs=runs, disp=disp, stress=stress, trained=trained)

