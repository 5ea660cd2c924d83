import numpy as np
import pytest

from xtsi.material_model import estimate_library_stats
from xtsi.spectral_data import (
    EnergyGrid,
    kramers_spectrum,
    load_element_tables,
    load_material_library,
    shipped_elements_dir,
    shipped_library_path,
)


@pytest.fixture(scope="session")
def grid():
    return EnergyGrid.uniform(30.0, 160.0, 180)


@pytest.fixture(scope="session")
def elements(grid):
    return load_element_tables(shipped_elements_dir(), grid)


@pytest.fixture(scope="session")
def library():
    return load_material_library(shipped_library_path())


@pytest.fixture(scope="session")
def library_stats(library, elements, grid):
    return estimate_library_stats(library, elements, grid, n_realizations=1000, rng_seed=0)


@pytest.fixture(scope="session")
def spectrum(grid, elements):
    return kramers_spectrum(grid, 160.0, elements["Al"], 0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("XTSI_CACHE_DIR", str(tmp_path / "xtsi-cache"))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
