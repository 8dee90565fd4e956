import numpy as np
import pytest

from pubsel.model import SelectionFunction, constant_selection


@pytest.fixture(scope="session")
def p_fig1() -> SelectionFunction:
    """The running example: insignificant results 10x less likely to publish."""
    return SelectionFunction(cutoffs=(1.96,), coefficients=(0.1, 1.0),
                             reference_cell=1, symmetric=True)


@pytest.fixture(scope="session")
def p_flat() -> SelectionFunction:
    return constant_selection()


@pytest.fixture(scope="session")
def rng() -> np.random.Generator:
    return np.random.default_rng(20240517)
