"""Suite-wide fixtures."""

import numpy as np
import pytest

from xsmoe import numerics as nm


@pytest.fixture(autouse=True)
def _clean_engine():
    """Every test starts with an empty tape, float32 default, checks off."""
    nm.graph().clear()
    nm.set_default_dtype(np.float32)
    nm.set_finite_checks(False)
    yield
    nm.graph().clear()
    nm.set_default_dtype(np.float32)
    nm.set_finite_checks(False)
