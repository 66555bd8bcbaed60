import pytest

from imdelay.core import default_params


@pytest.fixture
def base():
    """Reference scenario with the documented defaults (d_m=1e-5, N_m=50, s=100, eps=1e-5, lambda=100)."""
    return default_params()
