import pytest

from triseg import autodiff as ad


@pytest.fixture(autouse=True)
def clean_tape():
    """Each test starts with an empty tape and the finite guard on."""
    ad.clear_tape()
    prev = ad.set_finite_guard(True)
    yield
    ad.set_finite_guard(prev)
    ad.clear_tape()
