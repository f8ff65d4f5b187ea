import pytest

from tilevlm import tensor as tt


@pytest.fixture(autouse=True)
def _fresh_tape():
    # a failing test must not leave nodes behind for the next one
    with tt.fresh_tape():
        yield
