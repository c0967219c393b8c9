from pathlib import Path

import pytest

from libdebloat import fixtures
from libdebloat.fixtures import ElementSpec, FixtureSpec

DATA = Path(__file__).parent / "data"


def small_spec(**overrides) -> FixtureSpec:
    """Three functions, one region with sm_70/75/86 cubins."""
    spec = dict(
        seed=1,
        functions=[("init_runtime", 48), ("at_matmul", 96), ("at_relu", 64), ("unused_helper", 40)],
        regions=[[
            ElementSpec("cubin", 70, ("matmul", "relu"), 128),
            ElementSpec("cubin", 75, ("matmul", "matmul_splitk", "relu"), 160),
            ElementSpec("cubin", 86, ("matmul", "relu"), 96),
        ]],
        init_array=["init_runtime"],
        function_gap=8,
    )
    spec.update(overrides)
    return FixtureSpec(**spec)


@pytest.fixture
def spec():
    return small_spec()


@pytest.fixture
def built(spec):
    return fixtures.build_fixture(spec)


@pytest.fixture
def data_dir():
    return DATA
