import numpy as np
import pytest

from hve.config import ModelConfig
from hve.io import Instance, WordVectorTable
from hve.model import MFSHVE, init_params

SMALL = dict(d_proj=6, d_o=4, d_text=7, d_image=5, k_obj=2)


def small_config(**overrides):
    return ModelConfig(**{**SMALL, **overrides})


def make_instance(rng, iid="x", relation="r", n_tokens=3, objects=("person", "boat"), d_text=7, d_image=5):
    return Instance(id=iid, relation=relation, tokens_range=(0, n_tokens), image_row=0,
                    objects=tuple(objects), head="h", tail="t",
                    tokens=rng.normal(size=(n_tokens, d_text)), image=rng.normal(size=d_image))


@pytest.fixture
def table():
    rng = np.random.default_rng(42)
    words = ["person", "boat", "tennis", "racket", "dog"]
    return WordVectorTable(4, {w: rng.normal(size=4) for w in words})


@pytest.fixture
def params():
    return init_params(small_config(k_shot=2), seed=7)


@pytest.fixture
def small_model(table):
    return MFSHVE(small_config(), table, seed=3)


def pytest_terminal_summary(terminalreporter):
    import checks

    if checks.ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in checks.ACCEPTANCE:
            terminalreporter.write_line(line)
