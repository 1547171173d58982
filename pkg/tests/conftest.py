import os.path

import numpy as np
import pytest

from ebdsfilter.commands.cli import all_commands, get_parser
from ebdsfilter.grid import Grid1D
from ebdsfilter.model import builtin_bistable, builtin_drifted_bm, builtin_heat
from ebdsfilter.simulate import TimeGrid

LOCAL_DIR = os.path.dirname(__file__)


@pytest.fixture()
def cli_parser():
    return get_parser(all_commands())


@pytest.fixture()
def drifted_bm():
    return builtin_drifted_bm()


@pytest.fixture()
def bistable():
    return builtin_bistable()


@pytest.fixture()
def heat():
    return builtin_heat()


@pytest.fixture()
def bm_grid():
    return Grid1D(-8.0, 12.0, 2000)


@pytest.fixture()
def coarse_grid():
    return Grid1D(-8.0, 12.0, 400)


@pytest.fixture()
def short_time():
    return TimeGrid(0.5, 2, 4)


@pytest.fixture()
def run_dir(tmp_path):
    return str(tmp_path / "run")


@pytest.fixture()
def gen():
    return np.random.default_rng(12345)
