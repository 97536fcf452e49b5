import pathlib

import numpy as np
import pytest

from duvdiff.beamline import QuadratureSpec
from duvdiff.config import parse_config

CONFIG_DIR = pathlib.Path(__file__).resolve().parent.parent / "configs"


def load_config(name: str):
    return parse_config((CONFIG_DIR / name).read_text())


@pytest.fixture(scope="session")
def pch2_cfg():
    return load_config("pch2.cfg")


@pytest.fixture(scope="session")
def tpp_cfg():
    return load_config("tpp.cfg")


@pytest.fixture(scope="session")
def dnd_cfg():
    return load_config("dnd.cfg")


@pytest.fixture(scope="session")
def fast_cfg(pch2_cfg):
    """Small-frame variant for quick synthesis tests."""
    cfg = pch2_cfg.replace_fields("detector", width_px=128, height_px=400,
                                  offset_y=-100e-6)
    return cfg


@pytest.fixture(scope="session")
def fast_quad():
    return QuadratureSpec(n_velocity=8, n_source_x=4, n_angle_x=4,
                          n_source_y=8, n_angle_y=2, n_strength=16)


@pytest.fixture(scope="session")
def mid_quad():
    return QuadratureSpec(n_velocity=16, n_source_x=8, n_angle_x=8,
                          n_source_y=24, n_angle_y=4, n_strength=48)


def default_molecule(**overrides):
    """A molecule spec with neutral photophysics for unit tests."""
    from duvdiff.config import MoleculeSpec
    from scipy.constants import atomic_mass
    base = dict(mass=514.5 * atomic_mass, alpha_duv=1.335e-40,
                sigma_duv=8.5e-21, phi_ic=0.0, phi_isc=1.0, phi_f=0.0,
                p_dep=0.0, lambda_f=266e-9)
    base.update(overrides)
    return MoleculeSpec(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
