"""Shared fixtures.  The finite-element runs are session-scoped because each
one costs seconds to minutes; tests treat the results as read-only."""
from __future__ import annotations

import numpy as np
import pytest

from aaastress import phantoms
from aaastress.meshing import build_layered_mesh
from aaastress.solver import LoadCase, MaterialSpec, run_case


@pytest.fixture
def rng():
    return np.random.default_rng(20260815)


@pytest.fixture(scope="session")
def lame_mesh_small():
    """Short, coarse thick-walled tube: pure wall (lumen touches the wall
    everywhere), fully analytic reference solution."""
    wall, lumen = phantoms.make_lame_phantom(n_theta=24, n_z=12, length=30.0)
    return build_layered_mesh(wall, lumen, thickness=1.5)


@pytest.fixture(scope="session")
def lame_case_small(lame_mesh_small):
    mat = MaterialSpec(wall_modulus=1.0e9)
    load = LoadCase(map_pressure=13.0)
    return run_case(lame_mesh_small, mat, load, detailed=True, precond="amg")


@pytest.fixture(scope="session")
def bulge_mesh_small():
    """Coarse fusiform bulge with a straight lumen, producing both wall and
    intraluminal-thrombus regions."""
    wall, lumen = phantoms.make_bulge_phantom(n_theta=16, n_z=20)
    return build_layered_mesh(wall, lumen, thickness=1.5, wall_layers=2,
                              ilt_layers=2)


@pytest.fixture(scope="session")
def bulge_case_small(bulge_mesh_small):
    mat = MaterialSpec()
    load = LoadCase(map_pressure=13.0)
    return run_case(bulge_mesh_small, mat, load, detailed=True, precond="amg")
