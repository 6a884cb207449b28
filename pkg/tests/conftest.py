import numpy as np
import pytest

from sdrom import fom, mesh_fe, pod, stab


@pytest.fixture(scope="session")
def fe8():
    space = mesh_fe.build_space(mesh_fe.build_mesh(8))
    return space, mesh_fe.assemble(space)


@pytest.fixture(scope="session")
def fe16():
    space = mesh_fe.build_space(mesh_fe.build_mesh(16))
    return space, mesh_fe.assemble(space)


@pytest.fixture(scope="session")
def case16():
    return fom.ManufacturedCase(nu=0.01)


@pytest.fixture(scope="session")
def snaps16(fe16, case16):
    """Reference run: 16x16 mesh, dt = 0.01, N = 20, nu = 0.01."""
    space, ops = fe16
    return fom.solve_fom(case16, space, 0.01, 20, ops=ops)


@pytest.fixture(scope="session")
def basis16(snaps16, fe16):
    return pod.compute_pod(snaps16, fe16[1], "H10", with_quotients=True)


@pytest.fixture(scope="session")
def conv16(snaps16, fe16):
    return stab.build_convective_space(snaps16, fe16[0], 0)


@pytest.fixture(scope="session")
def snaps8(fe8):
    space, ops = fe8
    return fom.solve_fom(fom.ManufacturedCase(nu=0.05), space, 0.02, 10, ops=ops)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def random_velocity(space, rng, scale=1.0):
    """Random field with homogeneous boundary values."""
    u = scale * rng.standard_normal(space.n_vel)
    u[~space.interior_mask] = 0.0
    return u


ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
