import csv
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdrom import deim, rom, stab
from sdrom.errors import FormatError, InvalidArgumentError, TruncatedFileError


def straight_line_greedy(Q):
    """Plain-loop oracle of the greedy selection (ties to the lowest index)."""
    n, k = Q.shape
    chosen = []
    best, arg = -1.0, 0
    for i in range(n):
        if abs(Q[i, 0]) > best:
            best, arg = abs(Q[i, 0]), i
    chosen.append(arg)
    for m in range(1, k):
        A = np.array([[Q[p, c] for c in range(m)] for p in chosen])
        rhs = np.array([Q[p, m] for p in chosen])
        c = np.linalg.solve(A, rhs)
        best, arg = -1.0, 0
        for i in range(n):
            res = Q[i, m] - sum(Q[i, j] * c[j] for j in range(m))
            if abs(res) > best:
                best, arg = abs(res), i
        chosen.append(arg)
    return chosen


def test_single_column_argmax():
    idx = deim.greedy_indices(np.array([[0.1], [-0.5], [0.3]]))
    assert list(idx) == [1]      # the second cell, 1-based index 2


def test_synthetic_set_matches_oracle(rng):
    S = rng.random((6, 4)) + 0.1
    model = deim.deim_offline(S, 4, nu=0.1)
    assert list(model.indices) == straight_line_greedy(model.Q)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(4, 30), k=st.integers(1, 4))
def test_greedy_property(seed, n, k):
    r = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(r.standard_normal((n, k)))
    idx = deim.greedy_indices(Q)
    assert list(idx) == straight_line_greedy(Q)
    assert len(set(idx.tolist())) == k
    # interpolation exactness at previously selected indices at every step
    for m in range(1, k):
        c = np.linalg.solve(Q[idx[:m], :m], Q[idx[:m], m])
        res = Q[:, m] - Q[:, :m] @ c
        np.testing.assert_allclose(res[idx[:m]], 0.0, atol=1e-10)


def test_greedy_ties_lowest_index():
    assert list(deim.greedy_indices(np.array([[0.5], [-0.5], [0.5]]))) == [0]


def test_reconstruction_in_span(rng):
    S = rng.random((40, 6)) + 0.5
    model = deim.deim_offline(S, 6, nu=1.0)
    tau = S @ rng.random(6)
    _, full = deim.reconstruct(model, tau[model.indices])
    np.testing.assert_allclose(full, tau, rtol=1e-9)
    np.testing.assert_allclose(full[model.indices], tau[model.indices], rtol=1e-12)


def test_rank_checks(rng):
    S = np.outer(rng.random(10), rng.random(3))
    assert deim.numerical_rank(S) == 1
    with pytest.raises(InvalidArgumentError):
        deim.deim_offline(S, 2)
    with pytest.raises(InvalidArgumentError):
        deim.deim_offline(S, 0)
    with pytest.raises(InvalidArgumentError):
        deim.deim_offline(rng.random(5), 1)


def test_accepts_tau_fields(fe8, snaps8):
    space, _ = fe8
    fields = [stab.tau_offline(space, u, nu=0.05) for u in snaps8.velocity_snapshots[1:4]]
    model = deim.deim_offline(fields, 2)
    assert model.nu == 0.05 and model.Q.shape == (space.mesh.n_cells, 2)


@pytest.fixture(scope="module")
def full_model(snaps16, basis16, conv16, fe16):
    space, ops = fe16
    S = deim.offline_tau_snapshots(snaps16, space, nu=snaps16.nu)
    dm = deim.deim_offline(S, deim.numerical_rank(S), nu=snaps16.nu)
    rm = rom.build_reduced(basis16, conv16, space, ops, snaps16.nu, tau_source=dm)
    return S, dm, rm


def test_training_state_reproduced(full_model, snaps16, basis16, fe16):
    S, dm, rm = full_model
    _, ops = fe16
    for n in (1, 7, 20):
        a = rom.reduced_ic(snaps16.velocity_snapshots[n], basis16, ops)
        tau, diag = deim.deim_online(dm, a, rm)
        np.testing.assert_allclose(tau.values, S[:, n - 1], rtol=1e-8)
        np.testing.assert_allclose(diag["raw"][dm.indices], diag["tau_I"], rtol=1e-10)
        assert diag["clamp_count"] == 0


def test_clamping_counts(fe8, basis16):
    space, _ = fe8
    nk = space.mesh.n_cells
    col = np.full(nk, -5.0)
    col[3] = 1.0
    col /= np.linalg.norm(col)
    dm = deim.DeimModel(Q=col[:, None], indices=np.array([3]), c1=4.0, c2=1.0, nu=0.05)

    class Stub:
        pass

    stub = Stub()
    stub.space = space
    stub.mode_quad_values = np.zeros((1,) + space.quad_weights.shape + (2,))
    tau, diag = deim.deim_online(dm, np.zeros(1), stub)
    assert diag["clamp_count"] == nk - 1
    assert np.all(tau.values >= 0)
    assert np.all(tau.values <= space.mesh.cell_diameters ** 2 / (4.0 * 0.05) * (1 + 1e-12))
    assert tau.provenance == "deim-online"


def test_deim_io_round_trip(tmp_path, rng):
    model = deim.deim_offline(rng.random((12, 3)) + 0.1, 3, c1=2.0, c2=3.0, nu=0.5)
    path = tmp_path / "d.bin"
    deim.write_deim(model, path)
    back = deim.read_deim(path)
    assert back.Q.tobytes() == model.Q.tobytes()
    np.testing.assert_array_equal(back.indices, model.indices)
    assert (back.c1, back.c2, back.nu) == (2.0, 3.0, 0.5)
    data = path.read_bytes()
    off = 8 + 12 + 8 * 12 * 3
    stored = struct.unpack("<3I", data[off:off + 12])
    assert list(stored) == [i + 1 for i in model.indices]     # 1-based on disk


def test_deim_format_errors(tmp_path, rng):
    model = deim.deim_offline(rng.random((12, 3)) + 0.1, 3)
    path = tmp_path / "d.bin"
    deim.write_deim(model, path)
    data = path.read_bytes()
    path.write_bytes(b"SDROMTR1" + data[8:])
    with pytest.raises(FormatError):
        deim.read_deim(path)
    off = 8 + 12 + 8 * 12 * 3
    path.write_bytes(data[:off] + struct.pack("<I", 0) + data[off + 4:])
    with pytest.raises(FormatError):
        deim.read_deim(path)
    path.write_bytes(data[:-5])
    with pytest.raises(TruncatedFileError):
        deim.read_deim(path)


def test_diagnostics_csv(tmp_path, full_model, snaps16, basis16, fe16):
    _, _, rm = full_model
    a0 = rom.reduced_ic(snaps16.velocity_snapshots[0], basis16, fe16[1])
    traj = rom.run(rm, rom.ROMConfig(scheme="semi_implicit", dt=0.01, n_steps=3, r=rm.r), a0)
    path = tmp_path / "diag.csv"
    deim.write_diagnostics_csv(traj, path)
    rows = list(csv.reader(path.read_text().splitlines()))
    assert rows[0] == ["step", "clamp_count", "cond_Q_I"]
    assert len(rows) == 4
    assert float(rows[1][2]) == pytest.approx(rm.tau_source.cond)
