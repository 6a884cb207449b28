"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

from sdrom import deim, fom, harness, mesh_fe, pod, rom, stab

from conftest import record_criterion


def _h1_norm(space, ops, u):
    return math.sqrt(u @ (ops.mass @ u) + u @ (ops.stiffness @ u))


def test_criterion_01_pod_error_identity(snaps16, snaps8, fe16, fe8):
    worst = 0.0
    start = time.perf_counter()
    basis = pod.compute_pod(snaps16, fe16[1], "H10", True)
    for r in range(basis.M + 1):
        lhs, _ = pod.pod_error_check(snaps16, basis, r, fe16[1])
        tail = pod.tail_energy(basis, r)
        worst = max(worst, abs(lhs - tail) / (basis.eigenvalues[0] + tail))
    elapsed = time.perf_counter() - start
    for snaps, (_, ops) in ((snaps16, fe16), (snaps8, fe8)):
        for ip in ("H10", "L2"):
            for quotients in (False, True):
                b = pod.compute_pod(snaps, ops, ip, quotients)
                for r in range(b.M + 1):
                    lhs, _ = pod.pod_error_check(snaps, b, r, ops)
                    tail = pod.tail_energy(b, r)
                    worst = max(worst, abs(lhs - tail) / (b.eigenvalues[0] + tail))
    ok = worst <= 1e-8 and elapsed < 5.0
    record_criterion(1, ok, f"max |lhs - tail|/(lambda_1 + tail) = {worst:.2e} (<= 1e-8); "
                            f"16x16 N=20 build+check {elapsed:.2f}s (< 5 s)")
    assert ok


def test_criterion_02_trilinear_skew_symmetry():
    rng = np.random.default_rng(2)
    worst = 0.0
    for n in (4, 8, 16):
        space = mesh_fe.build_space(mesh_fe.build_mesh(n))
        ops = mesh_fe.assemble(space)
        for _ in range(100):
            u, v = rng.standard_normal(space.n_vel), rng.standard_normal(space.n_vel)
            scale = _h1_norm(space, ops, u) * _h1_norm(space, ops, v) ** 2
            worst = max(worst, abs(mesh_fe.trilinear_b(u, v, v, space)) / scale)
    ok = worst <= 1e-12
    record_criterion(2, ok, f"max |b(u,v,v)| / (|u|_H1 |v|_H1^2) = {worst:.2e} over 300 pairs (<= 1e-12)")
    assert ok


@pytest.fixture(scope="module")
def deim16(snaps16, fe16):
    S = deim.offline_tau_snapshots(snaps16, fe16[0], nu=snaps16.nu)
    return S, deim.deim_offline(S, deim.numerical_rank(S), nu=snaps16.nu)


def test_criterion_03_stability_bound(snaps16, basis16, conv16, fe16, deim16):
    space, ops = fe16
    _, dmodel = deim16
    runs = violations = 0
    M, Mh = basis16.M, conv16.M
    for r in (2, 6, M):
        a0 = rom.reduced_ic(snaps16.velocity_snapshots[0], basis16, ops, r)
        for R in (0, 2, Mh):
            for src in ("online", dmodel):
                model = rom.build_reduced(basis16, conv16.with_R(R), space, ops, snaps16.nu, r=r,
                                          case=fom.ManufacturedCase(nu=snaps16.nu), tau_source=src)
                schemes = ["implicit", "semi_implicit"] + (["penalty"] if R == 0 else [])
                for scheme in schemes:
                    traj = rom.run(model, rom.ROMConfig(scheme=scheme, dt=snaps16.dt, n_steps=snaps16.N,
                                                        r=r, R=R), a0)
                    runs += 1
                    violations += len(rom.stability_violations(traj))
    ok = violations == 0
    record_criterion(3, ok, f"{violations} violations of the summed energy bound over {runs} stabilized runs "
                            f"x {snaps16.N} steps")
    assert ok


def test_criterion_04_full_rank_reproduction(snaps16, basis16, conv16, fe16, case16):
    space, ops = fe16
    M = basis16.M
    model = rom.build_reduced(basis16, conv16, space, ops, case16.nu, r=M, case=case16)
    a0 = rom.reduced_ic(snaps16.velocity_snapshots[0], basis16, ops, M)
    traj = rom.run(model, rom.ROMConfig(scheme="galerkin", dt=0.01, n_steps=20, r=M), a0)
    U = traj.coefficients @ basis16.modes.T
    E = snaps16.velocity_snapshots - U
    err = np.sqrt(np.einsum("ni,ni->n", E, (ops.mass @ E.T).T))
    ref = np.sqrt(np.einsum("ni,ni->n", snaps16.velocity_snapshots, (ops.mass @ snaps16.velocity_snapshots.T).T))
    worst = float((err / ref).max())
    ok = worst <= 1e-7
    record_criterion(4, ok, f"max relative L2 error of the r=M={M} Galerkin ROM vs FOM = {worst:.2e} (<= 1e-7)")
    assert ok


def test_criterion_05_degenerate_equivalences(snaps16, basis16, conv16, fe16, case16):
    space, ops = fe16
    r = 6
    a0 = rom.reduced_ic(snaps16.velocity_snapshots[0], basis16, ops, r)
    base = dict(dt=0.01, n_steps=20, r=r, picard_tol=1e-12)
    zero_tau = stab.TauField(np.zeros(space.mesh.n_cells), provenance="constant", nu=case16.nu)
    m_zero = rom.build_reduced(basis16, conv16.with_R(3), space, ops, case16.nu, r=r, case=case16,
                               tau_source=zero_tau)
    m_gal = rom.build_reduced(basis16, conv16.with_R(3), space, ops, case16.nu, r=r, case=case16)
    a = rom.run(m_zero, rom.ROMConfig(scheme="implicit", R=3, **base), a0).coefficients
    b = rom.run(m_gal, rom.ROMConfig(scheme="galerkin", **base), a0).coefficients
    d1 = float(np.abs(a - b).max() / np.abs(b).max())
    m_sd = rom.build_reduced(basis16, conv16.with_R(0), space, ops, case16.nu, r=r, case=case16,
                             tau_source="online")
    c = rom.run(m_sd, rom.ROMConfig(scheme="implicit", R=0, **base), a0).coefficients
    d = rom.run(m_sd, rom.ROMConfig(scheme="penalty", R=0, **base), a0).coefficients
    d2 = float(np.abs(c - d).max() / np.abs(d).max())
    ok = d1 <= 1e-10 and d2 <= 1e-10
    record_criterion(5, ok, f"tau=0 vs Galerkin {d1:.1e}, R=0 vs penalty {d2:.1e} (relative, <= 1e-10)")
    assert ok


def test_criterion_06_projector_contract(conv16, fe16):
    space, _ = fe16
    rng = np.random.default_rng(6)
    cb = conv16.with_R(min(4, conv16.M))
    w = space.quad_weights
    orth = pyth = 0.0
    for _ in range(100):
        g = rng.standard_normal(w.shape + (2,))
        p, f = stab.project_PR(g, cb), stab.fluct_PRprime(g, cb)
        gn = math.sqrt(mesh_fe.l2_inner(space, g, g))
        for i in range(cb.R):
            orth = max(orth, abs(mesh_fe.l2_inner(space, f, cb.modes[i])) / gn)
        lhs = gn ** 2
        rhs = mesh_fe.l2_inner(space, p, p) + mesh_fe.l2_inner(space, f, f)
        pyth = max(pyth, abs(lhs - rhs) / lhs)
    ok = orth <= 1e-10 and pyth <= 1e-10
    record_criterion(6, ok, f"orthogonality residual {orth:.1e}, Pythagoras relative defect {pyth:.1e} "
                            f"over 100 fields, R={cb.R} (<= 1e-10)")
    assert ok


def test_criterion_07_tau_hypothesis(snaps16, basis16, conv16, fe16, case16, deim16):
    space, ops = fe16
    S, dmodel = deim16
    ceiling = space.mesh.cell_diameters ** 2 / (stab.DEFAULT_C1 * case16.nu)
    offline_bad = int(np.count_nonzero((S <= 0) | (S > ceiling[:, None])))
    online_bad = clamps = fields = 0
    for r in (4, basis16.M):
        model = rom.build_reduced(basis16, conv16.with_R(2), space, ops, case16.nu, r=r, case=case16,
                                  tau_source=dmodel)
        a = rom.reduced_ic(snaps16.velocity_snapshots[0], basis16, ops, r)
        traj = rom.run(model, rom.ROMConfig(scheme="implicit", dt=0.01, n_steps=20, r=r, R=2), a)
        clamps += int(traj.clamp_count.sum())
        for coeffs in traj.coefficients:
            tau, _ = deim.deim_online(dmodel, coeffs, model)
            online_bad += int(np.count_nonzero((tau.values <= 0) | (tau.values > ceiling)))
            fields += 1
    ok = offline_bad == 0 and online_bad == 0
    record_criterion(7, ok, f"offline violations {offline_bad} over {S.size} values; DEIM fields post-clamp "
                            f"violations {online_bad} over {fields} fields; clamp counter total {clamps}")
    assert ok


def test_criterion_08_deim_exactness(snaps16, basis16, conv16, fe16, case16, deim16):
    space, ops = fe16
    S, dm = deim16
    rng = np.random.default_rng(8)
    recon = interp = 0.0
    for _ in range(20):
        tau = S @ rng.random(S.shape[1])
        _, full = deim.reconstruct(dm, tau[dm.indices])
        recon = max(recon, np.linalg.norm(full - tau) / np.linalg.norm(tau))
        interp = max(interp, np.abs(full[dm.indices] - tau[dm.indices]).max() / np.abs(tau).max())
    M = basis16.M
    a0 = rom.reduced_ic(snaps16.velocity_snapshots[0], basis16, ops, M)
    conf = rom.ROMConfig(scheme="implicit", dt=0.01, n_steps=20, r=M, R=conv16.M)
    trajs = []
    for src in (dm, "online"):
        model = rom.build_reduced(basis16, conv16.with_R(conv16.M), space, ops, case16.nu, r=M, case=case16,
                                  tau_source=src)
        trajs.append(rom.run(model, conf, a0).coefficients)
    traj_diff = float(np.abs(trajs[0] - trajs[1]).max() / np.abs(trajs[1]).max())
    ok = recon <= 1e-9 and interp <= 1e-10 and traj_diff <= 1e-6
    record_criterion(8, ok, f"training-span reconstruction {recon:.1e} (<= 1e-9), interpolation points "
                            f"{interp:.1e} (<= 1e-10), DEIM on/off trajectories {traj_diff:.1e} (<= 1e-6); "
                            f"r_tilde={dm.r_tilde}")
    assert ok


STUDY = """
[case]
nu = 0.05
T = 0.5
[mesh]
n_per_side = 8, 16, 32
[time]
dt_rule = h
dt_coeff = 1.0
[rom]
r = auto
R = -1, 0
scheme = implicit
[run]
seed = 9
"""


def test_criterion_09_convergence_structure(tmp_path):
    cfg = harness.parse_config(STUDY)
    _, rows, summary = harness.run_study(cfg, tmp_path)
    failed = [r for r in rows if r["status"] != "ok"]
    monotone = True
    # group rows per requested R in mesh order
    series = {}
    for row in sorted((r for r in rows if r["status"] == "ok"), key=lambda r: r["n_per_side"]):
        series.setdefault(row["R_spec"], []).append(row)
    detail = []
    for R, seq in sorted(series.items()):
        errs = [r["exact_total"] for r in seq]
        monotone &= len(seq) == 3 and all(b < a for a, b in zip(errs, errs[1:]))
        detail.append(f"R={R}: " + ", ".join(f"{e:.2e}" for e in errs))
    flagged = sum(s["flagged"] for s in summary)
    worst_ratio = max(s["structural_ratio"] for s in summary)
    regime = ", ".join(f"{r['lambda_r1_over_nu']:.2f}" for r in rows if r["status"] == "ok")
    violations = sum(r["stability_violations"] for r in rows if r["status"] == "ok")
    ok = not failed and monotone and flagged == 0 and violations == 0
    record_criterion(9, ok, f"total error (vs exact) {'; '.join(detail)}; max structural ratio "
                            f"{worst_ratio:.2f} (<= 10), lambda_(r+1)/nu per row [{regime}]")
    assert ok


def test_criterion_10_fom_spatial_order():
    nu, T = 0.01, 0.1
    case = fom.ManufacturedCase(nu=nu)
    hs, errs = [], []
    for n, steps in ((8, 4), (16, 16), (32, 64)):
        space = mesh_fe.build_space(mesh_fe.build_mesh(n))
        snaps = fom.solve_fom(case, space, T / steps, steps, nonlinear="newton")
        l2, _ = fom.velocity_errors(case, space, snaps)
        hs.append(space.mesh.h)
        errs.append(float(l2.max()))
    rates = [math.log(errs[i] / errs[i + 1]) / math.log(hs[i] / hs[i + 1]) for i in range(2)]
    ok = min(rates) >= 2.5
    record_criterion(10, ok, f"l_inf(L2) errors {', '.join(f'{e:.2e}' for e in errs)}; observed orders "
                             f"{', '.join(f'{r:.2f}' for r in rates)} (>= 2.5)")
    assert ok
