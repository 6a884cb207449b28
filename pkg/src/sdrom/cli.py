"""Command-line front end: ``sdrom fom|pod|rom|deim-build|study``."""
import argparse
import csv
import logging
import sys

import numpy as np

from . import deim, fom, harness, mesh_fe, pod, rom, stab
from .errors import (ConvergenceError, DegenerateBasisError, FormatError, InvalidArgumentError,
                     NumericFailure, SolverFailure, TruncatedFileError)

EXIT_OK, EXIT_ARGS, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("sdrom")


def _space_for(snaps):
    space = mesh_fe.build_space(mesh_fe.build_mesh(snaps.n_per_side))
    if space.n_vel != snaps.n_vel:
        raise InvalidArgumentError("snapshot dimension does not match its mesh")
    return space, mesh_fe.assemble(space)


def cmd_fom(args):
    case = fom.ManufacturedCase(nu=args.nu, profile=args.case, rate=args.rate)
    space = mesh_fe.build_space(mesh_fe.build_mesh(args.n))
    snaps = fom.solve_fom(case, space, args.dt, args.steps, nonlinear=args.nonlinear, tol=args.tol)
    fom.write_snapshots(snaps, args.out)
    el2, eh1 = fom.velocity_errors(case, space, snaps)
    print(f"wrote {args.out}: {snaps.n_snapshots} snapshots, max L2 error vs exact {el2.max():.3e}")


def cmd_pod(args):
    snaps = fom.read_snapshots(args.snapshots)
    _, ops = _space_for(snaps)
    basis = pod.compute_pod(snaps, ops, args.ip, args.quotients)
    pod.write_basis(basis, args.out)
    if args.spectrum:
        pod.write_spectrum_csv(basis, args.spectrum)
    print(f"wrote {args.out}: M = {basis.M}, lambda_1 = {basis.eigenvalues[0]:.6e}")


def cmd_rom(args):
    snaps = fom.read_snapshots(args.snapshots)
    basis = pod.read_basis(args.basis)
    if basis.modes.shape[0] != snaps.n_vel:
        raise InvalidArgumentError("basis and snapshots live on different meshes")
    space, ops = _space_for(snaps)
    case = fom.ManufacturedCase(nu=snaps.nu, profile=args.case, rate=args.rate)
    r = basis.M if args.r is None else args.r
    R = args.R
    scheme = args.scheme
    conv = stab.build_convective_space(snaps, space, 0)
    conv = conv.with_R(conv.M if R < 0 else R)
    if args.deim == "off":
        tau_src = "online"
    else:
        tau_src = deim.read_deim(args.deim)
        if tau_src.Q.shape[0] != space.mesh.n_cells:
            raise InvalidArgumentError("DEIM model was built on a different mesh")
    model = rom.build_reduced(basis, conv, space, ops, snaps.nu, r=r, case=case, tau_source=tau_src,
                              c1=args.c1, c2=args.c2)
    steps = snaps.N if args.steps is None else args.steps
    conf = rom.ROMConfig(scheme=scheme, dt=snaps.dt, n_steps=steps, picard_tol=args.picard_tol,
                         picard_max=args.picard_max, r=r, R=conv.R)
    a0 = rom.reduced_ic(snaps.velocity_snapshots[0], basis, ops, r)
    traj = rom.run(model, conf, a0)
    rom.write_trajectory_csv(traj, args.out)
    if args.binary:
        rom.write_trajectory(traj, args.binary, snaps.n_per_side)
    if args.diagnostics:
        deim.write_diagnostics_csv(traj, args.diagnostics)
    bad = rom.stability_violations(traj)
    print(f"wrote {args.out}: r = {r}, R = {conv.R}, scheme = {scheme}, "
          f"stability violations = {len(bad)}, clamped cells = {int(traj.clamp_count.sum())}")


def _read_tau_csv(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        data = np.array([[float(x) for x in row] for row in rows[1:] if row], dtype=float)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"cannot parse tau snapshot CSV: {exc}", 0) from exc
    if data.ndim != 2 or data.size == 0:
        raise FormatError("tau snapshot CSV has no data rows", 0)
    return data


def cmd_deim_build(args):
    if args.from_fom:
        snaps = fom.read_snapshots(args.from_fom)
        space, _ = _space_for(snaps)
        S = deim.offline_tau_snapshots(snaps, space, args.c1, args.c2, snaps.nu)
        nu = snaps.nu
    else:
        S = _read_tau_csv(args.tau_snapshots)
        if args.nu is None:
            raise InvalidArgumentError("--nu is required with --tau-snapshots")
        nu = args.nu
    rt = deim.numerical_rank(S) if args.rtilde == "rank" else int(args.rtilde)
    model = deim.deim_offline(S, rt, args.c1, args.c2, nu)
    deim.write_deim(model, args.out)
    print(f"wrote {args.out}: r_tilde = {model.r_tilde}, cond(Q_I) = {model.cond:.3e}")


def cmd_study(args):
    cfg = harness.load_config(args.config)
    out, rows, summary = harness.run_study(cfg, args.out)
    failed = sum(r.get("status") != "ok" for r in rows)
    flagged = sum(s["flagged"] for s in summary)
    print(f"wrote {out}/rows.csv and {out}/summary.csv: {len(rows)} rows, "
          f"{failed} failed, {flagged} flagged")


def _positive(kind):
    def conv(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive: {text}")
        return v
    return conv


def build_parser():
    p = argparse.ArgumentParser(prog="sdrom", description="Stabilized POD reduced-order models for Navier-Stokes")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fom", help="solve the full-order model and write snapshots")
    f.add_argument("--n", type=int, required=True, help="cells per side")
    f.add_argument("--dt", type=_positive(float), required=True)
    f.add_argument("--steps", type=int, required=True)
    f.add_argument("--nu", type=_positive(float), required=True)
    f.add_argument("--case", default="exp_decay", choices=["exp_decay", "cosine"])
    f.add_argument("--rate", type=float, default=1.0, help="time-profile rate")
    f.add_argument("--nonlinear", default="picard", choices=["picard", "newton"])
    f.add_argument("--tol", type=_positive(float), default=1e-10)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fom)

    q = sub.add_parser("pod", help="build a POD basis from snapshots")
    q.add_argument("--snapshots", required=True)
    q.add_argument("--ip", default="h10", type=str.lower, choices=["h10", "l2"])
    q.add_argument("--quotients", action="store_true", help="augment with difference quotients")
    q.add_argument("--spectrum", help="optional eigenvalue CSV")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_pod)

    r = sub.add_parser("rom", help="run a reduced-order model")
    r.add_argument("--basis", required=True)
    r.add_argument("--snapshots", required=True)
    r.add_argument("--scheme", default="implicit", choices=list(rom.SCHEMES))
    r.add_argument("--r", type=int)
    r.add_argument("--R", type=int, default=0, help="convective modes (-1 for all)")
    r.add_argument("--c1", type=_positive(float), default=stab.DEFAULT_C1)
    r.add_argument("--c2", type=_positive(float), default=stab.DEFAULT_C2)
    r.add_argument("--deim", default="off", help="DEIM model file or 'off'")
    r.add_argument("--case", default="exp_decay", choices=["exp_decay", "cosine"])
    r.add_argument("--rate", type=float, default=1.0)
    r.add_argument("--steps", type=int)
    r.add_argument("--picard-tol", type=_positive(float), default=1e-10)
    r.add_argument("--picard-max", type=int, default=100)
    r.add_argument("--binary", help="also write the trajectory in binary form")
    r.add_argument("--diagnostics", help="per-step clamp count and cond(Q_I) CSV")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rom)

    d = sub.add_parser("deim-build", help="build a DEIM model for tau")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--tau-snapshots", help="CSV with a header row and one column per snapshot")
    src.add_argument("--from-fom", help="snapshot file; tau is evaluated from u^1..u^N")
    d.add_argument("--rtilde", default="rank", help="integer or 'rank'")
    d.add_argument("--c1", type=_positive(float), default=stab.DEFAULT_C1)
    d.add_argument("--c2", type=_positive(float), default=stab.DEFAULT_C2)
    d.add_argument("--nu", type=_positive(float))
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_deim_build)

    s = sub.add_parser("study", help="run a convergence study from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="override the configured output directory")
    s.set_defaults(func=cmd_study)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConvergenceError, SolverFailure, NumericFailure, DegenerateBasisError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (FormatError, TruncatedFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
