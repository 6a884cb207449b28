"""Error norms, study configuration and convergence sweeps with CSV reports."""
import configparser
import csv
import hashlib
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import deim, fom, mesh_fe, pod, rom, stab
from .errors import InvalidArgumentError, SdromError

log = logging.getLogger(__name__)

VELOCITY_ORDER = 2     # P2 velocity


@dataclass
class ErrorReport:
    discrete_L2L2: float     # (1/(N+1)) sum_n ||u^n - u_r^n||^2
    discrete_H1: float       # nu dt sum_n ||grad(u^{n+1} - u_r^{n+1})||^2
    tail: float
    conv_tail: float
    exact_L2L2: float = float("nan")
    exact_H1: float = float("nan")

    @property
    def total(self):
        return self.discrete_L2L2 + self.discrete_H1

    @property
    def exact_total(self):
        return self.exact_L2L2 + self.exact_H1


def _check_grid(fom_set, traj):
    if len(fom_set.times) != len(traj.times):
        raise InvalidArgumentError(f"time grids differ: {len(fom_set.times)} vs {len(traj.times)} levels")
    if not math.isclose(fom_set.dt, traj.dt, rel_tol=1e-12):
        raise InvalidArgumentError(f"time steps differ: {fom_set.dt} vs {traj.dt}")


def error_norms(fom_set, traj, modes, ops, nu, basis=None, conv_basis=None, r=None, h=None,
                case=None, space=None):
    """Error norms of a ROM trajectory against FOM snapshots, plus the a-priori bound surrogates.

    ``modes`` holds the ROM basis vectors as columns, or is a PODBasis whose
    leading modes match the trajectory.  When ``case`` and ``space`` are
    given, the same norms against the exact manufactured velocity are
    filled in as well.
    """
    _check_grid(fom_set, traj)
    if isinstance(modes, pod.PODBasis):
        basis = modes if basis is None else basis
        modes = modes.truncate(traj.coefficients.shape[1])
    if modes.shape != (fom_set.n_vel, traj.coefficients.shape[1]):
        raise InvalidArgumentError("modes do not match the snapshot dimension or the trajectory rank")
    U = traj.coefficients @ modes.T
    E = fom_set.velocity_snapshots - U
    l2 = np.einsum("ni,ni->n", E, (ops.mass @ E.T).T)
    h1 = np.einsum("ni,ni->n", E, (ops.stiffness @ E.T).T)
    N = fom_set.N
    tail = 0.0
    if basis is not None:
        tail = pod.tail_energy(basis, r if r is not None else modes.shape[1]) + basis.discarded_energy
    conv_tail = 0.0
    if conv_basis is not None and h is not None:
        conv_tail = h ** 2 * float(conv_basis.eigenvalues[conv_basis.R:].sum())
    report = ErrorReport(discrete_L2L2=float(max(l2.sum(), 0.0)) / (N + 1),
                         discrete_H1=float(max(nu * fom_set.dt * h1[1:].sum(), 0.0)),
                         tail=tail, conv_tail=conv_tail)
    if case is not None and space is not None:
        rom_set = fom.SnapshotSet(fom_set.n_per_side, fom_set.dt, nu, U, times=fom_set.times)
        el2, eh1 = fom.velocity_errors(case, space, rom_set)
        report.exact_L2L2 = float((el2 ** 2).sum()) / (N + 1)
        report.exact_H1 = float(nu * fom_set.dt * (eh1[1:] ** 2).sum())
    return report


# ---------------------------------------------------------------------------
# configuration

_SCHEMA = {
    "case": {"nu": float, "profile": str, "rate": float, "amplitude": float, "T": float},
    "mesh": {"n_per_side": "intlist"},
    "time": {"dt_rule": str, "dt_coeff": float, "dt": float},
    "rom": {"r": "rlist", "R": "intlist", "scheme": "strlist", "c1": float, "c2": float,
            "ip": str, "quotients": "bool", "picard_tol": float, "picard_max": int},
    "deim": {"enabled": "bool", "rtilde": str},
    "fom": {"nonlinear": str, "tol": float},
    "output": {"directory": str, "cache_dir": str},
    "run": {"seed": int},
}


@dataclass
class StudyConfig:
    nu: float = 0.05
    profile: str = "exp_decay"
    rate: float = 1.0
    amplitude: float = 1.0
    T: float = 0.5
    meshes: list = field(default_factory=lambda: [8, 16])
    dt_rule: str = "h"            # 'h' -> dt ~ dt_coeff * h, 'fixed' -> dt
    dt_coeff: float = 1.0
    dt: float = 0.05
    r_list: list = field(default_factory=lambda: ["M"])
    R_list: list = field(default_factory=lambda: [0])
    schemes: list = field(default_factory=lambda: ["implicit"])
    c1: float = stab.DEFAULT_C1
    c2: float = stab.DEFAULT_C2
    ip: str = "H10"
    quotients: bool = True
    picard_tol: float = 1e-10
    picard_max: int = 100
    deim: bool = False
    rtilde: str = "rank"
    fom_nonlinear: str = "picard"
    fom_tol: float = 1e-10
    output_dir: str = "study_out"
    cache_dir: str = ""
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.nu > 0:
            raise InvalidArgumentError("nu must be positive")
        if not self.T > 0:
            raise InvalidArgumentError("T must be positive")
        for name in ("meshes", "r_list", "R_list", "schemes"):
            if not getattr(self, name):
                raise InvalidArgumentError(f"{name} must be nonempty")
        if self.dt_rule not in ("h", "fixed"):
            raise InvalidArgumentError(f"dt_rule must be 'h' or 'fixed', got {self.dt_rule!r}")
        if self.dt_rule == "h" and not self.dt_coeff > 0:
            raise InvalidArgumentError("dt_coeff must be positive")
        if self.dt_rule == "fixed" and not self.dt > 0:
            raise InvalidArgumentError("dt must be positive")
        for s in self.schemes:
            if s not in rom.SCHEMES:
                raise InvalidArgumentError(f"unknown scheme {s!r}")
        for n in self.meshes:
            if n < 2:
                raise InvalidArgumentError("n_per_side values must be >= 2")
        self.ip = pod.normalize_ip(self.ip)

    def time_grid(self, n_per_side):
        """(dt, n_steps) for a mesh; dt = T / round(T / (dt_coeff h)) under the 'h' rule."""
        if self.dt_rule == "fixed":
            steps = max(1, int(round(self.T / self.dt)))
        else:
            h = math.sqrt(2.0) / n_per_side
            steps = max(1, int(round(self.T / (self.dt_coeff * h))))
        return self.T / steps, steps


def _parse_value(kind, raw, where):
    raw = raw.strip()
    try:
        if kind is float:
            return float(raw)
        if kind is int:
            return int(raw)
        if kind is str:
            return raw
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        items = [x.strip() for x in raw.replace(",", " ").split() if x.strip()]
        if kind == "intlist":
            return [int(x) for x in items]
        if kind == "strlist":
            return items
        if kind == "rlist":
            return [x if x in ("M", "auto") else int(x) for x in items]
    except ValueError as exc:
        raise InvalidArgumentError(f"bad value {raw!r} for {where}") from exc
    raise AssertionError(kind)


_FIELD_MAP = {
    ("case", "nu"): "nu", ("case", "profile"): "profile", ("case", "rate"): "rate",
    ("case", "amplitude"): "amplitude", ("case", "T"): "T",
    ("mesh", "n_per_side"): "meshes",
    ("time", "dt_rule"): "dt_rule", ("time", "dt_coeff"): "dt_coeff", ("time", "dt"): "dt",
    ("rom", "r"): "r_list", ("rom", "R"): "R_list", ("rom", "scheme"): "schemes",
    ("rom", "c1"): "c1", ("rom", "c2"): "c2", ("rom", "ip"): "ip", ("rom", "quotients"): "quotients",
    ("rom", "picard_tol"): "picard_tol", ("rom", "picard_max"): "picard_max",
    ("deim", "enabled"): "deim", ("deim", "rtilde"): "rtilde",
    ("fom", "nonlinear"): "fom_nonlinear", ("fom", "tol"): "fom_tol",
    ("output", "directory"): "output_dir", ("output", "cache_dir"): "cache_dir",
    ("run", "seed"): "seed",
}


def parse_config(text):
    """Parse ``key = value`` lines grouped under ``[section]`` headers.

    Unknown sections or keys raise InvalidArgumentError.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise InvalidArgumentError(f"malformed config: {exc}") from exc
    kwargs = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise InvalidArgumentError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in _SCHEMA[section]:
                raise InvalidArgumentError(f"unknown config key {key!r} in [{section}]")
            kwargs[_FIELD_MAP[(section, key)]] = _parse_value(_SCHEMA[section][key], raw, f"[{section}] {key}")
    return StudyConfig(**kwargs)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# sweeps

def _cache_key(case, n, dt, steps, cfg):
    text = f"{case.key}|n={n}|dt={dt!r}|N={steps}|{cfg.fom_nonlinear}|{cfg.fom_tol!r}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


class SnapshotCache:
    """FOM snapshot cache in memory, optionally mirrored to a directory."""

    def __init__(self, directory=""):
        self.directory = directory
        self._mem = {}

    def get(self, key):
        if key in self._mem:
            return self._mem[key]
        if self.directory:
            path = os.path.join(self.directory, f"{key}.snap")
            if os.path.exists(path):
                self._mem[key] = fom.read_snapshots(path)
                return self._mem[key]
        return None

    def put(self, key, snapset):
        self._mem[key] = snapset
        if self.directory:
            os.makedirs(self.directory, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            os.close(fd)
            fom.write_snapshots(snapset, tmp)
            os.replace(tmp, os.path.join(self.directory, f"{key}.snap"))


def choose_r(requested, basis, nu):
    """Resolve an r entry: an integer, ``'M'`` (all modes) or ``'auto'`` (smallest r with lambda_{r+1} <= nu)."""
    if requested == "M":
        return basis.M
    if requested == "auto":
        lam = basis.eigenvalues
        for r in range(1, basis.M + 1):
            if r >= basis.M or lam[r] <= nu:
                return r
        return basis.M
    return int(requested)


ROW_FIELDS = [
    "n_per_side", "h", "dt", "N", "scheme", "r_spec", "r", "R_spec", "R", "deim", "M", "M_hat",
    "lambda_r1_over_nu", "discrete_L2L2", "discrete_H1", "total",
    "exact_L2L2", "exact_H1", "exact_total", "fom_exact_L2L2", "fom_exact_H1",
    "tail", "conv_tail", "stability_violations", "clamp_total", "max_picard", "status",
]

SUMMARY_FIELDS = [
    "scheme", "r_spec", "r", "R", "deim", "n_per_side", "h", "total", "rate_total",
    "exact_total", "rate_exact", "structural_constant", "structural_ratio",
    "structural_ratio_fom", "flagged",
]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _study_rows_for_mesh(cfg, case, n, cache):
    space = mesh_fe.build_space(mesh_fe.build_mesh(n))
    ops = mesh_fe.assemble(space)
    dt, steps = cfg.time_grid(n)
    key = _cache_key(case, n, dt, steps, cfg)
    snaps = cache.get(key)
    if snaps is None:
        snaps = fom.solve_fom(case, space, dt, steps, nonlinear=cfg.fom_nonlinear, tol=cfg.fom_tol, ops=ops)
        cache.put(key, snaps)
    el2, eh1 = fom.velocity_errors(case, space, snaps)
    fom_l2l2 = float((el2 ** 2).sum()) / (snaps.N + 1)
    fom_h1 = float(case.nu * dt * (eh1[1:] ** 2).sum())
    basis = pod.compute_pod(snaps, ops, cfg.ip, cfg.quotients)
    conv_full = stab.build_convective_space(snaps, space, 0)
    deim_model = None
    if cfg.deim:
        taus = deim.offline_tau_snapshots(snaps, space, cfg.c1, cfg.c2, case.nu)
        rt = deim.numerical_rank(taus) if cfg.rtilde == "rank" else int(cfg.rtilde)
        deim_model = deim.deim_offline(taus, rt, cfg.c1, cfg.c2, case.nu)
    h = space.mesh.h
    rows = []
    seen = set()
    for r_spec in cfg.r_list:
        for R in cfg.R_list:
            for scheme in cfg.schemes:
                # tau = 0 and penalty runs do not depend on R
                if scheme in ("galerkin", "penalty"):
                    if (r_spec, scheme) in seen:
                        continue
                    seen.add((r_spec, scheme))
                row = {"n_per_side": n, "h": h, "dt": dt, "N": steps, "scheme": scheme,
                       "r_spec": str(r_spec), "r": r_spec, "R": R, "R_spec": R, "deim": int(deim_model is not None),
                       "M": basis.M, "M_hat": conv_full.M,
                       "fom_exact_L2L2": fom_l2l2, "fom_exact_H1": fom_h1, "status": "ok"}
                try:
                    r = choose_r(r_spec, basis, case.nu)
                    row["r"] = r
                    if scheme in ("galerkin", "penalty"):
                        R_eff = 0
                    else:
                        R_eff = min(R, conv_full.M) if R >= 0 else conv_full.M
                    row["R"] = R_eff
                    cb = conv_full.with_R(R_eff)
                    lam = basis.eigenvalues
                    row["lambda_r1_over_nu"] = float(lam[r] / case.nu) if r < basis.M else 0.0
                    tau_src = deim_model if deim_model is not None else "online"
                    model = rom.build_reduced(basis, cb, space, ops, case.nu, r=r, case=case,
                                              tau_source=tau_src, c1=cfg.c1, c2=cfg.c2)
                    a0 = rom.reduced_ic(snaps.velocity_snapshots[0], basis, ops, r)
                    conf = rom.ROMConfig(scheme=scheme, dt=dt, n_steps=steps, picard_tol=cfg.picard_tol,
                                         picard_max=cfg.picard_max, r=r, R=R_eff)
                    traj = rom.run(model, conf, a0)
                    rep = error_norms(snaps, traj, model.modes, ops, case.nu, basis=basis,
                                      conv_basis=cb if scheme not in ("galerkin",) else None,
                                      r=r, h=h, case=case, space=space)
                    row.update(discrete_L2L2=rep.discrete_L2L2, discrete_H1=rep.discrete_H1,
                               total=rep.total, exact_L2L2=rep.exact_L2L2, exact_H1=rep.exact_H1,
                               exact_total=rep.exact_total, tail=rep.tail, conv_tail=rep.conv_tail,
                               stability_violations=int(len(rom.stability_violations(traj))),
                               clamp_total=int(traj.clamp_count.sum()),
                               max_picard=int(traj.picard_iters.max()))
                except SdromError as exc:
                    log.warning("study row n=%d scheme=%s r=%s R=%s failed: %s", n, scheme, r_spec, R, exc)
                    row["status"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")
                rows.append(row)
    return rows


def structural_summary(rows):
    """Observed rates and the fitted-constant structural check per configuration.

    For each (scheme, r, R, deim) group the constant C is fitted on the
    coarsest mesh as exact_total / (h^{2l} + dt^2 + tail + conv_tail) and
    reused on the finer meshes; rows exceeding ten times the fitted bound are
    flagged.  The bound controls the error against the continuous solution,
    so the check uses the exact-reference norms; the same ratio for the
    FOM-reference norms is reported alongside (it is dominated by round-off
    when r = M).
    """
    groups = {}
    for row in rows:
        if row.get("status") != "ok":
            continue
        groups.setdefault((row["scheme"], row["r_spec"], row["R_spec"], row["deim"]), []).append(row)
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        grp = sorted(groups[key], key=lambda r: r["n_per_side"])
        const = const_d = None
        prev = None
        for row in grp:
            shape = row["h"] ** (2 * VELOCITY_ORDER) + row["dt"] ** 2 + row["tail"] + row["conv_tail"]
            if const is None:
                const, const_d = row["exact_total"] / shape, row["total"] / shape
            ratio = row["exact_total"] / (const * shape) if const > 0 else 0.0
            ratio_d = row["total"] / (const_d * shape) if const_d > 0 else 0.0
            rate_e = rate_t = ""
            if prev is not None:
                rate_e = observed_rate(prev["h"], prev["exact_total"], row["h"], row["exact_total"])
                rate_t = observed_rate(prev["h"], prev["total"], row["h"], row["total"])
            out.append({"scheme": key[0], "r_spec": key[1], "r": row["r"], "R": row["R"], "deim": key[3],
                        "n_per_side": row["n_per_side"], "h": row["h"],
                        "total": row["total"], "rate_total": rate_t,
                        "exact_total": row["exact_total"], "rate_exact": rate_e,
                        "structural_constant": const, "structural_ratio": ratio,
                        "structural_ratio_fom": ratio_d, "flagged": int(ratio > 10.0)})
            prev = row
    return out


def observed_rate(h_coarse, err_coarse, h_fine, err_fine):
    """Order p of a norm whose square is ``err``: sqrt(err) ~ h^p.  Empty when undefined."""
    if not (err_coarse > 0 and err_fine > 0) or h_coarse == h_fine:
        return ""
    return 0.5 * math.log(err_coarse / err_fine) / math.log(h_coarse / h_fine)


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row.get(f, "")) for f in fields])


def run_study(cfg, output_dir=None):
    """Run every (mesh, r, R, scheme) combination and write ``rows.csv`` and ``summary.csv``.

    Returns the output directory, the row dicts and the summary dicts.
    """
    out = output_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    case = fom.ManufacturedCase(nu=cfg.nu, stream_amplitude=cfg.amplitude, profile=cfg.profile, rate=cfg.rate)
    cache = SnapshotCache(cfg.cache_dir)
    rows = []
    for n in cfg.meshes:
        try:
            rows.extend(_study_rows_for_mesh(cfg, case, n, cache))
        except SdromError as exc:
            log.warning("mesh %d failed: %s", n, exc)
            rows.append({"n_per_side": n, "status": f"{type(exc).__name__}: {exc}".replace("\n", " ")})
    summary = structural_summary(rows)
    _write_csv(os.path.join(out, "rows.csv"), ROW_FIELDS, rows)
    _write_csv(os.path.join(out, "summary.csv"), SUMMARY_FIELDS, summary)
    return out, rows, summary
