"""Scenario configuration, runners and reporting.

Three entry points mirror the simulator's standard experiments: a
manufactured-solution convergence study on a box with a single vertical
root (``run_tp1``), root-system development in a small fully bounded
sample (``tp2_config``/``Simulation``), and growth in a larger stony soil
with carved spherical obstacles (``tp3_config``).  The time loop advances
growth intervals, re-extends the 1D operators over the grown network,
warm-starts the interface controls, and runs backward-Euler substeps each
solved by the Picard/conjugate-gradient machinery.
"""

import csv
import json
import math
import pickle
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import soil, vem
from . import xylem as xy
from .coupling import (ControlPreconditioner, CouplingError, ForwardSolver,
                       StepConfig, apply_reduced_matrix, cg_solve,
                       gradient_shift, picard_operators, picard_step,
                       split_controls, water_uptake)
from .growth import (GrowthEngine, RepulsionField, TP2_GROWTH, TP3_GROWTH)
from .interface import assemble_interface, trace_load
from .mesh import (MeshError, Sphere, build_structured_hex,
                   build_structured_tet5, build_tet_submesh, carve_spheres)
from .network import RootNetwork, single_segment_network
from .vem import SoilSpace, apply_dirichlet
from .vtkio import cell_velocity, write_network_vtp, write_vtu
from .xylem import XylemParams, collar_tip_bc, grow_operators

_EZ = np.array([0.0, 0.0, 1.0])


class ConfigError(Exception):
    """Invalid or inconsistent scenario configuration."""


class ScenarioError(Exception):
    """Runtime failure of a scenario (solver breakdown, bad oracle)."""


# ---------------------------------------------------------------------------
# configuration and its TOML round trip


def _canon(v):
    """Canonical immutable form for nested config values."""
    if isinstance(v, dict):
        return {k: _canon(v[k]) for k in v}
    if isinstance(v, (list, tuple)):
        return tuple(_canon(x) for x in v)
    if isinstance(v, bool) or v is None:
        return v
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v)
    return v


@dataclass
class ScenarioConfig:
    """Complete description of one simulation run."""

    name: str = "scenario"
    # mesh
    box: tuple = ((0.0, 3.0), (0.0, 3.0), (-6.0, 0.0))
    spacing: float = 0.15
    stones: tuple = ()            # dicts: center, radius, meridians, parallels
    # soil constitutive curves (named preset)
    soil_preset: str = "TP2"
    # boundary conditions: Dirichlet head per region; others are no-flux
    dirichlet: dict = field(default_factory=dict)
    # initial pressure head: constant / linear-in-z / stationary pre-solve
    initial: dict = field(default_factory=lambda: {"kind": "constant",
                                                   "value": 0.0})
    # xylem
    root_radius: float = 0.05
    kappa: float = 0.18
    lp: float = 1.36e-6
    lp_age_cutoff: float = 0.0    # > 0: radial conductivity drops to zero
    transpiration: float = 0.2    # for segments older than the cutoff (days)
    # network geometry
    collar_point: tuple = (1.5, 1.5, 0.0)
    seed_point: tuple = (1.5, 1.5, -0.1)
    # growth
    growth_preset: str = "TP2"    # "TP2" | "TP3" | "none"
    impedance: bool = False       # pressure-head impedance on elongation
    repulsion_regions: tuple = ("top", "bottom", "lateral")
    repulsion_threshold: float = 0.0   # > 0: thresholded obstacle weight
    # time grid
    t_end: float = 9.0
    dt_growth: float = 0.2
    substeps: int = 1
    # 1D partition refinement relative to the induced partition
    delta: float = 1.0
    delta_phi: float = 0.5
    # solver
    picard_tol: float = 1e-8
    picard_max: int = 30
    cg_rtol: float = 1e-6
    cg_max: int = 2000
    precond: bool = True
    log_unpreconditioned: bool = False
    # misc
    rng_seed: int = 0
    output_every: int = 0         # write VTK every N growth steps (0 = off)

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, _canon(getattr(self, f.name)))
        if self.spacing <= 0 or self.t_end <= 0 or self.dt_growth <= 0:
            raise ConfigError("spacing, t_end, dt_growth must be positive")
        if self.substeps < 1:
            raise ConfigError("substeps must be >= 1")
        kind = self.initial.get("kind")
        if kind not in ("constant", "linear", "stationary"):
            raise ConfigError(f"unknown initial condition {self.initial!r}")
        need = {"constant": ("value",), "linear": ("top", "bottom"),
                "stationary": ()}[kind]
        for key in need:
            if key not in self.initial:
                raise ConfigError(f"initial condition {kind!r} needs {key!r}")
        if self.growth_preset not in ("TP2", "TP3", "none"):
            raise ConfigError(f"unknown growth preset {self.growth_preset!r}")
        if self.soil_preset not in soil.PRESETS:
            raise ConfigError(f"unknown soil preset {self.soil_preset!r}")

    def to_dict(self):
        def plain(v):
            if isinstance(v, dict):
                return {k: plain(x) for k, x in v.items()}
            if isinstance(v, tuple):
                return [plain(x) for x in v]
            return v

        return {f.name: plain(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        r = repr(v)
        return r if any(c in r for c in ".eE") else r + ".0"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {v!r} to TOML")


def dumps_toml(d):
    """Serialize a (depth-2) dict as a TOML document."""
    top, tables, arrays = [], [], []
    for k, v in d.items():
        if isinstance(v, dict):
            body = "\n".join(f"{kk} = {_toml_value(vv)}" for kk, vv in v.items())
            tables.append(f"[{k}]\n{body}")
        elif (isinstance(v, (list, tuple)) and v
              and all(isinstance(x, dict) for x in v)):
            for x in v:
                body = "\n".join(f"{kk} = {_toml_value(vv)}"
                                 for kk, vv in x.items())
                arrays.append(f"[[{k}]]\n{body}")
        else:
            top.append(f"{k} = {_toml_value(v)}")
    return "\n".join(top + tables + arrays) + "\n"


def save_config(cfg, path):
    Path(path).write_text(dumps_toml(cfg.to_dict()))


def load_config(path):
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return ScenarioConfig.from_dict(data)


# ---------------------------------------------------------------------------
# error reporting


@dataclass
class ErrorReport:
    """Per-level mesh sizes and error indicators of a convergence study."""

    levels: list

    names = ("psi_l2", "psi_h1", "psi_hat_l2", "u_hat_l2",
             "phi_sigma_l2", "phi_chi_l2")

    def eoc(self):
        """Empirical orders between consecutive levels: log-ratio of errors
        over log-ratio of mesh size."""
        out = []
        for a, b in zip(self.levels[:-1], self.levels[1:]):
            rates = {}
            lh = math.log(a["h"] / b["h"])
            for n in self.names:
                ea, eb = a["errors"][n], b["errors"][n]
                rates[n] = math.log(ea / eb) / lh
            out.append(rates)
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["h", "h_hat", "h_hat_phi", *self.names,
                        "picard", "cg_iters", "cost"])
            for lv in self.levels:
                w.writerow([lv["h"], lv["h_hat"], lv["h_hat_phi"],
                            *[lv["errors"][n] for n in self.names],
                            lv["picard"],
                            ";".join(str(i) for i in lv["cg_iters"]),
                            lv["cost"]])
            for i, rates in enumerate(self.eoc()):
                w.writerow([f"eoc_{i}", "", "",
                            *[rates[n] for n in self.names], "", "", ""])


def eoc_rates(hs, errors):
    """Orders log(e_i/e_{i+1}) / log(h_i/h_{i+1}) for two parallel lists."""
    return [math.log(errors[i] / errors[i + 1]) / math.log(hs[i] / hs[i + 1])
            for i in range(len(hs) - 1)]


# ---------------------------------------------------------------------------
# the manufactured convergence problem (vertical root through a cube)

TP1_R = 1e-2
TP1_LP = 2.0 * TP1_R / (TP1_R**2 + 2.0)


def tp1_exact(x, t=1.0):
    return 0.5 * (x[:, 0]**2 + x[:, 1]**2) * (1 - x[:, 2]**2) - 1.0 - t


def tp1_exact_grad(x):
    return np.stack([
        x[:, 0] * (1 - x[:, 2]**2),
        x[:, 1] * (1 - x[:, 2]**2),
        -(x[:, 0]**2 + x[:, 1]**2) * x[:, 2],
    ], axis=1)


def tp1_capacity(p):
    return -p / (1 + p * p)**1.5 + 4.0


def tp1_source(x, t=1.0):
    return (-tp1_capacity(tp1_exact(x, t)) - 2 * (1 - x[:, 2]**2)
            + x[:, 0]**2 + x[:, 1]**2)


def tp1_line_source(x):
    return 4 * np.pi * TP1_R**2 / (TP1_R**2 + 2) * (1 - x[:, 2]**2)


def tp1_forcing_1d(x):
    z = x[:, 2]
    return (np.pi * TP1_R**2 * (-2 * z * z - 1)
            + 4 * np.pi * TP1_R**2 / (TP1_R**2 + 2) * (z * z - 1))


def tp1_psi_hat(x, t=1.0):
    return x[:, 2]**2 - 2.0 - t


def tp1_u_hat(x):
    return -2 * x[:, 2] * (x[:, 2]**2 / 3 + 0.5)


def tp1_kappa(x):
    return np.pi * TP1_R**2 / (x[:, 2]**2 / 3 + 0.5)


def _ones(p):
    return np.ones_like(p)


def validate_tp1_sources(n=100, seed=2024, tol=1e-6):
    """Check the closed-form sources against finite-difference residuals of
    the exact solution at random points; raises on disagreement."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.9, 0.9, (n, 3))
    t, h = 1.0, 1e-4

    lap = np.zeros(n)
    for ax in range(3):
        e = np.zeros(3)
        e[ax] = h
        lap += (tp1_exact(x + e, t) - 2 * tp1_exact(x, t)
                + tp1_exact(x - e, t)) / h**2
    dpsi_dt = (tp1_exact(x, t + h) - tp1_exact(x, t - h)) / (2 * h)
    res = tp1_capacity(tp1_exact(x, t)) * dpsi_dt - lap
    S = tp1_source(x, t)
    if np.max(np.abs(res - S) / np.maximum(1.0, np.abs(S))) >= tol:
        raise ScenarioError("3D manufactured source fails the residual check")

    z = rng.uniform(-0.95, 0.95, n)
    line = np.zeros((n, 3))
    line[:, 2] = z
    mism = 2 * np.pi * TP1_R * TP1_LP * (tp1_exact(line, t)
                                         - tp1_psi_hat(line, t))
    SL = tp1_line_source(line)
    if np.max(np.abs(mism - SL) / np.maximum(1.0, np.abs(SL))) >= tol:
        raise ScenarioError("line source fails the interface-flux check")

    hz = 1e-5
    zp, zm = line.copy(), line.copy()
    zp[:, 2] += hz
    zm[:, 2] -= hz
    du_ds = (tp1_u_hat(zp) - tp1_u_hat(zm)) / (2 * hz)
    res1 = np.pi * TP1_R**2 * du_ds + 2 * np.pi * TP1_R * TP1_LP * (
        tp1_psi_hat(line, t) - tp1_exact(line, t))
    S1 = tp1_forcing_1d(line)
    if np.max(np.abs(res1 - S1) / np.maximum(1.0, np.abs(S1))) >= tol:
        raise ScenarioError("1D manufactured source fails the residual check")

    dp_ds = (tp1_psi_hat(zp, t) - tp1_psi_hat(zm, t)) / (2 * hz)
    mom = tp1_kappa(line) * tp1_u_hat(line) + np.pi * TP1_R**2 * dp_ds
    if np.max(np.abs(mom)) >= tol:
        raise ScenarioError("1D momentum balance fails for the exact pair")


def _tp1_level(n, cfg=None):
    """Solve the manufactured problem on the level-n tetrahedral mesh."""
    mesh = build_structured_tet5(((-1, 1), (-1, 1), (-1, 1)), 2.0 / n)
    space = SoilSpace(mesh)
    net = single_segment_network((0.0, 0.0, -1.0), (0.0, 0.0, 1.0), TP1_R)
    xm, dm = xy.build_dof_maps(net, soil_mesh=mesh)
    params = XylemParams(R=TP1_R, kappa=tp1_kappa, lp=TP1_LP)
    ops1d = xy.assemble_xylem(net, xm, dm, params)
    iops = assemble_interface(space, net, xm, dm, lp=TP1_LP)

    load = vem.source_load(space, tp1_source) + trace_load(space, net,
                                                           tp1_line_source)
    mask = np.zeros(space.ndof, dtype=bool)
    mask[mesh.region_vertex_ids({"top", "bottom", "lateral"})] = True
    vals = tp1_exact(mesh.vertices, 1.0)
    Z0 = tp1_exact(mesh.vertices, 0.0)
    rhs_u = xy.endpoint_pressure_rhs(net, dm, {0: -2.0, 1: -2.0}, TP1_R)
    rhs_p = -xy.p1_load(net, dm.pressure, tp1_forcing_1d)

    nctl = iops.G.shape[0] + iops.G_hat.shape[0]
    step_cfg = cfg or StepConfig(dt=1.0)
    res = picard_step(
        space, _ones, tp1_capacity, iops, ops1d, Z0, np.zeros(nctl),
        step_cfg, soil_mask=mask, soil_values=vals, soil_load=load,
        rhs1d_u=rhs_u, rhs1d_p=rhs_p, gravity=False,
    )

    ez, eh, nz = vem.l2_h1_errors(space, res.Z, tp1_exact, tp1_exact_grad)
    _, nh, _ = vem.l2_h1_errors(space, np.zeros(space.ndof), tp1_exact,
                                tp1_exact_grad)
    phi_s, phi_x = split_controls(iops, res.X)
    errors = {
        "psi_l2": ez / nz,
        "psi_h1": eh / nh,
        "psi_hat_l2": xy.p1_l2_error(net, dm.pressure, res.psi_hat,
                                     tp1_psi_hat),
        "u_hat_l2": xy.velocity_l2_error(net, xm, dm, res.u, tp1_u_hat),
        "phi_sigma_l2": xy.p1_l2_error(
            net, dm.phi_sigma, phi_s, lambda x: np.full(len(x), -2.0)),
        "phi_chi_l2": xy.p1_l2_error(net, dm.phi_chi, phi_x, tp1_psi_hat),
    }
    level = {
        "n": n,
        "h": mesh.h,
        "h_hat": max(net.segment_length(s) / m
                     for s, m in xm.counts.items()),
        "h_hat_phi": max(net.segment_length(s) / m
                         for s, m in xm.counts_sigma.items()),
        "errors": errors,
        "picard": res.picard_iters,
        "cg_iters": res.cg_iters,
        "cost": res.cost,
    }
    return level, (mesh, space, net, xm, dm, res)


def run_tp1(levels=4, out_dir=None):
    """Convergence study of the manufactured coupled problem.

    Runs one backward-Euler step to t = 1 on a family of structured
    tetrahedral meshes and reports the six error indicators with their
    empirical orders.
    """
    validate_tp1_sources()
    ns = [6, 8, 10, 12][:levels]
    while len(ns) < levels:
        ns.append(ns[-1] + 2)
    rows, last = [], None
    for n in ns:
        level, last = _tp1_level(n)
        rows.append(level)
    report = ErrorReport(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "tp1_convergence.csv")
        mesh, space, net, xm, dm, res = last
        write_vtu(out / "tp1_soil.vtu",
                  mesh, point_data={"pressure_head": res.Z},
                  cell_data={"velocity": cell_velocity(space, res.Z,
                                                       gravity=False)})
        mids = {}
        for name, vals in _segment_midpoint_data(net, xm, dm, res.u,
                                                 res.psi_hat).items():
            mids[name] = vals
        write_network_vtp(out / "tp1_roots.vtp", net, mids)
    return report


def _segment_midpoint_data(net, xm, dm, u, psi_hat):
    uh, ph = {}, {}
    for sid in sorted(net.segments):
        L = net.segment_length(sid)
        uh[sid] = float(xy.velocity_values(net, xm, dm, u, sid, [L / 2])[0])
        ph[sid] = float(xy.p1_values(net, dm.pressure, psi_hat, sid,
                                     [L / 2])[0])
    return {"axial_velocity": uh, "xylem_pressure_head": ph}


# ---------------------------------------------------------------------------
# growth scenarios


class _Conductivity:
    def __init__(self, curves):
        self.curves = curves

    def __call__(self, p):
        return soil.hydraulic_K(p, self.curves)


class _Capacity:
    def __init__(self, curves):
        self.curves = curves

    def __call__(self, p):
        return soil.capacity_C(p, self.curves)


class AgeGatedLp:
    """Radial conductivity that drops to zero past a segment age cutoff."""

    def __init__(self, lp, cutoff):
        self.lp = float(lp)
        self.cutoff = float(cutoff)

    def __call__(self, x, age):
        v = self.lp if age <= self.cutoff else 0.0
        return np.full(len(x), v)


def stationary_soil(space, K_fun, mask, values, gravity=True,
                    tol=1e-8, maxit=100):
    """Steady pressure-head field (no capacity, no network) by Picard."""
    vals = np.asarray(values, dtype=float)
    Z = vals.copy()
    if np.any(~mask):
        Z[~mask] = np.mean(vals[mask]) if mask.any() else 0.0
    for _ in range(maxit):
        A, _, f = space.assemble(Z, K_fun, lambda p: np.zeros_like(p),
                                 gravity=gravity)
        A_ff, b_f, expand = apply_dirichlet(A, f, mask, vals)
        import scipy.sparse.linalg as spla
        Z_new = expand(spla.spsolve(A_ff.tocsc(), b_f))
        if np.abs(Z_new - Z).max() < tol * (1 + np.abs(Z_new).max()):
            return Z_new
        Z = Z_new
    raise ScenarioError("stationary pre-solve did not converge")


def _build_mesh(cfg):
    mesh = build_structured_hex(cfg.box, cfg.spacing)
    if cfg.stones:
        stones = [Sphere(center=np.asarray(s["center"], dtype=float),
                         radius=float(s["radius"]),
                         meridians=int(s.get("meridians", 8)),
                         parallels=int(s.get("parallels", 6)))
                  for s in cfg.stones]
        mesh = carve_spheres(mesh, stones)
    return mesh


class Simulation:
    """Time loop of one growth scenario (Algorithm: grow, extend, solve)."""

    def __init__(self, cfg, out_dir=None, seed=None):
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.rng = np.random.default_rng(
            cfg.rng_seed if seed is None else seed)
        self.curves = soil.PRESETS[cfg.soil_preset]
        self.K_fun = _Conductivity(self.curves)
        self.c_fun = _Capacity(self.curves)

        try:
            self.mesh = _build_mesh(cfg)
        except (ValueError, MeshError) as e:
            raise ConfigError(f"mesh construction failed: {e}") from e
        regions = set(self.mesh.boundary_regions())
        bad = set(cfg.dirichlet) - regions
        if bad:
            raise ConfigError(f"Dirichlet regions {sorted(bad)} not on mesh "
                              f"(available: {sorted(regions)})")
        self.space = SoilSpace(self.mesh)

        self.soil_mask = np.zeros(self.space.ndof, dtype=bool)
        self.soil_values = np.zeros(self.space.ndof)
        for region in sorted(cfg.dirichlet):
            ids = self.mesh.region_vertex_ids({region})
            self.soil_mask[ids] = True
            self.soil_values[ids] = float(cfg.dirichlet[region])

        self.Z = self._initial_head()
        self.Z[self.soil_mask] = self.soil_values[self.soil_mask]

        # network: collar connected to the seed by the mesocotyl
        self.net = RootNetwork(cfg.root_radius)
        collar = self.net.add_node(cfg.collar_point)
        seedn = self.net.add_node(cfg.seed_point)
        self.net.add_segment(collar, seedn, 0, birth=0.0, root=0)
        self.net.collar_node = collar
        self.net.seed_node = seedn

        self.engine = None
        self.repulsion = None
        if cfg.growth_preset != "none":
            params = TP2_GROWTH if cfg.growth_preset == "TP2" else TP3_GROWTH
            if cfg.growth_preset == "TP2":
                # a single zero-order root starts at the seed immediately
                self.net.add_tip(seedn, 0, 1, -_EZ)
            missing = set(cfg.repulsion_regions) - regions
            if missing:
                raise ConfigError(
                    f"repulsion regions {sorted(missing)} not on mesh")
            if cfg.repulsion_regions:
                tet = build_tet_submesh(self.mesh)
                thr = (cfg.repulsion_threshold
                       if cfg.repulsion_threshold > 0 else None)
                self.repulsion = RepulsionField(tet, cfg.repulsion_regions,
                                                threshold=thr)
            thresholds = soil.TP3_THRESHOLDS if cfg.impedance else None
            self.engine = GrowthEngine(
                self.net, params, self.curves, self.rng,
                thresholds=thresholds, repulsion=self.repulsion,
                mesh=self.mesh, age_decay=params.l_max is not None,
            )
            self.engine.next_root = max(self.engine.next_root, 1)

        lp = (AgeGatedLp(cfg.lp, cfg.lp_age_cutoff)
              if cfg.lp_age_cutoff > 0 else cfg.lp)
        self.xparams = XylemParams(R=cfg.root_radius, kappa=cfg.kappa,
                                   lp=lp, T=cfg.transpiration)
        self.xstate = None
        self.X = None
        self.u = None
        self.psi_hat = None
        self._prev = None   # (phi_sigma map, phi_chi map, X, G, G_hat)
        self.t = 0.0
        self.step_index = 0
        self.log = []

    # -- setup helpers -----------------------------------------------------

    def _initial_head(self):
        ic = self.cfg.initial
        z = self.mesh.vertices[:, 2]
        if ic["kind"] == "constant":
            return np.full(self.space.ndof, float(ic["value"]))
        if ic["kind"] == "linear":
            z0, z1 = self.cfg.box[2]
            lam = (z - z0) / (z1 - z0)
            return (1 - lam) * float(ic["bottom"]) + lam * float(ic["top"])
        if not self.soil_mask.any():
            raise ConfigError("stationary initial condition needs Dirichlet "
                              "boundary data")
        return stationary_soil(self.space, self.K_fun, self.soil_mask,
                               self.soil_values)

    def _field(self):
        Z, space, curves = self.Z, self.space, self.curves

        def field(x):
            return space.eval_field(Z, x, curves)

        return field

    # -- warm start of the interface controls ------------------------------

    @staticmethod
    def _spread(old_map, old_vec, G_old, new_map):
        """Old control values on surviving DOFs, the L2-mean elsewhere."""
        if old_vec is None or old_map is None:
            return np.zeros(new_map.n)
        ones = np.ones(old_map.n)
        denom = float(ones @ (G_old @ ones))
        mean = float(ones @ (G_old @ old_vec)) / denom if denom > 0 else 0.0
        out = np.full(new_map.n, mean)
        for key, idx in old_map.index.items():
            nidx = new_map.index.get(key)
            if nidx is not None:
                out[nidx] = old_vec[idx]
        return out

    def _warm_start(self, dofmap, iops):
        if self._prev is None:
            return np.zeros(iops.G.shape[0] + iops.G_hat.shape[0])
        smap, xmap, Xold, G, Gh = self._prev
        ps, px = Xold
        return np.concatenate([
            self._spread(smap, ps, G, dofmap.phi_sigma),
            self._spread(xmap, px, Gh, dofmap.phi_chi),
        ])

    # -- one growth interval ----------------------------------------------

    def _substep(self, Z_old, X0, dt, iops, bc1d, pre):
        cfg = self.cfg
        step_cfg = StepConfig(dt=dt, picard_tol=cfg.picard_tol,
                              picard_max=cfg.picard_max,
                              cg_rtol=cfg.cg_rtol, cg_max=cfg.cg_max,
                              precond=cfg.precond)
        return picard_step(
            self.space, self.K_fun, self.c_fun, iops, self.xstate.ops,
            Z_old, X0, step_cfg,
            soil_mask=self.soil_mask, soil_values=self.soil_values,
            bc1d=bc1d, gravity=True, preconditioner=pre,
        )

    def _probe_cg(self, dt, iops, bc1d, X0):
        """CG iteration counts (plain vs preconditioned) for the first
        linearized problem of the step; results are discarded."""
        Astar, fstar = picard_operators(
            self.space, iops, self.Z, self.Z, dt, self.K_fun, self.c_fun,
            gravity=True)
        fw = ForwardSolver(Astar, self.soil_mask, self.soil_values,
                           self.xstate.ops, bc1d)
        psi_f = fw.solve_soil(fstar)
        _, psih_f = fw.solve_1d(self.xstate.ops.f_gravity,
                                np.zeros(self.xstate.ops.M_lp.shape[0]))
        d = gradient_shift(fw, iops, psi_f, psih_f)
        counts = {}
        for name, pre in (("plain", None),
                          ("precond", ControlPreconditioner.build(iops))):
            try:
                _, its, _ = cg_solve(
                    lambda v: apply_reduced_matrix(fw, iops, v), d,
                    X0.copy(), rtol=self.cfg.cg_rtol, maxiter=20000,
                    precond=pre)
            except CouplingError:
                its = -1
            counts[name] = its
        return counts

    def step(self):
        cfg = self.cfg
        dI = cfg.dt_growth
        t_new = self.t + dI
        grown = None
        if self.engine is not None:
            grown = self.engine.step(self._field(), dI, t_new)

        self.xstate = grow_operators(
            self.net, self.xparams, previous=self.xstate,
            soil_mesh=self.mesh, time=t_new, delta=cfg.delta,
            delta_phi_chi=cfg.delta_phi, delta_phi_sigma=cfg.delta_phi,
        )
        dofmap = self.xstate.dofmap
        lp = self.xparams.lp
        iops = assemble_interface(self.space, self.net, self.xstate.xmesh,
                                  dofmap, lp=lp, time=t_new)
        bc1d = collar_tip_bc(self.net, dofmap, cfg.transpiration)
        X0 = self._warm_start(dofmap, iops)

        probe = None
        if cfg.log_unpreconditioned:
            probe = self._probe_cg(dI / cfg.substeps, iops, bc1d, X0)

        pre = ControlPreconditioner.build(iops) if cfg.precond else None
        dt = dI / cfg.substeps
        Z, X = self.Z, X0
        picard_total, cg_all, res = 0, [], None
        for _ in range(cfg.substeps):
            try:
                res = self._substep(Z, X, dt, iops, bc1d, pre)
                picard_total += res.picard_iters
                cg_all.extend(res.cg_iters)
            except CouplingError:
                # one emergency halving of the time step, then abort
                half = self._substep(Z, X, dt / 2, iops, bc1d, pre)
                res = self._substep(half.Z, half.X, dt / 2, iops, bc1d, pre)
                picard_total += half.picard_iters + res.picard_iters
                cg_all.extend(half.cg_iters + res.cg_iters)
            Z, X = res.Z, res.X

        self.Z, self.X = res.Z, res.X
        self.u, self.psi_hat = res.u, res.psi_hat
        phi_s, phi_x = split_controls(iops, res.X)
        self._prev = (dofmap.phi_sigma, dofmap.phi_chi, (phi_s, phi_x),
                      iops.G, iops.G_hat)
        per_seg, total_up = water_uptake(self.net, dofmap, lp, phi_s, phi_x,
                                         time=t_new)
        self.t = t_new
        self.step_index += 1

        row = {
            "step": self.step_index,
            "time": t_new,
            "picard": picard_total,
            "cg_iters": ";".join(str(i) for i in cg_all),
            "cg_first_plain": probe["plain"] if probe else "",
            "cg_first_precond": probe["precond"] if probe else "",
            "cost": res.cost,
            "total_uptake": total_up,
            "collar_flux": cfg.transpiration,
            "n_controls": len(res.X),
            "n_segments": len(self.net.segments),
            "root_length": self.net.total_length(),
            "branches": grown["branches"] if grown else 0,
            "emerged": grown["emerged"] if grown else 0,
        }
        self.log.append(row)
        if self.out_dir is not None:
            self._write_log()
            if cfg.output_every and self.step_index % cfg.output_every == 0:
                self.export(per_seg)
        return row

    def run(self):
        n_steps = int(round(self.cfg.t_end / self.cfg.dt_growth))
        while self.step_index < n_steps:
            self.step()
        if self.out_dir is not None:
            self._write_log()
            per_seg, _ = water_uptake(
                self.net, self.xstate.dofmap, self.xparams.lp,
                *split_controls_pair(self._prev), time=self.t)
            self.export(per_seg)
        return self.log

    # -- output ------------------------------------------------------------

    def _write_log(self):
        path = self.out_dir / f"{self.cfg.name}_log.csv"
        cols = list(self.log[0]) if self.log else []
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(self.log)

    def export(self, per_seg_uptake=None):
        tag = f"{self.step_index:05d}"
        vel = cell_velocity(self.space, self.Z, self.K_fun, gravity=True)
        write_vtu(self.out_dir / f"{self.cfg.name}_soil_{tag}.vtu",
                  self.mesh, point_data={"pressure_head": self.Z},
                  cell_data={"velocity": vel})
        seg_data = {}
        if self.net.segments:
            order = {s: float(self.net.segments[s].order)
                     for s in self.net.segments}
            age = {s: self.t - self.net.segments[s].birth
                   for s in self.net.segments}
            radius = {s: self.net.R for s in self.net.segments}
            seg_data = {"order": order, "age": age, "radius": radius}
            if self.u is not None:
                seg_data.update(_segment_midpoint_data(
                    self.net, self.xstate.xmesh, self.xstate.dofmap,
                    self.u, self.psi_hat))
            if per_seg_uptake is not None:
                seg_data["uptake"] = per_seg_uptake
        write_network_vtp(self.out_dir / f"{self.cfg.name}_roots_{tag}.vtp",
                          self.net, seg_data)

    # -- checkpointing -----------------------------------------------------

    def save_checkpoint(self, path):
        with open(path, "wb") as fh:
            pickle.dump({"format": "soilroot-checkpoint", "version": 1,
                         "simulation": self}, fh)

    @classmethod
    def load_checkpoint(cls, path, out_dir=None):
        with open(path, "rb") as fh:
            data = pickle.load(fh)
        if data.get("format") != "soilroot-checkpoint":
            raise ConfigError(f"{path} is not a checkpoint file")
        if data.get("version") != 1:
            raise ConfigError(f"unsupported checkpoint version "
                              f"{data.get('version')}")
        sim = data["simulation"]
        if out_dir is not None:
            sim.out_dir = Path(out_dir)
            sim.out_dir.mkdir(parents=True, exist_ok=True)
        return sim


def split_controls_pair(prev):
    if prev is None:
        return np.zeros(0), np.zeros(0)
    return prev[2]


# ---------------------------------------------------------------------------
# named scenario configurations


def tp2_config(**overrides):
    """Root development in a small bounded sample (9 days, water table)."""
    cfg = ScenarioConfig(
        name="tp2",
        box=((0.0, 3.0), (0.0, 3.0), (-6.0, 0.0)),
        spacing=0.15,
        soil_preset="TP2",
        dirichlet={"bottom": 0.0},
        initial={"kind": "linear", "top": -6.0, "bottom": 0.0},
        root_radius=0.05,
        kappa=0.18,
        lp=1.36e-6,
        transpiration=0.2,
        collar_point=(1.5, 1.5, 0.0),
        seed_point=(1.5, 1.5, -0.1),
        growth_preset="TP2",
        impedance=False,
        repulsion_regions=("top", "bottom", "lateral"),
        t_end=9.0,
        dt_growth=0.2,
        rng_seed=7,
    )
    return replace(cfg, **overrides) if overrides else cfg


def tp3_config(**overrides):
    """Root development in a stony soil (desk scale: 20 of 160 days)."""
    cfg = ScenarioConfig(
        name="tp3",
        box=((0.0, 50.0), (0.0, 50.0), (-100.0, 0.0)),
        spacing=3.125,
        stones=(
            {"center": (15.0, 15.0, -36.5), "radius": 5.0,
             "meridians": 8, "parallels": 6},
            {"center": (25.0, 31.25, -25.0), "radius": 6.0,
             "meridians": 8, "parallels": 6},
        ),
        soil_preset="TP3",
        dirichlet={"top": -500.0, "bottom": -100.0},
        initial={"kind": "stationary"},
        root_radius=0.05,
        kappa=0.18,
        lp=1.36e-6,
        transpiration=0.2,
        collar_point=(25.0, 25.0, 0.0),
        seed_point=(25.0, 25.0, -5.0),
        growth_preset="TP3",
        impedance=True,
        repulsion_regions=("stone", "top"),
        repulsion_threshold=0.9,
        t_end=20.0,
        dt_growth=1.0,
        log_unpreconditioned=True,
        rng_seed=11,
    )
    return replace(cfg, **overrides) if overrides else cfg


def run_tp2(cfg=None, out_dir=None, seed=None):
    sim = Simulation(cfg or tp2_config(), out_dir=out_dir, seed=seed)
    sim.run()
    return sim


def run_tp3(cfg=None, out_dir=None, seed=None):
    sim = Simulation(cfg or tp3_config(), out_dir=out_dir, seed=seed)
    sim.run()
    return sim
