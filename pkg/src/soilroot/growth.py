"""Stochastic tip-tracking root growth.

Tips advance by forward Euler with a velocity whose magnitude comes from
per-order elongation rates damped by soil-strength and pressure-head
impedance, and whose direction blends hydrotropism (down the soil-strength
gradient), geotropism, exotropism (randomly perturbed previous direction)
and obstacle repulsion.  Branching fires Bernoulli draws at regularly
spaced potential nodes along each axis; new zero-order roots can emerge
from the seed.  All randomness flows through a single numpy Generator and
all iteration orders are deterministic, so runs are reproducible bit for
bit under a fixed seed.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import soil

log = logging.getLogger(__name__)

_EZ = np.array([0.0, 0.0, 1.0])


class GrowthError(Exception):
    pass


# ---------------------------------------------------------------------------
# parameters


def per_order(spec, omega):
    """Pick the entry for root order ``omega`` from a per-order tuple, or
    return the spec unchanged when it is order-invariant (a scalar or a
    single distribution tuple, which starts with its kind string)."""
    if isinstance(spec, (list, tuple)) and spec and not isinstance(spec[0], str):
        return spec[min(omega, len(spec) - 1)]
    return spec


def draw(spec, rng):
    """Sample a scalar parameter: plain number, ("lognormal", mean, sd)
    with mean/sd of the distribution itself, or ("uniform", lo, hi)."""
    if np.ndim(spec) == 0:
        return float(spec)
    kind = spec[0]
    if kind == "lognormal":
        _, mean, sd = spec
        if sd == 0:
            return float(mean)
        s2 = math.log(1.0 + (sd / mean) ** 2)
        return float(rng.lognormal(math.log(mean) - 0.5 * s2, math.sqrt(s2)))
    if kind == "uniform":
        _, lo, hi = spec
        return float(rng.uniform(lo, hi))
    raise GrowthError(f"unknown distribution {spec!r}")


@dataclass(frozen=True)
class GrowthParams:
    """Per-order growth parameters; entries indexed by root order may be
    scalars or distribution tuples accepted by ``draw``."""

    v_a: tuple                 # elongation rate per order (cm/day)
    l_b: tuple                 # basal non-branching length per order (cm)
    l_a: tuple                 # apical non-branching length per order (cm)
    i_dist: tuple              # inter-branch distance per order (cm)
    alpha_i: tuple             # insertion angle per parent order (rad)
    x_poles: tuple             # xylem pole count per parent order
    b_c: float
    omega_max: int
    k_s: object = 0.0          # hydrotropism weight
    k_g: object = 1.0          # geotropism weight
    k_w: object = 1.0          # exotropism weight
    m_a: object = 0.0          # perturbation amplitude in [0, 1]
    l_max: tuple = None        # max elongation per order (cm), enables the
                               # age-decayed rate for orders >= 1
    max_zero_order: int = 1    # zero-order roots that may emerge from the
                               # seed; doubles as the radial slot count there

    def __post_init__(self):
        if np.ndim(self.m_a) == 0 and not 0.0 <= self.m_a <= 1.0:
            raise GrowthError("m_a must lie in [0, 1]")
        if self.omega_max < 0 or self.b_c < 0:
            raise GrowthError("need omega_max >= 0 and b_c >= 0")


@dataclass
class Traits:
    """Parameters sampled once per root at its creation."""

    v_a: float
    l_b: float
    l_a: float
    i_dist: float
    l_max: float
    k_s: float
    k_g: float
    k_w: float


def sample_traits(params, omega, rng):
    lm = math.inf
    if params.l_max is not None:
        lm = draw(per_order(params.l_max, omega), rng)
    return Traits(
        v_a=draw(per_order(params.v_a, omega), rng),
        l_b=draw(per_order(params.l_b, omega), rng),
        l_a=draw(per_order(params.l_a, omega), rng),
        i_dist=draw(per_order(params.i_dist, omega), rng),
        l_max=lm,
        k_s=draw(per_order(params.k_s, omega), rng),
        k_g=draw(per_order(params.k_g, omega), rng),
        k_w=draw(per_order(params.k_w, omega), rng),
    )


def branching_probability(omega, b_c, omega_max):
    """Bernoulli rate for a potential node on a root of order ``omega``."""
    if omega >= omega_max:
        return 0.0
    den = sum(math.exp(-b_c * (i + 1)) for i in range(omega_max + 1))
    return math.exp(-b_c * (omega + 1)) / den


def potential_node_count(length, l_a, l_b, i_dist):
    """Number of evenly spaced branch sites on an axis of given length."""
    t = length - l_a - l_b
    if t < -1e-9:
        return 0
    return int(math.floor(max(t, 0.0) / i_dist + 1e-12)) + 1


# ---------------------------------------------------------------------------
# repulsion around obstacles


class RepulsionField:
    """Piecewise-linear obstacle proximity on a tetrahedral mesh.

    Vertices on impenetrable boundaries carry 1, all others 0, so the field
    decays linearly to zero across the first element layer.  An optional
    threshold zeroes the blended weight until the tip is very close to the
    obstacle (values <= threshold are cut to 0) while the deviation
    direction still follows the gradient.
    """

    def __init__(self, tet, impenetrable, threshold=None):
        self.tet = tet
        self.threshold = threshold
        tet.values = np.zeros(len(tet.vertices))
        tet.values[tet.flagged_vertices(impenetrable)] = 1.0

    def blend(self, x):
        """(weight, deviation direction) at x."""
        phi, grad = self.tet.interpolate(np.asarray(x, dtype=float))
        ng = np.linalg.norm(grad)
        d_o = -grad / ng if (phi > 0.0 and ng > 0.0) else np.zeros(3)
        if self.threshold is not None and phi <= self.threshold:
            phi = 0.0
        return phi, d_o


# ---------------------------------------------------------------------------
# kinematics


def growth_rate(traits, omega, age, psi, sigma, curves, thresholds=None,
                age_decay=False):
    """Elongation speed (cm/day) of one tip."""
    v = traits.v_a
    if age_decay and omega >= 1 and np.isfinite(traits.l_max):
        v *= math.exp(-traits.v_a * age / traits.l_max)
    v *= soil.imp_sigma(sigma, curves)
    if thresholds is not None:
        v *= soil.imp_psi(psi, thresholds)
    return v


def perturbation_matrix(m_a, rng):
    """I + m_a (m m^T - I) with m uniform in [0,1]^3 normalized to length 1."""
    m = rng.uniform(0.0, 1.0, 3)
    n = np.linalg.norm(m)
    m = m / n if n > 0 else np.array([1.0, 0.0, 0.0])
    return np.eye(3) + m_a * (np.outer(m, m) - np.eye(3))


def growth_direction(direction_prev, grad_theta, traits, m_a, rng,
                     repulsion_blend=(0.0, None)):
    """Unit growth direction from the tropism blend and obstacle repulsion.

    ``grad_theta`` drives hydrotropism: soil strength decreases with water
    content, so its negative gradient points along +grad(theta).
    """
    g = np.asarray(grad_theta, dtype=float)
    ng = np.linalg.norm(g)
    d_s = g / ng if ng > 0 else np.zeros(3)
    Rm = perturbation_matrix(draw(m_a, rng), rng)
    w = Rm @ direction_prev
    nw = np.linalg.norm(w)
    d_w = w / nw if nw > 0 else np.zeros(3)
    v = traits.k_s * d_s - traits.k_g * _EZ + traits.k_w * d_w
    nv = np.linalg.norm(v)
    if nv <= 1e-14:
        log.warning("degenerate tropism blend; falling back to -e_z")
        d_p = -_EZ
    else:
        d_p = v / nv
    phi, d_o = repulsion_blend
    if phi > 0.0 and d_o is not None:
        b = (1.0 - phi * phi) * d_p + phi * phi * d_o
        nb = np.linalg.norm(b)
        if nb <= 1e-14:
            log.warning("repulsion cancels the growth direction; using -e_z")
            return -_EZ
        return b / nb
    return d_p


def rotate_about(v, axis, angle):
    """Rodrigues rotation of v about a unit axis."""
    c, s = math.cos(angle), math.sin(angle)
    return c * v + s * np.cross(axis, v) + (1 - c) * (axis @ v) * axis


def radial_reference(tangent):
    """Deterministic unit vector orthogonal to the tangent (projection of
    +x onto the normal plane, or +y when the tangent is near +-x)."""
    for ref in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])):
        r = ref - (ref @ tangent) * tangent
        n = np.linalg.norm(r)
        if n > 1e-8:
            return r / n
    return np.array([0.0, 0.0, 1.0])


def branch_direction(tangent, alpha_i, x_poles, rng):
    """Unit direction at insertion angle alpha_i from the parent tangent,
    radial angle 2 pi N_R / X with N_R uniform in {1..X}."""
    t = np.asarray(tangent, dtype=float)
    t = t / np.linalg.norm(t)
    n_r = int(rng.integers(1, x_poles + 1))
    alpha_r = 2.0 * math.pi * n_r / x_poles
    r = rotate_about(radial_reference(t), t, alpha_r)
    return math.cos(alpha_i) * t + math.sin(alpha_i) * r


# ---------------------------------------------------------------------------
# the engine


class GrowthEngine:
    """Evolves a RootNetwork over growth intervals.

    ``field(x) -> (psi, theta, grad_theta)`` supplies the soil state;
    ``mesh`` (optional) confines tips to the soil sample; ``repulsion``
    (optional) deflects tips near impenetrable boundaries.
    """

    def __init__(self, network, params, curves, rng, thresholds=None,
                 repulsion=None, mesh=None, age_decay=False):
        self.net = network
        self.params = params
        self.curves = curves
        self.rng = rng
        self.thresholds = thresholds
        self.repulsion = repulsion
        self.mesh = mesh
        self.age_decay = age_decay
        self.root_traits = {}
        self.root_order = {}
        self.root_base = {}
        self.next_root = 0
        self._spawned = set()
        for tip in network.tips.values():
            if tip.traits is None:
                tip.traits = sample_traits(params, tip.order, rng)
            self.root_traits[tip.root] = tip.traits
            self.root_order[tip.root] = tip.order
            self.root_base[tip.root] = tip.node
            self.next_root = max(self.next_root, tip.root + 1)

    # -- axis geometry -----------------------------------------------------

    def _axis_chain(self, root):
        """Ordered (segment id, s0, s1) arc-length table of one root axis."""
        out_by_node = {}
        for sid in sorted(self.net.segments):
            seg = self.net.segments[sid]
            if seg.root == root:
                out_by_node[seg.a] = sid
        chain, s = [], 0.0
        node = self.root_base[root]
        while node in out_by_node:
            sid = out_by_node[node]
            L = self.net.segment_length(sid)
            chain.append((sid, s, s + L))
            s += L
            node = self.net.segments[sid].b
        return chain

    def _axis_node_at(self, root, s):
        """Node id at arc length s along the axis, splitting a segment if
        needed; returns None when the axis does not reach s."""
        chain = self._axis_chain(root)
        if not chain or s > chain[-1][2]:
            return None
        for sid, s0, s1 in chain:
            if s <= s1 + 1e-12:
                t = (s - s0) / (s1 - s0)
                tol = 1e-9 / max(s1 - s0, 1e-12)
                if t <= tol:
                    return self.net.segments[sid].a
                if t >= 1.0 - tol:
                    return self.net.segments[sid].b
                _, _, m = self.net.split_segment(sid, t)
                return m
        return None

    # -- field sampling ----------------------------------------------------

    def _rate_at(self, x, traits, omega, age, field):
        psi, th, gth = field(np.asarray(x, dtype=float))
        sigma = soil.soil_strength(th, self.curves)
        v = growth_rate(traits, omega, age, psi, sigma, self.curves,
                        self.thresholds, self.age_decay)
        return v, gth

    def _position_ok(self, x):
        if self.mesh is None:
            return True
        return bool(self.mesh.locate_point(x))

    # -- one growth interval ----------------------------------------------

    def step(self, field, dt, t_new):
        """Branch, emerge and advance; returns a small summary dict."""
        self._spawned = set()
        born = self._branch(field, dt, t_new)
        emerged = self._emerge(field, dt, t_new)
        moved = self._advance(field, dt, t_new)
        self.net.validate(self.params.omega_max)
        return {"branches": born, "emerged": emerged, "moved": moved}

    def _spawn_root(self, node, omega, direction, dt, t_new, field,
                    parent_note):
        """Create a new axis at ``node`` growing along ``direction`` for the
        remainder of the interval; returns the root id or None if stalled."""
        traits = sample_traits(self.params, omega, self.rng)
        birth = t_new - dt
        v, _ = self._rate_at(self.net.nodes[node], traits, omega, 0.0, field)
        if v <= 0.0:
            return None
        xnew = self.net.nodes[node] + dt * v * np.asarray(direction)
        if not self._position_ok(xnew):
            log.warning("new %s root left the sample; postponed", parent_note)
            return None
        root = self.next_root
        self.next_root += 1
        nid = self.net.add_node(xnew)
        self.net.add_segment(node, nid, omega, birth=birth, root=root)
        self.net.add_tip(nid, omega, root, direction, birth=birth,
                         traits=traits, axis_length=dt * v)
        self.root_traits[root] = traits
        self.root_order[root] = omega
        self.root_base[root] = node
        self._spawned.add(root)
        return root

    def _branch(self, field, dt, t_new):
        p = self.params
        born = 0
        for tid in sorted(self.net.tips):
            tip = self.net.tips[tid]
            if not tip.alive or tip.order >= p.omega_max:
                continue
            tr = tip.traits
            pr = branching_probability(tip.order, p.b_c, p.omega_max)
            nb = potential_node_count(tip.axis_length, tr.l_a, tr.l_b,
                                      tr.i_dist)
            for k in range(nb):
                if k in tip.branched or self.rng.random() >= pr:
                    continue
                s = tr.l_b + k * tr.i_dist
                node = self._axis_node_at(tip.root, s)
                if node is None:
                    continue
                chain = self._axis_chain(tip.root)
                tangent = None
                for sid, s0, s1 in chain:
                    if s <= s1 + 1e-9:
                        tangent = self.net.segment_direction(sid)
                        break
                alpha = draw(per_order(p.alpha_i, tip.order), self.rng)
                xp = int(per_order(p.x_poles, tip.order))
                d = branch_direction(tangent, alpha, xp, self.rng)
                if self._spawn_root(node, tip.order + 1, d, dt, t_new, field,
                                    "lateral") is not None:
                    tip.branched.add(k)
                    born += 1
        return born

    def _emerge(self, field, dt, t_new):
        p = self.params
        seed = self.net.seed_node
        if seed is None:
            return 0
        existing = sum(1 for r, w in self.root_order.items() if w == 0)
        emerged = 0
        pr = branching_probability(0, p.b_c, p.omega_max)
        for _ in range(p.max_zero_order - existing):
            if self.rng.random() >= pr:
                continue
            alpha = draw(per_order(p.alpha_i, 0), self.rng)
            # radial slots at the seed equal the zero-order root capacity
            d = branch_direction(-_EZ, alpha, p.max_zero_order, self.rng)
            if self._spawn_root(seed, 0, d, dt, t_new, field,
                                "zero-order") is not None:
                emerged += 1
        return emerged

    def _advance(self, field, dt, t_new):
        moved = 0
        for tid in sorted(self.net.tips):
            tip = self.net.tips[tid]
            if not tip.alive:
                continue
            if tip.root in self._spawned:
                continue  # spawned this interval, already placed
            x = self.net.nodes[tip.node]
            age = t_new - tip.birth
            v, gth = self._rate_at(x, tip.traits, tip.order, age, field)
            if v <= 0.0:
                continue
            blend = (self.repulsion.blend(x) if self.repulsion is not None
                     else (0.0, None))
            d = growth_direction(tip.direction, gth, tip.traits,
                                 self.params.m_a, self.rng, blend)
            xnew = x + dt * v * d
            if not self._position_ok(xnew):
                log.warning("tip %d move rejected (outside sample)", tid)
                continue
            nid = self.net.add_node(xnew)
            self.net.add_segment(tip.node, nid, tip.order,
                                 birth=t_new - dt, root=tip.root)
            tip.node = nid
            tip.direction = d
            tip.axis_length += dt * v
            moved += 1
        return moved


# named parameter presets for the two growth scenarios
TP2_GROWTH = GrowthParams(
    v_a=(1.0, 0.8, 0.6),
    l_b=(0.8, 0.8),
    l_a=(2.0, 0.5),
    i_dist=(1.0, 0.4),
    alpha_i=(1.4, 1.2),
    x_poles=(5, 3),
    b_c=1.0,
    omega_max=2,
    k_s=0.25,
    k_g=0.1,
    k_w=1.0,
    m_a=("uniform", 0.0, 1.0),
    max_zero_order=1,
)

TP3_GROWTH = GrowthParams(
    v_a=(("lognormal", 1.2, 0.6), ("lognormal", 1.0, 0.2),
         ("lognormal", 0.4, 0.12)),
    l_b=(("lognormal", 0.8, 1.2), ("lognormal", 0.8, 1.0)),
    l_a=(("lognormal", 4.2, 6.4), ("lognormal", 1.8, 2.4)),
    i_dist=(("lognormal", 0.8, 0.4), ("lognormal", 1.0, 0.5)),
    alpha_i=(("lognormal", 1.4, 0.2), ("lognormal", 1.2, 0.4)),
    x_poles=(5, 3),
    b_c=1.0,
    omega_max=2,
    k_s=("uniform", 0.35, 0.45),
    k_g=("uniform", 0.1, 0.2),
    k_w=(2.0, 1.0, 1.0),
    m_a=("uniform", 0.0, 1.0),
    # maximum lateral elongation (order >= 1) is not tabulated for this
    # genotype; wheat-like defaults
    l_max=(math.inf, 15.0, 3.0),
    max_zero_order=19,
)
