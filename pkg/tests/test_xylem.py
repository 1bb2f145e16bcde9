"""Mixed 1D xylem discretization tests: DOF maps, junction conservation,
assembly, boundary conditions, and operator growth."""

import numpy as np
import pytest
import scipy.sparse as sp

from soilroot import xylem as xy
from soilroot.mesh import build_structured_hex
from soilroot.network import RootNetwork, single_segment_network

from test_network import y_branch


def make_maps(net, induced):
    return xy.build_dof_maps(net, induced=induced)


def unit_params(R=0.05, lp=0.0):
    return xy.XylemParams(R=R, kappa=1.0, lp=lp)


# ---------------------------------------------------------------------------
# DOF counts


def test_single_segment_dof_counts():
    for M in (1, 3, 7):
        net = single_segment_network((0, 0, 0), (0, 0, -2.0), 0.05)
        xm, dm = make_maps(net, {0: M})
        assert dm.velocity.n_nodal == M + 1
        assert dm.velocity.n == 2 * M + 1     # plus one mean value per element
        assert dm.pressure.n == M + 1


def test_y_branch_junction_dofs():
    net = y_branch()
    xm, dm = make_maps(net, {0: 1, 1: 1, 2: 1})
    jn_vel = [k for k in dm.velocity.index if k[0] == "nv" and k[1] == 1]
    assert len(jn_vel) == 2
    jn_pre = [k for k in dm.pressure.index if k == ("nd", 1)]
    assert len(jn_pre) == 1


def test_kink_junction_dofs():
    net = RootNetwork(0.05)
    n0 = net.add_node((0, 0, 0))
    n1 = net.add_node((0, 0, -1))
    n2 = net.add_node((0.4, 0, -1.8))
    net.add_segment(n0, n1, 0)
    net.add_segment(n1, n2, 0)
    net.collar_node = n0
    xm, dm = make_maps(net, {0: 2, 1: 2})
    jn_vel = [k for k in dm.velocity.index if k[0] == "nv" and k[1] == 1]
    assert len(jn_vel) == 1
    # a kink carries the velocity value straight through
    u = np.zeros(dm.velocity.n)
    u[dm.velocity.index[("nv", 1, 0)]] = 3.5
    broken = dm.velocity.expand @ u
    end0 = dm.velocity.endpoint_broken_index(net, 0, 1)
    start1 = dm.velocity.endpoint_broken_index(net, 1, 1)
    assert broken[end0] == broken[start1] == 3.5


def test_control_mesh_ratios():
    net = single_segment_network((0, 0, 0), (0, 0, -2.0), 0.05)
    xm, dm = xy.build_dof_maps(net, induced={0: 4})
    assert xm.counts[0] == 4
    assert xm.counts_chi[0] == 2
    assert xm.counts_sigma[0] == 2


def test_induced_counts_from_mesh():
    mesh = build_structured_hex(((0, 1), (0, 1), (-1, 0)), 0.25)
    net = single_segment_network((0.6, 0.6, 0.0), (0.6, 0.6, -1.0), 0.05)
    xm, dm = xy.build_dof_maps(net, soil_mesh=mesh)
    assert xm.induced[0] == 4
    assert xm.counts[0] == 4
    assert xm.counts_chi[0] == 2


# ---------------------------------------------------------------------------
# junction conservation


def test_junction_balance_exact():
    net = y_branch()
    xm, dm = make_maps(net, {0: 3, 1: 2, 2: 4})
    rng = np.random.default_rng(7)
    for _ in range(20):
        u = rng.standard_normal(dm.velocity.n) * 10.0
        for node, r in xy.junction_balances(net, dm, u).items():
            assert abs(r) < 1e-14 * max(1.0, np.abs(u).max())


def test_junction_balance_multiway():
    # four segments meeting at one point
    net = RootNetwork(0.05)
    c = net.add_node((0, 0, 0))
    j = net.add_node((0, 0, -1))
    net.add_segment(c, j, 0)
    for k, p in enumerate([(1, 0, -2), (-1, 0, -2), (0, 1, -2)]):
        t = net.add_node(p)
        net.add_segment(j, t, 1)
    net.collar_node = c
    xm, dm = make_maps(net, {i: 2 for i in range(4)})
    jn_vel = [k for k in dm.velocity.index if k[0] == "nv" and k[1] == j]
    assert len(jn_vel) == 3
    rng = np.random.default_rng(3)
    u = rng.standard_normal(dm.velocity.n)
    (res,) = xy.junction_balances(net, dm, u).values()
    assert abs(res) < 1e-14


# ---------------------------------------------------------------------------
# assembly properties


def random_tree(seed, nseg=6):
    rng = np.random.default_rng(seed)
    net = RootNetwork(0.05)
    c = net.add_node((0, 0, 0))
    first = net.add_node((0, 0, -1.0))
    net.add_segment(c, first, 0)
    net.collar_node = c
    nodes = [first]
    for _ in range(nseg - 1):
        a = nodes[rng.integers(len(nodes))]
        d = rng.standard_normal(3)
        d[2] = -abs(d[2]) - 0.3
        b = net.add_node(net.nodes[a] + 0.5 * d / np.linalg.norm(d))
        net.add_segment(a, b, 1)
        nodes.append(b)
    return net


def test_A_spd_on_random_networks():
    for seed in (0, 1, 2):
        net = random_tree(seed)
        xm, dm = xy.build_dof_maps(
            net, induced={s: 1 + seed for s in net.segments}
        )
        ops = xy.assemble_xylem(net, xm, dm, unit_params())
        Ad = ops.A.toarray()
        assert np.abs(Ad - Ad.T).max() < 1e-14
        assert np.linalg.eigvalsh(Ad).min() > 0


def test_divergence_of_constant_velocity():
    net = single_segment_network((0, 0, 0), (0, 0, -2.0), 0.05)
    xm, dm = make_maps(net, {0: 5})
    ops = xy.assemble_xylem(net, xm, dm, unit_params())
    u = np.zeros(dm.velocity.n)
    for k, i in dm.velocity.index.items():
        u[i] = 1.0  # vertex values and mean values of the constant are all 1
    assert np.abs(ops.B @ u).max() < 1e-14


def test_gravity_load_orientation():
    p = unit_params(R=0.05)
    vert = single_segment_network((0, 0, 0), (0, 0, -2.0), 0.05)
    xmv, dmv = make_maps(vert, {0: 4})
    fv = xy.assemble_xylem(vert, xmv, dmv, p).f_gravity
    # downward segment: e_z . e_s = -1; only the mean-value DOFs load
    h = 2.0 / 4
    for k, i in dmv.velocity.index.items():
        if k[0] == "mom":
            assert fv[i] == pytest.approx(np.pi * 0.05 ** 2 * h)
        else:
            assert abs(fv[i]) < 1e-15
    horiz = single_segment_network((0, 0, 0), (2.0, 0, 0), 0.05)
    xmh, dmh = make_maps(horiz, {0: 4})
    fh = xy.assemble_xylem(horiz, xmh, dmh, p).f_gravity
    assert np.abs(fh).max() == 0.0


def test_age_dependent_radial_conductivity():
    net = single_segment_network((0, 0, 0), (0, 0, -2.0), 0.05)
    net.segments[0].birth = 0.0
    xm, dm = make_maps(net, {0: 2})

    def lp(x, age):
        return np.where(age > 3.0, 0.0, 1.36e-6) * np.ones(len(x))

    p = xy.XylemParams(R=0.05, kappa=1.0, lp=lp)
    young = xy.assemble_xylem(net, xm, dm, p, time=1.0)
    old = xy.assemble_xylem(net, xm, dm, p, time=5.0)
    assert young.M_lp.count_nonzero() > 0
    assert old.M_lp.count_nonzero() == 0


def test_p1_load_partition_of_unity():
    net = y_branch()
    xm, dm = make_maps(net, {0: 2, 1: 3, 2: 2})
    vec = xy.p1_load(net, dm.pressure, lambda x: np.ones(len(x)))
    assert vec.sum() == pytest.approx(net.total_length(), rel=1e-12)


# ---------------------------------------------------------------------------
# boundary conditions


def test_collar_flux_value():
    net = y_branch(radius=0.05)
    xm, dm = make_maps(net, {0: 2, 1: 2, 2: 2})
    bc = xy.collar_tip_bc(net, dm, T=0.2)
    # collar is the proximal end of segment 0 (oriented away from the stem),
    # so outflow toward the stem is negative in segment coordinates
    val = {i: v for i, v in zip(bc.fixed_idx, bc.fixed_val)}
    collar_dof = dm.velocity.index[("nv", 0, 0)]
    assert val[collar_dof] == pytest.approx(-0.2 / (np.pi * 0.05 ** 2))
    assert abs(val[collar_dof]) == pytest.approx(25.46479, rel=1e-6)
    # both tips pinned to zero
    tips = [dm.velocity.index[("nv", n, s)] for n, s in ((2, 1), (3, 2))]
    for t in tips:
        assert val[t] == 0.0
    # the pressure space keeps all DOFs so that the mass rows at the collar
    # and the tips enforce the flux balance of the end elements
    assert bc.free_p.all()


def test_collar_at_distal_end_is_positive():
    # mesocotyl oriented from the seed up to the surface: the collar is the
    # distal end and outflow toward the stem is positive
    net = RootNetwork(0.05)
    seed = net.add_node((0, 0, -0.5))
    top = net.add_node((0, 0, 0.0))
    net.add_segment(seed, top, 0)
    net.collar_node = top
    xm, dm = make_maps(net, {0: 2})
    bc = xy.collar_tip_bc(net, dm, T=0.2)
    val = {i: v for i, v in zip(bc.fixed_idx, bc.fixed_val)}
    collar_dof = dm.velocity.index[("nv", top, 0)]
    assert val[collar_dof] == pytest.approx(25.46479, rel=1e-6)


def test_zero_transpiration_zero_flow():
    net = y_branch()
    xm, dm = make_maps(net, {0: 2, 1: 2, 2: 2})
    p = xy.XylemParams(R=0.05, kappa=1.0, lp=1.36e-6)
    ops = xy.assemble_xylem(net, xm, dm, p)
    bc = xy.collar_tip_bc(net, dm, T=0.0)
    u, ph = xy.solve_saddle(ops, np.zeros(dm.velocity.n),
                            np.zeros(dm.pressure.n), bc=bc)
    assert np.abs(u).max() < 1e-12
    assert np.abs(ph).max() < 1e-12


def test_transpiration_solve_is_conservative():
    net = y_branch()
    xm, dm = make_maps(net, {0: 3, 1: 2, 2: 2})
    p = xy.XylemParams(R=0.05, kappa=1.0, lp=1.36e-6)
    ops = xy.assemble_xylem(net, xm, dm, p)
    bc = xy.collar_tip_bc(net, dm, T=0.2)
    u, ph = xy.solve_saddle(ops, ops.f_gravity, np.zeros(dm.pressure.n), bc=bc)
    for r in xy.junction_balances(net, dm, u).values():
        assert abs(r) < 1e-12 * max(1.0, np.abs(u).max())
    assert xy.velocity_values(net, xm, dm, u, 0, [0.0])[0] == pytest.approx(
        -0.2 / (np.pi * 0.05 ** 2)
    )
    for sid, node in ((1, 2), (2, 3)):
        L = net.segment_length(sid)
        assert abs(xy.velocity_values(net, xm, dm, u, sid, [L])[0]) < 1e-12


def test_endpoint_rhs_rejects_junctions():
    net = y_branch()
    xm, dm = make_maps(net, {0: 1, 1: 1, 2: 1})
    with pytest.raises(xy.XylemError):
        xy.endpoint_pressure_rhs(net, dm, {1: -1.0}, 0.05)


# ---------------------------------------------------------------------------
# manufactured single-segment problem


def manufactured_solve(M, t=1.0, R=1e-2):
    lp = 2 * R / (R * R + 2)
    net = single_segment_network((0, 0, -1.0), (0, 0, 1.0), R)
    xm, dm = xy.build_dof_maps(net, induced={0: M})
    params = xy.XylemParams(
        R=R, kappa=lambda x: np.pi * R * R / (x[:, 2] ** 2 / 3 + 0.5), lp=lp
    )
    ops = xy.assemble_xylem(net, xm, dm, params)
    rhs_u = xy.endpoint_pressure_rhs(net, dm, {0: -1 - t, 1: -1 - t}, R)

    def forcing(x):
        z = x[:, 2]
        return (np.pi * R * R * (-2 * z * z - 1)
                + 4 * np.pi * R * R / (R * R + 2) * (z * z - 1))

    rhs_p = -(xy.p1_load(net, dm.pressure, forcing)
              + xy.p1_load(net, dm.pressure,
                           lambda x: 2 * np.pi * R * lp * (-1 - t)))
    u, ph = xy.solve_saddle(ops, rhs_u, rhs_p)
    eu = xy.velocity_l2_error(
        net, xm, dm, u, lambda x: -2 * x[:, 2] * (x[:, 2] ** 2 / 3 + 0.5)
    )
    ep = xy.p1_l2_error(net, dm.pressure, ph, lambda x: x[:, 2] ** 2 - 2 - t)
    u_top = xy.velocity_values(net, xm, dm, u, 0, [2.0])[0]
    return eu, ep, u_top


def test_manufactured_convergence():
    eu8, ep8, _ = manufactured_solve(8)
    eu16, ep16, u_top = manufactured_solve(16)
    assert abs(u_top + 5.0 / 3.0) < 5e-5
    assert eu8 / eu16 > 6.0       # velocity superconverges at third order
    assert 3.5 < ep8 / ep16 < 4.5  # pressure head converges at second order


# ---------------------------------------------------------------------------
# operator growth


def permuted(ops_a, dm_a, ops_b, dm_b):
    """Relative difference of two assemblies after aligning DOF numbering."""
    pv = np.empty(dm_a.velocity.n, dtype=int)
    for k, i in dm_a.velocity.index.items():
        pv[i] = dm_b.velocity.index[k]
    pp = np.empty(dm_a.pressure.n, dtype=int)
    for k, i in dm_a.pressure.index.items():
        pp[i] = dm_b.pressure.index[k]
    dA = ops_a.A - ops_b.A[np.ix_(pv, pv)]
    dB = ops_a.B - ops_b.B[np.ix_(pp, pv)]
    dM = ops_a.M_lp - ops_b.M_lp[np.ix_(pp, pp)]
    df = ops_a.f_gravity - ops_b.f_gravity[pv]
    return max(
        abs(dA).max() if dA.nnz else 0.0,
        abs(dB).max() if dB.nnz else 0.0,
        abs(dM).max() if dM.nnz else 0.0,
        np.abs(df).max(),
    )


def test_grow_no_growth_identical():
    net = single_segment_network((0, 0, 0), (0, 0, -2.0), 0.05)
    p = unit_params(lp=1e-3)
    s0 = xy.grow_operators(net, p, induced={0: 3})
    s1 = xy.grow_operators(net, p, previous=s0, induced={0: 3})
    assert (s0.ops.A != s1.ops.A).nnz == 0
    assert (s0.ops.B != s1.ops.B).nnz == 0
    assert (s0.ops.M_lp != s1.ops.M_lp).nnz == 0
    assert np.array_equal(s0.ops.f_gravity, s1.ops.f_gravity)


def test_grow_appended_tip_segment():
    net = single_segment_network((0, 0, 0), (0, 0, -2.0), 0.05)
    p = unit_params(lp=1e-3)
    s0 = xy.grow_operators(net, p, induced={0: 3})
    tipnode = net.tips[0].node
    new = net.add_node((0.3, 0.0, -2.6))
    net.add_segment(tipnode, new, 0)
    s1 = xy.grow_operators(net, p, previous=s0, induced={0: 3, 1: 2})
    # stable numbering: surviving DOFs keep their indices
    for k, i in s0.dofmap.velocity.index.items():
        assert s1.dofmap.velocity.index[k] == i
    # DOFs away from the junction node are untouched
    n0 = s0.dofmap.velocity.n
    far = [i for k, i in s0.dofmap.velocity.index.items() if k[1] != tipnode]
    d = (s1.ops.A[np.ix_(far, far)] - s0.ops.A[np.ix_(far, far)])
    assert (abs(d).max() if d.nnz else 0.0) == 0.0
    # matches from-scratch assembly
    fresh = xy.grow_operators(net, p, induced={0: 3, 1: 2})
    assert permuted(s1.ops, s1.dofmap, fresh.ops, fresh.dofmap) < 1e-12


def test_grow_with_branch_split():
    net = single_segment_network((0, 0, 0), (0, 0, -2.0), 0.05)
    p = unit_params(lp=1e-3)
    s0 = xy.grow_operators(net, p, induced={0: 4})
    s1a, s1b, mid = net.split_segment(0, 0.5)
    br = net.add_node((0.8, 0.0, -1.6))
    net.add_segment(mid, br, 1)
    induced = {s1a: 2, s1b: 2, 3: 1}
    s1 = xy.grow_operators(net, p, previous=s0, induced=induced)
    fresh = xy.grow_operators(net, p, induced=induced)
    assert permuted(s1.ops, s1.dofmap, fresh.ops, fresh.dofmap) < 1e-12
    bal = xy.junction_balances(
        net, s1.dofmap, np.random.default_rng(0).standard_normal(s1.dofmap.velocity.n)
    )
    assert all(abs(r) < 1e-13 for r in bal.values())


def test_grow_detects_remodeling():
    net = single_segment_network((0, 0, 0), (0, 0, -2.0), 0.05)
    p = unit_params()
    s0 = xy.grow_operators(net, p, induced={0: 3})
    del net.segments[0]
    n2 = net.add_node((1, 0, -1))
    net.add_segment(0, n2, 0)
    with pytest.raises(xy.XylemError):
        xy.grow_operators(net, p, previous=s0, induced={1: 2})
