"""Scenario-layer tests: config round trip, order-of-convergence
arithmetic, manufactured-source oracles, reproducibility, and restart."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soilroot import scenarios as sc
from soilroot.vem import SoilSpace
from soilroot.mesh import build_structured_hex


# ---------------------------------------------------------------------------
# configuration


def test_config_toml_round_trip(tmp_path):
    for cfg in (sc.tp2_config(), sc.tp3_config(),
                sc.ScenarioConfig(initial={"kind": "constant",
                                           "value": -3.0})):
        path = tmp_path / "cfg.toml"
        sc.save_config(cfg, path)
        assert sc.load_config(path) == cfg


def test_config_rejects_unknown_key():
    with pytest.raises(sc.ConfigError):
        sc.ScenarioConfig.from_dict({"nonsense": 1})


def test_config_rejects_bad_values():
    with pytest.raises(sc.ConfigError):
        sc.tp2_config(spacing=-1.0)
    with pytest.raises(sc.ConfigError):
        sc.tp2_config(initial={"kind": "parabolic"})
    with pytest.raises(sc.ConfigError):
        sc.tp2_config(initial={"kind": "linear", "top": -6.0})
    with pytest.raises(sc.ConfigError):
        sc.tp2_config(soil_preset="unknown")


def test_load_config_missing_file(tmp_path):
    with pytest.raises(sc.ConfigError):
        sc.load_config(tmp_path / "nope.toml")


def test_load_config_bad_toml(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("name = [unclosed")
    with pytest.raises(sc.ConfigError):
        sc.load_config(path)


def test_simulation_rejects_unknown_region():
    cfg = sc.tp2_config(spacing=1.0, dirichlet={"side": 0.0})
    with pytest.raises(sc.ConfigError):
        sc.Simulation(cfg)


# ---------------------------------------------------------------------------
# order-of-convergence arithmetic


@settings(max_examples=30, deadline=None)
@given(p=st.floats(0.25, 4.0), C=st.floats(1e-3, 1e3),
       ratio=st.floats(1.2, 4.0))
def test_eoc_recovers_exact_power(p, C, ratio):
    hs = [0.5 / ratio**i for i in range(4)]
    errors = [C * h**p for h in hs]
    for rate in sc.eoc_rates(hs, errors):
        assert rate == pytest.approx(p, abs=1e-12)


def test_error_report_eoc():
    mk = lambda h, e: {"h": h, "h_hat": h, "h_hat_phi": h,
                       "errors": {n: e for n in sc.ErrorReport.names},
                       "picard": 1, "cg_iters": [0], "cost": 0.0}
    rep = sc.ErrorReport([mk(0.5, 0.25), mk(0.25, 0.0625)])
    for rate in rep.eoc()[0].values():
        assert rate == pytest.approx(2.0, abs=1e-12)


# ---------------------------------------------------------------------------
# manufactured sources


def test_manufactured_sources_match_residuals():
    sc.validate_tp1_sources()


def test_manufactured_source_oracle_detects_errors():
    good = sc.tp1_source
    try:
        sc.tp1_source = lambda x, t=1.0: good(x, t) + 0.01
        with pytest.raises(sc.ScenarioError):
            sc.validate_tp1_sources()
    finally:
        sc.tp1_source = good


# ---------------------------------------------------------------------------
# stationary pre-solve


def test_stationary_solver_finds_hydrostatic_equilibrium():
    mesh = build_structured_hex(((0, 1), (0, 1), (-1, 0)), 0.25)
    space = SoilSpace(mesh)
    z = mesh.vertices[:, 2]
    mask = np.zeros(space.ndof, dtype=bool)
    mask[mesh.region_vertex_ids({"top", "bottom"})] = True
    exact = -1.0 - z          # constant total head, no flow
    vals = np.where(mask, exact, 0.0)

    def K(p):
        return np.exp(0.01 * p)

    Z = sc.stationary_soil(space, K, mask, vals)
    assert np.abs(Z - exact).max() < 1e-8


# ---------------------------------------------------------------------------
# the time loop


def small_cfg(**over):
    base = dict(spacing=0.5, t_end=0.6, dt_growth=0.2, rng_seed=5,
                output_every=0)
    base.update(over)
    return sc.tp2_config(**base)


def test_uptake_matches_transpiration():
    sim = sc.Simulation(small_cfg())
    row = sim.step()
    assert row["total_uptake"] == pytest.approx(0.2, rel=1e-8)


def test_runs_are_bit_reproducible():
    a = sc.Simulation(small_cfg())
    b = sc.Simulation(small_cfg())
    a.run()
    b.run()
    assert np.array_equal(a.Z, b.Z)
    assert np.array_equal(a.X, b.X)
    assert np.array_equal(np.stack(a.net.nodes), np.stack(b.net.nodes))


def test_seed_changes_the_realization():
    a = sc.Simulation(small_cfg())
    b = sc.Simulation(small_cfg(), seed=123)
    a.run()
    b.run()
    assert not np.array_equal(np.stack(a.net.nodes), np.stack(b.net.nodes))


def test_checkpoint_restart_is_bit_identical(tmp_path):
    straight = sc.Simulation(small_cfg())
    for _ in range(3):
        straight.step()

    resumed = sc.Simulation(small_cfg())
    resumed.step()
    path = tmp_path / "state.ckpt"
    resumed.save_checkpoint(path)
    resumed = sc.Simulation.load_checkpoint(path)
    for _ in range(2):
        resumed.step()

    assert np.array_equal(straight.Z, resumed.Z)
    assert np.array_equal(straight.X, resumed.X)
    assert np.array_equal(np.stack(straight.net.nodes),
                          np.stack(resumed.net.nodes))


def test_checkpoint_rejects_foreign_files(tmp_path):
    import pickle
    path = tmp_path / "junk.ckpt"
    path.write_bytes(pickle.dumps({"something": "else"}))
    with pytest.raises(sc.ConfigError):
        sc.Simulation.load_checkpoint(path)


def test_output_files_are_written(tmp_path):
    cfg = small_cfg(output_every=1)
    sim = sc.Simulation(cfg, out_dir=tmp_path)
    sim.step()
    assert (tmp_path / "tp2_log.csv").exists()
    assert (tmp_path / "tp2_soil_00001.vtu").exists()
    assert (tmp_path / "tp2_roots_00001.vtp").exists()


def test_age_gated_radial_conductivity():
    lp = sc.AgeGatedLp(2.0, 3.0)
    x = np.zeros((4, 3))
    assert np.all(lp(x, 1.0) == 2.0)
    assert np.all(lp(x, 3.5) == 0.0)


# ---------------------------------------------------------------------------
# one coarse convergence pair (the full study runs in the acceptance gate)


def test_tp1_errors_shrink_between_levels():
    coarse, _ = sc._tp1_level(4)
    fine, _ = sc._tp1_level(6)
    for name in sc.ErrorReport.names:
        assert fine["errors"][name] < coarse["errors"][name]
    assert fine["picard"] <= 12
