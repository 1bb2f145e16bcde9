"""Command line interface tests exercising the documented exit codes."""

from soilroot import cli, scenarios as sc


def small_cfg():
    return sc.tp2_config(spacing=0.5, t_end=0.4, dt_growth=0.2, rng_seed=5,
                         output_every=1)


def test_simulate_success(tmp_path):
    cfg_path = tmp_path / "cfg.toml"
    sc.save_config(small_cfg(), cfg_path)
    out = tmp_path / "out"
    code = cli.main(["simulate", "--config", str(cfg_path),
                     "--out", str(out)])
    assert code == 0
    assert (out / "tp2_log.csv").exists()
    assert (out / "tp2_soil_00002.vtu").exists()
    assert (out / "tp2_roots_00002.vtp").exists()


def test_mesh_command(tmp_path):
    cfg_path = tmp_path / "cfg.toml"
    sc.save_config(small_cfg(), cfg_path)
    out = tmp_path / "mesh.vtu"
    assert cli.main(["mesh", "--config", str(cfg_path),
                     "--out", str(out)]) == 0
    assert out.exists()


def test_bad_config_exits_2(tmp_path):
    cfg_path = tmp_path / "cfg.toml"
    cfg_path.write_text("nonsense = 1\n")
    assert cli.main(["simulate", "--config", str(cfg_path),
                     "--out", str(tmp_path / "out")]) == 2


def test_missing_config_exits_2(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.toml"),
                     "--out", str(tmp_path / "out")]) == 2


def test_unknown_region_exits_2(tmp_path):
    cfg = small_cfg()
    cfg_path = tmp_path / "cfg.toml"
    sc.save_config(sc.tp2_config(spacing=0.5, dirichlet={"side": 0.0}),
                   cfg_path)
    assert cli.main(["simulate", "--config", str(cfg_path),
                     "--out", str(tmp_path / "out")]) == 2


def test_solver_failure_exits_3(tmp_path):
    cfg = sc.tp2_config(spacing=0.5, t_end=0.2, dt_growth=0.2, rng_seed=5,
                        picard_max=1, picard_tol=1e-300)
    cfg_path = tmp_path / "cfg.toml"
    sc.save_config(cfg, cfg_path)
    assert cli.main(["simulate", "--config", str(cfg_path),
                     "--out", str(tmp_path / "out")]) == 3
