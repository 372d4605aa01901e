import json
import math

import pytest

from qfhas.errors import ScenarioError
from qfhas.scenario import (
    build_sim_config, load_grid, load_scenario, parse_grid, parse_scenario, scenario_from_base, with_seed,
)
from qfhas.utility import PRESETS, samples_from_curve

MINIMAL = {"duration": 100, "warmup": 10, "link": {"capacity_bps": 5e6}, "users": [{"utility": "sport"}]}


def with_(**kw):
    return {**MINIMAL, **kw}


def test_minimal_scenario_defaults():
    spec = parse_scenario(MINIMAL)
    assert spec.seed == 0 and spec.chunk_duration == 2.0
    assert spec.users[0].controller == "quality_fair"
    sim = build_sim_config(spec)
    assert sim.users[0].curve is PRESETS["sport"]
    assert sim.users[0].stop_time == math.inf
    assert sim.client.kappa == 1e9 and sim.coordinator.gamma == 0.95
    assert sim.client.ladder.levels[0] == 400e3


@pytest.mark.parametrize("data,path", [
    (with_(bogus=1), "bogus"),
    (with_(users=[]), "users"),
    (with_(users=[{"utility": "nope"}]), "users.0.utility"),
    (with_(users=[{"utility": {"a": 0.1, "b": 0.3}}]), "users.0.utility"),
    (with_(users=[{"utility": {"preset": "sport", "a": 1, "b": 0.3, "c": 0}}]), "users.0.utility"),
    (with_(users=[{"utility": "sport", "start_time": 5, "stop_time": 5}]), "users.0"),
    (with_(link={}), "link"),
    (with_(link={"capacity_bps": 1e6, "capacity_trace": [[0, 1e6]]}), "link"),
    (with_(link={"capacity_bps": -1}), "link.capacity_bps"),
    (with_(link={"capacity_bps": 1e6, "share_mode": "tcp"}), "link.share_mode"),
    (with_(warmup=200), ""),
    (with_(schema_version=2), "schema_version"),
])
def test_validation_errors_name_the_field(data, path):
    with pytest.raises(ScenarioError) as info:
        parse_scenario(data)
    assert info.value.path == path
    assert info.value.kind == "validation_error"


def test_domain_errors_are_reported_at_their_section():
    spec = parse_scenario(with_(coordinator={"gamma": 1.5}))
    with pytest.raises(ScenarioError) as info:
        build_sim_config(spec)
    assert info.value.path == "coordinator"


def test_unknown_controller_path():
    spec = parse_scenario(with_(users=[{"utility": "sport"}, {"utility": "sport", "controller": "bba"}]))
    with pytest.raises(ScenarioError) as info:
        build_sim_config(spec)
    assert info.value.path == "users.1.controller"


def test_bad_capacity_trace_is_a_link_error():
    spec = parse_scenario(with_(link={"capacity_trace": [[1.0, 1e6]]}))
    with pytest.raises(ScenarioError) as info:
        build_sim_config(spec)
    assert info.value.path == "link"


def test_coefficient_utility():
    spec = parse_scenario(with_(users=[{"utility": {"a": 0.01, "b": 0.3, "c": 0.2}}]))
    curve = build_sim_config(spec).users[0].curve
    assert (curve.a, curve.b, curve.c, curve.label) == (0.01, 0.3, 0.2, "coefficients")


def test_samples_utility_is_fitted():
    truth = PRESETS["cartoon"]
    samples = [{"bitrate_bps": s.bitrate, "ssim": s.ssim}
               for s in samples_from_curve(truth, [400e3, 880e3, 1680e3, 2800e3, 4400e3, 6000e3])]
    spec = parse_scenario(with_(users=[{"utility": {"samples": samples}}]))
    curve = build_sim_config(spec).users[0].curve
    assert curve.b == pytest.approx(truth.b, rel=1e-4)


def test_noise_seed_defaults_to_scenario_seed():
    spec = parse_scenario(with_(seed=42, link={"capacity_bps": 1e6, "share_mode": "noisy", "noise_magnitude": 0.2}))
    assert build_sim_config(spec).link.noise_seed == 42
    spec = parse_scenario(with_(seed=42, link={"capacity_bps": 1e6, "noise_seed": 3}))
    assert build_sim_config(spec).link.noise_seed == 3


def test_ladder_is_given_in_kbps():
    spec = parse_scenario(with_(client={"ladder_kbps": [300, 700]}))
    assert build_sim_config(spec).client.ladder.levels == (300e3, 700e3)


def test_yaml_reads_exponent_floats(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("duration: 100\nwarmup: 10\nlink:\n  capacity_bps: 5e6\nusers:\n  - utility: sport\n")
    assert load_scenario(p).link.capacity_bps == 5e6


def test_json_and_yaml_agree(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps(MINIMAL))
    (tmp_path / "s.yaml").write_text(
        "duration: 100\nwarmup: 10\nlink: {capacity_bps: 5.0e6}\nusers: [{utility: sport}]\n")
    assert load_scenario(tmp_path / "s.json") == load_scenario(tmp_path / "s.yaml")


def test_unreadable_and_malformed_files(tmp_path):
    with pytest.raises(ScenarioError, match="cannot read"):
        load_scenario(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1, 2\n")
    with pytest.raises(ScenarioError, match="cannot parse"):
        load_scenario(tmp_path / "bad.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ScenarioError, match="mapping"):
        load_scenario(tmp_path / "list.yaml")


def test_with_seed():
    spec = parse_scenario(MINIMAL)
    assert with_seed(spec, None) is spec
    assert with_seed(spec, 9).seed == 9


def test_shipped_scenarios_load():
    for name in ("three_user", "three_user_continuous", "cross_traffic"):
        build_sim_config(load_scenario(f"scenarios/{name}.yaml"))
    grid = load_grid("scenarios/fairness_grid.yaml")
    assert grid.n_users == [4, 16] and grid.c_usr_bps == [0.75e6, 1.25e6]


def test_grid_spec_validation():
    base = {k: v for k, v in MINIMAL.items() if k != "users"}
    grid = parse_grid({"base": base, "n_users": [2], "c_usr_bps": [1e6]})
    assert grid.controllers == ["quality_fair", "rate_fair"] and grid.realizations == 10
    with pytest.raises(ScenarioError) as info:
        parse_grid({"base": base, "n_users": [0], "c_usr_bps": [1e6]})
    assert "n_users" in str(info.value)
    with pytest.raises(ScenarioError) as info:
        parse_grid({"base": {**base, "users": []}, "n_users": [1], "c_usr_bps": [1e6]})
    assert info.value.path == "base.users"


def test_scenario_from_base_overrides():
    base = parse_grid({"base": {k: v for k, v in MINIMAL.items() if k != "users"},
                       "n_users": [2], "c_usr_bps": [1e6]}).base
    spec = scenario_from_base(base, [{"utility": "lecture"}], seed=5)
    assert spec.seed == 5 and spec.users[0].utility.preset == "lecture"
