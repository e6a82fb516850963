import json

import pytest

from conftest import CONFIG_DIR, make_config
from overlaysim.config import ConfigError, load_config, parse_config, run_seed
from overlaysim.engine import CostModel
from overlaysim.topology import PlacementMode


def base(**kw):
    data = {"modes": ["host_overlay"], "pairs": [1]}
    data.update(kw)
    return data


def test_shipped_configs_load():
    sweep = load_config(CONFIG_DIR / "placement_sweep.yaml", environ={})
    assert len(list(sweep.runs())) == 15
    assert sweep.duration_ticks == 100_000 and sweep.warmup_ticks == 1000
    single = load_config(CONFIG_DIR / "single.yaml", environ={})
    assert [(r.mode, r.pairs) for r in single.runs()] == [(PlacementMode.HOST_OVERLAY, 1)]
    assert CostModel.load(CONFIG_DIR / "cost_model.json") == CostModel()


@pytest.mark.parametrize("data", [
    base(bogus=1),
    base(workload={"message_size": 10}),
    base(network={"vni": 3}),
    base(switch={"cache": 3}),
    base(cost_model={"upcall": 1}),
    base(output={"format": "x"}),
])
def test_unknown_keys_rejected(data):
    with pytest.raises(ConfigError):
        parse_config(data, environ={})


@pytest.mark.parametrize("data", [
    {"pairs": [1]},
    {"modes": ["host_overlay"]},
    base(modes=["warp"]),
    base(pairs=[0]),
    base(pairs=["two"]),
    base(seed=True),
    base(duration_ticks=10, warmup_ticks=20),
    base(network={"vni_mode": "sometimes"}),
    base(network={"link_gbps": 0}),
    base(calibration={"ticks": 5}),
    base(workload={"queue_depth": 0}),
    base(mode="host_direct"),
    [1, 2],
])
def test_invalid_values_rejected(data):
    with pytest.raises(ConfigError):
        parse_config(data, environ={})


def test_env_overrides_only_seed_and_output():
    env = {"OVERLAYSIM_SEED": "99", "OVERLAYSIM_OUTPUT_DIR": "/tmp/x", "OVERLAYSIM_PAIRS": "7"}
    c = parse_config(base(seed=1, pairs=[2]), environ=env)
    assert c.seed == 99 and str(c.output_dir) == "/tmp/x" and c.pairs == (2,)
    with pytest.raises(ConfigError):
        parse_config(base(), environ={"OVERLAYSIM_SEED": "abc"})


def test_ms_durations_convert_to_ticks():
    c = parse_config(base(duration_ms=2, warmup_ms=0.5, engine={"tick_us": 5}), environ={})
    assert (c.duration_ticks, c.warmup_ticks) == (400, 100)


def test_cost_model_file_and_inline(tmp_path):
    CostModel(upcall_cost=7.0).save(tmp_path / "cm.json")
    (tmp_path / "exp.yaml").write_text(
        "modes: [host_overlay]\npairs: [1]\ncost_model: {file: cm.json, nic_tx: 3}\n")
    c = load_config(tmp_path / "exp.yaml", environ={})
    assert c.cost.upcall_cost == 7.0 and c.cost.nic_tx == 3
    (tmp_path / "path.yaml").write_text("modes: [host_overlay]\npairs: [1]\ncost_model: cm.json\n")
    assert load_config(tmp_path / "path.yaml", environ={}).cost.upcall_cost == 7.0
    (tmp_path / "missing.yaml").write_text("modes: [host_overlay]\npairs: [1]\ncost_model: no.json\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml", environ={})
    (tmp_path / "bad.json").write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ConfigError):
        parse_config(base(cost_model="bad.json"), tmp_path / "x.yaml", environ={})


def test_output_dir_relative_to_working_dir(tmp_path):
    (tmp_path / "e.yaml").write_text("modes: host_direct\npairs: 1\noutput: {dir: res}\n")
    assert str(load_config(tmp_path / "e.yaml", environ={}).output_dir) == "res"


def test_bad_yaml(tmp_path):
    (tmp_path / "e.yaml").write_text("modes: [\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "e.yaml", environ={})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml", environ={})


def test_run_seeds_and_digest():
    c = make_config(modes=["host_direct", "host_overlay"], pairs=[1, 2])
    seeds = [r.seed for r in c.runs()]
    assert len(set(seeds)) == 4
    assert seeds[0] == run_seed(1, "host_direct", 1)
    r = c.run_config("host_direct", 1)
    assert r.digest() == c.run_config("host_direct", 1).digest()
    assert r.digest() != make_config(seed=2).run_config("host_direct", 1).digest()
