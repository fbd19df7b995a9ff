import numpy as np
import pytest
import yaml

from paam import cnn, config
from paam.config import build_run, dump_config, load_config, parse_config
from paam.pruning import BudgetError, ConfigError


def test_shipped_configs_load(configs_dir):
    for path in sorted(configs_dir.glob("*.yaml")):
        cfg = load_config(path)
        assert cfg.validate() == []
    toy = load_config(configs_dir / "toy.yaml")
    assert toy.architecture["widths"] == [8, 16, 32]
    assert toy.pruning.lam > 0 and toy.pruning.activation.kind


def test_defaults_from_empty_mapping():
    cfg = parse_config({})
    assert cfg.seed == 0 and cfg.pruning.threshold_mode == "fixed" and cfg.attention.variant == "vanilla"
    assert parse_config(None).to_dict() == cfg.to_dict()


def test_unknown_and_mistyped_fields_are_all_listed():
    with pytest.raises(ConfigError) as ei:
        parse_config({"sede": 1, "pruning": {"lamda": 0.1, "cycles": "two"}, "attention": {"variant": "x"},
                      "architecture": {"depth": 3}, "activation": {"kind": "leaky_expo", "c": 1}})
    msg = str(ei.value)
    for needle in ("sede: unknown field", "pruning.lamda: unknown field", "pruning.cycles: expected an integer",
                   "attention.variant", "architecture.depth: unknown field", "activation.c: unknown field"):
        assert needle in msg


def test_type_coercion_rules():
    cfg = parse_config({"pruning": {"theta": 1, "lambda": 0}})
    assert isinstance(cfg.pruning.theta, float) and cfg.pruning.lam == 0.0
    with pytest.raises(ConfigError, match="deterministic: expected true/false"):
        parse_config({"deterministic": "yes"})
    with pytest.raises(ConfigError, match="seed: expected an integer"):
        parse_config({"seed": True})


def test_zero_budget_is_rejected():
    with pytest.raises(ConfigError, match="pruning.p"):
        parse_config({"pruning": {"threshold_mode": "quantile", "p": 0.0}})
    with pytest.raises(ConfigError, match="keeps no filter"):
        parse_config({"pruning": {"threshold_mode": "quantile", "p": 0.001}})
    assert issubclass(BudgetError, ConfigError)


def test_unreadable_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1,\n")
    with pytest.raises(ConfigError, match="not valid YAML"):
        load_config(bad)


def test_dump_parse_round_trip(configs_dir):
    cfg = load_config(configs_dir / "toy.yaml")
    again = parse_config(yaml.safe_load(dump_config(cfg)))
    assert again.to_dict() == cfg.to_dict()
    assert again.content_hash() == cfg.content_hash()
    again.seed += 1
    assert again.content_hash() != cfg.content_hash()


def test_block_alpha_policy():
    cfg = parse_config({"architecture": {"widths": [4, 8]}, "attention": {"alpha_policy": "block"},
                        "dataset": {"image_dims": [3, 8, 8]}})
    _, net, an, _ = build_run(cfg)
    alphas = config.layer_alphas(net, cfg.attention)
    assert alphas == pytest.approx([2.0, 2.0, 2.0, np.sqrt(8), np.sqrt(8)])
    assert len(an) == net.L


def test_build_run_is_reproducible(configs_dir):
    cfg = load_config(configs_dir / "smoke.yaml")
    d1, n1, a1, r1 = build_run(cfg)
    d2, n2, a2, r2 = build_run(cfg)
    assert np.array_equal(d1.x_train, d2.x_train)
    s1, s2 = cnn.state_arrays(n1), cnn.state_arrays(n2)
    for k, v in s1.items():
        assert np.array_equal(v, s2[k])
    assert r1.random() == r2.random()
