import json

import pytest

from app.config import (
    _read_document,
    build_config,
    key_registry,
    list_presets,
    load_config,
    merge_documents,
)
from app.errors import ConfigError

TINY_NN = """
kind = "nn"
seed = 3

[nn]
n_neurons = 4
step_size = 0.1
burn_in = 5
iterations = 10
train_size = 16
test_size = 16
movers = 2
batch_size = 2
prediction_points = 5
"""


@pytest.fixture
def tiny_nn(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_NN)
    return path


@pytest.mark.parametrize("name", list_presets())
def test_every_preset_loads(name):
    config = load_config(preset=name)
    assert config.preset == name
    assert config.kind in name


def test_shipped_presets():
    assert {"pb1d_full", "pb3d_full", "nn_full", "convergence_desk", "fixedpoint_desk"} <= set(
        list_presets()
    )


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        load_config(preset="nope")


def test_needs_a_source():
    with pytest.raises(ConfigError):
        load_config()


def test_time_based_run_lengths():
    sampler = load_config(preset="pb1d_full").sampler
    assert sampler.burn_in == 100_000
    assert sampler.iterations == 300_000


def test_seed_and_output_override(tiny_nn, tmp_path):
    config = load_config(tiny_nn, seed=11, output_dir=str(tmp_path / "x"))
    assert config.seed == 11
    assert config.resolved_output_dir() == tmp_path / "x"


def test_default_output_dir(tiny_nn):
    config = load_config(tiny_nn)
    assert config.resolved_output_dir().parts[-2:] == ("nn", "seed3")


def test_file_overrides_preset(tmp_path):
    path = tmp_path / "override.toml"
    path.write_text("[sampler]\nthin = 7\n")
    config = load_config(path, preset="pb1d_smoke")
    assert config.sampler.thin == 7
    assert config.sampler.batch_size == 4
    assert config.pb.n_plus == 64


def test_experiment_seed_reaches_the_sampler():
    config = load_config(preset="pb1d_smoke", seed=9)
    assert config.sampler_config().seed == 9


class TestValidation:
    def test_unknown_key(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text(TINY_NN.replace("n_neurons = 4", "n_neurons = 4\nwidth = 3"))
        with pytest.raises(ConfigError, match="width"):
            load_config(path)

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            build_config({"kind": "nn", "nn": {}, "extras": {}})

    def test_missing_section(self):
        with pytest.raises(ConfigError, match="sampler"):
            build_config({"kind": "pb1d", "pb": {"epsilon": 1, "Q_f": 0.5, "Q_plus": 2, "n_plus": 8},
                          "domain": {}, "oracle": {}})

    def test_unused_section(self):
        with pytest.raises(ConfigError, match="does not use"):
            build_config({"kind": "nn", "nn": {}, "pb": {"epsilon": 1, "Q_f": 0, "Q_plus": 1, "n_plus": 2}})

    def test_unbounded_domain_cannot_reflect(self):
        with pytest.raises(ConfigError, match="boundary"):
            build_config(
                {
                    "kind": "exactness",
                    "potentials": {},
                    "domain": {"kind": "all_space"},
                    "sampler": {"beta": 1, "tau": 0.1},
                    "study": {},
                }
            )

    def test_empty_box(self):
        with pytest.raises(ConfigError):
            build_config({"kind": "nn", "nn": {}, "domain": {"low": 2.0, "high": 1.0}})

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            build_config({"kind": "nn", "nn": {"n_neurons": 0}})
        with pytest.raises(ConfigError):
            build_config({"kind": "nn", "nn": {"interaction_scale": "half"}})

    def test_malformed_toml(self, tmp_path):
        path = tmp_path / "broken.toml"
        path.write_text("kind = \n")
        with pytest.raises(ConfigError, match="cannot parse"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.toml")


def test_manifest_reruns_its_config(tiny_nn, tmp_path):
    config = load_config(tiny_nn)
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"config": config.model_dump(mode="json", exclude_none=True)}))
    assert load_config(manifest) == config


def test_json_without_config_is_rejected(tmp_path):
    path = tmp_path / "other.json"
    path.write_text("{}")
    with pytest.raises(ConfigError, match="manifest"):
        _read_document(path)


def test_merge_documents_is_deep():
    base = {"kind": "pb1d", "sampler": {"tau": 0.1, "thin": 2}, "seed": 1}
    merged = merge_documents(base, {"sampler": {"thin": 5}, "seed": 4})
    assert merged == {"kind": "pb1d", "sampler": {"tau": 0.1, "thin": 5}, "seed": 4}
    assert base["sampler"]["thin"] == 2


def test_key_registry_covers_every_section():
    lines = key_registry()
    for key in ("[sampler] tau", "[pb] n_plus", "[nn] interaction_scale", "[oracle] damping"):
        assert any(line.startswith(key) for line in lines)
    assert any("burn_in_time" in line for line in lines)
    for section in ("potentials", "domain", "pb", "diagnostics", "study"):
        assert any(line.startswith(f"[{section}]") for line in lines)
