import json

import pytest

from semaug.config import Config, ConfigError, default_config_path, describe_keys, load_default


def test_bundled_default_matches_dataclass_defaults():
    assert load_default().to_dict() == Config().to_dict()


def test_headline_defaults():
    cfg = load_default()
    assert (cfg.model.N, cfg.model.M, cfg.model.S) == (10, 12, 3)
    assert cfg.router.tau == 0.039
    assert (cfg.model.lora_rank, cfg.model.lora_alpha) == (4, 8.0)
    assert (cfg.loss.lambda_m, cfg.loss.lambda_p) == (0.7, 0.3)


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="lambda_q"):
        Config.from_dict({"loss": {"lambda_q": 1.0}})
    with pytest.raises(ConfigError, match="'bogus'"):
        Config.from_dict({"bogus": 1})


@pytest.mark.parametrize("patch,key", [
    ({"model": {"N": 0}}, "model.N"),
    ({"model": {"S": "3"}}, "model.S"),
    ({"router": {"calibrate": 1}}, "router.calibrate"),
    ({"router": {"tau": -1}}, "router.tau"),
    ({"data": {"general": {"palette": []}}}, "data.general.palette"),
    ({"model": "x"}, "model"),
    ({"seed": 2**64}, "seed"),
])
def test_invalid_values_named(patch, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        Config.from_dict(patch)


def test_cross_checks():
    with pytest.raises(ConfigError, match="max_text_len"):
        Config.from_dict({"model": {"M": 20}})
    with pytest.raises(ConfigError, match="image_size"):
        Config.from_dict({"data": {"image_size": 40}})
    with pytest.raises(ConfigError, match="objects_min"):
        Config.from_dict({"data": {"vertical": {"objects_min": 3, "objects_max": 2}}})


def test_partial_sections_merge():
    cfg = Config.from_dict({"model": {"N": 7}})
    assert cfg.model.N == 7 and cfg.model.M == 12


def test_int_accepted_for_float():
    assert Config.from_dict({"router": {"tau": 1}}).router.tau == 1.0


def test_with_seed():
    assert Config().with_seed(None).seed == 0
    assert Config().with_seed(2**64 - 1).seed == 2**64 - 1


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        Config.from_file(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="malformed"):
        Config.from_file(bad)


def test_round_trip(tmp_path):
    cfg = Config.from_dict({"seed": 5, "model": {"N": 4}})
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert Config.from_file(p) == cfg


def test_describe_lists_every_key():
    text = describe_keys()
    leaves = []

    def walk(d, prefix):
        for k, v in d.items():
            if isinstance(v, dict):
                walk(v, prefix + k + ".")
            else:
                leaves.append(prefix + k)

    walk(Config().to_dict(), "")
    for key in leaves:
        assert f"  {key} " in text
    assert "range=[1, 100]" in text


def test_default_file_is_valid_json():
    json.loads(default_config_path().read_text())
