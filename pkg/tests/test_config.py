import json

import pytest

from aspect_attn.config import RunConfig, apply_overrides, load_config, parse_value
from aspect_attn.errors import ConfigError


class TestOverrides:
    @pytest.mark.parametrize("text,value", [("3", 3), ("1e-3", 1e-3), ("true", True), ("[1, 2]", [1, 2]),
                                            ("null", None), ("m4", "m4")])
    def test_parse_value(self, text, value):
        assert parse_value(text) == value

    def test_dotted_keys(self):
        d = apply_overrides({"train": {"lr": 1.0}}, ["train.lr=0.5", "eval.seeds=[7]"])
        assert d == {"train": {"lr": 0.5}, "eval": {"seeds": [7]}}

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["train.lr"])


class TestLoad:
    def test_defaults(self):
        cfg = load_config()
        assert cfg.train.lr == 1e-4 and cfg.train.batch_size == 16 and cfg.train.epochs == 50
        assert cfg.eval.n_outer == 5 and cfg.eval.n_inner == 4 and cfg.variant == "m4"

    def test_file_then_overrides(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"train": {"epochs": 3}, "synth": {"utterances": {"ddk": 1}}}))
        cfg = load_config(tmp_path / "c.json", ["train.lr=0.01"])
        assert (cfg.train.epochs, cfg.train.lr, cfg.train.batch_size) == (3, 0.01, 16)
        assert cfg.synth.utterances == {"ddk": 1}  # nested dicts replace, they do not merge

    def test_round_trip(self):
        cfg = load_config(overrides=["model.h1=8", "variants=[\"m2\", \"m4\"]"])
        assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    @pytest.mark.parametrize("override", ["variant=m9", "protocol=c", "model.width=3", "train.speed=1",
                                          "nonsense.x=1", "eval.pairing=\"x\""])
    def test_validation(self, override):
        with pytest.raises(ConfigError):
            load_config(overrides=[override])

    def test_invalid_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.json")
