import json

import pytest

from deocc.config import build_run_config, load_run_config, resolve_out
from deocc.errors import ValidationError


def test_defaults_resolve():
    cfg = build_run_config({})
    assert cfg.canvas == 64
    assert cfg.dataset.canvas_size == 64
    assert cfg.vae.canvas == 64
    assert cfg.v2c.grid == 16
    assert cfg.v2c.latent_channels == cfg.vae.c


def test_canvas_propagates_to_derived_fields():
    cfg = build_run_config({"canvas": 32, "vae": {"r": 4, "c": 6}})
    assert cfg.dataset.canvas_size == 32
    assert cfg.vae.grid == 8
    assert cfg.v2c.grid == 8
    assert cfg.v2c.latent_channels == 6


def test_unknown_keys_rejected_everywhere():
    with pytest.raises(ValidationError):
        build_run_config({"mystery": 1})
    with pytest.raises(ValidationError):
        build_run_config({"vae": {"nope": 2}})
    with pytest.raises(ValidationError):
        build_run_config({"v2c": {"grid": 8}})  # derived key, not settable


def test_overrides_beat_file_values():
    cfg = build_run_config({"dataset": {"seed": 1}}, {"dataset.seed": 9, "canvas": 32})
    assert cfg.dataset.seed == 9
    assert cfg.canvas == 32
    # None overrides are ignored (unset flags)
    cfg2 = build_run_config({"dataset": {"seed": 1}}, {"dataset.seed": None})
    assert cfg2.dataset.seed == 1


def test_config_hash_stable_and_sensitive():
    a = build_run_config({"canvas": 32})
    b = build_run_config({"canvas": 32})
    c = build_run_config({"canvas": 64})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()


def test_load_run_config_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"canvas": 32, "infer": {"strategy": "once_for_all"}}))
    cfg = load_run_config(p)
    assert cfg.infer.strategy == "once_for_all"
    with pytest.raises(ValidationError):
        load_run_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("not json")
    with pytest.raises(ValidationError):
        load_run_config(bad)


def test_resolve_out_respects_env(monkeypatch, tmp_path):
    monkeypatch.setenv("DEOCC_OUT_ROOT", str(tmp_path))
    assert resolve_out("rel/path") == tmp_path / "rel" / "path"
    assert resolve_out("/abs/path") == __import__("pathlib").Path("/abs/path")
    monkeypatch.delenv("DEOCC_OUT_ROOT")
    assert resolve_out("rel") == __import__("pathlib").Path("rel")
