"""Trained-model directory layout: stage1.{npz,json} + v2c.{npz,json} +
run_config.json (resolved config + its hash)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig
from .diffusion import LatentStats, V2CGenerator, V2CTrainState, load_v2c, save_v2c
from .errors import ModelMismatchError
from .vae import ParallelVae, TrainState, load_vae, save_vae


@dataclass
class ModelBundle:
    vae: ParallelVae
    v2c: V2CGenerator
    stats: LatentStats
    config_hash: str


def save_stage1(state: TrainState, models_dir: str | Path, run_cfg: RunConfig) -> None:
    d = Path(models_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_vae(state, d / "stage1")
    _write_run_config(d, run_cfg)


def save_stage2(state: V2CTrainState, models_dir: str | Path, run_cfg: RunConfig) -> None:
    d = Path(models_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_v2c(state, d / "v2c")
    _write_run_config(d, run_cfg)


def _write_run_config(d: Path, run_cfg: RunConfig) -> None:
    payload = {"config": run_cfg.to_json_dict(), "config_hash": run_cfg.config_hash()}
    (d / "run_config.json").write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_bundle(models_dir: str | Path) -> ModelBundle:
    d = Path(models_dir)
    vae_state = load_vae(d / "stage1")
    v2c_state = load_v2c(d / "v2c")
    if v2c_state.phase != "control":
        raise ModelMismatchError("stage-2 checkpoint is pretrain-only; finish control training")
    config_hash = ""
    rc = d / "run_config.json"
    if rc.exists():
        config_hash = json.loads(rc.read_text()).get("config_hash", "")
    return ModelBundle(vae=vae_state.model, v2c=v2c_state.model,
                       stats=v2c_state.stats, config_hash=config_hash)
