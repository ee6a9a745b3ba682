"""One config file for every subcommand; flags override file values.

Schema (all keys optional, unknown keys rejected):

{
  "canvas": 64,
  "dataset": {"num_samples", "k_min", "k_max", "seed", "min_occlusion_fraction",
               "depth_noise_sigma", "adjacency_band", "retry_budget"},
  "vae":     {"r", "c", "stem_channels", "trunk_channels", "decoder_channels",
               "concat_query", "lambda1", "lambda2", "lambda3", "lambda4", "lr",
               "seed", "perceptual_seed", "perceptual_channels"},
  "v2c":     {"width", "temb_dim", "t_steps", "beta_min", "beta_max", "p_drop",
               "guidance_scale_default", "clip_x0", "lr_pretrain", "lr_control",
               "batch", "seed"},
  "infer":   {"strategy", "guidance_scale", "band", "statistic",
               "mask_threshold", "paste_visible"}
}

The resolved config's sha256 (over canonical JSON) is embedded in every
artifact a run produces.  DEOCC_OUT_ROOT, when set, anchors relative output
paths.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .dataset import DatasetConfig
from .diffusion import V2CConfig
from .errors import ValidationError
from .pipeline import InferConfig
from .vae import VaeConfig

_SECTION_TYPES = {"dataset": DatasetConfig, "vae": VaeConfig, "v2c": V2CConfig,
                  "infer": InferConfig}
# keys derived from the shared canvas rather than set directly
_DERIVED = {"dataset": {"canvas_size"}, "vae": {"canvas"},
            "v2c": {"grid", "latent_channels", "vocab"}, "infer": set()}


@dataclass(frozen=True)
class RunConfig:
    canvas: int = 64
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    v2c: V2CConfig = field(default_factory=V2CConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def __post_init__(self):
        if self.dataset.canvas_size != self.canvas or self.vae.canvas != self.canvas:
            raise ValidationError("dataset/vae canvas must equal the shared canvas")
        if self.v2c.grid != self.vae.grid or self.v2c.latent_channels != self.vae.c:
            raise ValidationError("v2c latent grid must match the stage-1 latent")

    def to_json_dict(self) -> dict:
        return {"canvas": self.canvas,
                **{name: asdict(getattr(self, name)) for name in _SECTION_TYPES}}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def _build_section(name: str, cls, canvas: int, data: dict,
                   r: int | None = None, c: int | None = None):
    allowed = {f.name for f in dataclasses.fields(cls)} - _DERIVED[name]
    unknown = set(data) - allowed
    if unknown:
        raise ValidationError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    kwargs = dict(data)
    for key in ("trunk_channels", "decoder_channels"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    if name == "dataset":
        kwargs["canvas_size"] = canvas
    elif name == "vae":
        kwargs["canvas"] = canvas
    elif name == "v2c":
        kwargs["grid"] = canvas // r
        kwargs["latent_channels"] = c
    return cls(**kwargs)


def build_run_config(data: dict, overrides: dict | None = None) -> RunConfig:
    """data: parsed config file (may be {}); overrides: {'canvas': .., 'dataset.seed': ..}
    dotted flag overrides taking precedence."""
    data = json.loads(json.dumps(data))  # deep copy + JSON-type check
    unknown = set(data) - ({"canvas"} | set(_SECTION_TYPES))
    if unknown:
        raise ValidationError(f"unknown top-level config keys: {sorted(unknown)}")
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in dotted:
            section, key = dotted.split(".", 1)
            data.setdefault(section, {})[key] = value
        else:
            data[dotted] = value
    canvas = int(data.get("canvas", 64))
    vae_section = dict(data.get("vae", {}))
    r = int(vae_section.get("r", 4))
    c = int(vae_section.get("c", 8))
    return RunConfig(
        canvas=canvas,
        dataset=_build_section("dataset", DatasetConfig, canvas, data.get("dataset", {})),
        vae=_build_section("vae", VaeConfig, canvas, vae_section),
        v2c=_build_section("v2c", V2CConfig, canvas, data.get("v2c", {}), r=r, c=c),
        infer=_build_section("infer", InferConfig, canvas, data.get("infer", {})),
    )


def load_run_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"config file {p} not found")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"config file is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ValidationError("config file must hold a JSON object")
    return build_run_config(data, overrides)


def resolve_out(path: str | Path) -> Path:
    """Anchor relative output paths at DEOCC_OUT_ROOT when set."""
    p = Path(path)
    root = os.environ.get("DEOCC_OUT_ROOT")
    if root and not p.is_absolute():
        return Path(root) / p
    return p
