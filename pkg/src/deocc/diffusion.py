"""Stage 2: conditional denoising diffusion over full-view feature maps.

A small U-Net denoiser is first pretrained unconditionally on stage-1
latents.  Its encoder half (and the time embedding) is then frozen, cloned
into a trainable control branch, and zero convolutions are inserted at the
clone's entry and into every decoder stage, so conditioning (partial-view
features, masks, edges, category set) is inert at initialization.  Sampling
is full-step ancestral DDPM with classifier-free guidance.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .dataset import augment_visible_subset
from .errors import ModelMismatchError, TrainingError, ValidationError
from .nn import Adam, Conv2d, Linear, Module, Tensor, concat, upsample_nearest
from .scene import SceneSample
from .sprites import CATEGORIES
from .vae import ParallelVae, downsample_mean, scene_object_arrays, visible_segment_arrays

log = logging.getLogger(__name__)

ALPHA_BAR_TERMINAL_MAX = 0.05


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 2:
            raise ValidationError("schedule needs at least two steps")
        if b.min() <= 0.0 or b.max() >= 1.0:
            raise ValidationError("betas must lie in (0, 1)")
        if np.any(np.diff(b) < 0):
            raise ValidationError("betas must be monotone non-decreasing")
        object.__setattr__(self, "betas", b)
        ab = self.alpha_bars
        if np.any(np.diff(ab) >= 0):
            raise ValidationError("alpha-bar must be strictly decreasing")
        if ab[-1] > ALPHA_BAR_TERMINAL_MAX:
            raise ValidationError(
                f"terminal alpha-bar {ab[-1]:.4f} too far from 0; extend or steepen the schedule")

    @staticmethod
    def linear(t_steps: int = 200, beta_min: float = 1e-4, beta_max: float = 0.09
               ) -> "DiffusionSchedule":
        return DiffusionSchedule(np.linspace(beta_min, beta_max, t_steps))

    @property
    def t_steps(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)


def add_noise(f: np.ndarray, t, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """f_t = sqrt(alpha_bar_t) f + sqrt(1 - alpha_bar_t) eps.  t may be an int
    or a per-item array matching f's batch dimension."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.t_steps):
        raise ValidationError(f"t out of range [0, {schedule.t_steps})")
    ab = schedule.alpha_bars[t]
    shape = (-1,) + (1,) * (f.ndim - 1) if t.ndim else ()
    ab = ab.reshape(shape) if t.ndim else ab
    return np.sqrt(ab) * f + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# conditions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionBundle:
    """Per-scene conditioning, all at latent-grid resolution and standardized
    where applicable: partial-view features, object+occluder mask, edge map,
    multi-hot category set."""

    f_p: np.ndarray        # (c, g, g)
    m_o: np.ndarray        # (1, g, g)
    edges: np.ndarray      # (1, g, g)
    categories: np.ndarray  # (V,) multi-hot

    def __post_init__(self):
        if self.f_p.shape[1:] != self.m_o.shape[1:] or self.m_o.shape != self.edges.shape:
            raise ValidationError("condition channels must share the latent grid shape")

    def stack(self) -> np.ndarray:
        return np.concatenate([self.f_p, self.m_o, self.edges], axis=0)

    @staticmethod
    def null(c: int, grid: int, vocab_size: int) -> "ConditionBundle":
        return ConditionBundle(f_p=np.zeros((c, grid, grid)),
                               m_o=np.zeros((1, grid, grid)),
                               edges=np.zeros((1, grid, grid)),
                               categories=np.zeros(vocab_size))


@dataclass(frozen=True)
class LatentStats:
    mean: np.ndarray  # (c,)
    std: np.ndarray   # (c,)

    def standardize(self, f: np.ndarray) -> np.ndarray:
        return (f - self.mean[:, None, None]) / self.std[:, None, None]

    def destandardize(self, f: np.ndarray) -> np.ndarray:
        return f * self.std[:, None, None] + self.mean[:, None, None]


def latent_stats_from(latents: list[np.ndarray]) -> LatentStats:
    stacked = np.stack(latents)  # (N, c, g, g)
    mean = stacked.mean(axis=(0, 2, 3))
    std = np.maximum(stacked.std(axis=(0, 2, 3)), 1e-6)
    return LatentStats(mean=mean, std=std)


# ---------------------------------------------------------------------------
# U-Net denoiser
# ---------------------------------------------------------------------------

def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class TimeEmbedding(Module):
    def __init__(self, dim: int, rng):
        self.dim = dim
        self.l1 = Linear(dim, dim, rng=rng)
        self.l2 = Linear(dim, dim, rng=rng)

    def __call__(self, t: np.ndarray) -> Tensor:
        base = Tensor(sinusoidal_embedding(t, self.dim))
        return self.l2(self.l1(base).silu())


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, rng):
        self.conv1 = Conv2d(cin, cout, 3, rng=rng)
        self.conv2 = Conv2d(cout, cout, 3, rng=rng)
        self.emb = Linear(temb_dim, cout, rng=rng)
        self.skip = Conv2d(cin, cout, 1, rng=rng) if cin != cout else None

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(x.silu())
        e = self.emb(emb.silu())
        b, ch = e.data.shape
        h = h + e.reshape(b, ch, 1, 1)
        h = self.conv2(h.silu())
        return h + (self.skip(x) if self.skip is not None else x)


class EncoderHalf(Module):
    """in_conv -> res @ g -> down -> res @ g/2 -> mid res @ g/2; returns taps."""

    def __init__(self, c: int, w: int, temb_dim: int, rng):
        self.in_conv = Conv2d(c, w, 3, rng=rng)
        self.rb1 = ResBlock(w, w, temb_dim, rng)
        self.down = Conv2d(w, 2 * w, 3, stride=2, rng=rng)
        self.rb2 = ResBlock(2 * w, 2 * w, temb_dim, rng)
        self.mid = ResBlock(2 * w, 2 * w, temb_dim, rng)

    def __call__(self, x: Tensor, emb: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        h1 = self.rb1(self.in_conv(x), emb)
        h2 = self.rb2(self.down(h1), emb)
        hm = self.mid(h2, emb)
        return h1, h2, hm


class DecoderHalf(Module):
    def __init__(self, c: int, w: int, temb_dim: int, rng):
        self.mid = ResBlock(2 * w, 2 * w, temb_dim, rng)
        self.rb2 = ResBlock(4 * w, 2 * w, temb_dim, rng)
        self.up = Conv2d(2 * w, w, 3, rng=rng)
        self.rb1 = ResBlock(2 * w, w, temb_dim, rng)
        self.out = Conv2d(w, c, 3, rng=rng, zero_init=True)

    def __call__(self, taps: tuple[Tensor, Tensor, Tensor], emb: Tensor) -> Tensor:
        h1, h2, hm = taps
        d = self.mid(hm, emb)
        d = self.rb2(concat([d, h2], axis=1), emb)
        d = self.up(upsample_nearest(d, 2))
        d = self.rb1(concat([d, h1], axis=1), emb)
        return self.out(d)


class V2CGenerator(Module):
    """Frozen encoder E2 + trainable decoder D2 (the pretrained backbone),
    plus a trainable clone E2c fed through zero convolutions."""

    def __init__(self, cfg: "V2CConfig", rng: np.random.Generator | None = None,
                 with_control: bool = False):
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        c, w, td = cfg.latent_channels, cfg.width, cfg.temb_dim
        self.temb = TimeEmbedding(td, rng)
        self.e2 = EncoderHalf(c, w, td, rng)
        self.d2 = DecoderHalf(c, w, td, rng)
        self.has_control = with_control
        if with_control:
            self._attach_control(rng)

    def _attach_control(self, rng) -> None:
        cfg = self.cfg
        c, w, td = cfg.latent_channels, cfg.width, cfg.temb_dim
        self.e2c = EncoderHalf(c, w, td, rng)
        self.e2c.load_state_dict(self.e2.state_dict())  # trainable copy
        cond_ch = c + 2
        self.z_entry = Conv2d(cond_ch, c, 1, zero_init=True)
        self.z1 = Conv2d(w, w, 1, zero_init=True)
        self.z2 = Conv2d(2 * w, 2 * w, 1, zero_init=True)
        self.z_mid = Conv2d(2 * w, 2 * w, 1, zero_init=True)
        self.cat_proj = Linear(len(cfg.vocab), td, rng=rng)
        self.has_control = True

    def freeze_backbone(self) -> None:
        self.e2.freeze()
        self.temb.freeze()

    def backbone_hash(self) -> str:
        h = self.e2.params_hash()
        return h + ":" + self.temb.params_hash()

    def predict_backbone(self, f_t: np.ndarray, t: np.ndarray) -> Tensor:
        emb = self.temb(np.atleast_1d(t))
        taps = self.e2(Tensor(f_t), emb)
        return self.d2(taps, emb)

    def predict_noise(self, f_t: np.ndarray, t, cond: ConditionBundle | None,
                      conds: list[ConditionBundle | None] | None = None) -> Tensor:
        """Noise prediction.  cond=None means the null condition (classifier-free
        branch).  `conds` allows a per-item list for batched training."""
        if not self.has_control:
            return self.predict_backbone(f_t, t)
        cfg = self.cfg
        b = f_t.shape[0]
        if conds is None:
            conds = [cond] * b
        if len(conds) != b:
            raise ValidationError("one condition per batch item required")
        null = ConditionBundle.null(cfg.latent_channels, f_t.shape[2], len(cfg.vocab))
        stacks = np.stack([(c_ or null).stack() for c_ in conds])
        cats = np.stack([(c_ or null).categories for c_ in conds])
        if stacks.shape[2:] != f_t.shape[2:]:
            raise ValidationError(
                f"condition grid {stacks.shape[2:]} != latent grid {f_t.shape[2:]}")
        t_arr = np.broadcast_to(np.atleast_1d(t), (b,))
        emb = self.temb(t_arr)
        taps = self.e2(Tensor(f_t), emb)
        ctrl_in = Tensor(f_t) + self.z_entry(Tensor(stacks))
        ctrl_emb = emb + self.cat_proj(Tensor(cats))
        c1, c2, cm = self.e2c(ctrl_in, ctrl_emb)
        fused = (taps[0] + self.z1(c1), taps[1] + self.z2(c2), taps[2] + self.z_mid(cm))
        return self.d2(fused, emb)


@dataclass(frozen=True)
class V2CConfig:
    grid: int = 16
    latent_channels: int = 8
    width: int = 24
    temb_dim: int = 32
    t_steps: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.09
    p_drop: float = 0.1
    guidance_scale_default: float = 9.0
    clip_x0: float = 4.0
    lr_pretrain: float = 2e-3
    lr_control: float = 1e-3
    batch: int = 4
    seed: int = 0
    vocab: tuple[str, ...] = CATEGORIES

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule.linear(self.t_steps, self.beta_min, self.beta_max)


# ---------------------------------------------------------------------------
# scene -> latents and conditions (stage-1 encoder frozen throughout)
# ---------------------------------------------------------------------------

def encode_complete_latent(vae: ParallelVae, sample: SceneSample,
                           ids: list[int]) -> np.ndarray:
    rgba = np.stack([sample.object_by_id(i).amodal_rgba.array for i in ids])
    mu, _ = vae.encode_objects(rgba)
    return mu.data[0]


def encode_partial_latent(vae: ParallelVae, sample: SceneSample,
                          ids: list[int]) -> np.ndarray:
    segs = visible_segment_arrays(sample, ids)
    mu, _ = vae.encode_objects(segs)
    return mu.data[0]


def category_multi_hot(categories: list[str], vocab: tuple[str, ...]) -> np.ndarray:
    hot = np.zeros(len(vocab))
    index = {c: i for i, c in enumerate(vocab)}
    for cat in categories:
        if cat not in index:
            raise ValidationError(f"category {cat!r} not in vocabulary")
        hot[index[cat]] = 1.0
    return hot


def build_condition(vae: ParallelVae, sample: SceneSample, subset_ids: tuple[int, ...],
                    m_o, edges, stats: LatentStats, cfg: V2CConfig) -> ConditionBundle:
    ids = sorted(subset_ids)
    f_p = stats.standardize(encode_partial_latent(vae, sample, ids))
    r = sample.size()[0] // cfg.grid
    m_o_grid = downsample_mean(m_o.array.astype(np.float64), r)[None]
    edge_grid = downsample_mean(edges.array.astype(np.float64), r)[None]
    cats = category_multi_hot([sample.object_by_id(i).category for i in ids], cfg.vocab)
    return ConditionBundle(f_p=f_p, m_o=m_o_grid, edges=edge_grid, categories=cats)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

DIVERGENCE_LIMIT = 1e6


def noise_mse(eps_hat: Tensor, eps: np.ndarray) -> Tensor:
    return ((eps_hat - Tensor(eps)) ** 2.0).mean()


@dataclass
class V2CTrainState:
    model: V2CGenerator
    optimizer: Adam
    stats: LatentStats
    phase: str  # "pretrain" | "control"
    data_rng: np.random.Generator
    noise_rng: np.random.Generator
    step: int = 0
    curve: list[dict] = field(default_factory=list)


def _make_rngs(seed: int, tag: int) -> tuple[np.random.Generator, np.random.Generator]:
    ss = np.random.SeedSequence(seed, spawn_key=(tag,))
    kids = ss.spawn(2)
    return (np.random.Generator(np.random.PCG64(kids[0])),
            np.random.Generator(np.random.PCG64(kids[1])))


def init_pretrain(cfg: V2CConfig, stats: LatentStats) -> V2CTrainState:
    model = V2CGenerator(cfg, np.random.default_rng(cfg.seed), with_control=False)
    opt = Adam(model.params(), lr=cfg.lr_pretrain)
    data_rng, noise_rng = _make_rngs(cfg.seed, 10)
    return V2CTrainState(model=model, optimizer=opt, stats=stats, phase="pretrain",
                         data_rng=data_rng, noise_rng=noise_rng)


def to_control_phase(state: V2CTrainState) -> V2CTrainState:
    """Freeze the pretrained encoder + time embedding, clone the encoder into
    the control branch, insert zero convolutions, reset the optimizer."""
    model = state.model
    if model.has_control:
        raise TrainingError("model already has a control branch")
    model._attach_control(np.random.default_rng(model.cfg.seed + 1))
    model.freeze_backbone()
    opt = Adam(model.params(), lr=model.cfg.lr_control)  # excludes frozen params
    data_rng, noise_rng = _make_rngs(model.cfg.seed, 20)
    return V2CTrainState(model=model, optimizer=opt, stats=state.stats, phase="control",
                         data_rng=data_rng, noise_rng=noise_rng)


def pretrain_step(state: V2CTrainState, latents: list[np.ndarray]) -> dict:
    cfg = state.model.cfg
    sched = cfg.schedule()
    idx = state.data_rng.integers(len(latents), size=cfg.batch)
    f = np.stack([state.stats.standardize(latents[i]) for i in idx])
    t = state.noise_rng.integers(0, sched.t_steps, size=cfg.batch)
    eps = state.noise_rng.standard_normal(f.shape)
    f_t = add_noise(f, t, eps, sched)
    state.model.zero_grad()
    loss = noise_mse(state.model.predict_backbone(f_t, t), eps)
    _check_loss(loss, state.step)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    rec = {"step": state.step, "loss": loss.item()}
    state.curve.append(rec)
    return rec


def control_step(state: V2CTrainState, corpus: list[SceneSample],
                 vae: ParallelVae) -> dict:
    cfg = state.model.cfg
    sched = cfg.schedule()
    f_list, conds = [], []
    for _ in range(cfg.batch):
        sample = corpus[int(state.data_rng.integers(len(corpus)))]
        subset, m_o, edges = augment_visible_subset(sample, state.data_rng)
        f_list.append(state.stats.standardize(
            encode_complete_latent(vae, sample, sorted(subset))))
        if state.data_rng.random() < cfg.p_drop:
            conds.append(None)
        else:
            conds.append(build_condition(vae, sample, subset, m_o, edges,
                                         state.stats, cfg))
    f = np.stack(f_list)
    t = state.noise_rng.integers(0, sched.t_steps, size=cfg.batch)
    eps = state.noise_rng.standard_normal(f.shape)
    f_t = add_noise(f, t, eps, sched)
    state.model.zero_grad()
    loss = noise_mse(state.model.predict_noise(f_t, t, None, conds=conds), eps)
    _check_loss(loss, state.step)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    rec = {"step": state.step, "loss": loss.item()}
    state.curve.append(rec)
    return rec


def _check_loss(loss: Tensor, step: int) -> None:
    if not np.isfinite(loss.data).all():
        raise TrainingError(f"non-finite diffusion loss at step {step}")
    if loss.item() > DIVERGENCE_LIMIT:
        raise TrainingError(f"diffusion loss diverged at step {step}: {loss.item():.3g}")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: eps_u + s (eps_c - eps_u).  The endpoints
    collapse exactly: s=1 is the conditional prediction, s=0 the
    unconditional one."""
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def sample_full_view(model: V2CGenerator, stats: LatentStats,
                     cond: ConditionBundle | None, guidance_scale: float,
                     rng: np.random.Generator,
                     schedule: DiffusionSchedule | None = None) -> np.ndarray:
    """Ancestral sampling from pure noise; returns a (c, g, g) latent in the
    stage-1 encoder's space (destandardized).  Deterministic given rng."""
    if guidance_scale < 0:
        raise ValidationError("guidance scale must be >= 0")
    cfg = model.cfg
    sched = schedule or cfg.schedule()
    c, g = cfg.latent_channels, cfg.grid
    x = rng.standard_normal((1, c, g, g))
    ab = sched.alpha_bars
    alphas = sched.alphas
    betas = sched.betas
    for t in range(sched.t_steps - 1, -1, -1):
        if guidance_scale == 1.0:
            eps = model.predict_noise(x, t, cond).data
        elif guidance_scale == 0.0:
            eps = model.predict_noise(x, t, None).data
        else:
            eps_c = model.predict_noise(x, t, cond).data
            eps_u = model.predict_noise(x, t, None).data
            eps = cfg_combine(eps_u, eps_c, guidance_scale)
        x0 = (x - np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(ab[t])
        if cfg.clip_x0 > 0:
            x0 = np.clip(x0, -cfg.clip_x0, cfg.clip_x0)
        if t > 0:
            ab_prev = ab[t - 1]
            mean = (np.sqrt(ab_prev) * betas[t] * x0
                    + np.sqrt(alphas[t]) * (1.0 - ab_prev) * x) / (1.0 - ab[t])
            var = (1.0 - ab_prev) / (1.0 - ab[t]) * betas[t]
            x = mean + np.sqrt(var) * rng.standard_normal(x.shape)
        else:
            x = x0
    return stats.destandardize(x[0])


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_v2c(state: V2CTrainState, prefix: str | Path) -> None:
    arrays = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    opt = state.optimizer.state_dict()
    for k, v in opt["m"].items():
        arrays[f"adam.m.{k}"] = v
    for k, v in opt["v"].items():
        arrays[f"adam.v.{k}"] = v
    arrays["stats.mean"] = state.stats.mean
    arrays["stats.std"] = state.stats.std
    manifest = {
        "kind": "v2c_generator",
        "phase": state.phase,
        "config": asdict(state.model.cfg),
        "step": state.step,
        "adam": {"t": opt["t"], "lr": opt["lr"]},
        "data_rng": checkpoint.rng_state(state.data_rng),
        "noise_rng": checkpoint.rng_state(state.noise_rng),
        "backbone_hash": state.model.backbone_hash(),
        "curve_tail": state.curve[-5:],
    }
    checkpoint.save_blob(prefix, arrays, manifest)


def load_v2c(prefix: str | Path) -> V2CTrainState:
    arrays, manifest = checkpoint.load_blob(prefix)
    if manifest.get("kind") != "v2c_generator":
        raise ModelMismatchError(f"checkpoint at {prefix} is not a stage-2 model")
    cfg_d = dict(manifest["config"])
    cfg_d["vocab"] = tuple(cfg_d["vocab"])
    cfg = V2CConfig(**cfg_d)
    stats = LatentStats(mean=arrays.pop("stats.mean"), std=arrays.pop("stats.std"))
    phase = manifest["phase"]
    model = V2CGenerator(cfg, np.random.default_rng(cfg.seed),
                         with_control=(phase == "control"))
    model.load_state_dict(
        {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")})
    if phase == "control":
        model.freeze_backbone()
        opt = Adam(model.params(), lr=cfg.lr_control)
        data_rng, noise_rng = _make_rngs(cfg.seed, 20)
    else:
        opt = Adam(model.params(), lr=cfg.lr_pretrain)
        data_rng, noise_rng = _make_rngs(cfg.seed, 10)
    opt.load_state_dict({
        "t": manifest["adam"]["t"],
        "lr": manifest["adam"]["lr"],
        "m": {k[len("adam.m."):]: v for k, v in arrays.items() if k.startswith("adam.m.")},
        "v": {k[len("adam.v."):]: v for k, v in arrays.items() if k.startswith("adam.v.")},
    })
    state = V2CTrainState(model=model, optimizer=opt, stats=stats, phase=phase,
                          data_rng=checkpoint.restore_rng(manifest["data_rng"]),
                          noise_rng=checkpoint.restore_rng(manifest["noise_rng"]),
                          step=int(manifest["step"]))
    return state
