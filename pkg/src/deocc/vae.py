"""Stage 1: the parallel variational autoencoder.

The encoder embeds each complete-object image with a shared initial
convolution, sums the per-object feature maps (early fusion, canonical
byte order so the sum is bitwise permutation-invariant), and maps the
fused map through a shared trunk to a Gaussian latent over the
(H/r, W/r, c) grid.  The decoder recovers one object at a time from a
sampled full-view feature map, queried by that object's partial mask
alone (no RGB): query/key/value convolutions followed by scaled
dot-product attention over all grid positions, then an upsampling trunk
with RGB and mask-logit heads.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .errors import ModelMismatchError, TrainingError, ValidationError
from .nn import Adam, Conv2d, Module, Tensor, concat, upsample_nearest
from .scene import SceneSample

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0
PROB_EPS = 1e-7


@dataclass(frozen=True)
class VaeConfig:
    canvas: int = 64
    r: int = 4                       # spatial downsampling rate
    c: int = 8                       # latent channels
    stem_channels: int = 8
    trunk_channels: tuple[int, int] = (16, 24)
    decoder_channels: tuple[int, int, int] = (24, 16, 12)
    concat_query: bool = True
    # where the raw full-resolution query mask re-enters the decoder:
    # "off" (features only), "rgb" (appearance head only; the amodal-mask
    # head must complete from latent evidence), or "both"
    full_res_query: str = "rgb"
    lambda1: float = 1.0             # perceptual weight
    lambda2: float = 0.0             # adversarial hook, out of scope at desk scale
    lambda3: float = 1e-6            # KL weight
    lambda4: float = 0.3             # amodal-mask cross-entropy weight
    lr: float = 2e-3
    seed: int = 0
    perceptual_seed: int = 77
    perceptual_channels: int = 8

    def __post_init__(self):
        if isinstance(self.full_res_query, bool):
            object.__setattr__(self, "full_res_query", "both" if self.full_res_query else "off")
        if self.full_res_query not in ("off", "rgb", "both"):
            raise ValidationError(f"full_res_query must be off/rgb/both")
        if self.r not in (2, 4, 8):
            raise ValidationError("downsampling rate r must be one of 2, 4, 8")
        if self.canvas % self.r:
            raise ValidationError("canvas must be divisible by r")

    @property
    def grid(self) -> int:
        return self.canvas // self.r


def downsample_mean(a: np.ndarray, r: int) -> np.ndarray:
    """Area-mean downsample of a 2-D array by integer factor r."""
    h, w = a.shape
    return a.reshape(h // r, r, w // r, r).mean(axis=(1, 3))


def _canonical_order(images: np.ndarray) -> list[int]:
    """Content-based ordering so feature summation never depends on input order."""
    return sorted(range(images.shape[0]), key=lambda i: images[i].tobytes())


class PerceptualProxy(Module):
    """Fixed random-convolution feature pyramid standing in for a learned
    perceptual metric; weights frozen at a dedicated seed."""

    def __init__(self, channels: int, seed: int):
        rng = np.random.default_rng(seed)
        self.l1 = Conv2d(3, channels, 3, stride=2, rng=rng)
        self.l2 = Conv2d(channels, channels, 3, stride=2, rng=rng)
        self.l3 = Conv2d(channels, channels, 3, stride=2, rng=rng)
        self.freeze()

    def features(self, x: Tensor) -> list[Tensor]:
        f1 = self.l1(x).tanh()
        f2 = self.l2(f1).tanh()
        f3 = self.l3(f2).tanh()
        return [f1, f2, f3]

    def distance(self, a: Tensor, b: Tensor) -> Tensor:
        total = None
        for fa, fb in zip(self.features(a), self.features(b)):
            d = ((fa - fb) ** 2.0).mean()
            total = d if total is None else total + d
        return total


@dataclass
class VaeLoss:
    total: Tensor
    l_r: Tensor
    l_p: Tensor
    l_kl: Tensor
    l_m: Tensor
    l_adv: float = 0.0

    def components(self) -> dict[str, float]:
        return {"total": self.total.item(), "l_r": self.l_r.item(),
                "l_p": self.l_p.item(), "l_kl": self.l_kl.item(),
                "l_m": self.l_m.item(), "l_adv": self.l_adv}


def regression_loss(reconstructed: Tensor, target: Tensor) -> Tensor:
    """Sum over objects and pixels of squared color error."""
    return ((reconstructed - target) ** 2.0).sum()


def mask_cross_entropy(prob: Tensor, target: Tensor) -> Tensor:
    """Pixel-wise BCE with probabilities clamped to [1e-7, 1-1e-7]; summed."""
    p = prob.clip(PROB_EPS, 1.0 - PROB_EPS)
    return -(target * p.log() + (1.0 - target) * (1.0 - p).log()).sum()


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """Closed-form KL( N(mu, sigma^2) || N(0, I) ), summed over cells."""
    return ((mu ** 2.0 + logvar.exp() - 1.0 - logvar) * 0.5).sum()


def combine_losses(cfg: VaeConfig, l_r: Tensor, l_p: Tensor, l_kl: Tensor,
                   l_m: Tensor, l_adv: Tensor | None = None) -> Tensor:
    if l_adv is None:
        l_adv = Tensor(0.0)
    return (l_r + cfg.lambda1 * l_p + cfg.lambda2 * l_adv
            + cfg.lambda3 * l_kl + cfg.lambda4 * l_m)


class ParallelVae(Module):
    def __init__(self, cfg: VaeConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        c0 = cfg.stem_channels
        t1, t2 = cfg.trunk_channels
        c = cfg.c
        n_down = int(np.log2(cfg.r))
        # encoder: per-object stem, early-fusion sum, shared trunk of 3 blocks
        self.stem = Conv2d(4, c0, 3, stride=1, rng=rng)
        strides = [2] * n_down + [1] * (3 - n_down)
        widths = [c0, t1, t2, t2][: 3 + 1]
        self.trunk = [Conv2d(widths[i], widths[i + 1], 3, stride=strides[i], rng=rng)
                      for i in range(3)]
        self.head_mu = Conv2d(t2, c, 3, rng=rng)
        self.head_logvar = Conv2d(t2, c, 3, rng=rng)
        # decoder: mask-queried cross-attention + upsampling trunk + two heads
        self.w_q = Conv2d(1, c, 3, rng=rng)
        self.w_k = Conv2d(c, c, 3, rng=rng)
        self.w_v = Conv2d(c, c, 3, rng=rng)
        d2, d1, d0 = cfg.decoder_channels
        dec_in = 2 * c if cfg.concat_query else c
        ups = [2] * n_down + [1] * (3 - n_down)
        dwidths = [dec_in, d2, d1, d0]
        self.dec = [Conv2d(dwidths[i], dwidths[i + 1], 3, rng=rng) for i in range(3)]
        self.dec_ups = ups
        # full-resolution refinement stages; the raw query joins per config
        rgb_in = d0 + (1 if cfg.full_res_query in ("rgb", "both") else 0)
        mask_in = d0 + (1 if cfg.full_res_query == "both" else 0)
        self.refine_rgb = Conv2d(rgb_in, d0, 3, rng=rng)
        self.refine_mask = Conv2d(mask_in, d0, 3, rng=rng)
        self.head_rgb = Conv2d(d0, 3, 3, rng=rng)
        self.head_mask = Conv2d(d0, 1, 3, rng=rng)

    # -- encoding ---------------------------------------------------------

    def encode_objects(self, images) -> tuple[Tensor, Tensor]:
        """images: (K, H, W, 4) array or list of HxWx4 arrays -> (mu, logvar),
        each (1, c, H/r, W/r).  Bitwise invariant to input order."""
        arr = np.stack([np.asarray(im, dtype=np.float64) for im in images]) \
            if not isinstance(images, np.ndarray) else np.asarray(images, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[0] < 1 or arr.shape[3] != 4:
            raise ValidationError(f"expected (K, H, W, 4) object images, got {arr.shape}")
        if arr.shape[1] != self.cfg.canvas or arr.shape[2] != self.cfg.canvas:
            raise ValidationError(
                f"object images {arr.shape[1:3]} do not match canvas {self.cfg.canvas}")
        x = Tensor(arr.transpose(0, 3, 1, 2))
        feats = self.stem(x)
        order = _canonical_order(arr)
        fused = feats[order[0]:order[0] + 1]
        for idx in order[1:]:
            fused = fused + feats[idx:idx + 1]
        h = fused
        for blk in self.trunk:
            h = blk(h).silu()
        mu = self.head_mu(h)
        logvar = self.head_logvar(h).clip(LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar

    def sample_latent(self, mu: Tensor, logvar: Tensor,
                      rng_or_eps: np.random.Generator | np.ndarray) -> Tensor:
        """Reparameterized draw: f = mu + exp(0.5 logvar) * eps, with eps
        drawn from the generator or supplied directly."""
        if isinstance(rng_or_eps, np.random.Generator):
            eps = rng_or_eps.standard_normal(mu.data.shape)
        else:
            eps = np.asarray(rng_or_eps, dtype=np.float64)
        if eps.shape != mu.data.shape:
            raise ValidationError(f"eps shape {eps.shape} != latent {mu.data.shape}")
        return mu + (logvar * 0.5).exp() * Tensor(eps)

    # -- decoding ---------------------------------------------------------

    def _tokens(self, grid: Tensor) -> Tensor:
        b, c, h, w = grid.data.shape
        return grid.reshape(b, c, h * w).transpose(0, 2, 1)

    def decode_objects(self, f: Tensor, query_masks: np.ndarray,
                       return_attention: bool = False):
        """f: (1, c, hg, wg); query_masks: (K, H, W) binary (full canvas res).

        Returns (rgb (K, 3, H, W) in [0,1], mask_prob (K, 1, H, W) in (0,1))
        and optionally the (K, P, P) attention maps.
        """
        masks = np.asarray(query_masks, dtype=np.float64)
        if masks.ndim == 2:
            masks = masks[None]
        if not np.isfinite(f.data).all():
            raise ValidationError("latent feature map must be finite")
        k_count = masks.shape[0]
        r = self.cfg.r
        if masks.shape[1] % r or masks.shape[2] % r:
            raise ValidationError("query mask resolution must be divisible by r")
        for i in range(k_count):
            if not masks[i].any():
                log.warning("all-zero query mask at index %d; attention still defined", i)
        down = np.stack([downsample_mean(masks[i], r) for i in range(k_count)])[:, None]
        q_emb = self.w_q(Tensor(down))                       # (K, c, hg, wg)
        k_emb = self.w_k(f)                                  # (1, c, hg, wg)
        v_emb = self.w_v(f)
        q = self._tokens(q_emb)                              # (K, P, c)
        kt = self._tokens(k_emb)                             # (1, P, c)
        v = self._tokens(v_emb)
        scale = 1.0 / np.sqrt(self.cfg.c)
        attn = ((q @ kt.transpose(0, 2, 1)) * scale).softmax(axis=-1)   # (K, P, P)
        f_i = attn @ v                                       # (K, P, c)
        hg = f.data.shape[2]
        wg = f.data.shape[3]
        f_i = f_i.transpose(0, 2, 1).reshape(k_count, self.cfg.c, hg, wg)
        h = concat([f_i, q_emb], axis=1) if self.cfg.concat_query else f_i
        for blk, up in zip(self.dec, self.dec_ups):
            if up > 1:
                h = upsample_nearest(h, up)
            h = blk(h).silu()
        raw_query = Tensor(masks[:, None])
        h_rgb = concat([h, raw_query], axis=1) if self.cfg.full_res_query in ("rgb", "both") else h
        h_mask = concat([h, raw_query], axis=1) if self.cfg.full_res_query == "both" else h
        rgb = self.head_rgb(self.refine_rgb(h_rgb).silu()).sigmoid()
        mask_logits = self.head_mask(self.refine_mask(h_mask).silu())
        mask_prob = mask_logits.sigmoid()
        if return_attention:
            return rgb, mask_prob, attn
        return rgb, mask_prob

    def decode_object(self, f: Tensor, query_mask: np.ndarray):
        rgb, prob = self.decode_objects(f, query_mask[None])
        return rgb[0:1], prob[0:1]

    # -- losses -----------------------------------------------------------

    def loss(self, object_rgba: np.ndarray, query_masks: np.ndarray,
             eps: np.ndarray, perceptual: PerceptualProxy | None) -> VaeLoss:
        """object_rgba: (K, H, W, 4) complete objects (targets and encoder
        input); query_masks: (K, H, W) partial/visible masks; eps: latent
        noise draw."""
        mu, logvar = self.encode_objects(object_rgba)
        f = self.sample_latent(mu, logvar, eps)
        rgb, mask_prob = self.decode_objects(f, query_masks)
        targets_rgb = Tensor(object_rgba[..., :3].transpose(0, 3, 1, 2))
        targets_mask = Tensor(object_rgba[..., 3][:, None])
        l_r = regression_loss(rgb, targets_rgb)
        l_m = mask_cross_entropy(mask_prob, targets_mask)
        l_kl = kl_divergence(mu, logvar)
        if perceptual is not None and self.cfg.lambda1 != 0.0:
            l_p = perceptual.distance(rgb, targets_rgb)
        else:
            l_p = Tensor(0.0)
        total = combine_losses(self.cfg, l_r, l_p, l_kl, l_m)
        for name, part in (("l_r", l_r), ("l_p", l_p), ("l_kl", l_kl), ("l_m", l_m)):
            if not np.isfinite(part.data).all():
                raise TrainingError(f"non-finite loss component {name}")
        return VaeLoss(total=total, l_r=l_r, l_p=l_p, l_kl=l_kl, l_m=l_m)


# ---------------------------------------------------------------------------
# scene -> training arrays
# ---------------------------------------------------------------------------

def scene_object_arrays(sample: SceneSample) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """(K, H, W, 4) complete object rasters + (K, H, W) visible query masks,
    ordered by object_id (stable under any list permutation of the scene)."""
    ids = sorted(o.object_id for o in sample.objects)
    rgba = np.stack([sample.object_by_id(i).amodal_rgba.array for i in ids])
    queries = np.stack([sample.visible_masks[i].array.astype(np.float64) for i in ids])
    return rgba, queries, ids


def visible_segment_arrays(sample: SceneSample, ids: list[int]) -> np.ndarray:
    """(K, H, W, 4) visible-segment rasters: canvas RGB under the visible
    mask (black elsewhere), visible mask as alpha."""
    out = []
    canvas = sample.canvas.array
    for oid in ids:
        m = sample.visible_masks[oid].array.astype(np.float64)
        out.append(np.concatenate([canvas * m[..., None], m[..., None]], axis=2))
    return np.stack(out)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainState:
    model: ParallelVae
    perceptual: PerceptualProxy
    optimizer: Adam
    data_rng: np.random.Generator
    noise_rng: np.random.Generator
    step: int = 0
    curve: list[dict] = field(default_factory=list)


def init_train_state(cfg: VaeConfig) -> TrainState:
    model = ParallelVae(cfg, np.random.default_rng(cfg.seed))
    perceptual = PerceptualProxy(cfg.perceptual_channels, cfg.perceptual_seed)
    opt = Adam(model.params(), lr=cfg.lr)
    ss = np.random.SeedSequence(cfg.seed)
    data_rng = np.random.Generator(np.random.PCG64(ss.spawn(1)[0]))
    noise_rng = np.random.Generator(np.random.PCG64(ss.spawn(2)[0]))
    return TrainState(model=model, perceptual=perceptual, optimizer=opt,
                      data_rng=data_rng, noise_rng=noise_rng)


def train_step(state: TrainState, corpus: list[SceneSample]) -> dict[str, float]:
    cfg = state.model.cfg
    idx = int(state.data_rng.integers(len(corpus)))
    rgba, queries, _ = scene_object_arrays(corpus[idx])
    eps = state.noise_rng.standard_normal((1, cfg.c, cfg.grid, cfg.grid))
    state.model.zero_grad()
    loss = state.model.loss(rgba, queries, eps, state.perceptual)
    if loss.total.item() > DIVERGENCE_LIMIT:
        raise TrainingError(
            f"divergence at step {state.step}: total={loss.total.item():.3g}, "
            f"components={loss.components()}")
    loss.total.backward()
    state.optimizer.step()
    state.step += 1
    rec = {"step": state.step, **loss.components()}
    state.curve.append(rec)
    return rec


def train_vae(corpus: list[SceneSample], cfg: VaeConfig, steps: int,
              state: TrainState | None = None, log_every: int = 200) -> TrainState:
    if not corpus:
        raise ValidationError("training corpus is empty")
    if state is None:
        state = init_train_state(cfg)
    for _ in range(steps):
        rec = train_step(state, corpus)
        if log_every and state.step % log_every == 0:
            log.info("vae step %d: %s", state.step,
                     {k: round(v, 4) for k, v in rec.items() if k != "step"})
    return state


# ---------------------------------------------------------------------------
# checkpointing (bitwise-resumable)
# ---------------------------------------------------------------------------

def save_vae(state: TrainState, prefix: str | Path) -> None:
    arrays = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    opt = state.optimizer.state_dict()
    for k, v in opt["m"].items():
        arrays[f"adam.m.{k}"] = v
    for k, v in opt["v"].items():
        arrays[f"adam.v.{k}"] = v
    manifest = {
        "kind": "parallel_vae",
        "config": asdict(state.model.cfg),
        "step": state.step,
        "adam": {"t": opt["t"], "lr": opt["lr"]},
        "data_rng": checkpoint.rng_state(state.data_rng),
        "noise_rng": checkpoint.rng_state(state.noise_rng),
        "curve_tail": state.curve[-5:],
    }
    checkpoint.save_blob(prefix, arrays, manifest)


def load_vae(prefix: str | Path) -> TrainState:
    arrays, manifest = checkpoint.load_blob(prefix)
    if manifest.get("kind") != "parallel_vae":
        raise ModelMismatchError(f"checkpoint at {prefix} is not a stage-1 model")
    cfg_d = dict(manifest["config"])
    for key in ("trunk_channels", "decoder_channels"):
        cfg_d[key] = tuple(cfg_d[key])
    cfg = VaeConfig(**cfg_d)
    state = init_train_state(cfg)
    state.model.load_state_dict(
        {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")})
    opt_state = {
        "t": manifest["adam"]["t"],
        "lr": manifest["adam"]["lr"],
        "m": {k[len("adam.m."):]: v for k, v in arrays.items() if k.startswith("adam.m.")},
        "v": {k[len("adam.v."):]: v for k, v in arrays.items() if k.startswith("adam.v.")},
    }
    state.optimizer.load_state_dict(opt_state)
    state.data_rng = checkpoint.restore_rng(manifest["data_rng"])
    state.noise_rng = checkpoint.restore_rng(manifest["noise_rng"])
    state.step = int(manifest["step"])
    return state
