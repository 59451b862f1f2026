"""Conditional denoising diffusion: schedule, forward process, training loss,
condition table, classifier-free guidance, and a deterministic DDIM sampler.

The condition encoder is a learned embedding table with one row per
(class, domain) pair plus a dedicated unconditional row used both for
condition dropout during training and for the guidance branch at sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn

from .data import MultiDomainDataset, SplitPlan
from .errors import ConfigError, FdsError, LeakageError
from .nets import ConvAutoencoder, IdentityCodec, ImageDenoiser, PointDenoiser
from .serialize import load_checkpoint, save_checkpoint
from .util import derive_seed


# ---------------------------------------------------------------------------
# Noise schedule.
# ---------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    t_train: int
    betas: np.ndarray      # float64, length t_train
    alphas: np.ndarray     # 1 - beta
    alpha_bars: np.ndarray  # cumulative products

    def __post_init__(self):
        b = self.betas
        if len(b) != self.t_train:
            raise ConfigError("schedule length mismatch")
        if not (b[0] > 0 and b[-1] < 1 and np.all(np.diff(b) >= 0)):
            raise ConfigError("betas must be non-decreasing within (0, 1)")
        if not np.all(np.diff(self.alpha_bars) < 0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        if self.alpha_bars[-1] >= 0.01:
            raise ConfigError(
                f"terminal alpha_bar {self.alpha_bars[-1]:.4g} >= 0.01; "
                "increase t_train or use the cosine schedule")

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at 1-indexed timestep t, with alpha_bar(0) == 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])


def make_schedule(t_train: int, kind: str = "linear") -> NoiseSchedule:
    if t_train < 10:
        raise ConfigError("t_train must be >= 10")
    if kind == "linear":
        betas = np.linspace(1e-4, 2e-2, t_train, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(t_train + 1, dtype=np.float64) / t_train
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    return NoiseSchedule(t_train, betas, alphas, np.cumprod(alphas))


def forward_noise(x0: torch.Tensor, t, epsilon: torch.Tensor,
                  schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps, exactly."""
    if x0.shape != epsilon.shape:
        raise FdsError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(epsilon.shape)}")
    t_arr = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t_arr < 1) or torch.any(t_arr > schedule.t_train):
        raise FdsError("t out of range [1, t_train]")
    abar = torch.as_tensor(schedule.alpha_bars, dtype=x0.dtype)[t_arr - 1]
    while abar.dim() < x0.dim():
        abar = abar.unsqueeze(-1)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * epsilon


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, scale):
    """eps_uncond + scale * (eps_cond - eps_uncond)."""
    if eps_cond.shape != eps_uncond.shape:
        raise FdsError("cfg_combine: shape mismatch")
    if isinstance(scale, (int, float)):
        if scale < 1.0:
            raise ConfigError("cfg scale must be >= 1")
        if scale == 1.0:
            return eps_cond
    else:
        scale = torch.as_tensor(scale, dtype=eps_cond.dtype)
        if torch.any(scale < 1.0):
            raise ConfigError("cfg scale must be >= 1")
        while scale.dim() < eps_cond.dim():
            scale = scale.unsqueeze(-1)
    return eps_uncond + scale * (eps_cond - eps_uncond)


def convex_blend(a: torch.Tensor, b: torch.Tensor, alpha: float) -> torch.Tensor:
    """alpha * a + (1 - alpha) * b with exact endpoints and exact a == b case."""
    if alpha == 1.0:
        return a
    if alpha == 0.0:
        return b
    return b + alpha * (a - b)


# ---------------------------------------------------------------------------
# Condition embeddings.
# ---------------------------------------------------------------------------

@dataclass
class ConditionEmbedding:
    vector: torch.Tensor
    provenance: dict

    def __post_init__(self):
        if not torch.all(torch.isfinite(self.vector)):
            raise FdsError("condition embedding has non-finite entries")

    @property
    def kind(self):
        return self.provenance["kind"]


# ---------------------------------------------------------------------------
# Model container.
# ---------------------------------------------------------------------------

@dataclass
class DiffusionConfig:
    t_train: int = 1000
    schedule: str = "linear"
    d_tau: int = 64
    time_dim: int = 32
    hidden: int = 128          # point-mode MLP width
    depth: int = 3             # point-mode MLP blocks
    widths: tuple = (16, 32, 64)  # image-mode UNet widths
    steps: int = 2000
    batch_size: int = 128
    lr: float = 1e-4
    p_uncond: float = 0.1
    checkpoint_every: int = 0  # 0 = final model only
    codec: str = "identity"
    codec_latent_channels: int = 4
    codec_steps: int = 400
    codec_lr: float = 1e-3
    seed: int = 0

    def validate(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("diffusion steps/batch_size invalid")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ConfigError("p_uncond must be in [0, 1)")
        if self.codec not in ("identity", "autoencoder"):
            raise ConfigError(f"unknown codec {self.codec!r}")


class DiffusionModel:
    """Denoiser + condition table + schedule + payload codec."""

    def __init__(self, denoiser: nn.Module, cond_table: nn.Embedding,
                 schedule: NoiseSchedule, codec, n_domains: int, n_classes: int,
                 mode: str, payload_shape: tuple, config: DiffusionConfig):
        if cond_table.num_embeddings != n_domains * n_classes + 1:
            raise FdsError("condition table must have n*m + 1 rows")
        self.denoiser = denoiser
        self.cond_table = cond_table
        self.schedule = schedule
        self.codec = codec
        self.n_domains = n_domains
        self.n_classes = n_classes
        self.mode = mode
        self.payload_shape = tuple(payload_shape)
        self.config = config
        self.clamp_range = (0.0, 1.0) if mode == "image" else None
        self.counters = {"denoiser_calls": 0}
        self.train_log = []          # (step, loss) pairs
        self.checkpoints_written = 0

    @property
    def d_tau(self):
        return self.cond_table.embedding_dim

    @property
    def null_index(self):
        return self.n_domains * self.n_classes

    def cond_index(self, class_id: int, domain_id: int) -> int:
        if not (0 <= class_id < self.n_classes and 0 <= domain_id < self.n_domains):
            raise ConfigError(f"cond ids out of range: class={class_id} domain={domain_id}")
        return class_id * self.n_domains + domain_id

    def latent_shape(self):
        return self.codec.latent_shape(self.payload_shape)

    def predict_eps(self, z, t, emb):
        """One denoiser evaluation; `t` broadcasts to the batch."""
        self.counters["denoiser_calls"] += 1
        t_b = torch.as_tensor(t, dtype=torch.float32)
        if t_b.dim() == 0:
            t_b = t_b.expand(z.shape[0])
        if emb.dim() == 1:
            emb = emb.unsqueeze(0).expand(z.shape[0], -1)
        return self.denoiser(z, t_b.to(z.dtype), emb.to(z.dtype))

    def null_embedding(self) -> ConditionEmbedding:
        vec = self.cond_table.weight[self.null_index].detach().clone()
        return ConditionEmbedding(vec, {"kind": "null"})

    def parameters(self):
        params = list(self.denoiser.parameters()) + list(self.cond_table.parameters())
        if isinstance(self.codec, nn.Module):
            params += list(self.codec.parameters())
        return params

    # -- persistence (fds-ckpt-v1) ------------------------------------------

    def save(self, path):
        tensors = {"schedule.betas": self.schedule.betas,
                   "cond_table.weight": self.cond_table.weight.detach().numpy()}
        for name, p in self.denoiser.state_dict().items():
            tensors[f"denoiser.{name}"] = p.detach().numpy()
        if isinstance(self.codec, nn.Module) and self.codec.kind == "autoencoder":
            for name, p in self.codec.state_dict().items():
                tensors[f"codec.{name}"] = p.detach().numpy()
        meta = {
            "kind": "diffusion",
            "mode": self.mode,
            "n_domains": self.n_domains,
            "n_classes": self.n_classes,
            "payload_shape": list(self.payload_shape),
            "config": _config_dict(self.config),
            "train_steps_logged": len(self.train_log),
        }
        save_checkpoint(path, meta, tensors)

    @classmethod
    def load(cls, path) -> "DiffusionModel":
        meta, tensors = load_checkpoint(path)
        if meta.get("kind") != "diffusion":
            raise FdsError(f"{path} is not a diffusion checkpoint")
        cfg = DiffusionConfig(**{**meta["config"],
                                 "widths": tuple(meta["config"]["widths"])})
        betas = tensors.pop("schedule.betas")
        alphas = 1.0 - betas
        schedule = NoiseSchedule(cfg.t_train, betas, alphas, np.cumprod(alphas))
        model = build_diffusion_model(meta["mode"], tuple(meta["payload_shape"]),
                                      meta["n_domains"], meta["n_classes"], cfg,
                                      schedule=schedule)
        model.cond_table.weight.data = torch.from_numpy(tensors.pop("cond_table.weight").copy())
        den_state = {k[len("denoiser."):]: torch.from_numpy(v.copy())
                     for k, v in tensors.items() if k.startswith("denoiser.")}
        model.denoiser.load_state_dict(den_state)
        codec_state = {k[len("codec."):]: torch.from_numpy(v.copy())
                       for k, v in tensors.items() if k.startswith("codec.")}
        if codec_state:
            model.codec.load_state_dict(codec_state)
        return model


def _config_dict(config) -> dict:
    d = asdict(config)
    d["widths"] = list(d["widths"])
    return d


def build_diffusion_model(mode, payload_shape, n_domains, n_classes,
                          config: DiffusionConfig, schedule=None) -> DiffusionModel:
    """Construct an initialized model; weight init is a pure function of the seed."""
    config.validate()
    torch.manual_seed(derive_seed(config.seed, "diffusion-init"))
    if schedule is None:
        schedule = make_schedule(config.t_train, config.schedule)
    if config.codec == "autoencoder":
        if mode != "image":
            raise ConfigError("autoencoder codec requires image mode")
        codec = ConvAutoencoder(channels=payload_shape[0],
                                latent_channels=config.codec_latent_channels)
    else:
        codec = IdentityCodec()
    latent = codec.latent_shape(payload_shape)
    if mode == "point":
        denoiser = PointDenoiser(d_in=payload_shape[0], hidden=config.hidden,
                                 depth=config.depth, cond_dim=config.d_tau,
                                 time_dim=config.time_dim)
    elif mode == "image":
        denoiser = ImageDenoiser(channels=latent[0], widths=tuple(config.widths),
                                 cond_dim=config.d_tau, time_dim=config.time_dim)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    cond_table = nn.Embedding(n_domains * n_classes + 1, config.d_tau)
    nn.init.normal_(cond_table.weight, std=0.5)
    return DiffusionModel(denoiser, cond_table, schedule, codec,
                          n_domains, n_classes, mode, payload_shape, config)


def encode_condition(model: DiffusionModel, class_id=None, domain_id=None) -> ConditionEmbedding:
    """Look up the learned embedding row for (class, domain), or the null row."""
    if class_id is None and domain_id is None:
        return model.null_embedding()
    idx = model.cond_index(class_id, domain_id)
    vec = model.cond_table.weight[idx].detach().clone()
    return ConditionEmbedding(vec, {"kind": "pure", "class_id": class_id,
                                    "domain_id": domain_id})


# ---------------------------------------------------------------------------
# Training objective.
# ---------------------------------------------------------------------------

def diffusion_loss(model: DiffusionModel, batch, rng: torch.Generator):
    """Mean squared error between drawn noise and the model's prediction.

    `batch` is (payloads, class_ids, domain_ids) as tensors. The condition is
    replaced by the null row with probability p_uncond to support guidance.
    """
    payloads, class_ids, domain_ids = batch
    B = payloads.shape[0]
    T = model.schedule.t_train
    z0 = model.codec.encode(payloads)
    t = torch.randint(1, T + 1, (B,), generator=rng)
    eps = torch.empty_like(z0).normal_(generator=rng)
    z_t = forward_noise(z0, t, eps, model.schedule)

    idx = class_ids * model.n_domains + domain_ids
    if model.config.p_uncond > 0:
        drop = torch.rand(B, generator=rng) < model.config.p_uncond
        idx = torch.where(drop, torch.full_like(idx, model.null_index), idx)
    emb = model.cond_table(idx).to(z0.dtype)
    pred = model.predict_eps(z_t, t, emb)
    return ((eps - pred) ** 2).mean()


def _stream_ids(dataset: MultiDomainDataset, split: SplitPlan):
    """Train+val ids of the source domains, with the leakage guard.

    Oracle splits draw validation from the target domain, so only the train
    ids feed the stream there; everywhere else a target-domain id anywhere in
    train or val aborts before any step.
    """
    if split.split_mode == "oracle":
        ids = np.asarray(sorted(split.train_ids), dtype=np.int64)
    else:
        ids = np.asarray(sorted(split.train_ids + split.val_ids), dtype=np.int64)
    _, domains = dataset.labels_for(ids)
    if np.any(domains == split.target_domain):
        raise LeakageError(
            f"target domain {split.target_domain} present in the training stream")
    return ids


def train_diffusion(dataset: MultiDomainDataset, split: SplitPlan,
                    config: DiffusionConfig, ckpt_dir=None, on_step=None) -> DiffusionModel:
    """Train the conditional denoiser on train+val of the source domains."""
    config.validate()
    ids = _stream_ids(dataset, split)
    model = build_diffusion_model(dataset.mode, dataset.payload_shape,
                                  dataset.n_domains, dataset.n_classes, config)

    if model.codec.kind == "autoencoder" and config.codec_steps > 0:
        _pretrain_codec(model, dataset, ids, config)

    if config.steps == 0:
        return model

    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    batch_rng = np.random.default_rng(derive_seed(config.seed, "diffusion-batches"))
    noise_rng = torch.Generator().manual_seed(derive_seed(config.seed, "diffusion-noise"))
    for step in range(1, config.steps + 1):
        chosen = batch_rng.choice(ids, size=config.batch_size, replace=True)
        payloads = torch.from_numpy(dataset.payload_batch(chosen))
        ks, ds = dataset.labels_for(chosen)
        batch = (payloads, torch.from_numpy(ks), torch.from_numpy(ds))
        loss = diffusion_loss(model, batch, noise_rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        model.train_log.append((step, float(loss.detach())))
        if on_step is not None:
            on_step(step, float(loss.detach()))
        if ckpt_dir is not None and config.checkpoint_every > 0 \
                and step % config.checkpoint_every == 0:
            from pathlib import Path
            path = Path(ckpt_dir) / f"diffusion_step{step:06d}.ckpt"
            model.save(path)
            model.checkpoints_written += 1
    return model


def _pretrain_codec(model, dataset, ids, config):
    opt = torch.optim.Adam(model.codec.parameters(), lr=config.codec_lr)
    rng = np.random.default_rng(derive_seed(config.seed, "codec-batches"))
    for _ in range(config.codec_steps):
        chosen = rng.choice(ids, size=min(config.batch_size, len(ids)), replace=True)
        x = torch.from_numpy(dataset.payload_batch(chosen))
        recon = model.codec.decode(model.codec.encode(x))
        loss = ((recon - x) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()


# ---------------------------------------------------------------------------
# DDIM sampling.
# ---------------------------------------------------------------------------

@dataclass
class SamplerConfig:
    ddim_steps: int = 50
    eta: float = 0.0
    cfg_scale: object = (5.0, 6.0)  # float or (lo, hi) range
    seed: int = 0

    def validate(self, t_train: int):
        if not 1 <= self.ddim_steps <= t_train:
            raise ConfigError("ddim_steps must be in [1, t_train]")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must be in [0, 1]")
        scale = self.cfg_scale
        if isinstance(scale, (tuple, list)):
            lo, hi = scale
            if not (1.0 <= lo <= hi):
                raise ConfigError("cfg range must satisfy 1 <= lo <= hi")
        elif scale < 1.0:
            raise ConfigError("cfg scale must be >= 1")


def ddim_timesteps(t_train: int, steps: int) -> np.ndarray:
    """Evenly spaced 1-indexed sub-schedule anchored at t_train (the sampler
    always starts from full noise); index 0 is closest to the data."""
    return np.round(np.linspace(t_train, 1, steps)).astype(np.int64)[::-1].copy()


def initial_noise(shape, seed: int, batch: int = 1) -> torch.Tensor:
    """Seed-pure starting noise; each sample depends only on its own seed."""
    gen = torch.Generator().manual_seed(int(seed) & ((1 << 63) - 1))
    return torch.randn((batch,) + tuple(shape), generator=gen)


def ddim_denoise(model: DiffusionModel, z: torch.Tensor, emb: torch.Tensor,
                 scale, steps: int, eta: float = 0.0, noise_gen=None) -> torch.Tensor:
    """Run the full DDIM reverse pass on a batch of latents.

    `emb` is either one embedding vector (shared) or a [B, d] batch. Guidance
    is applied at every step against the learned unconditional row.
    """
    times = ddim_timesteps(model.schedule.t_train, steps)
    null = model.cond_table.weight[model.null_index].detach()
    with torch.no_grad():
        for i in range(steps - 1, -1, -1):
            t = int(times[i])
            t_prev = int(times[i - 1]) if i > 0 else 0
            z = _ddim_update(model, z, emb, null, scale, t, t_prev, eta, noise_gen)
    return z


def _ddim_update(model, z, emb, null_emb, scale, t, t_prev, eta=0.0, noise_gen=None):
    eps_c = model.predict_eps(z, t, emb)
    eps_u = model.predict_eps(z, t, null_emb)
    eps = cfg_combine(eps_c, eps_u, scale)
    ab_t = model.schedule.alpha_bar(t)
    ab_p = model.schedule.alpha_bar(t_prev)
    x0 = (z - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    if eta > 0.0 and t_prev > 0:
        sigma = eta * math.sqrt((1 - ab_p) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_p)
        noise = torch.empty_like(z).normal_(generator=noise_gen)
        return (math.sqrt(ab_p) * x0
                + math.sqrt(max(1.0 - ab_p - sigma ** 2, 0.0)) * eps
                + sigma * noise)
    return math.sqrt(ab_p) * x0 + math.sqrt(1.0 - ab_p) * eps


def resolve_cfg_scale(cfg_scale, rng: np.random.Generator) -> float:
    if isinstance(cfg_scale, (tuple, list)):
        lo, hi = cfg_scale
        return float(rng.uniform(lo, hi))
    return float(cfg_scale)


def decode_payload(model: DiffusionModel, z: torch.Tensor):
    """Codec decode plus image-range clamping; returns (payload, clamp_fraction)."""
    with torch.no_grad():
        x = model.codec.decode(z)
    if model.clamp_range is not None:
        lo, hi = model.clamp_range
        frac = float(((x < lo) | (x > hi)).to(torch.float64).mean())
        x = x.clamp(lo, hi)
    else:
        frac = 0.0
    return x, frac


def ddim_sample(model: DiffusionModel, embedding: ConditionEmbedding,
                sampler_config: SamplerConfig, return_info: bool = False):
    """Generate one payload; a pure function of (model, embedding, config)."""
    sampler_config.validate(model.schedule.t_train)
    calls_before = model.counters["denoiser_calls"]
    scale_rng = np.random.default_rng(derive_seed(sampler_config.seed, "cfg"))
    scale = resolve_cfg_scale(sampler_config.cfg_scale, scale_rng)
    z = initial_noise(model.latent_shape(), sampler_config.seed)
    noise_gen = None
    if sampler_config.eta > 0:
        noise_gen = torch.Generator().manual_seed(
            derive_seed(sampler_config.seed, "eta-noise"))
    z = ddim_denoise(model, z, embedding.vector, scale, sampler_config.ddim_steps,
                     sampler_config.eta, noise_gen)
    payload, clamp_fraction = decode_payload(model, z)
    payload = payload[0].numpy()
    if return_info:
        info = {"clamp_fraction": clamp_fraction,
                "denoiser_calls": model.counters["denoiser_calls"] - calls_before,
                "cfg_scale": scale}
        return payload, info
    return payload
