"""Pseudo-domain synthesis: interpolation between two domain conditions.

Two strategies exist. Condition-level interpolation drives the whole DDIM
pass with a convex combination of the two pure (class, domain) embeddings.
Noise-level interpolation runs two trajectories from the same starting noise,
one per domain condition; after `t_mix` denoising updates the two latents are
blended once, after which each step evaluates the denoiser under both
conditions on the shared latent and blends the two one-step updates with the
same coefficient. "both" feeds the mixed embedding into the post-merge phase
of the noise-level procedure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .diffusion import (ConditionEmbedding, DiffusionModel, SamplerConfig,
                        convex_blend, _ddim_update, ddim_timesteps,
                        decode_payload, encode_condition, initial_noise,
                        resolve_cfg_scale)
from .errors import ConfigError, FdsError
from .util import (atomic_write_bytes, atomic_write_json, canonical_json,
                   derive_seed, load_json, sha256_bytes)

STRATEGIES = ("noise_level", "condition_level", "both", "pure")


@dataclass
class MixRequest:
    class_id: int
    domain_i: int
    domain_j: int
    alpha: float
    strategy: str = "condition_level"
    t_mix: int = None  # DDIM-step index from the noise end; noise_level/both only
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    # test-only escape hatch: a relaxed request may use domain_i == domain_j
    allow_equal_domains: bool = False

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if not self.allow_equal_domains:
            if self.domain_i == self.domain_j:
                raise ConfigError("domain_i and domain_j must differ")
            if not self.domain_i < self.domain_j:
                raise ConfigError("require domain_i < domain_j")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.strategy in ("noise_level", "both"):
            if self.t_mix is None or not 1 <= self.t_mix <= self.sampler.ddim_steps:
                raise ConfigError("t_mix must lie in [1, ddim_steps]")


@dataclass
class SyntheticSample:
    payload: np.ndarray
    class_id: int
    domain_i: int
    domain_j: int
    alpha: float
    strategy: str
    t_mix: int  # None for condition-level / pure
    seed: int
    cfg_scale: float
    generation_id: int
    clamp_fraction: float = 0.0

    def provenance(self) -> dict:
        return {"generation_id": self.generation_id, "class_id": self.class_id,
                "domain_i": self.domain_i, "domain_j": self.domain_j,
                "alpha": self.alpha, "strategy": self.strategy,
                "t_mix": self.t_mix, "seed": self.seed,
                "cfg_scale": self.cfg_scale,
                "clamp_fraction": self.clamp_fraction}

    @property
    def cell(self):
        return (self.domain_i, self.domain_j, self.class_id)


def condition_interpolate(tau_i: ConditionEmbedding, tau_j: ConditionEmbedding,
                          alpha: float) -> ConditionEmbedding:
    """Elementwise convex combination of two pure same-class embeddings."""
    if tau_i.kind != "pure" or tau_j.kind != "pure":
        raise ConfigError("condition_interpolate requires pure embeddings")
    if tau_i.provenance["class_id"] != tau_j.provenance["class_id"]:
        raise ConfigError("cannot mix embeddings of different classes")
    if tau_i.vector.shape != tau_j.vector.shape:
        raise FdsError("embedding dimension mismatch")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]")
    vec = convex_blend(tau_i.vector, tau_j.vector, alpha)
    return ConditionEmbedding(vec, {
        "kind": "mixed", "class_id": tau_i.provenance["class_id"],
        "domain_i": tau_i.provenance["domain_id"],
        "domain_j": tau_j.provenance["domain_id"], "alpha": alpha,
    })


def sample_condition_level(model: DiffusionModel, request: MixRequest,
                           generation_id: int = 0) -> SyntheticSample:
    """The mixed condition orchestrates the whole generation pass."""
    request.validate()
    if request.strategy != "condition_level":
        raise ConfigError("request strategy must be condition_level")
    tau_i = encode_condition(model, request.class_id, request.domain_i)
    tau_j = encode_condition(model, request.class_id, request.domain_j)
    mixed = condition_interpolate(tau_i, tau_j, request.alpha)
    from .diffusion import ddim_sample
    payload, info = ddim_sample(model, mixed, request.sampler, return_info=True)
    return SyntheticSample(payload, request.class_id, request.domain_i,
                           request.domain_j, request.alpha, "condition_level",
                           None, request.sampler.seed, info["cfg_scale"],
                           generation_id, info["clamp_fraction"])


def _noise_level_denoise(model, z0, emb_i, emb_j, blend_fn, t_mix, steps,
                         scale, mixed_emb=None):
    """Dual-trajectory DDIM pass; `t_mix` counts updates from the noise end.

    Single-request path (tensors are [1, ...], scalar blend) so that the
    branch evaluations are bitwise identical to pure single-sample runs.
    """
    times = ddim_timesteps(model.schedule.t_train, steps)
    null = model.cond_table.weight[model.null_index].detach()
    za = z0
    zb = z0
    with torch.no_grad():
        for i in range(steps - 1, -1, -1):
            t = int(times[i])
            t_prev = int(times[i - 1]) if i > 0 else 0
            update_no = steps - i  # 1-based denoising update index
            if update_no <= t_mix:
                ua = _ddim_update(model, za, emb_i, null, scale, t, t_prev)
                ub = _ddim_update(model, zb, emb_j, null, scale, t, t_prev)
                if update_no == t_mix:
                    za = zb = blend_fn(ua, ub)
                else:
                    za, zb = ua, ub
            elif mixed_emb is not None:
                za = zb = _ddim_update(model, za, mixed_emb, null, scale, t, t_prev)
            else:
                ua = _ddim_update(model, za, emb_i, null, scale, t, t_prev)
                ub = _ddim_update(model, zb, emb_j, null, scale, t, t_prev)
                za = zb = blend_fn(ua, ub)
    return za


def sample_noise_level(model: DiffusionModel, request: MixRequest,
                       generation_id: int = 0,
                       independent_trajectories: bool = False) -> SyntheticSample:
    """Blend two domain-conditioned trajectories started from the same noise.

    With `independent_trajectories` the two passes never merge and only their
    final latents are blended (equivalent to t_mix == ddim_steps).
    """
    request.validate()
    if request.strategy not in ("noise_level", "both"):
        raise ConfigError("request strategy must be noise_level or both")
    cfg = request.sampler
    cfg.validate(model.schedule.t_train)
    scale = resolve_cfg_scale(cfg.cfg_scale,
                              np.random.default_rng(derive_seed(cfg.seed, "cfg")))
    tau_i = encode_condition(model, request.class_id, request.domain_i)
    tau_j = encode_condition(model, request.class_id, request.domain_j)
    mixed_emb = None
    if request.strategy == "both":
        mixed_emb = condition_interpolate(tau_i, tau_j, request.alpha).vector
    t_mix = cfg.ddim_steps if independent_trajectories else request.t_mix
    z0 = initial_noise(model.latent_shape(), cfg.seed)
    alpha = request.alpha
    z = _noise_level_denoise(model, z0, tau_i.vector, tau_j.vector,
                             lambda a, b: convex_blend(a, b, alpha),
                             t_mix, cfg.ddim_steps, scale, mixed_emb)
    payload, clamp = decode_payload(model, z)
    return SyntheticSample(payload[0].numpy(), request.class_id, request.domain_i,
                           request.domain_j, alpha, request.strategy,
                           t_mix, cfg.seed, scale, generation_id, clamp)


# ---------------------------------------------------------------------------
# Bulk pool generation.
# ---------------------------------------------------------------------------

@dataclass
class MixPolicy:
    strategy: str = "condition_level"
    alpha_range: tuple = (0.3, 0.7)
    t_mix_range: tuple = (20, 45)
    cfg_range: tuple = (5.0, 6.0)
    ddim_steps: int = 50
    eta: float = 0.0
    independent_trajectories: bool = False
    batch_size: int = 64

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        lo, hi = self.alpha_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError("alpha_range must lie inside [0, 1]")
        lo, hi = self.t_mix_range
        if not 1 <= lo <= hi <= self.ddim_steps:
            raise ConfigError("t_mix_range must lie inside [1, ddim_steps]")
        lo, hi = self.cfg_range
        if not 1.0 <= lo <= hi:
            raise ConfigError("cfg_range must satisfy 1 <= lo <= hi")


@dataclass
class SamplePool:
    entries: list
    per_cell_target: int
    policy: MixPolicy
    seed: int
    model_hash: str = None

    def __post_init__(self):
        seeds = [e.seed for e in self.entries]
        if len(set(seeds)) != len(seeds):
            raise FdsError("pool entries must have distinct seeds")
        gids = [e.generation_id for e in self.entries]
        if len(set(gids)) != len(gids):
            raise FdsError("pool entries must have distinct generation_ids")

    def __len__(self):
        return len(self.entries)

    def by_id(self, generation_id: int) -> SyntheticSample:
        if not hasattr(self, "_by_id"):
            self._by_id = {e.generation_id: e for e in self.entries}
        return self._by_id[generation_id]

    def cells(self):
        out = {}
        for e in self.entries:
            out.setdefault(e.cell, []).append(e)
        return out

    def payload_matrix(self) -> np.ndarray:
        return np.stack([e.payload for e in self.entries])

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        pairs = {e.cell[:2] for e in self.entries if e.domain_i != e.domain_j}
        meta = {"per_cell_target": self.per_cell_target, "seed": self.seed,
                "policy": asdict(self.policy), "model_hash": self.model_hash,
                "n_entries": len(self.entries),
                "per_class_total": len(pairs) * self.per_cell_target,
                "payload_shape": list(self.entries[0].payload.shape) if self.entries else []}
        atomic_write_json(directory / "pool_meta.json", meta)
        lines = []
        blobs = []
        for e in self.entries:
            rec = e.provenance()
            rec["payload_sha256"] = sha256_bytes(e.payload.astype("<f4").tobytes())
            lines.append(canonical_json(rec))
            blobs.append(e.payload.astype("<f4").tobytes())
        atomic_write_bytes(directory / "entries.jsonl",
                           ("\n".join(lines) + "\n").encode() if lines else b"")
        atomic_write_bytes(directory / "payloads.bin", b"".join(blobs))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = load_json(directory / "pool_meta.json")
        shape = tuple(meta["payload_shape"])
        raw = np.fromfile(directory / "payloads.bin", dtype="<f4")
        payloads = raw.reshape((meta["n_entries"],) + shape) if meta["n_entries"] else raw
        entries = []
        with open(directory / "entries.jsonl") as f:
            for i, line in enumerate(ln for ln in f if ln.strip()):
                rec = json.loads(line)
                payload = payloads[i].copy()
                if sha256_bytes(payload.astype("<f4").tobytes()) != rec["payload_sha256"]:
                    raise FdsError(f"pool payload {i} does not match its recorded hash")
                entries.append(SyntheticSample(
                    payload, rec["class_id"], rec["domain_i"], rec["domain_j"],
                    rec["alpha"], rec["strategy"], rec["t_mix"], rec["seed"],
                    rec["cfg_scale"], rec["generation_id"], rec["clamp_fraction"]))
        policy = MixPolicy(**{**meta["policy"],
                              "alpha_range": tuple(meta["policy"]["alpha_range"]),
                              "t_mix_range": tuple(meta["policy"]["t_mix_range"]),
                              "cfg_range": tuple(meta["policy"]["cfg_range"])})
        return cls(entries, meta["per_cell_target"], policy, meta["seed"],
                   meta["model_hash"])


def _batched_condition_level(model, embs, seeds, scales, policy):
    z0 = torch.cat([initial_noise(model.latent_shape(), s) for s in seeds])
    from .diffusion import ddim_denoise
    z = ddim_denoise(model, z0, torch.stack(embs),
                     torch.as_tensor(scales, dtype=z0.dtype),
                     policy.ddim_steps, policy.eta)
    return decode_payload(model, z)


def _row_blend(alphas):
    av = torch.as_tensor(alphas, dtype=torch.float32)

    def blend(a, b):
        w = av
        while w.dim() < a.dim():
            w = w.unsqueeze(-1)
        return b + w.to(a.dtype) * (a - b)
    return blend


def _batched_noise_level(model, emb_i, emb_j, alphas, t_mixes, seeds, scales,
                         policy, mixed_embs=None):
    """Vectorized dual-trajectory pass; rows may merge at different steps."""
    z0 = torch.cat([initial_noise(model.latent_shape(), s) for s in seeds])
    times = ddim_timesteps(model.schedule.t_train, policy.ddim_steps)
    null = model.cond_table.weight[model.null_index].detach()
    scale_t = torch.as_tensor(scales, dtype=z0.dtype)
    t_mix_t = torch.as_tensor(t_mixes, dtype=torch.long)
    blend = _row_blend(alphas)
    emb_i = torch.stack(emb_i)
    emb_j = torch.stack(emb_j)
    za = z0
    zb = z0.clone()
    with torch.no_grad():
        for i in range(policy.ddim_steps - 1, -1, -1):
            t = int(times[i])
            t_prev = int(times[i - 1]) if i > 0 else 0
            update_no = policy.ddim_steps - i
            if mixed_embs is not None and bool(torch.all(t_mix_t < update_no)):
                za = zb = _ddim_update(model, za, mixed_embs, null, scale_t, t, t_prev)
                continue
            ua = _ddim_update(model, za, emb_i, null, scale_t, t, t_prev)
            ub = _ddim_update(model, zb, emb_j, null, scale_t, t, t_prev)
            if mixed_embs is not None:
                um = _ddim_update(model, za, mixed_embs, null, scale_t, t, t_prev)
            merged = blend(ua, ub)
            mask = (t_mix_t <= update_no)
            mview = mask.view((-1,) + (1,) * (za.dim() - 1))
            if mixed_embs is not None:
                past = (t_mix_t < update_no).view(mview.shape)
                merged = torch.where(past, um, merged)
            za = torch.where(mview, merged, ua)
            zb = torch.where(mview, merged, ub)
    return decode_payload(model, za)


def generate_pool(model: DiffusionModel, domains, classes, per_cell_target: int,
                  mix_policy: MixPolicy, seed: int = 0) -> SamplePool:
    """Ñ synthetic samples for every unordered domain pair and class.

    Per-entry alpha, mix step, guidance scale, and noise seed are drawn from
    the policy ranges; the pool is a pure function of (model, policy, seed).
    """
    mix_policy.validate()
    domains = sorted(domains)
    classes = sorted(classes)
    if len(domains) < 2:
        raise ConfigError("pool generation needs at least 2 domains")
    if per_cell_target < 1:
        raise ConfigError("per_cell_target must be >= 1")
    pairs = [(i, j) for a, i in enumerate(domains) for j in domains[a + 1:]]
    cells = [(i, j, k) for (i, j) in pairs for k in classes]
    return _fill_pool(model, cells, per_cell_target, mix_policy, seed)


def per_class_budget(n_source_domains: int, per_cell_target: int) -> int:
    """Total synthetic samples per class implied by a pool policy
    (unordered source pairs times the per-cell target); config metadata."""
    n_pairs = n_source_domains * (n_source_domains - 1) // 2
    return n_pairs * per_cell_target


def generate_pure_pool(model: DiffusionModel, domains, classes,
                       per_cell_target: int, mix_policy: MixPolicy,
                       seed: int = 0) -> SamplePool:
    """Per-domain pure-condition pool (no interpolation); the "basic" tier."""
    mix_policy.validate()
    cells = [(d, d, k) for d in sorted(domains) for k in sorted(classes)]
    policy = MixPolicy(**{**asdict(mix_policy), "strategy": "pure"})
    return _fill_pool(model, cells, per_cell_target, policy, seed)


def _fill_pool(model, cells, per_cell_target, policy, seed):
    rng = np.random.default_rng(derive_seed(seed, "pool-policy"))
    entries = []
    gid = 0
    for (i, j, k) in cells:
        requests = []
        for _ in range(per_cell_target):
            alpha = float(rng.uniform(*policy.alpha_range))
            t_mix = int(rng.integers(policy.t_mix_range[0], policy.t_mix_range[1] + 1))
            if policy.independent_trajectories:
                t_mix = policy.ddim_steps
            cfg = float(rng.uniform(*policy.cfg_range))
            requests.append((gid, alpha, t_mix, cfg, derive_seed(seed, "entry", gid)))
            gid += 1
        for start in range(0, len(requests), policy.batch_size):
            chunk = requests[start:start + policy.batch_size]
            entries.extend(_generate_chunk(model, i, j, k, chunk, policy))
    return SamplePool(entries, per_cell_target, policy, seed)


def _generate_chunk(model, dom_i, dom_j, class_id, chunk, policy):
    gids, alphas, t_mixes, cfgs, seeds = zip(*chunk)
    if policy.strategy == "pure":
        emb = encode_condition(model, class_id, dom_i).vector
        embs = [emb] * len(chunk)
        payloads, clamp = _batched_condition_level(model, embs, seeds, cfgs, policy)
        alphas = [1.0] * len(chunk)
        t_used = [None] * len(chunk)
    elif policy.strategy == "condition_level":
        tau_i = encode_condition(model, class_id, dom_i)
        tau_j = encode_condition(model, class_id, dom_j)
        embs = [condition_interpolate(tau_i, tau_j, a).vector for a in alphas]
        payloads, clamp = _batched_condition_level(model, embs, seeds, cfgs, policy)
        t_used = [None] * len(chunk)
    else:  # noise_level or both
        tau_i = encode_condition(model, class_id, dom_i).vector
        tau_j = encode_condition(model, class_id, dom_j).vector
        emb_i = [tau_i] * len(chunk)
        emb_j = [tau_j] * len(chunk)
        mixed = None
        if policy.strategy == "both":
            ti = encode_condition(model, class_id, dom_i)
            tj = encode_condition(model, class_id, dom_j)
            mixed = torch.stack([condition_interpolate(ti, tj, a).vector
                                 for a in alphas])
        payloads, clamp = _batched_noise_level(model, emb_i, emb_j, alphas,
                                               t_mixes, seeds, cfgs, policy, mixed)
        t_used = list(t_mixes)
    out = []
    for n, gid in enumerate(gids):
        out.append(SyntheticSample(payloads[n].numpy(), class_id, dom_i, dom_j,
                                   float(alphas[n]), policy.strategy, t_used[n],
                                   seeds[n], float(cfgs[n]), gid, clamp))
    return out
