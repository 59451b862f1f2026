"""Run configuration: strict JSON schema with unknown-key rejection.

Silent config drift is the main reproducibility hazard, so every block
rejects keys it does not know and validates ranges before any work starts.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

from .diffusion import DiffusionConfig
from .errors import ConfigError
from .experiment import FilterSettings, MethodConfig
from .mixing import MixPolicy
from .training import SwadPolicy, TrainerConfig
from .util import canonical_json, load_json


class _Block:
    """Reader over one dict level; tracks consumed keys."""

    def __init__(self, data, path):
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected an object")
        self.data = data
        self.path = path
        self.seen = set()

    def get(self, key, types, default=None, required=False):
        if key not in self.data:
            if required:
                raise ConfigError(f"{self.path}.{key}: required")
            return default
        self.seen.add(key)
        value = self.data[key]
        if types is not None and not isinstance(value, types):
            raise ConfigError(f"{self.path}.{key}: expected {types}, got {type(value).__name__}")
        return value

    def child(self, key):
        raw = self.get(key, dict, default={})
        return _Block(raw, f"{self.path}.{key}")

    def finish(self):
        unknown = sorted(set(self.data) - self.seen)
        if unknown:
            raise ConfigError(f"{self.path}: unknown keys {unknown}")


def _pair(block, key, default, lo_name="lo", kind=float):
    raw = block.get(key, (list, tuple), default=list(default))
    if len(raw) != 2:
        raise ConfigError(f"{block.path}.{key}: expected [lo, hi]")
    return (kind(raw[0]), kind(raw[1]))


@dataclass
class DatasetSpec:
    generator: str = "gaussian"       # gaussian | shapes | ingest
    n_domains: int = 2
    n_classes: int = 2
    per_cell_count: int = 200
    styles: list = field(default_factory=lambda: ["filled", "outline", "textured"])
    image_size: int = 24
    root: str = None                  # ingest only
    geometry: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def mode(self):
        return "point" if self.generator == "gaussian" else "image"


@dataclass
class OutputSpec:
    diversity: bool = False
    tsne: bool = False
    plots: bool = True
    targets: list = None              # domain names/ids; None = all
    track_test: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    mix: MixPolicy = field(default_factory=MixPolicy)
    pool_per_cell: int = None
    filter: FilterSettings = field(default_factory=FilterSettings)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    swad: SwadPolicy = field(default_factory=SwadPolicy)
    methods: list = field(default_factory=lambda: ["erm", "erm+fds"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    val_fraction: float = 0.2
    oracle: bool = False
    output: OutputSpec = field(default_factory=OutputSpec)
    raw: dict = None                  # verbatim input echo

    def method_config(self, method: str) -> MethodConfig:
        return MethodConfig(
            method=method, diffusion=copy.deepcopy(self.diffusion),
            mix=copy.deepcopy(self.mix), filter=copy.deepcopy(self.filter),
            trainer=copy.deepcopy(self.trainer), swad=copy.deepcopy(self.swad),
            val_fraction=self.val_fraction, artifact_seed=self.seed,
            track_test=self.output.track_test, oracle=self.oracle,
            pool_per_cell=self.pool_per_cell)

    def resolved(self) -> dict:
        from dataclasses import asdict
        d = {"seed": self.seed, "dataset": asdict(self.dataset),
             "diffusion": asdict(self.diffusion), "mix": asdict(self.mix),
             "pool_per_cell": self.pool_per_cell, "filter": asdict(self.filter),
             "trainer": asdict(self.trainer), "swad": asdict(self.swad),
             "methods": self.methods, "seeds": self.seeds,
             "val_fraction": self.val_fraction, "oracle": self.oracle,
             "output": asdict(self.output)}
        return d

    def signature_part(self, *blocks) -> str:
        d = self.resolved()
        return canonical_json({b: d[b] for b in blocks})


def parse_config(data: dict) -> RunConfig:
    """Validate a raw config dict into a RunConfig; rejects unknown keys."""
    top = _Block(data, "config")
    seed = int(top.get("seed", (int,), default=0))

    db = top.child("dataset")
    generator = db.get("generator", str, default="gaussian")
    if generator not in ("gaussian", "shapes", "ingest"):
        raise ConfigError(f"config.dataset.generator: unknown generator {generator!r}")
    geometry = db.get("geometry", dict, default={})
    if geometry:
        gb = _Block(geometry, "config.dataset.geometry")
        for k in ("class_radius", "sigma", "rotation"):
            gb.get(k, (int, float))
        gb.get("shift", (list, tuple))
        gb.finish()
    dataset = DatasetSpec(
        generator=generator,
        n_domains=int(db.get("n_domains", int, default=2)),
        n_classes=int(db.get("n_classes", int, default=2)),
        per_cell_count=int(db.get("per_cell_count", int, default=200)),
        styles=list(db.get("styles", list, default=["filled", "outline", "textured"])),
        image_size=int(db.get("image_size", int, default=24)),
        root=db.get("root", str),
        geometry=dict(geometry),
        seed=int(db.get("seed", int, default=seed)),
    )
    if generator == "ingest" and not dataset.root:
        raise ConfigError("config.dataset.root: required for the ingest generator")
    db.finish()

    fb = top.child("diffusion")
    diffusion = DiffusionConfig(
        t_train=int(fb.get("t_train", int, default=1000)),
        schedule=fb.get("schedule", str, default="linear"),
        d_tau=int(fb.get("d_tau", int, default=64)),
        time_dim=int(fb.get("time_dim", int, default=32)),
        hidden=int(fb.get("hidden", int, default=128)),
        depth=int(fb.get("depth", int, default=3)),
        widths=tuple(fb.get("widths", list, default=[16, 32, 64])),
        steps=int(fb.get("steps", int, default=2000)),
        batch_size=int(fb.get("batch_size", int, default=128)),
        lr=float(fb.get("lr", (int, float), default=1e-4)),
        p_uncond=float(fb.get("p_uncond", (int, float), default=0.1)),
        checkpoint_every=int(fb.get("checkpoint_every", int, default=0)),
        codec=fb.get("codec", str, default="identity"),
        codec_latent_channels=int(fb.get("codec_latent_channels", int, default=4)),
        codec_steps=int(fb.get("codec_steps", int, default=400)),
        codec_lr=float(fb.get("codec_lr", (int, float), default=1e-3)),
        seed=seed,
    )
    diffusion.validate()
    fb.finish()

    mb = top.child("mix")
    mix = MixPolicy(
        strategy=mb.get("strategy", str, default="condition_level"),
        alpha_range=_pair(mb, "alpha_range", (0.3, 0.7)),
        t_mix_range=_pair(mb, "t_mix_range", (20, 45), kind=int),
        cfg_range=_pair(mb, "cfg_range", (5.0, 6.0)),
        ddim_steps=int(mb.get("ddim_steps", int, default=50)),
        eta=float(mb.get("eta", (int, float), default=0.0)),
        independent_trajectories=bool(mb.get("independent_trajectories", bool,
                                             default=False)),
        batch_size=int(mb.get("batch_size", int, default=64)),
    )
    mix.validate()
    pool_per_cell = mb.get("per_cell", int)
    mb.finish()

    flt = top.child("filter")
    filter_settings = FilterSettings(
        n_l_scale=float(flt.get("n_l_scale", (int, float), default=1.0)),
        n_l_absolute=flt.get("n_l_absolute", int),
        mode=flt.get("mode", str, default="entropy_plus_reject"),
        pool_per_cell_factor=float(flt.get("pool_per_cell_factor", (int, float),
                                           default=3.0)),
    )
    from .filtering import FILTER_MODES
    if filter_settings.mode not in FILTER_MODES:
        raise ConfigError(f"config.filter.mode: unknown mode {filter_settings.mode!r}")
    flt.finish()

    tb = top.child("trainer")
    trainer = TrainerConfig(
        steps=int(tb.get("steps", int, default=400)),
        batch_per_domain=int(tb.get("batch_per_domain", int, default=16)),
        lr=float(tb.get("lr", (int, float), default=1e-3)),
        weight_decay=float(tb.get("weight_decay", (int, float), default=0.0)),
        eval_every=int(tb.get("eval_every", int, default=25)),
        max_checkpoints=int(tb.get("max_checkpoints", int, default=200)),
        hidden=int(tb.get("hidden", int, default=64)),
        widths=tuple(tb.get("widths", list, default=[16, 32, 64])),
        feature_dim=int(tb.get("feature_dim", int, default=64)),
    )
    trainer.validate()
    methods = list(tb.get("methods", list, default=["erm", "erm+fds"]))
    from .experiment import parse_method
    for m in methods:
        parse_method(m)
    seeds = [int(s) for s in tb.get("seeds", list, default=[0, 1, 2])]
    swad = SwadPolicy(
        tol_start=float(tb.get("swad_tol_start", (int, float), default=0.005)),
        tol_end=float(tb.get("swad_tol_end", (int, float), default=0.005)),
    )
    val_fraction = float(tb.get("val_fraction", (int, float), default=0.2))
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("config.trainer.val_fraction must be in (0, 1)")
    tb.finish()

    ob = top.child("output")
    output = OutputSpec(
        diversity=bool(ob.get("diversity", bool, default=False)),
        tsne=bool(ob.get("tsne", bool, default=False)),
        plots=bool(ob.get("plots", bool, default=True)),
        targets=ob.get("targets", list),
        track_test=bool(ob.get("track_test", bool, default=False)),
    )
    ob.finish()

    oracle = bool(top.get("oracle", bool, default=False))
    top.finish()

    return RunConfig(seed=seed, dataset=dataset, diffusion=diffusion, mix=mix,
                     pool_per_cell=pool_per_cell, filter=filter_settings,
                     trainer=trainer, swad=swad, methods=methods, seeds=seeds,
                     val_fraction=val_fraction, oracle=oracle, output=output,
                     raw=copy.deepcopy(data))


def load_config(path) -> RunConfig:
    return parse_config(load_json(path))
