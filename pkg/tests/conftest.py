import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fds.config import parse_config
from fds.data import make_gaussian_domains, DomainGeometry, holdout_split
from fds.diffusion import DiffusionConfig, DiffusionModel, build_diffusion_model, \
    train_diffusion


@pytest.fixture(scope="session")
def artifact_root(tmp_path_factory):
    """Heavy-artifact cache; point FDS_TEST_CACHE at a fixed path to reuse
    trained models across pytest sessions."""
    env = os.environ.get("FDS_TEST_CACHE")
    if env:
        root = Path(env)
        root.mkdir(parents=True, exist_ok=True)
        return root
    return tmp_path_factory.mktemp("fds-cache")


@pytest.fixture(scope="session")
def tiny_point_dataset():
    return make_gaussian_domains(2, 2, 40, seed=7)


@pytest.fixture(scope="session")
def untrained_point_model(tiny_point_dataset):
    """Freshly initialized model; enough for every algebraic/bitwise contract."""
    ds = tiny_point_dataset
    cfg = DiffusionConfig(t_train=200, schedule="cosine", hidden=32, depth=2,
                          d_tau=16, steps=0, seed=3)
    return build_diffusion_model(ds.mode, ds.payload_shape, ds.n_domains,
                                 ds.n_classes, cfg)


BRIDGE_GEOMETRY = DomainGeometry(class_radius=2.0, sigma=0.35, shift=(3.0, 0.0),
                                 rotation=0.0)


def bridge_domain_means():
    return (BRIDGE_GEOMETRY.mean(0, 0, 1), BRIDGE_GEOMETRY.mean(1, 0, 1))


@pytest.fixture(scope="session")
def bridge_model(artifact_root):
    """Two-Gaussian-domain world (one class) with a trained diffusion model."""
    ds = make_gaussian_domains(2, 1, 1500, BRIDGE_GEOMETRY, seed=21)
    path = artifact_root / "bridge_model.ckpt"
    if path.exists():
        return ds, DiffusionModel.load(path)
    cfg = DiffusionConfig(t_train=1000, schedule="linear", hidden=128, depth=3,
                          d_tau=32, steps=3000, batch_size=256, lr=1e-3,
                          p_uncond=0.1, seed=21)
    model = train_diffusion(ds, holdout_split(ds, 0.1, seed=1), cfg)
    model.save(path)
    return ds, model


# ---------------------------------------------------------------------------
# The styled-shapes acceptance experiment (criteria 7-11 share it).
# ---------------------------------------------------------------------------

SHAPES_CONFIG = {
    "seed": 0,
    "dataset": {"generator": "shapes", "n_classes": 3,
                "styles": ["filled", "outline", "textured"],
                "per_cell_count": 100, "image_size": 24},
    "diffusion": {"steps": 1800, "batch_size": 48, "lr": 2e-4, "t_train": 1000,
                  "schedule": "linear", "d_tau": 64, "widths": [16, 32, 64],
                  "p_uncond": 0.1},
    "mix": {"strategy": "condition_level", "alpha_range": [0.3, 0.7],
            "t_mix_range": [20, 45], "cfg_range": [1.5, 2.5],
            "ddim_steps": 50, "batch_size": 48},
    "filter": {"n_l_scale": 0.5, "pool_per_cell_factor": 3.0},
    "trainer": {"steps": 400, "batch_per_domain": 16, "lr": 1e-3,
                "eval_every": 25,
                "methods": ["erm", "swad", "erm+basic", "swad+basic",
                            "erm+interpolation", "swad+interpolation",
                            "erm+fds", "swad+fds"],
                "seeds": [0, 1, 2]},
    "output": {"diversity": True, "plots": False, "track_test": True},
}


@pytest.fixture(scope="session")
def shapes_run(artifact_root):
    """Full leave-one-out tier grid on the styled-shapes benchmark.

    Builds once per cache directory; resumes from the manifest afterwards.
    """
    from fds.pipeline import run_pipeline
    config = parse_config(SHAPES_CONFIG)
    run_dir = artifact_root / "shapes-run"
    result = run_pipeline(config, run_dir)
    return {"config": config, "run_dir": run_dir, "result": result}


@pytest.fixture(scope="session")
def shapes_in_domain(shapes_run):
    """In-domain rows (held-out source split) for baseline vs the fds tier."""
    from fds import experiment as exp
    from fds.pipeline import StageCache, _cell_result
    from fds.rundir import RunDirectory
    from fds.training import RunReport

    config = shapes_run["config"]
    rd = RunDirectory(shapes_run["run_dir"])
    cache = StageCache(rd, config, force=False)
    dataset = cache[("dataset",)]
    cfg = config.method_config("erm")
    report = RunReport()
    for target in range(dataset.n_domains):
        for seed in config.seeds:
            for tier, methods in ((None, ["erm"]), ("fds", ["erm+fds"])):
                rows = _cell_result(cache, dataset, target, seed, tier, methods,
                                    cfg, split_kind="in_domain")
                for r in rows:
                    report.add_row(r["method"], r["target_domain"], r["seed"],
                                   r["split_mode"], r["accuracy"])
    return report
