"""Run-directory layout with a content-hash manifest.

Every persisted artifact is recorded under the stage that produced it with a
sha256 and a stage signature (config subset + input artifact hashes). A stage
whose signature matches is skipped on resume after its artifacts re-verify;
any byte flip in a recorded file surfaces as an IntegrityError naming it.
"""

from __future__ import annotations

from pathlib import Path

from .errors import IntegrityError
from .util import atomic_write_json, load_json, sha256_file

MANIFEST_FORMAT = "fds-run-v1"

SUBDIRS = ("dataset", "splits", "diffusion", "pools", "verdicts", "augmented",
           "classifiers", "reports", "plots")


class RunDirectory:
    def __init__(self, path, create=True):
        self.path = Path(path)
        if create:
            self.path.mkdir(parents=True, exist_ok=True)
            for sub in SUBDIRS:
                (self.path / sub).mkdir(exist_ok=True)
        self._manifest = None

    @property
    def manifest_path(self):
        return self.path / "manifest.json"

    def manifest(self) -> dict:
        if self._manifest is None:
            if self.manifest_path.exists():
                self._manifest = load_json(self.manifest_path)
            else:
                self._manifest = {"format": MANIFEST_FORMAT, "stages": {},
                                  "failures": {}}
        return self._manifest

    def save_manifest(self):
        atomic_write_json(self.manifest_path, self.manifest())

    def relpath(self, path) -> str:
        return str(Path(path).relative_to(self.path))

    # -- stage records -------------------------------------------------------

    def stage_record(self, stage_key: str):
        return self.manifest()["stages"].get(stage_key)

    def stage_is_done(self, stage_key: str, signature: str) -> bool:
        rec = self.stage_record(stage_key)
        return rec is not None and rec.get("signature") == signature

    def verify_stage(self, stage_key: str):
        """Re-hash the stage's artifacts; mismatch names the offending file."""
        rec = self.stage_record(stage_key)
        if rec is None:
            raise IntegrityError(f"stage {stage_key!r} has no manifest record")
        for rel, expected in sorted(rec["artifacts"].items()):
            full = self.path / rel
            if not full.exists():
                raise IntegrityError(f"missing artifact {rel} (stage {stage_key})")
            actual = sha256_file(full)
            if actual != expected:
                raise IntegrityError(
                    f"artifact hash mismatch for {rel} (stage {stage_key}): "
                    f"recorded {expected[:12]}, found {actual[:12]}")

    def record_stage(self, stage_key: str, signature: str, paths):
        artifacts = {}
        for p in paths:
            p = Path(p)
            if p.is_dir():
                for f in sorted(p.rglob("*")):
                    if f.is_file():
                        artifacts[self.relpath(f)] = sha256_file(f)
            else:
                artifacts[self.relpath(p)] = sha256_file(p)
        self.manifest()["stages"][stage_key] = {"signature": signature,
                                                "artifacts": artifacts}
        self.manifest()["failures"].pop(stage_key, None)
        self.save_manifest()

    def record_failure(self, stage_key: str, error: str):
        self.manifest()["failures"][stage_key] = error
        self.save_manifest()

    def stage_artifact_hashes(self, stage_key: str) -> dict:
        rec = self.stage_record(stage_key)
        return dict(rec["artifacts"]) if rec else {}

    def verify_all(self):
        for key in sorted(self.manifest()["stages"]):
            self.verify_stage(key)
