import os
import json
import hashlib
import tempfile
from datetime import datetime, timezone
import logging

import pandas as pd

import config
from models import FileEntry, PointStatus, RunConfig, RunManifest

logging.basicConfig(level=config.LOG_LEVEL, format='%(asctime)s - %(levelname)s - %(message)s')

MANIFEST_NAME = "manifest.json"
CONFIG_NAME = "config.json"


def canonical_config(cfg: RunConfig) -> str:
    """Serialized effective config, as written to config.json."""
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, indent=4)


def _hashed_payload(cfg: RunConfig) -> dict:
    """Effective config minus the execution-only settings (worker counts, output_dir)."""
    data = cfg.model_dump(mode="json")
    data.pop("workers", None)
    data.pop("output_dir", None)
    for twa in (data.get("twa"), (data.get("ramsey") or {}).get("twa")):
        if twa:
            twa.pop("workers", None)
    return data


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(_hashed_payload(cfg), sort_keys=True, indent=4)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def file_digest(path: str) -> tuple[str, int]:
    h = hashlib.sha256()
    size = 0
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
            size += len(chunk)
    return h.hexdigest(), size


class RunManager:
    """Owns one run directory: atomic file writes and the manifest that inventories them."""

    def __init__(self, base_dir=config.OUTPUT_DIR):
        self.base_dir = base_dir
        os.makedirs(self.base_dir, exist_ok=True)

    def get_run_dir(self, cfg: RunConfig) -> str:
        return os.path.join(self.base_dir, f"{cfg.experiment}_{config_hash(cfg)[:12]}")

    def list_runs(self) -> list[str]:
        """Run directories that carry a manifest."""
        if not os.path.exists(self.base_dir):
            return []
        return sorted(item for item in os.listdir(self.base_dir)
                      if os.path.exists(os.path.join(self.base_dir, item, MANIFEST_NAME)))

    def _write_atomic(self, path: str, payload: bytes):
        directory = os.path.dirname(path)
        try:
            os.makedirs(directory, exist_ok=True)
            fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp_")
            try:
                with os.fdopen(fd, 'wb') as f:
                    f.write(payload)
                os.replace(tmp_path, path)
            except BaseException:
                if os.path.exists(tmp_path):
                    os.remove(tmp_path)
                raise
        except OSError as e:
            logging.exception(f"Error writing '{path}':")
            raise IOError(f"Error writing '{path}': {e}") from e

    def start(self, cfg: RunConfig) -> RunManifest:
        run_dir = self.get_run_dir(cfg)
        manifest = RunManifest(experiment=cfg.experiment, config_hash=config_hash(cfg), seed=cfg.seed,
                               started_at=datetime.now(timezone.utc))
        self._write_atomic(os.path.join(run_dir, CONFIG_NAME), canonical_config(cfg).encode("utf-8"))
        logging.info(f"Run '{cfg.experiment}' started in {run_dir}")
        return manifest

    def write_table(self, cfg: RunConfig, name: str, frame: pd.DataFrame) -> str:
        """Write one figure panel as CSV (17 significant digits) or JSON records."""
        path = os.path.join(self.get_run_dir(cfg), f"{name}.{cfg.format}")
        if cfg.format == "csv":
            payload = frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
        else:
            payload = json.dumps({"columns": list(frame.columns),
                                  "records": json.loads(frame.to_json(orient="records", double_precision=15))},
                                 indent=4)
        self._write_atomic(path, payload.encode("utf-8"))
        logging.info(f"Wrote panel '{name}' ({len(frame)} rows) to {path}")
        return path

    def finish(self, cfg: RunConfig, manifest: RunManifest, points: list[PointStatus]) -> RunManifest:
        """Inventory every file in the run directory and write the manifest last."""
        run_dir = self.get_run_dir(cfg)
        files = []
        for item in sorted(os.listdir(run_dir)):
            path = os.path.join(run_dir, item)
            if item == MANIFEST_NAME or item.startswith(".tmp_") or not os.path.isfile(path):
                continue
            digest, size = file_digest(path)
            files.append(FileEntry(path=item, sha256=digest, bytes=size))
        manifest = manifest.model_copy(update={"points": points, "files": files,
                                               "finished_at": datetime.now(timezone.utc)})
        self._write_atomic(os.path.join(run_dir, MANIFEST_NAME),
                           manifest.model_dump_json(indent=4).encode("utf-8"))
        failed = sum(p.status == "failed" for p in points)
        if failed:
            logging.warning(f"Run '{cfg.experiment}' finished with {failed} failed point(s)")
        else:
            logging.info(f"Run '{cfg.experiment}' finished: {len(files)} file(s)")
        return manifest

    def load_manifest(self, run_dir: str) -> RunManifest:
        path = os.path.join(run_dir, MANIFEST_NAME)
        if not os.path.exists(path):
            logging.warning(f"Manifest not found: {path}")
            raise FileNotFoundError(f"No manifest in '{run_dir}'.")
        try:
            with open(path, 'r') as f:
                return RunManifest.model_validate_json(f.read())
        except Exception as e:
            logging.exception(f"Unexpected error loading manifest '{path}':")
            raise IOError(f"Error loading manifest '{path}': {e}") from e
