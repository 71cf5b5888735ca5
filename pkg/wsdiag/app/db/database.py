import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Optional

from dotenv import load_dotenv

from wsdiag.app.models.models import RunManifest

load_dotenv()

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TIMINGS_NAME = "timings.json"


def resolve_output_dir(configured: Path) -> Path:
    """PIPELINE_OUT, when set, wins over the configured output directory."""
    override = os.getenv("PIPELINE_OUT")
    return Path(override) if override else Path(configured)


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


class ArtifactStore:
    """
    Flat-file store for stage artifacts under one output directory.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    def exists(self, name: str) -> bool:
        return self.path(name).is_file()

    def checksum(self, name: str) -> str:
        return sha256_file(self.path(name))

    def write_json(self, name: str, payload: Any) -> Path:
        return self.write_text(name, canonical_json(payload))

    def write_text(self, name: str, text: str) -> Path:
        target = self.path(name)
        with target.open("w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        return target

    def read_json(self, name: str) -> Any:
        return json.loads(self.path(name).read_text(encoding="utf-8"))

    def load_manifest(self) -> Optional[RunManifest]:
        if not self.exists(MANIFEST_NAME):
            return None
        return RunManifest.model_validate(self.read_json(MANIFEST_NAME))

    def save_manifest(self, manifest: RunManifest) -> Path:
        return self.write_json(MANIFEST_NAME, manifest.model_dump(mode="json"))

    def record_timing(self, stage: str, seconds: float) -> None:
        timings = self.read_json(TIMINGS_NAME) if self.exists(TIMINGS_NAME) else {}
        timings[stage] = round(seconds, 3)
        self.write_json(TIMINGS_NAME, timings)
