"""
Run manifests and output-directory locking.

Every artifact-producing command writes ``manifest.json`` into its output
directory at the end of the run: the command, its arguments, the resolved
configuration, the seed, checksums of every artifact and the fingerprints
of the networks involved.
"""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from rcdmkit.exceptions import ArtifactError, VersionMismatchError
from rcdmkit.runtime.checkpoint import file_sha256

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".rcdmkit.lock"
MANIFEST_SCHEMA_VERSION = 1


@dataclass
class RunManifest:
    """Provenance of one command run."""

    command: str
    argv: List[str]
    config: Dict[str, Any]
    seed: int
    artifacts: Dict[str, Dict[str, str]] = field(default_factory=dict)
    fingerprints: Dict[str, str] = field(default_factory=dict)
    duration_seconds: float = 0.0
    created_at: str = ""
    version: str = ""
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def add_artifact(
        self, name: str, path: Union[str, Path], out_dir: Union[str, Path]
    ) -> None:
        """Record a written file by its path relative to ``out_dir`` and its sha256."""
        path = Path(path)
        try:
            relative = path.resolve().relative_to(Path(out_dir).resolve()).as_posix()
        except ValueError:
            relative = str(path)
        self.artifacts[name] = {"path": relative, "sha256": file_sha256(path)}

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunManifest":
        if data.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise VersionMismatchError(
                f"manifest schema version {data.get('schema_version')}, "
                f"this build reads {MANIFEST_SCHEMA_VERSION}"
            )
        return cls(**data)

    def checksums(self) -> Dict[str, str]:
        return {name: entry["sha256"] for name, entry in sorted(self.artifacts.items())}


def write_manifest(manifest: RunManifest, out_dir: Union[str, Path]) -> Path:
    """Write ``manifest.json`` atomically with sorted keys."""
    path = Path(out_dir) / MANIFEST_NAME
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
    logger.info(f"Wrote manifest for {manifest.command} to {path}")
    return path


def load_manifest(path: Union[str, Path]) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise ArtifactError(f"missing manifest: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ArtifactError(f"unreadable manifest {path}: {e}") from e
    return RunManifest.from_dict(data)


class OutputLock:
    """Exclusive lock file guarding one output directory."""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / LOCK_NAME
        self._fd: Optional[int] = None

    def __enter__(self) -> "OutputLock":
        self.out_dir.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ArtifactError(
                f"output directory is locked by another run: {self.out_dir}"
            ) from None
        os.write(self._fd, str(os.getpid()).encode("ascii"))
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


class RunRecorder:
    """Collects artifacts during a run and writes the manifest at the end."""

    def __init__(
        self,
        command: str,
        argv: List[str],
        config: Dict[str, Any],
        seed: int,
        out_dir: Union[str, Path],
        version: str = "",
    ):
        self.out_dir = Path(out_dir)
        self.manifest = RunManifest(
            command=command,
            argv=list(argv),
            config=config,
            seed=int(seed),
            version=version,
        )
        self._start = time.monotonic()

    def artifact(self, name: str, path: Union[str, Path]) -> Path:
        self.manifest.add_artifact(name, path, self.out_dir)
        return Path(path)

    def fingerprint(self, name: str, value: str) -> None:
        self.manifest.fingerprints[name] = value

    def finish(self) -> Path:
        self.manifest.duration_seconds = round(time.monotonic() - self._start, 3)
        self.manifest.created_at = datetime.now(timezone.utc).isoformat()
        return write_manifest(self.manifest, self.out_dir)


REPLAY_STRIPPED = ("--config", "--set", "--out")


def replay_argv(
    manifest: RunManifest, config_path: Union[str, Path], out_dir: Union[str, Path]
) -> List[str]:
    """The manifest's arguments pointed at a config snapshot and a new out dir."""
    args: List[str] = []
    skip = False
    for item in manifest.argv:
        if skip:
            skip = False
            continue
        if item in REPLAY_STRIPPED:
            skip = True
            continue
        if any(item.startswith(flag + "=") for flag in REPLAY_STRIPPED):
            continue
        args.append(item)
    return args + ["--config", str(config_path), "--out", str(out_dir)]
