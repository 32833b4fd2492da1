"""Run manifests: every CLI invocation records enough to reproduce it."""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path


def blob_hash(path: str | Path) -> str:
    """Content hash in git blob form: sha1 over 'blob <len>\\0' + bytes."""
    data = Path(path).read_bytes()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def write_manifest(
    run_dir: str | Path,
    command: str,
    config_snapshot: dict,
    seed: int | None,
    inputs: list[str | Path] | None = None,
    extra: dict | None = None,
) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "seed": seed,
        "config": config_snapshot,
        "inputs": {str(p): blob_hash(p) for p in (inputs or []) if Path(p).is_file()},
    }
    if extra:
        manifest.update(extra)
    out = run_dir / "manifest.json"
    out.write_text(json.dumps(manifest, indent=2))
    return out


def new_run_dir(data_root: str | Path, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(data_root) / "runs" / f"{command}-{stamp}"
    suffix = 0
    run_dir = base
    while run_dir.exists():
        suffix += 1
        run_dir = Path(f"{base}-{suffix}")
    run_dir.mkdir(parents=True)
    return run_dir
