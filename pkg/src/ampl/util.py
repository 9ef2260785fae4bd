"""Shared plumbing: seeded rng streams, thread caps, build hashing, manifests."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

# Fixed order of child rng streams spawned from one run seed.  Keeping every
# consumer on its own stream means optional stages (weight retraining, model
# retraining) do not shift the draws seen by unrelated stages.
STREAM_NAMES = ("dataset", "model", "miw", "agent", "rollout", "eval")


def spawn_streams(seed: int) -> dict[str, np.random.Generator]:
    """One independent Generator per STREAM_NAMES entry, derived from `seed`."""
    seq = np.random.SeedSequence(seed)
    children = seq.spawn(len(STREAM_NAMES))
    return {name: np.random.default_rng(s) for name, s in zip(STREAM_NAMES, children)}


def max_workers() -> int:
    """Parallelism cap for worker pools; AMPL_THREADS overrides the core count."""
    raw = os.environ.get("AMPL_THREADS", "")
    if raw.strip():
        try:
            n = int(raw)
        except ValueError as exc:
            raise ValueError(f"AMPL_THREADS must be an integer, got {raw!r}") from exc
        if n < 1:
            raise ValueError(f"AMPL_THREADS must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


def build_hash() -> str:
    """sha256 over the package's own source files (stable per build)."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def write_manifest(path: str | os.PathLike, config: dict, seed, extra: dict | None = None) -> None:
    """Drop a reproduction manifest (config + seed + build hash) beside an output."""
    payload = {"config": config, "seed": seed, "build": build_hash()}
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj)!r}")
