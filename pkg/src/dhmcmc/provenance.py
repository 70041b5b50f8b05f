"""Provenance records attached to every file the package writes."""

from __future__ import annotations

import hashlib
import json
from importlib import metadata

TOOL = "dhmcmc"


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(obj):
    # numpy scalars and arrays sneak into configs
    if hasattr(obj, "tolist"):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def config_hash(config) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def make_provenance(config: dict, seed=None, **extra) -> dict:
    """Header dict: tool, version, hash of the config, seed. No timestamps, so reruns are byte-identical."""
    out = {"tool": TOOL, "version": tool_version(), "config_hash": config_hash(config), "seed": seed}
    out.update(extra)
    return out
