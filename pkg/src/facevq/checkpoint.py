"""Checkpoint container: one zip archive of named arrays plus a manifest.

The manifest is versioned JSON carrying the backbone config, stage,
iteration, compression ratios and latent dim; loaders reject containers
whose ratios do not match the consumer's expectations. Writes are atomic
(temp file then rename).
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"schema_version": SCHEMA_VERSION, **manifest}
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp_name, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            zf.writestr(MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True))
            for name, arr in sorted(arrays.items()):
                buf = io.BytesIO()
                np.save(buf, np.asarray(arr))
                zf.writestr(f"arrays/{name}.npy", buf.getvalue())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read(MANIFEST_NAME))
            arrays = {}
            for info in zf.infolist():
                if info.filename.startswith("arrays/") and info.filename.endswith(".npy"):
                    name = info.filename[len("arrays/") : -len(".npy")]
                    arrays[name] = np.load(io.BytesIO(zf.read(info)), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from exc
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"checkpoint schema version {version} unsupported (want {SCHEMA_VERSION})")
    return arrays, manifest


def verify_ratios(manifest: dict, spatial_ratio: int, temporal_ratio: int) -> None:
    """Reject a checkpoint whose compression ratios differ from the consumer's."""
    got = manifest.get("ratios")
    if got != [spatial_ratio, temporal_ratio]:
        raise ConfigError(
            f"checkpoint ratios {got} do not match expected "
            f"[{spatial_ratio}, {temporal_ratio}]"
        )


def module_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """Flatten a module state dict into named float arrays."""
    out = {}
    for key, value in module.state_dict().items():
        out[f"{prefix}.{key}"] = value.detach().cpu().numpy()
    return out


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state = {}
    want = set(module.state_dict().keys())
    for key in want:
        name = f"{prefix}.{key}"
        if name not in arrays:
            raise DataError(f"checkpoint missing array {name}")
        state[key] = torch.from_numpy(np.array(arrays[name]))
    module.load_state_dict(state)


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    """Deterministic digest of all parameters and buffers (freeze audits)."""
    digest = hashlib.sha256()
    for key, value in sorted(module.state_dict().items()):
        digest.update(key.encode())
        digest.update(value.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
