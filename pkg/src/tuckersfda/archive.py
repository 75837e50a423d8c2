"""Model archives: ``manifest.json`` + one little-endian blob per tensor + ``checksums.sha256``."""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .layers import (
    AdaptiveAvgPool1d, BatchNorm1d, Conv1d, Dropout, FactorizedConv1d, FactorizedLinear,
    Flatten, Linear, MaxPool1d, ReLU,
)
from .model import SECTIONS, ModelGraph
from .peft import adapter_from_config

FORMAT = "tuckersfda-archive"
VERSION = 1
DTYPES = {"float64": "<f8", "float32": "<f4"}


class ArchiveError(Exception):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def save_model(model: ModelGraph, path, dtype: str = "float64", extra: dict | None = None) -> Path:
    """Write ``model`` to the directory ``path`` (replaced atomically if it exists)."""
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-archive-", dir=path.parent))
    try:
        layers = []
        blobs = []

        def put(key, arr):
            fname = f"{key}.bin"
            np.ascontiguousarray(arr, dtype=DTYPES[dtype]).tofile(tmp / fname)
            blobs.append(fname)
            return {"file": fname, "shape": list(arr.shape)}

        for sec in SECTIONS:
            for l in model.sections[sec]:
                entry = {"section": sec, "kind": l.kind, "name": l.name, "config": _jsonable(l.config()),
                         "params": {k: {**put(f"{l.name}.{k}", v), "tag": l.tags[k]} for k, v in l.params.items()},
                         "buffers": {k: put(f"{l.name}.{k}", v) for k, v in l.buffers.items()}}
                if l.adapter is not None:
                    entry["adapter"] = {"config": _jsonable(l.adapter.config()),
                                        "params": {k: {**put(f"adapters.{l.name}.{k}", v), "tag": "ADAPTER"}
                                                   for k, v in l.adapter.params.items()}}
                layers.append(entry)
        manifest = {"format": FORMAT, "version": VERSION, "dtype": dtype, "byte_order": "little",
                    "input_shape": list(model.input_shape), "n_classes": model.n_classes,
                    "meta": _jsonable(model.meta), "extra": _jsonable(extra or {}), "layers": layers}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        lines = [f"{_sha256(tmp / f)}  {f}" for f in ["manifest.json"] + blobs]
        (tmp / "checksums.sha256").write_text("\n".join(lines) + "\n")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def verify_archive(path) -> dict:
    """Check every checksum and return the parsed manifest."""
    path = Path(path)
    sums = path / "checksums.sha256"
    if not sums.exists():
        raise ArchiveError(f"{path}: no checksums file")
    for line in sums.read_text().splitlines():
        if not line.strip():
            continue
        digest, fname = line.split(None, 1)
        f = path / fname.strip()
        if not f.exists() or _sha256(f) != digest:
            raise ArchiveError(f"{path}: checksum failure for {fname.strip()}")
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != FORMAT:
        raise ArchiveError(f"{path}: not a model archive")
    if manifest.get("version") != VERSION:
        raise ArchiveError(f"{path}: archive version {manifest.get('version')} unsupported (need {VERSION})")
    return manifest


def _read(path: Path, spec: dict, dtype: str) -> np.ndarray:
    arr = np.fromfile(path / spec["file"], dtype=DTYPES[dtype])
    shape = tuple(spec["shape"])
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ArchiveError(f"{spec['file']}: size does not match declared shape {shape}")
    return arr.reshape(shape).astype(np.float64)


def _build(kind: str, name: str, cfg: dict, p: dict):
    if kind == "Conv1d":
        l = Conv1d(name, cfg["c_in"], cfg["c_out"], cfg["kernel"], cfg["stride"], cfg["padding"], cfg["bias"])
    elif kind == "FactorizedConv1d":
        return FactorizedConv1d(name, p["core"], p["v1"], p.get("v2"), p.get("bias"), cfg["stride"], cfg["padding"])
    elif kind == "FactorizedLinear":
        return FactorizedLinear(name, p["core"], p["u_out"], p["u_in"], p.get("bias"))
    elif kind == "BatchNorm1d":
        l = BatchNorm1d(name, cfg["channels"], cfg["eps"], cfg["momentum"])
    elif kind == "Linear":
        l = Linear(name, cfg["d_in"], cfg["d_out"], cfg["bias"], tag=cfg["tag"])
    elif kind == "MaxPool1d":
        return MaxPool1d(name, cfg["kernel"], cfg["stride"], cfg["padding"])
    elif kind == "AdaptiveAvgPool1d":
        return AdaptiveAvgPool1d(name, cfg["output_size"])
    elif kind == "Dropout":
        return Dropout(name, cfg["rate"])
    elif kind == "ReLU":
        return ReLU(name)
    elif kind == "Flatten":
        return Flatten(name)
    else:
        raise ArchiveError(f"unknown layer kind {kind!r}")
    for k, v in p.items():
        if l.params[k].shape != v.shape:
            raise ArchiveError(f"{name}.{k}: stored shape {v.shape} != {l.params[k].shape}")
        l.params[k] = v
    return l


def load_model(path) -> ModelGraph:
    """Rebuild a model; nothing is constructed unless every checksum matches."""
    path = Path(path)
    manifest = verify_archive(path)
    dtype = manifest["dtype"]
    sections = {s: [] for s in SECTIONS}
    for e in manifest["layers"]:
        params = {k: _read(path, s, dtype) for k, s in e["params"].items()}
        layer = _build(e["kind"], e["name"], e["config"], params)
        for k, s in e["params"].items():
            if layer.tags.get(k) != s["tag"]:
                raise ArchiveError(f"{e['name']}.{k}: tag {s['tag']} does not match layer kind")
        for k, s in e["buffers"].items():
            layer.buffers[k] = _read(path, s, dtype)
        if "adapter" in e:
            a = adapter_from_config(e["adapter"]["config"])
            for k, s in e["adapter"]["params"].items():
                a.params[k] = _read(path, s, dtype)
            layer.adapter = a
        sections[e["section"]].append(layer)
    return ModelGraph(sections["backbone"], sections["classifier"], manifest["input_shape"],
                      manifest["n_classes"], sections["imputer"] or None, manifest.get("meta"))


def read_extra(path) -> dict:
    return verify_archive(path).get("extra", {})
