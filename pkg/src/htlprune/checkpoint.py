"""Checkpoint files: a text manifest next to a little-endian parameter blob.

A checkpoint is a directory holding

* ``manifest.txt``: ``key = value`` lines with the format version, the
  architecture, and one entry per parameter slot (shape, byte offset, size);
* ``weights.bin``: float64 little-endian parameters in manifest order,
  optionally followed by a bit-packed prune-mask section.

Float values in the manifest use ``repr`` so they survive a round trip.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import fields
from pathlib import Path

import numpy as np

from .pruning import PruneMask
from .unet import ArchConfig, Model, build_classifier, build_unet

FORMAT = "htlprune-checkpoint"
VERSION = 1
DTYPE = "<f8"
MANIFEST = "manifest.txt"
BLOB = "weights.bin"


class CheckpointError(OSError):
    pass


def _shape_str(shape) -> str:
    return ",".join(str(int(d)) for d in shape) if len(shape) else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(d) for d in text.split(","))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def save_checkpoint(model: Model, path, mask: PruneMask | None = None, meta: dict | None = None) -> Path:
    """Write the dense weights of ``model`` (even while a mask is applied) and an optional mask."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    shadow = model.shadow or {}
    weights = {k: shadow.get(k, v.data) for k, v in model.params.items()}
    lines = [f"format = {FORMAT}", f"version = {VERSION}", f"dtype = {DTYPE}", f"kind = {model.kind}"]
    for f in fields(ArchConfig):
        lines.append(f"arch.{f.name} = {_fmt(getattr(model.config, f.name))}")
    for k, v in sorted((meta or {}).items()):
        lines.append(f"meta.{k} = {_fmt(v)}")

    chunks, offset = [], 0
    for name in model.params:
        arr = np.ascontiguousarray(weights[name], dtype=DTYPE)
        raw = arr.tobytes()
        lines.append(f"param.{name} = shape={_shape_str(arr.shape)} offset={offset} nbytes={len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    lines.append(f"params_nbytes = {offset}")

    if mask is not None:
        lines += [f"mask.method = {mask.method}", f"mask.ratio = {_fmt(float(mask.ratio))}",
                  f"mask.seed = {int(mask.seed)}"]
        for name, m in mask.masks.items():
            raw = np.packbits(np.asarray(m, dtype=bool).ravel(), bitorder="little").tobytes()
            lines.append(f"maskbits.{name} = shape={_shape_str(m.shape)} offset={offset} nbytes={len(raw)}")
            chunks.append(raw)
            offset += len(raw)
    blob = b"".join(chunks)
    lines.append(f"sha256 = {hashlib.sha256(blob).hexdigest()}")
    _atomic_write(path / BLOB, blob)
    _atomic_write(path / MANIFEST, ("\n".join(lines) + "\n").encode())
    return path


def _atomic_write(target: Path, payload: bytes) -> None:
    tmp = target.with_suffix(target.suffix + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, target)


def read_manifest(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = (path / MANIFEST).read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {path}: {exc}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"{path / MANIFEST}:{lineno}: expected 'key = value'")
        out[key.strip()] = value
    return out


def _entry(value: str) -> tuple[tuple[int, ...], int, int]:
    parts = dict(p.split("=", 1) for p in value.split())
    return _parse_shape(parts["shape"]), int(parts["offset"]), int(parts["nbytes"])


def _arch_from(manifest: dict[str, str]) -> ArchConfig:
    kwargs = {}
    for f in fields(ArchConfig):
        raw = manifest.get(f"arch.{f.name}")
        if raw is None:
            continue
        default = getattr(ArchConfig(), f.name)
        kwargs[f.name] = type(default)(raw) if not isinstance(default, str) else raw
    return ArchConfig(**kwargs)


def load_checkpoint(path) -> tuple[Model, PruneMask | None, dict[str, str]]:
    """Returns (dense model, mask or None, meta entries). The mask is not applied."""
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint (format={manifest.get('format')!r})")
    if "version" not in manifest:
        raise CheckpointError(f"{path}: manifest lacks a version")
    if int(manifest["version"]) != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest['version']}")
    if manifest.get("dtype") != DTYPE:
        raise CheckpointError(f"{path}: unsupported dtype {manifest.get('dtype')!r}")
    try:
        blob = (path / BLOB).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint blob in {path}: {exc}") from None
    if hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise CheckpointError(f"{path}: blob checksum mismatch")

    cfg = _arch_from(manifest)
    kind = manifest.get("kind", "segmentation")
    model = (build_unet if kind == "segmentation" else build_classifier)(cfg, seed=0)
    state = {}
    for key, value in manifest.items():
        if key.startswith("param."):
            shape, off, nbytes = _entry(value)
            state[key[len("param."):]] = np.frombuffer(blob[off:off + nbytes], dtype=DTYPE).reshape(shape)
    missing = set(model.params) - set(state)
    if missing:
        raise CheckpointError(f"{path}: parameters missing from manifest: {sorted(missing)}")
    model.load_state_dict(state)

    mask = None
    if "mask.method" in manifest:
        masks = {}
        for key, value in manifest.items():
            if key.startswith("maskbits."):
                shape, off, nbytes = _entry(value)
                n = int(np.prod(shape))
                bits = np.unpackbits(np.frombuffer(blob[off:off + nbytes], dtype=np.uint8),
                                     count=n, bitorder="little")
                masks[key[len("maskbits."):]] = bits.astype(bool).reshape(shape)
        mask = PruneMask(masks, float(manifest["mask.ratio"]), manifest["mask.method"], int(manifest["mask.seed"]))
    meta = {k[len("meta."):]: v for k, v in manifest.items() if k.startswith("meta.")}
    return model, mask, meta
