"""Versioned checkpoint container.

A checkpoint is a directory holding ``manifest.json`` (schema version
``pfcpgan-ckpt-1``) and ``params.bin`` (little-endian contiguous arrays at
the offsets listed in the manifest). The manifest carries everything needed
for a bit-exact reload: configs, seeds, optimizer state index, the pair
sampler's RNG state, and a sha256 digest of the payload.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from .config import GeneratorConfig, LossConfig, TrainConfig
from .errors import CheckpointError
from .networks import (DiscriminatorParams, GeneratorParams, ModelState,
                       PerceptualFeatureParams)

CKPT_VERSION = "pfcpgan-ckpt-1"
MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "params.bin"

_LE_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _np_dtype(name: str):
    if name not in _LE_DTYPES:
        raise CheckpointError(f"unsupported array dtype {name!r}")
    return np.dtype(_LE_DTYPES[name])


def save_checkpoint(state: ModelState, opt_state: dict, train_cfg: TrainConfig,
                    loss_cfg: LossConfig, rng: np.random.Generator,
                    path: str | Path) -> dict:
    """Write a checkpoint directory; returns the manifest dict."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    arrays: list[tuple[str, np.ndarray]] = list(state.named_arrays())
    for group, adam in sorted(opt_state.items()):
        for name in sorted(adam.m):
            arrays.append((f"adam/{group}/m/{name}", adam.m[name]))
        for name in sorted(adam.v):
            arrays.append((f"adam/{group}/v/{name}", adam.v[name]))

    index = []
    offset = 0
    chunks = []
    for name, arr in arrays:
        le = np.ascontiguousarray(arr, dtype=_np_dtype(arr.dtype.name))
        raw = le.tobytes()
        index.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()

    manifest = {
        "version": CKPT_VERSION,
        "step": state.step,
        "train_config": dataclasses.asdict(train_cfg),
        "loss_config": dataclasses.asdict(loss_cfg),
        "generator_config": dataclasses.asdict(state.config),
        "seeds": {"train": train_cfg.seed},
        "rng_state": rng.bit_generator.state,
        "adam_t": {group: opt_state[group].t for group in sorted(opt_state)},
        "arrays": index,
        "digest": digest,
    }
    (path / PAYLOAD_NAME).write_bytes(payload)
    with open(path / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def _restore_config(cls, d: dict):
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**kwargs)


def load_checkpoint(path: str | Path):
    """Returns (ModelState, opt_state_arrays, TrainConfig, LossConfig, manifest).

    ``opt_state_arrays`` maps group -> {"m": {...}, "v": {...}, "t": int}; the
    trainer rebuilds its Adam instances from it.
    """
    from .trainer import AdamState  # local import to avoid a cycle

    path = Path(path)
    mf = path / MANIFEST_NAME
    if not mf.is_file():
        raise CheckpointError(f"missing manifest: {mf}")
    try:
        manifest = json.loads(mf.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"manifest is not valid JSON: {mf} ({exc})") from exc
    if manifest.get("version") != CKPT_VERSION:
        raise CheckpointError(
            f"checkpoint version mismatch: {manifest.get('version')!r} != {CKPT_VERSION!r}"
        )
    payload = (path / PAYLOAD_NAME).read_bytes()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["digest"]:
        raise CheckpointError(f"payload digest mismatch in {path}")

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        dt = _np_dtype(entry["dtype"])
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"array {entry['name']} overruns payload")
        arr = np.frombuffer(payload[start : start + n], dtype=dt).reshape(entry["shape"])
        arrays[entry["name"]] = np.ascontiguousarray(arr).astype(entry["dtype"], copy=False)

    gen_cfg = _restore_config(GeneratorConfig, manifest["generator_config"])
    train_cfg = _restore_config(TrainConfig, manifest["train_config"])
    loss_cfg = _restore_config(LossConfig, manifest["loss_config"])

    def comp(prefix, cls):
        sub = {
            name[len(prefix) + 1 :]: arrays[name]
            for name in arrays
            if name.startswith(prefix + "/") and not name.startswith("adam/")
        }
        if not sub:
            raise CheckpointError(f"checkpoint lacks arrays for component {prefix!r}")
        if cls is PerceptualFeatureParams:
            return cls(gen_cfg, sub, frozen=True)
        return cls(gen_cfg, sub)

    state = ModelState(
        gen_profile=comp("gen_profile", GeneratorParams),
        gen_frontal=comp("gen_frontal", GeneratorParams),
        disc_profile=comp("disc_profile", DiscriminatorParams),
        disc_frontal=comp("disc_frontal", DiscriminatorParams),
        perceptual=comp("perceptual", PerceptualFeatureParams),
        step=int(manifest["step"]),
    )

    opt_state: dict[str, AdamState] = {}
    for group, t in manifest["adam_t"].items():
        m = {}
        v = {}
        prefix_m = f"adam/{group}/m/"
        prefix_v = f"adam/{group}/v/"
        for name, arr in arrays.items():
            if name.startswith(prefix_m):
                m[name[len(prefix_m):]] = arr.copy()
            elif name.startswith(prefix_v):
                v[name[len(prefix_v):]] = arr.copy()
        opt_state[group] = AdamState(m=m, v=v, t=int(t))

    return state, opt_state, train_cfg, loss_cfg, manifest
