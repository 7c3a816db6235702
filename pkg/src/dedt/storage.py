"""Versioned container files for datasets, checkpoints and trajectory buffers.

A container is a zip archive with a ``meta.json`` entry and one ``.npy``
entry per named array.  Entries carry a fixed timestamp and are written in
sorted order, so identical content gives identical bytes.  Real arrays are
little-endian float64 (int64 for integer arrays); complex arrays are stored
as float64 with a trailing axis of length 2 (real, imaginary) and listed
under ``"complex"`` in the metadata.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .channel_sim import EnvConfig, RisGeometry
from .dt_policy import DtConfig, DtModel, ReplayBuffer, Trajectory
from .imputer import DiffusionImputer, DmConfig

SCHEMA = "dedt-container"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class ContainerError(IOError):
    pass


def _encode(arr: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = np.asarray(arr)
    if np.iscomplexobj(arr):
        return np.stack([arr.real, arr.imag], axis=-1).astype("<f8"), True
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
        return arr.astype("<i8"), False
    return arr.astype("<f8"), False


def write_container(path, kind: str, meta: dict, arrays: dict) -> Path:
    path = Path(path)
    complex_names = []
    payload = {}
    for name in sorted(arrays):
        enc, is_complex = _encode(arrays[name])
        if is_complex:
            complex_names.append(name)
        buf = io.BytesIO()
        np.lib.format.write_array(buf, np.ascontiguousarray(enc), allow_pickle=False)
        payload[name] = buf.getvalue()
    header = {"schema": SCHEMA, "version": VERSION, "kind": kind, "complex": complex_names,
              "meta": meta}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            info = zipfile.ZipInfo("meta.json", _EPOCH)
            zf.writestr(info, json.dumps(header, sort_keys=True, indent=1))
            for name, data in payload.items():
                zf.writestr(zipfile.ZipInfo(f"{name}.npy", _EPOCH), data)
    except OSError as e:
        raise ContainerError(f"cannot write {path}: {e}") from e
    return path


def read_container(path, kind: str | None = None):
    """Returns ``(meta, arrays)``; complex arrays are restored."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("meta.json"))
            arrays = {}
            for name in zf.namelist():
                if name.endswith(".npy"):
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)),
                                                                 allow_pickle=False)
    except (OSError, KeyError, zipfile.BadZipFile) as e:
        raise ContainerError(f"cannot read {path}: {e}") from e
    if header.get("schema") != SCHEMA or header.get("version") != VERSION:
        raise ContainerError(f"{path}: unsupported container {header.get('schema')} v{header.get('version')}")
    if kind is not None and header["kind"] != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, found {header['kind']!r}")
    for name in header["complex"]:
        a = arrays[name]
        arrays[name] = a[..., 0] + 1j * a[..., 1]
    return header["meta"], arrays


def env_to_dict(env: EnvConfig) -> dict:
    d = asdict(env)
    d["mu_m"] = list(env.mu_m)
    return d


def env_from_dict(d: dict) -> EnvConfig:
    d = dict(d)
    d["geometry"] = RisGeometry(**d["geometry"])
    d["mu_m"] = tuple(d["mu_m"])
    return EnvConfig(**d)


def save_dataset(path, env: EnvConfig, G, h, H, seed: int) -> Path:
    return write_container(path, "dataset", {"env": env_to_dict(env), "seed": seed, "slots": len(H)},
                           {"G": G, "h": h, "H": H})


def load_dataset(path):
    meta, arrays = read_container(path, "dataset")
    return env_from_dict(meta["env"]), arrays


def _state_arrays(module: torch.nn.Module) -> dict:
    return {f"param/{k}": v.detach().double().numpy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, arrays: dict):
    ref = module.state_dict()
    state = {}
    for k, v in ref.items():
        key = f"param/{k}"
        if key not in arrays:
            raise ContainerError(f"checkpoint is missing parameter {k}")
        state[k] = torch.as_tensor(arrays[key]).to(v.dtype)
    module.load_state_dict(state)


def save_imputer(path, imputer: DiffusionImputer) -> Path:
    meta = imputer.config_dict()
    meta["training"] = imputer.meta
    return write_container(path, "dm-checkpoint", meta, _state_arrays(imputer.model))


def load_imputer(path) -> DiffusionImputer:
    meta, arrays = read_container(path, "dm-checkpoint")
    imp = DiffusionImputer(DmConfig(**meta["dm"]), meta["N1"], meta["N2"], meta["M"], meta["scale"])
    _load_state(imp.model, arrays)
    imp.meta = meta.get("training", {})
    return imp


def save_dt(path, model: DtModel, training: dict | None = None) -> Path:
    meta = {"dt": asdict(model.cfg), "training": training or {}}
    return write_container(path, "dt-checkpoint", meta, _state_arrays(model))


def load_dt(path):
    meta, arrays = read_container(path, "dt-checkpoint")
    model = DtModel(DtConfig(**meta["dt"]))
    _load_state(model, arrays)
    return model, meta["training"]


def save_buffer(path, buffer: ReplayBuffer, env_tags: dict | None = None) -> Path:
    rtg, states, actions, tags = buffer.stacked()
    rewards = np.stack([t.rewards for t in buffer.trajectories])
    meta = {"episodes": len(buffer), "T": int(rtg.shape[1]), "env_tags": env_tags or {}}
    return write_container(path, "trajectory-buffer", meta, {
        "returns_to_go": rtg, "states": states, "actions": actions, "rewards": rewards,
        "tags": tags, "prompts": np.asarray(buffer.prompts, dtype=float)})


def load_buffer(path):
    meta, a = read_container(path, "trajectory-buffer")
    buf = ReplayBuffer()
    for i in range(len(a["rewards"])):
        buf.add(Trajectory(a["returns_to_go"][i], a["states"][i], a["actions"][i], a["rewards"][i],
                           int(a["tags"][i])), float(a["prompts"][i]))
    return buf, meta
