"""Versioned checkpoint container.

A checkpoint is a zip archive with a ``meta.json`` entry and one ``.npy``
entry per array.  Network parameters are stored as little-endian float32.
Entries carry a fixed timestamp so identical contents give identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .layers import NetworkParams, NetworkSpec, _param_shapes, check_params

FORMAT = "ddrid-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def write_container(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    header = {"format": FORMAT, "version": VERSION, **meta}
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_entry("meta.json"), json.dumps(header, sort_keys=True, indent=1))
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[key]), allow_pickle=False)
            zf.writestr(_entry(f"arrays/{key}.npy"), buf.getvalue())
    tmp.replace(path)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {}
            for name in zf.namelist():
                if name.startswith("arrays/") and name.endswith(".npy"):
                    with zf.open(name) as f:
                        arrays[name[len("arrays/") : -len(".npy")]] = np.lib.format.read_array(
                            io.BytesIO(f.read()), allow_pickle=False
                        )
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, OSError, EOFError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {meta.get('version')}")
    return arrays, meta


def network_arrays(prefix: str, params: NetworkParams) -> dict[str, np.ndarray]:
    return {f"{prefix}/{i}/{name}": arr.astype("<f4") for i, name, arr in params.items()}


def network_meta(spec: NetworkSpec) -> dict:
    return {"fingerprint": spec.fingerprint(), "layers": spec.describe(), "input_shape": list(spec.input_shape)}


def params_from_arrays(prefix: str, spec: NetworkSpec, arrays: dict, meta: dict, dtype=np.float32) -> NetworkParams:
    stored = meta.get("networks", {}).get(prefix)
    if stored is None:
        raise CheckpointError(f"checkpoint holds no network {prefix!r}")
    if stored.get("fingerprint") != spec.fingerprint():
        raise CheckpointError(f"network {prefix!r}: spec fingerprint mismatch")
    layers: list[dict[str, np.ndarray]] = [{} for _ in spec.layers]
    for key, arr in arrays.items():
        head, _, rest = key.partition("/")
        if head != prefix:
            continue
        idx, _, name = rest.partition("/")
        layers[int(idx)][name] = arr.astype(dtype)
    order = _param_shapes(spec)
    params = NetworkParams([{k: d[k] for k in want if k in d} for want, d in zip(order, layers)])
    try:
        check_params(spec, params)
    except ValueError as exc:
        raise CheckpointError(f"network {prefix!r}: {exc}") from exc
    if not params.all_finite():
        raise CheckpointError(f"network {prefix!r}: non-finite parameters")
    return params


def save_network(path, spec: NetworkSpec, params: NetworkParams, name: str = "network") -> None:
    write_container(path, network_arrays(name, params), {"networks": {name: network_meta(spec)}})


def load_network(path, spec: NetworkSpec, name: str = "network") -> NetworkParams:
    arrays, meta = read_container(path)
    return params_from_arrays(name, spec, arrays, meta)
