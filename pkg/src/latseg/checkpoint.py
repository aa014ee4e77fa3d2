"""Single-file binary checkpoint container.

Layout: magic "LSCP", format version (u32 LE), header length (u32 LE), then a
JSON header describing named arrays grouped into sections ("unet/conv1.weight"),
then the raw array bytes back to back. Sections make structural assertions
cheap: an inference bundle can be checked for forbidden sections from the
header alone, without materializing any tensors.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Mapping

import numpy as np
import torch

from .errors import DataError

MAGIC = b"LSCP"
VERSION = 1
_HEAD = struct.Struct("<4sII")


@dataclass
class Checkpoint:
    sections: Dict[str, Dict[str, torch.Tensor]]
    metadata: dict = field(default_factory=dict)
    version: int = VERSION

    def section(self, name: str) -> Dict[str, torch.Tensor]:
        if name not in self.sections:
            raise DataError(
                f"checkpoint has no section {name!r}; found {sorted(self.sections)}"
            )
        return self.sections[name]


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy()
    return np.asarray(value)


def save_checkpoint(
    path,
    sections: Mapping[str, Mapping[str, torch.Tensor]],
    metadata: Mapping | None = None,
) -> None:
    arrays: List[dict] = []
    blobs: List[bytes] = []
    for section_name, state in sections.items():
        if "/" in section_name:
            raise DataError(f"section name {section_name!r} must not contain '/'")
        # a parameter-free module still gets its section recorded in the header
        for key, value in state.items():
            arr = np.ascontiguousarray(_to_numpy(value))
            if arr.dtype.str[0] == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            blob = arr.tobytes()
            arrays.append(
                {
                    "key": f"{section_name}/{key}",
                    "dtype": arr.dtype.str,
                    "shape": list(arr.shape),
                    "nbytes": len(blob),
                }
            )
            blobs.append(blob)
    header = json.dumps(
        {
            "metadata": dict(metadata or {}),
            "sections": sorted(sections),
            "arrays": arrays,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def _open_container(path):
    try:
        return open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open checkpoint {path}: {exc}") from exc


def _read_header(fh, path) -> dict:
    head = fh.read(_HEAD.size)
    if len(head) < _HEAD.size:
        raise DataError(f"{path}: too short to be a checkpoint container")
    magic, version, header_len = _HEAD.unpack(head)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, not a checkpoint container")
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    raw = fh.read(header_len)
    if len(raw) < header_len:
        raise DataError(f"{path}: truncated header")
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt header: {exc}") from exc


def read_metadata(path) -> dict:
    with _open_container(path) as fh:
        return _read_header(fh, path)["metadata"]


def read_section_names(path) -> List[str]:
    """Section names from the header alone; no array data is read."""
    with _open_container(path) as fh:
        header = _read_header(fh, path)
    return sorted(header["sections"])


def load_checkpoint(path) -> Checkpoint:
    with _open_container(path) as fh:
        header = _read_header(fh, path)
        sections: Dict[str, Dict[str, torch.Tensor]] = {
            name: {} for name in header["sections"]
        }
        for entry in header["arrays"]:
            blob = fh.read(entry["nbytes"])
            if len(blob) < entry["nbytes"]:
                raise DataError(f"{path}: truncated data for {entry['key']!r}")
            arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]))
            arr = arr.reshape(entry["shape"]).copy()
            section_name, key = entry["key"].split("/", 1)
            sections.setdefault(section_name, {})[key] = torch.from_numpy(arr)
    return Checkpoint(sections=sections, metadata=header["metadata"])


def state_digest(state: Mapping[str, torch.Tensor] | torch.nn.Module) -> str:
    """Order-independent content hash of a parameter set.

    Used to prove frozen components (codec, teacher) never move during
    training: equal digests mean bit-identical parameter bytes.
    """
    if isinstance(state, torch.nn.Module):
        state = state.state_dict()
    h = hashlib.sha256()
    for key in sorted(state):
        h.update(key.encode())
        h.update(_to_numpy(state[key]).tobytes())
    return h.hexdigest()


def parameter_count(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def tensors_equal(a: Mapping[str, torch.Tensor], b: Mapping[str, torch.Tensor]) -> bool:
    if set(a) != set(b):
        return False
    return all(torch.equal(a[k], b[k]) for k in a)
