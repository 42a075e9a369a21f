"""Checkpoint format: 8-byte little-endian header length, canonical JSON
header (architecture configs + parameter manifests with names/shapes/
offsets), then one little-endian float32 blob in manifest order.

Save -> load -> save is byte identical.
"""

import json

import numpy as np
import torch

from .errors import DataFormatError
from .formats import HEADER_LEN_STRUCT, atomic_write_bytes, canonical_json_dumps

FORMAT_VERSION = 1


def _manifest_of(module, offset):
    manifest = []
    for name, param in module.named_parameters():
        shape = list(param.shape)
        manifest.append({"name": name, "shape": shape, "offset": offset})
        offset += int(np.prod(shape)) if shape else 1
    return manifest, offset


def save_checkpoint(path, nets):
    """nets: dict name -> module with .config() (e.g. generator,
    discriminator). Parameters are serialized as float32."""
    header_nets = {}
    blobs = []
    offset = 0
    for name in sorted(nets):
        module = nets[name]
        manifest, offset = _manifest_of(module, offset)
        header_nets[name] = {"config": module.config(), "manifest": manifest}
        for _, param in module.named_parameters():
            blobs.append(
                np.ascontiguousarray(
                    param.detach().cpu().numpy(), dtype="<f4"
                ).tobytes()
            )
    header = canonical_json_dumps(
        {"format_version": FORMAT_VERSION, "nets": header_nets}
    ).encode("utf-8")
    payload = HEADER_LEN_STRUCT.pack(len(header)) + header + b"".join(blobs)
    atomic_write_bytes(path, payload)


def read_checkpoint(path):
    """Returns (header dict, blob bytes)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < HEADER_LEN_STRUCT.size:
        raise DataFormatError("checkpoint too short")
    (header_len,) = HEADER_LEN_STRUCT.unpack_from(raw)
    start = HEADER_LEN_STRUCT.size
    if len(raw) < start + header_len:
        raise DataFormatError("truncated checkpoint header")
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"malformed checkpoint header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise DataFormatError("unsupported checkpoint format version")
    return header, raw[start + header_len:]


def _load_into(module, manifest, blob):
    params = dict(module.named_parameters())
    listed = {entry["name"] for entry in manifest}
    if listed != set(params):
        raise DataFormatError("checkpoint manifest does not match architecture")
    floats = np.frombuffer(blob, dtype="<f4")
    with torch.no_grad():
        for entry in manifest:
            param = params[entry["name"]]
            shape = tuple(entry["shape"])
            if shape != tuple(param.shape):
                raise DataFormatError(
                    f"shape mismatch for {entry['name']}: "
                    f"{shape} vs {tuple(param.shape)}"
                )
            count = int(np.prod(shape)) if shape else 1
            offset = int(entry["offset"])
            if offset + count > len(floats):
                raise DataFormatError("checkpoint blob too short")
            values = floats[offset:offset + count].reshape(shape)
            param.copy_(torch.from_numpy(values.copy()).to(param.dtype))


def load_checkpoint(path, template=None):
    """Reconstruct all nets stored in the file.

    Returns dict name -> module. Generator nets get `template` attached.
    """
    from .fields import GeneratorNet
    from .training import Discriminator

    header, blob = read_checkpoint(path)
    nets = {}
    for name, entry in header["nets"].items():
        cfg = entry["config"]
        kind = cfg.get("kind")
        if kind == "generator":
            module = GeneratorNet.from_config(cfg, template=template)
        elif kind == "discriminator":
            module = Discriminator.from_config(cfg)
        else:
            raise DataFormatError(f"unknown net kind {kind!r}")
        _load_into(module, entry["manifest"], blob)
        nets[name] = module
    return nets
