"""Deterministic checkpoint files for models and heads.

Layout: a 4-byte magic, an 8-byte little-endian header length, a compact
sorted-key JSON header (kind, config, parameter names), then one ``.npy``
encoded array per parameter name in header order. Identical parameters always
produce identical bytes, so checkpoints can be compared and fingerprinted
directly.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict
from typing import BinaryIO, Union

import numpy as np

from .errors import ConfigError, DataError
from .head import CIHead, ExpertBank, VEHeadConfig, VariateMixtureHead
from .models import Model, ModelConfig, create_model

MAGIC = b"VEFC"
FORMAT_VERSION = 1

KIND_MODEL = "model"
KIND_VE_HEAD = "ve_head"
KIND_CI_HEAD = "ci_head"


def _write(buf: BinaryIO, header: dict, arrays) -> None:
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)
    for arr in arrays:
        np.lib.format.write_array(buf, np.ascontiguousarray(arr), version=(1, 0))


def _read(buf: BinaryIO):
    magic = buf.read(4)
    if magic != MAGIC:
        raise DataError(f"not a checkpoint: bad magic {magic!r}")
    (length,) = struct.unpack("<Q", buf.read(8))
    header = json.loads(buf.read(length).decode())
    if header.get("format") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format {header.get('format')!r}")
    arrays = [np.lib.format.read_array(buf) for _ in header["names"]]
    return header, arrays


def model_to_bytes(model: Model) -> bytes:
    names = sorted(model.params())
    header = {
        "format": FORMAT_VERSION,
        "kind": KIND_MODEL,
        "config": asdict(model.config),
        "names": names,
    }
    buf = io.BytesIO()
    _write(buf, header, [model.params()[n] for n in names])
    return buf.getvalue()


def model_from_bytes(data: bytes) -> Model:
    header, arrays = _read(io.BytesIO(data))
    if header["kind"] != KIND_MODEL:
        raise DataError(f"checkpoint holds a {header['kind']!r}, expected a model")
    config = ModelConfig(**header["config"])
    # the fresh init draw is discarded: set_params overwrites every array
    model = create_model(config, np.random.default_rng(0))
    model.set_params(dict(zip(header["names"], arrays)))
    return model


def save_model(path, model: Model) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


Head = Union[VariateMixtureHead, CIHead]


def head_to_bytes(head: Head) -> bytes:
    if isinstance(head, VariateMixtureHead):
        kind = KIND_VE_HEAD
        config = asdict(head.config)
    elif isinstance(head, CIHead):
        kind = KIND_CI_HEAD
        config = {}
    else:
        raise ConfigError(f"cannot serialize head of type {type(head).__name__}")
    names = sorted(head.params())
    header = {"format": FORMAT_VERSION, "kind": kind, "config": config, "names": names}
    buf = io.BytesIO()
    _write(buf, header, [head.params()[n] for n in names])
    return buf.getvalue()


def head_from_bytes(data: bytes) -> Head:
    header, arrays = _read(io.BytesIO(data))
    values = dict(zip(header["names"], arrays))
    if header["kind"] == KIND_CI_HEAD:
        return CIHead(weights=values["weights"])
    if header["kind"] != KIND_VE_HEAD:
        raise DataError(f"checkpoint holds a {header['kind']!r}, expected a head")
    config = VEHeadConfig(**header["config"])
    if config.mode == "full":
        bank = ExpertBank(mode="full", full=values["experts"])
    else:
        bank = ExpertBank(mode="lora", a=values["lora_a"], b=values["lora_b"])
    return VariateMixtureHead(config=config, embedding=values["embedding"], bank=bank)


def save_head(path, head: Head) -> None:
    with open(path, "wb") as fh:
        fh.write(head_to_bytes(head))


def load_head(path) -> Head:
    with open(path, "rb") as fh:
        return head_from_bytes(fh.read())


def fingerprint_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def model_fingerprint(model: Model) -> str:
    """Stable hex digest of a model's config and exact parameter bytes."""
    return fingerprint_bytes(model_to_bytes(model))


def head_fingerprint(head: Head) -> str:
    return fingerprint_bytes(head_to_bytes(head))
