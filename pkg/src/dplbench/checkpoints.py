"""Binary checkpoints for frozen encoders and prompt generators.

Container layout (all integers little-endian)::

    magic            4 bytes   b"DPLE" (encoders) or b"DPLG" (generator)
    version          u16       currently 1
    content digest   32 bytes  sha256 over array names, shapes and values
    config digest    32 bytes  sha256 of the run config that produced it
    header length    u32
    header           JSON, utf-8: array names, shapes, and scalar metadata
    payload          float64 arrays, row-major, in header order

Loading recomputes the content digest from the payload and refuses a file
whose digest does not match, so a truncated or edited checkpoint never
loads silently.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import numkit as nk
from .clipcore import FrozenEncoders, _atomic_write
from .errors import FingerprintMismatch, FormatError
from .promptlab import GeneratorParams
from .worldgen import Vocab

ENCODER_MAGIC = b"DPLE"
GENERATOR_MAGIC = b"DPLG"
VERSION = 1
_FIXED = struct.Struct("<4sH32s32sI")


def _digest(hexstr: str) -> bytes:
    raw = bytes.fromhex(hexstr) if hexstr else b""
    if len(raw) not in (0, 32):
        raise ValueError("fingerprints are sha256 hex digests")
    return raw.ljust(32, b"\0")


def _pack(magic: bytes, content_fp: str, config_fp: str, header: dict, arrays) -> bytes:
    header = {**header, "shapes": [list(a.shape) for a in arrays]}
    blob = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return _FIXED.pack(magic, VERSION, _digest(content_fp), _digest(config_fp), len(blob)) + blob + payload


def _unpack(path, magic: bytes):
    data = Path(path).read_bytes()
    if len(data) < _FIXED.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    got, version, content, config, n = _FIXED.unpack_from(data)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = _FIXED.size + n
    try:
        header = json.loads(data[_FIXED.size:start])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    arrays, offset = [], start
    for shape in header["shapes"]:
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + size > len(data):
            raise FormatError(f"{path}: truncated payload")
        arrays.append(np.frombuffer(data, "<f8", size // 8, offset).astype(np.float64).reshape(shape))
        offset += size
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return header, arrays, content.hex(), config.hex() if config.strip(b"\0") else ""


def _check_config(path, stored: str, expected: str | None) -> None:
    if expected is not None and stored != expected:
        raise FingerprintMismatch(
            f"{path} was produced by config {stored[:12] or '<none>'}, expected {expected[:12]}"
        )


def save_encoders(enc: FrozenEncoders, path, config_fingerprint: str = "", vocab: Vocab | None = None) -> None:
    header = {
        "vocab": asdict(vocab) if vocab is not None else None,
        "names": enc.array_names(),
        "image_activations": list(enc.image.activations),
        "text_activations": list(enc.text_mlp.activations),
        "logit_scale": float(enc.logit_scale),
        "frozen": bool(enc.frozen),
    }
    blob = _pack(ENCODER_MAGIC, enc.fingerprint, config_fingerprint, header, enc.arrays())
    _atomic_write(Path(path), blob)


def load_encoders(path, config_fingerprint: str | None = None) -> FrozenEncoders:
    """Load and verify; with ``config_fingerprint`` also check provenance."""
    header, arrays, content, config = _unpack(path, ENCODER_MAGIC)
    _check_config(path, config, config_fingerprint)
    n_img = 2 * len(header["image_activations"])
    image = nk.MlpParams(arrays[0:n_img:2], arrays[1:n_img:2], header["image_activations"])
    text_arrays = arrays[n_img + 2:]
    text = nk.MlpParams(text_arrays[0::2], text_arrays[1::2], header["text_activations"])
    enc = FrozenEncoders(image, arrays[n_img], arrays[n_img + 1], text, False, header["logit_scale"])
    if header["frozen"]:
        enc = enc.freeze()
    if enc.fingerprint != content:
        raise FingerprintMismatch(f"{path}: content fingerprint does not match payload")
    return enc


def save_generator(gen: GeneratorParams, path, config_fingerprint: str = "", encoder_fingerprint: str = "",
                   vocab: Vocab | None = None) -> None:
    """``encoder_fingerprint`` names the frozen encoders the generator was trained against."""
    header = {
        "vocab": asdict(vocab) if vocab is not None else None,
        "encoder_fingerprint": encoder_fingerprint,
        "names": gen.array_names(),
        "activations": list(gen.mlp.activations),
        "n_ctx": gen.n_ctx,
        "tok_dim": gen.tok_dim,
    }
    _atomic_write(Path(path), _pack(GENERATOR_MAGIC, gen.fingerprint, config_fingerprint, header, gen.arrays()))


def load_generator(path, config_fingerprint: str | None = None,
                   encoder_fingerprint: str | None = None) -> GeneratorParams:
    header, arrays, content, config = _unpack(path, GENERATOR_MAGIC)
    _check_config(path, config, config_fingerprint)
    stored = header.get("encoder_fingerprint", "")
    if encoder_fingerprint is not None and stored and stored != encoder_fingerprint:
        raise FingerprintMismatch(
            f"{path} was trained against encoders {stored[:12]}, got {encoder_fingerprint[:12]}"
        )
    mlp = nk.MlpParams(arrays[0::2], arrays[1::2], header["activations"])
    gen = GeneratorParams(mlp, header["n_ctx"], header["tok_dim"])
    if gen.fingerprint != content:
        raise FingerprintMismatch(f"{path}: content fingerprint does not match payload")
    return gen


def read_vocab(path) -> Vocab | None:
    """Vocabulary layout stored in a checkpoint header, if any."""
    magic = Path(path).read_bytes()[:4]
    if magic not in (ENCODER_MAGIC, GENERATOR_MAGIC):
        raise FormatError(f"{path}: not a checkpoint")
    v = _unpack(path, magic)[0].get("vocab")
    return None if v is None else Vocab(**{k: tuple(t) for k, t in v.items()})


def read_config_fingerprint(path) -> str:
    """Config digest of any checkpoint in this container family."""
    data = Path(path).read_bytes()[: _FIXED.size]
    if len(data) < _FIXED.size or data[:4] not in (ENCODER_MAGIC, GENERATOR_MAGIC):
        raise FormatError(f"{path}: not a checkpoint")
    config = _FIXED.unpack(data)[3]
    return config.hex() if config.strip(b"\0") else ""
