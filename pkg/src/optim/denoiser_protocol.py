"""
Length-prefixed byte protocol for out-of-process denoisers.

A message is::

    b"SOARDN01"                      8-byte magic
    uint32 little-endian             header length in bytes
    header                           UTF-8 JSON (``MessageHeader``)
    for each tensor in the header:
        uint64 little-endian         payload length in bytes
        payload                      float32 little-endian, row-major

Requests carry the tensors ``render``, ``condition`` and ``noise``;
responses carry a single tensor ``denoised``. Images are (H, W, C) in [0, 1].
"""

import json
import struct

import numpy as np
import torch
from pydantic import BaseModel, Field, ValidationError
from torch import Tensor

from core.errors import ProtocolError

MAGIC = b"SOARDN01"
VERSION = 1
REQUEST_TENSORS = ("render", "condition", "noise")
RESPONSE_TENSORS = ("denoised",)


class TensorSpec(BaseModel):
    name: str
    shape: list[int] = Field(min_length=1)
    dtype: str = "float32"


class MessageHeader(BaseModel):
    version: int = VERSION
    kind: str = Field(pattern="^(request|response)$")
    prompt: str = ""
    timestep: float = Field(0.0, ge=0, le=1)
    tensors: list[TensorSpec]


def _encode(header: MessageHeader, tensors: dict[str, Tensor]) -> bytes:
    header_bytes = header.model_dump_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(header_bytes)), header_bytes]
    for spec in header.tensors:
        payload = tensors[spec.name].detach().cpu().numpy().astype("<f4").tobytes(order="C")
        parts += [struct.pack("<Q", len(payload)), payload]
    return b"".join(parts)


def _decode(message: bytes, kind: str, expected: tuple[str, ...]) -> tuple[MessageHeader, dict[str, Tensor]]:
    view = memoryview(message)
    if bytes(view[:8]) != MAGIC:
        raise ProtocolError("bad magic; not a denoiser message")
    if len(view) < 12:
        raise ProtocolError("truncated header length")
    (header_length,) = struct.unpack_from("<I", view, 8)
    offset = 12 + header_length
    if len(view) < offset:
        raise ProtocolError("truncated header")
    try:
        header = MessageHeader.model_validate(json.loads(bytes(view[12:offset]).decode("utf-8")))
    except (ValidationError, ValueError) as e:
        raise ProtocolError(f"invalid header: {e}") from e
    if header.version != VERSION:
        raise ProtocolError(f"unsupported protocol version {header.version}")
    if header.kind != kind:
        raise ProtocolError(f"expected a {kind}, got a {header.kind}")
    names = tuple(spec.name for spec in header.tensors)
    if names != expected:
        raise ProtocolError(f"expected tensors {list(expected)}, got {list(names)}")

    tensors: dict[str, Tensor] = {}
    for spec in header.tensors:
        if spec.dtype != "float32":
            raise ProtocolError(f"tensor {spec.name} has unsupported dtype {spec.dtype}")
        if len(view) < offset + 8:
            raise ProtocolError(f"truncated length prefix for {spec.name}")
        (length,) = struct.unpack_from("<Q", view, offset)
        offset += 8
        if length != 4 * int(np.prod(spec.shape)):
            raise ProtocolError(f"tensor {spec.name}: {length} bytes do not match shape {spec.shape}")
        if len(view) < offset + length:
            raise ProtocolError(f"truncated payload for {spec.name}")
        array = np.frombuffer(view[offset : offset + length], dtype="<f4").reshape(spec.shape)
        tensors[spec.name] = torch.from_numpy(array.astype(np.float32))
        offset += length
    if offset != len(view):
        raise ProtocolError(f"{len(view) - offset} trailing byte(s)")
    return header, tensors


def encode_request(render: Tensor, condition: Tensor, noise: Tensor, prompt: str, timestep: float) -> bytes:
    tensors = {"render": render, "condition": condition, "noise": noise}
    header = MessageHeader(
        kind="request",
        prompt=prompt,
        timestep=timestep,
        tensors=[TensorSpec(name=name, shape=list(tensors[name].shape)) for name in REQUEST_TENSORS],
    )
    return _encode(header, tensors)


def decode_request(message: bytes) -> tuple[MessageHeader, dict[str, Tensor]]:
    return _decode(message, "request", REQUEST_TENSORS)


def encode_response(denoised: Tensor) -> bytes:
    header = MessageHeader(kind="response", tensors=[TensorSpec(name="denoised", shape=list(denoised.shape))])
    return _encode(header, {"denoised": denoised})


def decode_response(message: bytes) -> Tensor:
    _, tensors = _decode(message, "response", RESPONSE_TENSORS)
    return tensors["denoised"]
