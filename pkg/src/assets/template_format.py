"""
Binary body template format (little-endian).

Header, struct ``<8s6I``::

    magic       b"SOARTPL\\0"
    version     1
    V F J K S   vertex, face, joint, keypoint and shape-component counts

followed by the arrays, row-major:

    vertices     float64 (V, 3)   rest pose, meters
    faces        int32   (F, 3)
    parents      int32   (J,)     -1 for the root
    joints       float64 (J, 3)   rest joint locations
    weights      float64 (V, J)   skinning weights, rows sum to 1
    regressor    float64 (K, V)   keypoint regressor, rows sum to 1
    shape_basis  float64 (V, 3, S)

There is no normals section; vertex normals follow from the faces and their
winding.
"""

import struct
from pathlib import Path

import numpy as np
import torch

from assets.io import atomic_write_bytes
from body.template import BodyTemplate
from core.errors import TemplateError

MAGIC = b"SOARTPL\0"
VERSION = 1
HEADER = struct.Struct("<8s6I")


def _layout(V: int, F: int, J: int, K: int, S: int) -> list[tuple[str, str, tuple[int, ...]]]:
    return [
        ("vertices", "<f8", (V, 3)),
        ("faces", "<i4", (F, 3)),
        ("parents", "<i4", (J,)),
        ("joints", "<f8", (J, 3)),
        ("weights", "<f8", (V, J)),
        ("regressor", "<f8", (K, V)),
        ("shape_basis", "<f8", (V, 3, S)),
    ]


def encode_template(template: BodyTemplate) -> bytes:
    V, F, J = template.num_vertices, template.faces.shape[0], template.num_joints
    K, S = template.num_keypoints, template.num_shape_components
    parts = [HEADER.pack(MAGIC, VERSION, V, F, J, K, S)]
    for name, dtype, shape in _layout(V, F, J, K, S):
        array = getattr(template, name).detach().cpu().numpy()
        parts.append(np.ascontiguousarray(array.reshape(shape), dtype=dtype).tobytes())
    return b"".join(parts)


def decode_template(data: bytes, path: str | None = None) -> BodyTemplate:
    if len(data) < HEADER.size:
        raise TemplateError("file shorter than the header", path)
    magic, version, V, F, J, K, S = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TemplateError("bad magic; not a body template", path)
    if version != VERSION:
        raise TemplateError(f"unsupported template version {version}", path)

    layout = _layout(V, F, J, K, S)
    expected = HEADER.size + sum(np.dtype(dtype).itemsize * int(np.prod(shape)) for _, dtype, shape in layout)
    if len(data) != expected:
        raise TemplateError(f"expected {expected} bytes for V={V} F={F} J={J} K={K} S={S}, got {len(data)}", path)

    arrays = {}
    offset = HEADER.size
    for name, dtype, shape in layout:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape)
        offset += count * np.dtype(dtype).itemsize

    try:
        return BodyTemplate(
            vertices=torch.from_numpy(arrays["vertices"].astype(np.float64)),
            faces=torch.from_numpy(arrays["faces"].astype(np.int64)),
            parents=torch.from_numpy(arrays["parents"].astype(np.int64)),
            joints=torch.from_numpy(arrays["joints"].astype(np.float64)),
            weights=torch.from_numpy(arrays["weights"].astype(np.float64)),
            regressor=torch.from_numpy(arrays["regressor"].astype(np.float64)),
            shape_basis=torch.from_numpy(arrays["shape_basis"].astype(np.float64)),
        )
    except TemplateError as e:
        raise TemplateError(e.reason, path) from e


def save_template(path: str | Path, template: BodyTemplate) -> Path:
    return atomic_write_bytes(path, encode_template(template))


def load_template(path: str | Path) -> BodyTemplate:
    path = Path(path)
    if not path.is_file():
        raise TemplateError("file not found", str(path))
    return decode_template(path.read_bytes(), str(path))
