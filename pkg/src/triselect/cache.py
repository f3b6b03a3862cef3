"""Binary sidecar cache for descriptor sets.

Layout, all little-endian::

    magic      4 bytes  b"TSDC"
    version    u16      currently 1
    n          u32      number of keypoints
    kp_fields  u16      floats per keypoint (5: x, y, scale, orientation, response)
    dim        u16      descriptor length (128)
    payload    f32      n * kp_fields keypoint values, then n * dim descriptor values

Entries are keyed by the SHA-256 of the image bytes together with the
extractor parameters, so an edited image or a changed setting misses the
cache instead of returning stale descriptors. Values are stored as f32; a
loaded set is the f32-rounded version of the computed one.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import astuple
from pathlib import Path

import numpy as np

from .visual import DESCRIPTOR_SIZE, DescriptorSet, ExtractorParams, Keypoint

MAGIC = b"TSDC"
VERSION = 1
KP_FIELDS = 5
_HEADER = struct.Struct("<4sHIHH")


class CacheFormatError(ValueError):
    pass


def cache_key(image_bytes: bytes, params: ExtractorParams) -> str:
    h = hashlib.sha256()
    h.update(image_bytes)
    h.update(repr(astuple(params)).encode("ascii"))
    return h.hexdigest()


def encode(ds: DescriptorSet) -> bytes:
    n = len(ds)
    kp = np.array([[k.x, k.y, k.scale, k.orientation, k.response] for k in ds.keypoints],
                  dtype="<f4").reshape(n, KP_FIELDS)
    desc = np.asarray(ds.descriptors, dtype="<f4").reshape(n, DESCRIPTOR_SIZE)
    return _HEADER.pack(MAGIC, VERSION, n, KP_FIELDS, DESCRIPTOR_SIZE) + kp.tobytes() + desc.tobytes()


def decode(data: bytes, pid=None) -> DescriptorSet:
    if len(data) < _HEADER.size:
        raise CacheFormatError("truncated header")
    magic, version, n, fields, dim = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CacheFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CacheFormatError(f"unsupported version {version}")
    if fields != KP_FIELDS or dim != DESCRIPTOR_SIZE:
        raise CacheFormatError(f"unexpected layout ({fields} keypoint fields, dim {dim})")
    expected = _HEADER.size + 4 * n * (fields + dim)
    if len(data) != expected:
        raise CacheFormatError(f"payload is {len(data)} bytes, expected {expected}")
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    kp = body[:n * fields].reshape(n, fields).astype(np.float64)
    desc = body[n * fields:].reshape(n, dim).astype(np.float64)
    keypoints = [Keypoint(*map(float, row)) for row in kp]
    return DescriptorSet(pid, keypoints, desc)


class DescriptorCache:
    """Directory of ``<key>.tsdc`` files."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        return self.root / f"{key}.tsdc"

    def get(self, key: str, pid=None):
        p = self.path(key)
        if not p.is_file():
            return None
        try:
            return decode(p.read_bytes(), pid)
        except CacheFormatError:
            return None

    def put(self, key: str, ds: DescriptorSet) -> DescriptorSet:
        """Store `ds` and return the set as it will read back."""
        data = encode(ds)
        tmp = self.path(key).with_suffix(".tmp")
        tmp.write_bytes(data)
        tmp.replace(self.path(key))
        return decode(data, ds.pid)
