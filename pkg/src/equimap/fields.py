"""Feature fields and their receptive-field geometry."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Geometry", "FeatureField", "write_field", "read_field", "write_tensor", "read_tensor"]

MAGIC = b"EQF1"


@dataclass(frozen=True)
class Geometry:
    """Affine map ``p(u, v) = (stride * u + ox, stride * v + oy)``.

    ``u`` indexes columns (image x) and ``v`` rows (image y).
    """

    stride: float = 1.0
    offset: tuple = (0.0, 0.0)

    def to_image(self, uv):
        uv = np.asarray(uv, dtype=np.float64)
        return uv * self.stride + np.asarray(self.offset, dtype=np.float64)

    def to_grid(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        return (xy - np.asarray(self.offset, dtype=np.float64)) / self.stride

    def then_conv(self, kernel, stride=1, pad=0):
        """Geometry of a layer with the given kernel/stride/pad applied on top."""
        shift = self.stride * ((kernel - 1) / 2.0 - pad)
        ox, oy = self.offset
        return Geometry(self.stride * stride, (ox + shift, oy + shift))


@dataclass(frozen=True)
class FeatureField:
    """An ``H x W x D`` feature array plus its receptive-field geometry.

    ``data[v, u, t]`` is channel ``t`` at grid site ``(u, v)``.
    """

    data: np.ndarray
    geometry: Geometry = Geometry()

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError(f"feature data must be H x W x D, got shape {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape

    @property
    def H(self):
        return self.data.shape[0]

    @property
    def W(self):
        return self.data.shape[1]

    @property
    def D(self):
        return self.data.shape[2]

    def flat(self):
        return self.data.reshape(-1)


def write_field(path, field):
    """Serialize a field: ``EQF1`` header then float64 data, little-endian.

    Header: magic, H, W, D (uint32), stride, offset x, offset y (float64).
    Data are written with ``u`` as the outer spatial index and ``v``
    fastest among spatial indices, channel innermost.
    """
    g = field.geometry
    H, W, D = field.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<3I3d", H, W, D, g.stride, *g.offset))
        f.write(np.ascontiguousarray(field.data.transpose(1, 0, 2)).astype("<f8").tobytes())


def read_field(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}")
    H, W, D, stride, ox, oy = struct.unpack_from("<3I3d", buf, 4)
    off = 4 + struct.calcsize("<3I3d")
    data = np.frombuffer(buf, dtype="<f8", count=H * W * D, offset=off)
    data = data.reshape(W, H, D).transpose(1, 0, 2).astype(np.float64)
    return FeatureField(data, Geometry(stride, (ox, oy)))


def write_tensor(path, arr):
    """Store an arbitrary array in the ``EQF1`` container, viewed as 3-D."""
    a = np.atleast_1d(np.asarray(arr, dtype=np.float64))
    rest = a.shape[1:]
    last = rest[-1] if rest else 1
    mid = int(np.prod(rest[:-1])) if len(rest) > 1 else 1
    write_field(path, FeatureField(a.reshape(a.shape[0], mid, last)))
    return list(a.shape)


def read_tensor(path, shape):
    return read_field(path).data.reshape(shape)
