"""Dense image and flow containers plus 8-bit image I/O.

Frames are planar float64 arrays of shape (channels, height, width) with
values in [0, 1]; flow fields are two (height, width) planes of pixel
displacements from frame t-1 toward frame t. 8-bit conversion is v/255 on
the way in and round-half-away-from-zero on the way out.
"""

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Frame:
    """Planar image: data has shape (channels, height, width), channels 1 or 3."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] not in (1, 3):
            raise ValueError(f"frame data must be (1|3, H, W), got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    def validate(self):
        """Full invariants, enforced at I/O and sequence boundaries."""
        if self.height < 8 or self.width < 8:
            raise ValueError(f"frame smaller than 8x8: {self.height}x{self.width}")
        if not np.isfinite(self.data).all():
            raise ValueError("frame contains non-finite values")
        if self.data.min() < -1e-9 or self.data.max() > 1.0 + 1e-9:
            raise ValueError("frame values outside [0, 1]")
        return self

    def luma(self):
        """Single grayscale plane (H, W)."""
        if self.channels == 1:
            return self.data[0]
        return np.tensordot(LUMA, self.data, axes=(0, 0))


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement planes dx, dy of shape (height, width)."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        dx = np.asarray(self.dx, dtype=np.float64)
        dy = np.asarray(self.dy, dtype=np.float64)
        if dx.ndim != 2 or dx.shape != dy.shape:
            raise ValueError(f"flow planes must match: {dx.shape} vs {dy.shape}")
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)

    @property
    def height(self):
        return self.dx.shape[0]

    @property
    def width(self):
        return self.dx.shape[1]

    def validate(self):
        if not (np.isfinite(self.dx).all() and np.isfinite(self.dy).all()):
            raise ValueError("flow contains non-finite values")
        bound = float(self.width)
        if np.abs(self.dx).max() > bound or np.abs(self.dy).max() > bound:
            raise ValueError("flow magnitude exceeds the image width")
        return self

    @classmethod
    def zeros(cls, height, width):
        return cls(np.zeros((height, width)), np.zeros((height, width)))


def to_unit(arr8):
    """uint8 -> float64 in [0, 1]."""
    return np.asarray(arr8, dtype=np.float64) / 255.0


def from_unit(arr):
    """float in [0, 1] -> uint8, rounding half away from zero."""
    v = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def read_image(path):
    path = str(path)
    if path.endswith((".ppm", ".pgm")):
        return _read_pnm(path)
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB") if ("A" in img.mode or img.mode == "P") else img.convert("L")
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return Frame(to_unit(arr)).validate()


def write_image(path, frame):
    path = str(path)
    arr8 = from_unit(frame.data)
    if path.endswith((".ppm", ".pgm")):
        _write_pnm(path, arr8)
        return
    if arr8.shape[0] == 1:
        Image.fromarray(arr8[0], mode="L").save(path)
    else:
        Image.fromarray(arr8.transpose(1, 2, 0), mode="RGB").save(path)


def _read_pnm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM magic {magic!r} in {path}")
    if maxval != 255:
        raise ValueError(f"only 8-bit PNM supported, maxval={maxval} in {path}")
    channels = 1 if magic == b"P5" else 3
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w * channels, offset=pos)
    arr = raw.reshape(h, w, channels).transpose(2, 0, 1)
    return Frame(to_unit(arr)).validate()


def _write_pnm(path, arr8):
    channels, h, w = arr8.shape
    magic = b"P5" if channels == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(arr8.transpose(1, 2, 0).tobytes())


FLOW_MAGIC = b"FLOWv1\x00\x00"


def write_flow(path, flow):
    """FLOWv1 dump: 16-byte header (magic, H, W little-endian), then the dx
    and dy planes as 32-bit floats."""
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<II", flow.height, flow.width))
        fh.write(flow.dx.astype("<f4").tobytes())
        fh.write(flow.dy.astype("<f4").tobytes())


def read_flow(path):
    with open(path, "rb") as fh:
        header = fh.read(16)
        if header[:8] != FLOW_MAGIC:
            raise ValueError(f"bad flow magic in {path}")
        h, w = struct.unpack("<II", header[8:16])
        n = h * w
        dx = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(h, w)
        dy = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(h, w)
    return FlowField(dx.astype(np.float64), dy.astype(np.float64))
