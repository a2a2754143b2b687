"""Images, invertible affine geometry, warping and synthetic datasets.

Images are plain numpy arrays of shape ``(H, W)`` (grayscale) or
``(H, W, 3)`` with intensities in ``[0, 1]``.  Coordinates follow the
pixel-center convention: ``(x, y)`` refers to the center of the pixel in
column ``x`` and row ``y``; ``y`` grows downwards.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_image

__all__ = [
    "GeometricTransform",
    "LabeledDataset",
    "parse_transform",
    "transform_point",
    "warp",
    "to_gray",
    "synth_classification_set",
    "synth_generic_images",
    "synth_pose_set",
    "pose_template",
    "read_pnm",
    "write_pnm",
    "read_image",
    "save_dataset",
    "load_dataset",
]


def _exact_cos_sin(angle_deg):
    # multiples of 90 degrees must be lattice-exact
    a = angle_deg % 360.0
    if a == 0.0:
        return 1.0, 0.0
    if a == 90.0:
        return 0.0, 1.0
    if a == 180.0:
        return -1.0, 0.0
    if a == 270.0:
        return 0.0, -1.0
    r = math.radians(angle_deg)
    return math.cos(r), math.sin(r)


@dataclass(frozen=True)
class GeometricTransform:
    """Invertible 2D affine transform acting on image-plane points.

    ``matrix`` is the 2x3 array ``[L | t]`` so that a point ``p`` maps to
    ``L @ p + t``.
    """

    matrix: np.ndarray
    name: str = ""

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("affine matrix has non-finite entries")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def linear(self):
        return self.matrix[:, :2]

    @property
    def translation(self):
        return self.matrix[:, 2]

    @property
    def det(self):
        L = self.linear
        return float(L[0, 0] * L[1, 1] - L[0, 1] * L[1, 0])

    def is_invertible(self):
        return abs(self.det) > 1e-12

    def apply(self, points):
        """Map an ``(..., 2)`` array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.linear.T + self.translation

    def inverse(self):
        d = self.det
        if abs(d) <= 1e-12:
            raise ValueError(f"transform {self.name or ''} is not invertible (det={d:g})")
        (a, b), (c, e) = self.linear
        inv = np.array([[e, -b], [-c, a]]) / d
        t = -inv @ self.translation
        name = f"inv({self.name})" if self.name else ""
        return GeometricTransform(np.column_stack([inv, t]), name)

    def compose(self, other):
        """Return ``self o other`` (apply ``other`` first)."""
        L = self.linear @ other.linear
        t = self.linear @ other.translation + self.translation
        return GeometricTransform(np.column_stack([L, t]))

    def __matmul__(self, other):
        return self.compose(other)

    @classmethod
    def identity(cls):
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), "id")

    @classmethod
    def from_linear(cls, linear, center=(0.0, 0.0), name=""):
        """Linear map about ``center``: ``p -> L (p - c) + c``."""
        L = np.asarray(linear, dtype=np.float64)
        c = np.asarray(center, dtype=np.float64)
        return cls(np.column_stack([L, c - L @ c]), name)

    @classmethod
    def rotation(cls, angle_deg, center=(0.0, 0.0)):
        """Rotation by ``angle_deg``, counter-clockwise as seen on screen."""
        c, s = _exact_cos_sin(angle_deg)
        return cls.from_linear([[c, s], [-s, c]], center, f"rot:{angle_deg:g}")

    @classmethod
    def scaling(cls, sx, sy=None, center=(0.0, 0.0)):
        sy = sx if sy is None else sy
        return cls.from_linear([[sx, 0.0], [0.0, sy]], center, f"scale:{sx:g}")

    @classmethod
    def translation_by(cls, dx, dy):
        return cls(np.array([[1.0, 0.0, dx], [0.0, 1.0, dy]]), f"translate:{dx:g},{dy:g}")

    @classmethod
    def hflip(cls, width):
        """Mirror about the vertical axis through the center of a ``width`` image."""
        return cls(np.array([[-1.0, 0.0, width - 1.0], [0.0, 1.0, 0.0]]), "hflip")

    @classmethod
    def vflip(cls, height):
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, -1.0, height - 1.0]]), "vflip")

    def to_json(self):
        return {"matrix": self.matrix.tolist(), "name": self.name}

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, dict):
            return cls(np.array(obj["matrix"]), obj.get("name", ""))
        return cls(np.array(obj))

    def __eq__(self, other):
        if not isinstance(other, GeometricTransform):
            return NotImplemented
        return bool(np.array_equal(self.matrix, other.matrix))

    def __hash__(self):
        return hash(self.matrix.tobytes())

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"GeometricTransform({self.matrix.tolist()}{label})"


def image_center(shape):
    h, w = shape[:2]
    return ((w - 1) / 2.0, (h - 1) / 2.0)


def parse_transform(spec, shape):
    """Parse a transform description such as ``rot:45`` for an image of ``shape``.

    Recognized forms: ``id``, ``hflip``, ``vflip``, ``rot180``, ``rot90``,
    ``rot:<deg>``, ``scale:<s>``, ``translate:<dx>,<dy>``, and compositions
    joined by ``+`` (applied left to right).  Rotations and scalings are
    taken about the image center.
    """
    if isinstance(spec, GeometricTransform):
        return spec
    h, w = shape[:2]
    center = image_center(shape)
    g = GeometricTransform.identity()
    for part in str(spec).split("+"):
        part = part.strip().lower()
        if part in ("id", "identity", ""):
            t = GeometricTransform.identity()
        elif part == "hflip":
            t = GeometricTransform.hflip(w)
        elif part == "vflip":
            t = GeometricTransform.vflip(h)
        elif part.startswith("rot") and part[3:].lstrip(":").replace(".", "", 1).lstrip("-").isdigit():
            t = GeometricTransform.rotation(float(part[3:].lstrip(":")), center)
        elif part.startswith("scale:"):
            t = GeometricTransform.scaling(float(part[6:]), center=center)
        elif part.startswith("translate:"):
            dx, dy = (float(v) for v in part[10:].split(","))
            t = GeometricTransform.translation_by(dx, dy)
        else:
            raise ValueError(f"unrecognized transform {part!r}")
        g = t.compose(g)
    return GeometricTransform(g.matrix, str(spec))


def transform_point(g, p):
    """Affine image of the point ``p = (x, y)`` under ``g``."""
    return tuple(g.apply(np.asarray(p, dtype=np.float64)).tolist())


def warp(x, g, interp="bilinear", pad="zero"):
    """Inverse-warp image ``x`` by ``g``.

    The output pixel at ``q`` is sampled from ``x`` at ``g^-1(q)``; the output
    has the same size as the input.  ``pad`` is ``"zero"`` or ``"replicate"``.
    """
    x = check_image(x)
    if interp not in ("nearest", "bilinear"):
        raise ValueError(f"interp must be 'nearest' or 'bilinear', got {interp!r}")
    if pad not in ("zero", "replicate"):
        raise ValueError(f"pad must be 'zero' or 'replicate', got {pad!r}")
    ginv = g.inverse()
    h, w = x.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    L, t = ginv.linear, ginv.translation
    sx = L[0, 0] * xs + L[0, 1] * ys + t[0]
    sy = L[1, 0] * xs + L[1, 1] * ys + t[1]
    img = x if x.ndim == 3 else x[:, :, None]

    def sample(ix, iy):
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        cx = np.clip(ix, 0, w - 1)
        cy = np.clip(iy, 0, h - 1)
        vals = img[cy, cx]
        if pad == "zero":
            vals = np.where(inside[..., None], vals, 0.0)
        return vals

    if interp == "nearest":
        out = sample(np.floor(sx + 0.5).astype(np.int64), np.floor(sy + 0.5).astype(np.int64))
    else:
        x0 = np.floor(sx)
        y0 = np.floor(sy)
        ax = (sx - x0)[..., None]
        ay = (sy - y0)[..., None]
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        top = sample(x0, y0) * (1.0 - ax) + sample(x0 + 1, y0) * ax
        bot = sample(x0, y0 + 1) * (1.0 - ax) + sample(x0 + 1, y0 + 1) * ax
        out = top * (1.0 - ay) + bot * ay
    out = np.clip(out, 0.0, 1.0)
    return out if x.ndim == 3 else out[:, :, 0]


def to_gray(x):
    x = check_image(x)
    if x.ndim == 2:
        return x
    return x @ np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class LabeledDataset:
    """A batch of images with class labels or pose transforms.

    ``images`` has shape ``(N, H, W)`` or ``(N, H, W, 3)``.  ``labels`` holds
    class indices for classification sets and ``None`` for pose sets, whose
    ground truth lives in ``poses`` (a list of :class:`GeometricTransform`).
    """

    images: np.ndarray
    labels: np.ndarray | None = None
    poses: list | None = None
    split: str = "train"
    seed: int = 0
    num_classes: int | None = None
    kind: str = "class"
    angles: np.ndarray | None = None
    sources: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def __post_init__(self):
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.num_classes is not None and len(self.labels):
                if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                    raise ValueError("labels out of range")


def _split_rng(seed, split, salt=0):
    code = {"train": 0, "test": 1, "val": 2}.get(split, 3)
    return np.random.default_rng([int(seed), code, salt])


def _supersampled_mask(h, w, inside_fn, ss=2):
    """Antialiased coverage of the region where ``inside_fn(x, y)`` holds."""
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    acc = np.zeros((h, w))
    for oy in offs:
        for ox in offs:
            acc += inside_fn(xs + ox, ys + oy)
    return acc / (ss * ss)


def _triangle_fn(center, size, angle):
    """Isosceles triangle pointing along ``angle`` (radians, y down)."""
    cx, cy = center
    d = np.array([math.cos(angle), math.sin(angle)])
    n = np.array([-d[1], d[0]])
    tip = np.array([cx, cy]) + d * size
    base_c = np.array([cx, cy]) - d * size * 0.6
    b1 = base_c + n * size * 0.75
    b2 = base_c - n * size * 0.75
    verts = [tip, b1, b2]

    def inside(x, y):
        s = []
        for i in range(3):
            (x1, y1), (x2, y2) = verts[i], verts[(i + 1) % 3]
            s.append((x2 - x1) * (y - y1) - (y2 - y1) * (x - x1))
        s = np.stack(s)
        return (np.all(s >= 0, axis=0) | np.all(s <= 0, axis=0)).astype(np.float64)

    return inside


def _ellipse_fn(center, radii, angle):
    cx, cy = center
    c, s = math.cos(angle), math.sin(angle)

    def inside(x, y):
        dx, dy = x - cx, y - cy
        u = (c * dx + s * dy) / radii[0]
        v = (-s * dx + c * dy) / radii[1]
        return (u * u + v * v <= 1.0).astype(np.float64)

    return inside


def _bar_fn(center, length, width, angle):
    cx, cy = center
    c, s = math.cos(angle), math.sin(angle)

    def inside(x, y):
        dx, dy = x - cx, y - cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return ((np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)).astype(np.float64)

    return inside


def _smooth_noise(rng, h, w, scale=4):
    coarse = rng.standard_normal((h // scale + 2, w // scale + 2))
    ys = np.linspace(0, coarse.shape[0] - 1.001, h)
    xs = np.linspace(0, coarse.shape[1] - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    c = coarse
    top = c[y0][:, x0] * (1 - fx) + c[y0][:, x0 + 1] * fx
    bot = c[y0 + 1][:, x0] * (1 - fx) + c[y0 + 1][:, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _paint(img, mask, value):
    return img * (1.0 - mask) + value * mask


def synth_classification_set(seed, n, num_classes=2, size=64, split="train", clutter=2, noise=0.04):
    """Balanced classification set of oriented-triangle scenes.

    Class ``c`` shows one to three bright triangles pointing along
    ``90 + 360 c / num_classes`` degrees (down for ``c = 0``, up for ``c = 1``
    when there are two classes), with +-20 degrees of jitter, random size and
    placement inside the central disk, over smooth background texture and
    class-agnostic bar distractors.
    """
    if n < num_classes:
        raise ValueError(f"n={n} must be at least num_classes={num_classes}")
    rng = _split_rng(seed, split, 11)
    labels = np.arange(n) % num_classes
    labels = labels[rng.permutation(n)]
    h = w = int(size)
    cx, cy = image_center((h, w))
    radius = 0.42 * size
    images = np.empty((n, h, w))
    for i, c in enumerate(labels):
        img = 0.25 + 0.06 * _smooth_noise(rng, h, w, max(2, size // 8))
        for _ in range(rng.integers(0, clutter + 1)):
            r = radius * math.sqrt(rng.uniform()) * 0.9
            a = rng.uniform(0, 2 * math.pi)
            ctr = (cx + r * math.cos(a), cy + r * math.sin(a))
            bar = _bar_fn(ctr, rng.uniform(0.15, 0.35) * size, rng.uniform(1.0, 2.0),
                          rng.uniform(0, math.pi))
            img = _paint(img, _supersampled_mask(h, w, bar), rng.uniform(0.45, 0.75))
        direction = math.radians(90.0 + 360.0 * c / num_classes)
        for _ in range(rng.integers(1, 4)):
            tri_size = rng.uniform(0.09, 0.16) * size
            r = (radius - tri_size) * math.sqrt(rng.uniform())
            a = rng.uniform(0, 2 * math.pi)
            ctr = (cx + r * math.cos(a), cy + r * math.sin(a))
            ang = direction + math.radians(rng.uniform(-20, 20))
            img = _paint(img, _supersampled_mask(h, w, _triangle_fn(ctr, tri_size, ang)),
                         rng.uniform(0.7, 0.95))
        img = img + noise * rng.standard_normal((h, w))
        images[i] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, labels, split=split, seed=int(seed), num_classes=num_classes,
                          kind="class", meta={"size": size})


def synth_generic_images(seed, n, size=64, split="train"):
    """Unlabeled "natural-looking" clutter used to learn equivariant maps.

    Mixes smooth texture, ellipses, bars and triangles of random orientation,
    contrast and scale, so that no orientation is privileged.
    """
    rng = _split_rng(seed, split, 23)
    h = w = int(size)
    images = np.empty((n, h, w))
    for i in range(n):
        img = 0.5 + 0.12 * _smooth_noise(rng, h, w, int(rng.integers(3, 9)))
        for _ in range(rng.integers(4, 9)):
            ctr = (rng.uniform(0, w), rng.uniform(0, h))
            kind = rng.integers(3)
            if kind == 0:
                fn = _ellipse_fn(ctr, rng.uniform(2, 0.25 * size, 2), rng.uniform(0, math.pi))
            elif kind == 1:
                fn = _bar_fn(ctr, rng.uniform(0.1, 0.5) * size, rng.uniform(1, 5), rng.uniform(0, math.pi))
            else:
                fn = _triangle_fn(ctr, rng.uniform(0.05, 0.2) * size, rng.uniform(0, 2 * math.pi))
            img = _paint(img, _supersampled_mask(h, w, fn), rng.uniform(0, 1))
        img = img + 0.02 * rng.standard_normal((h, w))
        images[i] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, None, split=split, seed=int(seed), kind="generic")


def pose_template(size=64):
    """Canonical upright face-like pattern, confined to the central disk.

    Asymmetric under every non-trivial rotation: two eyes above a nose
    triangle pointing down and a mouth bar, inside an elliptic head.
    """
    h = w = int(size)
    cx, cy = image_center((h, w))
    s = size / 64.0
    img = np.zeros((h, w))
    img = _paint(img, _supersampled_mask(h, w, _ellipse_fn((cx, cy), (22 * s, 26 * s), 0.0)), 0.35)
    for ex in (-9, 9):
        img = _paint(img, _supersampled_mask(h, w, _ellipse_fn((cx + ex * s, cy - 8 * s), (4.5 * s, 3 * s), 0.0)), 0.9)
    img = _paint(img, _supersampled_mask(h, w, _triangle_fn((cx, cy + 2 * s), 5 * s, math.pi / 2)), 0.8)
    img = _paint(img, _supersampled_mask(h, w, _bar_fn((cx, cy + 13 * s), 14 * s, 2.5 * s, 0.0)), 0.1)
    img = _paint(img, _supersampled_mask(h, w, _ellipse_fn((cx, cy - 27 * s), (4 * s, 3 * s), 0.0)), 0.6)
    return img


def synth_pose_set(seed, n, family="rotation", size=64, split="train", noise=0.03):
    """Pose-estimation items: a perturbed canonical template warped by a known pose.

    For ``family="rotation"`` the angles are stratified-uniform over
    ``[0, 360)`` (one draw per ``360/n`` slot, then shuffled).  For
    ``family="affine"`` poses are drawn from the fixed affine pose set.
    Each item's unwarped image is kept in ``sources`` so that
    ``warp(sources[i], poses[i]) == images[i]``.
    """
    from .structreg import build_pose_set

    rng = _split_rng(seed, split, 37)
    h = w = int(size)
    base = pose_template(size)
    cx, cy = image_center((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    disk = ((xx - cx) ** 2 + (yy - cy) ** 2 <= (0.48 * size) ** 2).astype(np.float64)
    if family == "rotation":
        angles = (np.arange(n) + rng.uniform(size=n)) * (360.0 / n)
        angles = angles[rng.permutation(n)] % 360.0
        poses = [GeometricTransform.rotation(float(a), (cx, cy)) for a in angles]
    elif family == "affine":
        pose_set = build_pose_set("affine", size)
        idx = rng.integers(len(pose_set), size=n)
        poses = [pose_set[j] for j in idx]
        angles = None
    else:
        raise ValueError(f"unknown pose family {family!r}")
    sources = np.empty((n, h, w))
    images = np.empty((n, h, w))
    for i, g in enumerate(poses):
        src = base * rng.uniform(0.8, 1.1) + noise * rng.standard_normal((h, w))
        src = src + 0.08 * _smooth_noise(rng, h, w, 6)
        src = np.clip(src, 0.0, 1.0) * disk
        sources[i] = src
        images[i] = warp(src, g, interp="bilinear", pad="zero")
    return LabeledDataset(images, None, poses=poses, split=split, seed=int(seed), kind=f"pose-{family}",
                          angles=angles, sources=sources, meta={"size": size, "family": family})


# ---------------------------------------------------------------------------
# file formats


def write_pnm(path, x):
    """Write an image as binary PGM (P5, grayscale) or PPM (P6, RGB), 8 bit."""
    x = check_image(x)
    data = np.round(x * 255.0).astype(np.uint8)
    magic = b"P5" if x.ndim == 2 else b"P6"
    h, w = x.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _pnm_tokens(buf, count, pos):
    out = []
    while len(out) < count:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while buf[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        out.append(buf[start:pos])
    return out, pos


def read_pnm(path):
    """Read a binary PGM/PPM file into a float image in ``[0, 1]``."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pnm_tokens(buf, 4, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    w, h, maxval = int(w), int(h), int(maxval)
    pos += 1
    channels = 1 if magic == b"P5" else 3
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = w * h * channels
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).astype(np.float64) / maxval
    return data.reshape(h, w) if channels == 1 else data.reshape(h, w, 3)


def read_image(path):
    """Read PGM/PPM natively, anything else (PNG) through Pillow."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        return read_pnm(path)
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        mode = "L" if im.mode in ("L", "LA", "I", "1") else "RGB"
        return np.asarray(im.convert(mode), dtype=np.float64) / 255.0


def save_dataset(ds, directory):
    """Write ``ds`` as one image per item plus an ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    items = []
    for i, img in enumerate(ds.images):
        ext = "pgm" if img.ndim == 2 else "ppm"
        fname = f"{ds.split}_{i:05d}.{ext}"
        write_pnm(directory / fname, img)
        item = {"file": fname, "split": ds.split, "seed": ds.seed}
        if ds.labels is not None:
            item["label"] = int(ds.labels[i])
        if ds.poses is not None:
            item["pose"] = ds.poses[i].matrix.tolist()
        items.append(item)
    index = {"kind": ds.kind, "num_classes": ds.num_classes, "items": items}
    (directory / "index.json").write_text(json.dumps(index, indent=1))
    return directory / "index.json"


def load_dataset(directory, split=None):
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    items = [it for it in index["items"] if split is None or it["split"] == split]
    if not items:
        raise ValueError(f"no items for split {split!r} in {directory}")
    images = np.stack([read_pnm(directory / it["file"]) for it in items])
    labels = np.array([it["label"] for it in items]) if "label" in items[0] else None
    poses = [GeometricTransform(np.array(it["pose"])) for it in items] if "pose" in items[0] else None
    return LabeledDataset(images, labels, poses=poses, split=items[0]["split"], seed=items[0]["seed"],
                          num_classes=index.get("num_classes"), kind=index.get("kind", "class"))
