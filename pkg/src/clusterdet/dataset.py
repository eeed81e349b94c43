"""Seeded synthetic "rubbing" and "font library" images, plus PGM/JSON storage.

Rubbing images: dark textured background, bright glyphs made of thick
connected polyline strokes, thin unlabelled crack curves of the same
intensity, and salt-and-pepper noise. Font images: one clean glyph on a flat
background. Every sample is a pure function of ``(spec.seed, index)``.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, InputError

STROKE_INTENSITY = 0.9
BACKGROUND_LEVEL = 0.12
MIN_BOX_AREA = 64


class Source(str, enum.Enum):
    RUBBING = "rubbing"
    FONT = "font"


@dataclass
class ImageSample:
    image: np.ndarray  # (H, W) float64 in [0, 1]
    boxes: np.ndarray  # (n, 4) float64
    source: Source = Source.RUBBING
    name: str = ""


@dataclass(frozen=True)
class GenSpec:
    image_size: int = 128
    glyphs_per_image: tuple = (2, 5)
    crack_count: tuple = (1, 3)
    noise_density: float = 0.02
    seed: int = 0
    font_size: int = 48
    glyph_size: tuple = (18, 40)

    def __post_init__(self):
        if self.image_size % 8 or self.font_size % 8:
            raise InputError("image_size and font_size must be divisible by 8")
        if not 0.0 <= self.noise_density <= 1.0:
            raise InputError("noise_density must be in [0, 1]")
        if self.glyph_size[1] > min(self.image_size, self.font_size) - 4:
            raise InputError("glyph_size too large for the canvas")


def _draw_segment(mask, p, q, radius):
    """OR a capsule of ``radius`` around segment p-q (x, y floats) into ``mask``."""
    h, w = mask.shape
    x0 = max(int(np.floor(min(p[0], q[0]) - radius)), 0)
    x1 = min(int(np.ceil(max(p[0], q[0]) + radius)) + 1, w)
    y0 = max(int(np.floor(min(p[1], q[1]) - radius)), 0)
    y1 = min(int(np.ceil(max(p[1], q[1]) + radius)) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1] + 0.5
    d = np.subtract(q, p)
    denom = float(d @ d)
    t = 0.0 if denom == 0 else np.clip(((xx - p[0]) * d[0] + (yy - p[1]) * d[1]) / denom, 0, 1)
    dist2 = (xx - p[0] - t * d[0]) ** 2 + (yy - p[1] - t * d[1]) ** 2
    mask[y0:y1, x0:x1] |= dist2 <= radius * radius


def _glyph_mask(rng, shape, region):
    """Random connected polyline of 3-6 thick segments inside ``region``."""
    rx1, ry1, rx2, ry2 = region
    radius = rng.uniform(1.2, 2.0)
    lo_x, hi_x = rx1 + radius, rx2 - radius
    lo_y, hi_y = ry1 + radius, ry2 - radius
    n_seg = int(rng.integers(3, 7))
    pts = rng.uniform([lo_x, lo_y], [hi_x, hi_y], size=(n_seg + 1, 2))
    mask = np.zeros(shape, dtype=bool)
    for a, b in zip(pts[:-1], pts[1:]):
        _draw_segment(mask, a, b, radius)
    return mask


def _tight_box(mask):
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def _place_glyph(rng, shape, spec, taken, margin=2):
    h, w = shape
    for _ in range(100):
        size = rng.integers(spec.glyph_size[0], spec.glyph_size[1] + 1, size=2)
        x1 = rng.integers(margin, w - size[0] - margin + 1)
        y1 = rng.integers(margin, h - size[1] - margin + 1)
        region = np.array([x1, y1, x1 + size[0], y1 + size[1]], dtype=np.float64)
        if any(
            region[0] < t[2] + margin and t[0] < region[2] + margin
            and region[1] < t[3] + margin and t[1] < region[3] + margin
            for t in taken
        ):
            continue
        mask = _glyph_mask(rng, shape, region)
        box = _tight_box(mask)
        if (box[2] - box[0]) * (box[3] - box[1]) < MIN_BOX_AREA:
            continue
        return region, box, mask
    return None


def _crack_mask(rng, shape):
    """Thin random walk entering from an image edge."""
    h, w = shape
    edge = rng.integers(4)
    t = rng.uniform(0.1, 0.9)
    start, angle = [
        ((t * w, 0.0), np.pi / 2),
        ((t * w, h), -np.pi / 2),
        ((0.0, t * h), 0.0),
        ((w, t * h), np.pi),
    ][edge]
    angle += rng.uniform(-0.6, 0.6)
    radius = rng.uniform(0.5, 0.8)
    mask = np.zeros(shape, dtype=bool)
    p = np.array(start)
    for _ in range(int(rng.integers(40, 90))):
        angle += rng.normal(0.0, 0.25)
        q = p + 2.5 * np.array([np.cos(angle), np.sin(angle)])
        _draw_segment(mask, p, q, radius)
        p = q
        if not (-2 <= p[0] <= w + 2 and -2 <= p[1] <= h + 2):
            break
    return mask


def _range(rng, bounds):
    lo, hi = bounds
    return int(rng.integers(lo, hi + 1))


def gen_rubbing(spec: GenSpec, index: int) -> ImageSample:
    rng = np.random.default_rng([spec.seed, index, 0])
    n = spec.image_size
    shape = (n, n)
    blotch = ndimage.uniform_filter(rng.normal(size=shape), size=9, mode="wrap")
    img = BACKGROUND_LEVEL + 0.15 * blotch + 0.03 * rng.normal(size=shape)
    img = np.clip(img, 0.0, 0.35)

    regions, boxes = [], []
    strokes = np.zeros(shape, dtype=bool)
    for _ in range(_range(rng, spec.glyphs_per_image)):
        placed = _place_glyph(rng, shape, spec, regions)
        if placed is None:
            break
        region, box, mask = placed
        regions.append(region)
        boxes.append(box)
        strokes |= mask
    for _ in range(_range(rng, spec.crack_count)):
        strokes |= _crack_mask(rng, shape)
    img[strokes] = STROKE_INTENSITY + 0.05 * rng.uniform(-1, 1, size=int(strokes.sum()))

    if spec.noise_density > 0:
        hit = rng.random(shape) < spec.noise_density
        img[hit] = (rng.random(int(hit.sum())) < 0.5).astype(np.float64)
    return ImageSample(
        img, np.array(boxes).reshape(-1, 4), Source.RUBBING, f"rubbing_{index:05d}"
    )


def gen_font(spec: GenSpec, index: int) -> ImageSample:
    """One clean glyph on a flat zero background; the tight box is the label."""
    rng = np.random.default_rng([spec.seed, index, 1])
    n = spec.font_size
    img = np.zeros((n, n))
    placed = None
    while placed is None:
        placed = _place_glyph(rng, (n, n), spec, [])
    _, box, mask = placed
    img[mask] = STROKE_INTENSITY
    return ImageSample(img, box[None, :], Source.FONT, f"font_{index:05d}")


def generate(spec: GenSpec, kind: str, count: int) -> list[ImageSample]:
    fn = {"rubbing": gen_rubbing, "font": gen_font}.get(kind)
    if fn is None:
        raise InputError(f"unknown dataset kind {kind!r}")
    return [fn(spec, i) for i in range(count)]


# ---------------------------------------------------------------------------
# PGM + annotations.json


def write_pgm(path, image) -> None:
    data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM into floats in [0, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    pos = 0
    fields = []
    for name in ("magic", "width", "height", "maxval"):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise FormatError(path, pos, f"missing {name} in header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise FormatError(path, 0, f"expected P5 magic, got {fields[0][:8]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError(path, pos, "non-numeric header field") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise FormatError(path, pos, f"unsupported header {w}x{h} maxval {maxval}")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError(path, pos, "missing whitespace after header")
    pos += 1
    body = raw[pos:]
    if len(body) < w * h:
        raise FormatError(path, pos + len(body), f"truncated pixel data: need {w * h} bytes, found {len(body)}")
    pixels = np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w)
    return pixels.astype(np.float64) / maxval


def _json_box(box):
    return [int(v) if float(v).is_integer() else float(v) for v in box]


def save_dataset(samples, directory) -> None:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {directory}: {exc}") from exc
    records = []
    for i, sample in enumerate(samples):
        name = f"{sample.name or f'image_{i:05d}'}.pgm"
        write_pgm(directory / name, sample.image)
        records.append({"file": name, "boxes": [_json_box(b) for b in sample.boxes]})
    text = json.dumps({"images": records}, indent=1)
    (directory / "annotations.json").write_text(text + "\n")


def load_dataset(directory, source: Source | str = Source.RUBBING) -> list[ImageSample]:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"dataset directory {directory} does not exist")
    ann = directory / "annotations.json"
    if not ann.exists():
        return []
    text = ann.read_text()
    try:
        meta = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise FormatError(ann, offset, exc.msg) from None
    if not isinstance(meta, dict) or not isinstance(meta.get("images"), list):
        raise FormatError(ann, 0, "expected an object with an 'images' list")
    samples = []
    for rec in meta["images"]:
        try:
            name = rec["file"]
            boxes = np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(ann, 0, f"bad image record {rec!r}: {exc}") from None
        image = read_pgm(directory / name)
        samples.append(ImageSample(image, boxes, Source(source), Path(name).stem))
    return samples
