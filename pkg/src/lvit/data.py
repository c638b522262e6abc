"""MSTAR-style image ingestion, preprocessing and a synthetic speckled stand-in.

Label indices come from lexicographically sorted class-directory names, so two
runs over the same tree always agree on the confusion-matrix layout.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import RngState
from .errors import ContractError, FormatError, IngestError, ParameterError, TruncationError

log = logging.getLogger(__name__)

IMAGE_SIZE = 48
LUMA = (0.299, 0.587, 0.114)
PHOENIX_END = "[EndofPhoenixHeader]"
PREPROCESS_MODES = ("crop-resize", "crop", "resize")

SYNTH_CLASSES = 10
SYNTH_ANGLE_STEP = 18.0
SYNTH_BAR_WIDTH = 6.0
SYNTH_BAR_LENGTH = 36.0
SYNTH_BACKGROUND = 0.1


@dataclass
class Sample:
    image: np.ndarray
    label: int
    source_id: str


@dataclass
class Dataset:
    samples: list[Sample]
    label_names: list[str]
    _stack: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.label_names)) != len(self.label_names):
            raise ContractError(f"label names are not unique: {self.label_names}")
        k = len(self.label_names)
        for s in self.samples:
            if not 0 <= s.label < k:
                raise ContractError(f"{s.source_id}: label {s.label} outside [0, {k})")

    def __len__(self):
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def images(self) -> np.ndarray:
        if self._stack is None:
            self._stack = np.stack([s.image for s in self.samples])
        return self._stack

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def center_crop(img: np.ndarray, size: int | None = None) -> np.ndarray:
    """Centered ``size`` square (default: the largest that fits)."""
    h, w = img.shape
    size = min(h, w) if size is None else size
    if size > min(h, w):
        raise IngestError(f"cannot crop {size}x{size} from a {h}x{w} image")
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size]


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the edge
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    y0, y1, fy = _axis_weights(img.shape[0], out_h)
    x0, x1, fx = _axis_weights(img.shape[1], out_w)
    rows = img[y0] * (1.0 - fy)[:, None] + img[y1] * fy[:, None]
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


def standardize(img: np.ndarray) -> np.ndarray:
    return (img - img.mean()) / (img.std() + 1e-8)


def preprocess(raw, size: int = IMAGE_SIZE, mode: str = "crop-resize") -> np.ndarray:
    """Bring a single-channel image to ``size`` x ``size`` and standardize it.

    ``crop-resize`` takes the largest centered square then resizes bilinearly;
    ``crop`` takes a centered ``size`` square; ``resize`` resizes the whole image.
    """
    img = np.asarray(raw, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 1:
        raise IngestError(f"expected a non-empty 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise IngestError("image contains non-finite pixels")
    if mode == "crop-resize":
        img = center_crop(img)
        if img.shape != (size, size):
            img = bilinear_resize(img, size, size)
    elif mode == "crop":
        img = center_crop(img, size)
    elif mode == "resize":
        if img.shape != (size, size):
            img = bilinear_resize(img, size, size)
    else:
        raise ContractError(f"unknown preprocess mode {mode!r}; choose from {PREPROCESS_MODES}")
    return standardize(img)


# ---------------------------------------------------------------------------
# decoders
# ---------------------------------------------------------------------------

def parse_phoenix(buf: bytes) -> tuple[dict[str, str], np.ndarray]:
    """Parse an MSTAR Phoenix file; returns ``(header, magnitude)``.

    The ASCII header runs up to the ``[EndofPhoenixHeader]`` line; the payload
    is big-endian float32, magnitude block first.  Phase is not read.
    """
    end = buf.find(PHOENIX_END.encode("ascii"))
    if end < 0:
        raise FormatError(f"missing {PHOENIX_END} terminator")
    newline = buf.find(b"\n", end)
    payload_at = len(buf) if newline < 0 else newline + 1
    header: dict[str, str] = {}
    for line in buf[:end].decode("ascii", errors="replace").splitlines():
        key, sep, value = line.partition("=")
        if sep:
            header[key.strip()] = value.strip()
    try:
        rows = int(header["NumberOfRows"])
        cols = int(header["NumberOfColumns"])
    except KeyError as exc:
        raise FormatError(f"Phoenix header lacks {exc.args[0]}") from None
    except ValueError:
        raise FormatError("Phoenix row/column counts are not integers") from None
    if rows < 1 or cols < 1:
        raise FormatError(f"invalid Phoenix dimensions {rows}x{cols}")
    need = rows * cols * 4
    payload = buf[payload_at:]
    if len(payload) < need:
        raise TruncationError(
            f"Phoenix payload has {len(payload)} bytes, magnitude needs {need}")
    mag = np.frombuffer(payload[:need], dtype=">f4").astype(np.float64).reshape(rows, cols)
    return header, mag


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.find(b"\n", pos)
            if pos < 0:
                raise FormatError("PGM header ends inside a comment")
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PGM header")
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1  # single whitespace byte precedes the raster


def read_pgm(buf: bytes) -> np.ndarray:
    """Decode a binary (P5) PGM with 8- or 16-bit samples."""
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM (P5)")
    (w, h, maxval), pos = _pgm_tokens(buf, 3)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise FormatError(f"invalid PGM header {w}x{h} maxval {maxval}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = w * h * dtype.itemsize
    if len(buf) - pos < need:
        raise TruncationError(f"PGM raster has {len(buf) - pos} bytes, needs {need}")
    return np.frombuffer(buf[pos:pos + need], dtype=dtype).reshape(h, w).astype(np.float64)


def write_pgm(img: np.ndarray, maxval: int = 65535) -> bytes:
    """Encode integer samples in ``[0, maxval]`` as binary PGM."""
    img = np.asarray(img)
    h, w = img.shape
    dtype = ">u2" if maxval > 255 else "u1"
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + img.astype(dtype).tobytes()


def _read_png(buf: bytes) -> np.ndarray:
    from PIL import Image

    with Image.open(io.BytesIO(buf)) as im:
        im.load()
        arr = np.asarray(im, dtype=np.float64)
        mode = im.mode
    if arr.ndim == 3:
        if mode in ("LA", "PA"):
            return arr[..., 0]
        return arr[..., :3] @ np.array(LUMA)
    return arr


def decode_image(path) -> np.ndarray:
    """Grayscale float image from a PGM, PNG or Phoenix file (sniffed by content)."""
    path = Path(path)
    try:
        buf = path.read_bytes()
        if buf[:2] == b"P5":
            return read_pgm(buf)
        if buf[:8] == b"\x89PNG\r\n\x1a\n":
            return _read_png(buf)
        if buf.lstrip()[:1] == b"[" and PHOENIX_END.encode() in buf:
            return parse_phoenix(buf)[1]
        raise FormatError("unrecognised image format")
    except IngestError as exc:
        raise IngestError(f"{path}: {exc}") from exc
    except Exception as exc:
        raise IngestError(f"{path}: cannot decode image ({exc})") from exc


def load_image_dir(root, num_classes: int | None = None, *, size: int = IMAGE_SIZE,
                   mode: str = "crop-resize") -> Dataset:
    """Load ``root/<class>/<files>``; class order is sorted directory names."""
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"data directory not found: {root}")
    class_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name)
    if not class_dirs:
        raise IngestError(f"no class subdirectories under {root}")
    if num_classes is not None and len(class_dirs) != num_classes:
        raise ContractError(
            f"{root} has {len(class_dirs)} classes, configuration expects {num_classes}")
    samples = []
    for label, cdir in enumerate(class_dirs):
        files = sorted((f for f in cdir.iterdir() if f.is_file() and not f.name.startswith(".")),
                       key=lambda f: f.name)
        if not files:
            raise IngestError(f"class directory is empty: {cdir}")
        for f in files:
            raw = decode_image(f)
            try:
                img = preprocess(raw, size, mode)
            except IngestError as exc:
                raise IngestError(f"{f}: {exc}") from exc
            samples.append(Sample(img, label, str(f)))
    log.info("loaded %d samples in %d classes from %s", len(samples), len(class_dirs), root)
    return Dataset(samples, [d.name for d in class_dirs])


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def synthetic_label_names() -> list[str]:
    return [f"bar_{int(c * SYNTH_ANGLE_STEP):03d}" for c in range(SYNTH_CLASSES)]


def synthetic_template(label: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Clean class template: a bright bar through the centre at ``label * 18`` degrees."""
    theta = math.radians(label * SYNTH_ANGLE_STEP)
    centre = size / 2.0
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - centre, centre - yy  # y up
    along = dx * math.cos(theta) + dy * math.sin(theta)
    across = -dx * math.sin(theta) + dy * math.cos(theta)
    bar = (np.abs(across) <= SYNTH_BAR_WIDTH / 2) & (np.abs(along) <= SYNTH_BAR_LENGTH / 2)
    return np.where(bar, 1.0, SYNTH_BACKGROUND)


_SPLIT_STREAMS = {"train": 0x5A4, "test": 0x7E5}


def synthetic_raw(n_per_class: int, seed: int, noise_level: float = 0.3,
                  split: str = "train") -> list[tuple[np.ndarray, int]]:
    """Speckled images before standardization, class-major order."""
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be >= 1, got {n_per_class}")
    if noise_level < 0:
        raise ParameterError(f"noise_level must be >= 0, got {noise_level}")
    if split not in _SPLIT_STREAMS:
        raise ContractError(f"unknown split {split!r}")
    rng = RngState(seed, _SPLIT_STREAMS[split])
    out = []
    for label in range(SYNTH_CLASSES):
        template = synthetic_template(label)
        for _ in range(n_per_class):
            speckle = rng.exponential(template.shape)
            out.append((template * (1.0 + noise_level * (speckle - 1.0)), label))
    return out


def gen_synthetic(n_per_class: int, seed: int, noise_level: float = 0.3,
                  split: str = "train") -> Dataset:
    """Seeded 10-class bar dataset with multiplicative exponential speckle.

    ``split`` selects an independent stream, so ``"test"`` is a held-out set
    for the same seed.
    """
    samples = [Sample(preprocess(img), label, f"synthetic:{split}:{seed}:{i}")
               for i, (img, label) in enumerate(synthetic_raw(n_per_class, seed, noise_level, split))]
    return Dataset(samples, synthetic_label_names())


def write_synthetic_tree(root, n_per_class: int, seed: int, noise_level: float = 0.3,
                         split: str = "train") -> list[Path]:
    """Write the synthetic set as ``root/<label>/<index>.pgm`` (16-bit, per-image min-max)."""
    from ._io import atomic_write_bytes

    root = Path(root)
    names = synthetic_label_names()
    written = []
    counters = [0] * SYNTH_CLASSES
    for img, label in synthetic_raw(n_per_class, seed, noise_level, split):
        lo, hi = img.min(), img.max()
        scaled = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
        path = root / names[label] / f"{counters[label]:04d}.pgm"
        counters[label] += 1
        atomic_write_bytes(path, write_pgm(np.rint(scaled * 65535)))
        written.append(path)
    return written


def batches(n_or_dataset, batch_size: int, rng: RngState) -> list[list[int]]:
    """Fisher-Yates shuffled indices cut into contiguous chunks; the last may be short."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    n = n_or_dataset if isinstance(n_or_dataset, int) else len(n_or_dataset)
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
