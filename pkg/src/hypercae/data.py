"""Image I/O, normalization, augmentation, fold splitting, synthetic data.

Images are grayscale throughout.  On disk they are binary PGM (P5, maxval
255); in memory they are float64 tensors normalized to [-1, 1].  Datasets
carry a 6-way fold assignment: fold 0 is the test partition, fold 1
validation, folds 2-5 training.

The synthetic generator produces pairs of classes that differ only in subtle
local features: both classes share a smooth granular background texture, and
the positive class additionally contains a few small bright discs.  The
positive class is replicated under four rotations, mirroring minority-class
augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataFormatError, GenerationError
from .tensor import as_tensor4

__all__ = [
    "LabeledDataset",
    "SynthSpec",
    "normalize",
    "denormalize",
    "rotate4",
    "split_folds",
    "select",
    "generate_synthetic",
    "read_pgm",
    "write_pgm",
    "read_image",
    "write_image",
    "write_ppm",
    "save_dataset",
    "load_dataset",
]

N_FOLDS = 6
ROLE_FOLDS = {"test": (0,), "val": (1,), "train": (2, 3, 4, 5)}


@dataclass
class LabeledDataset:
    """Stacked image patches with class labels and fold ids."""

    images: np.ndarray  # (n, 1, rows, cols), float64 in [-1, 1]
    labels: np.ndarray  # (n,), int
    fold: np.ndarray  # (n,), int in [0, 6)
    class_names: tuple[str, ...] = ("class0", "class1")

    def __post_init__(self):
        self.images = as_tensor4(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.fold = np.asarray(self.fold, dtype=np.int64)
        n = self.images.shape[0]
        if len(self.labels) != n or len(self.fold) != n:
            raise ConfigurationError("images, labels, and folds must have equal length")

    def __len__(self) -> int:
        return self.images.shape[0]


def normalize(raw) -> np.ndarray:
    """Map raw intensities 0..255 onto [-1, 1]: v/127.5 - 1, exact at the ends."""
    arr = np.asarray(raw, dtype=np.float64)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ConfigurationError("raw intensities must lie in [0, 255]")
    if arr.ndim == 2:
        arr = arr[None, None]
    return as_tensor4(arr / 127.5 - 1.0)


def denormalize(tensor) -> np.ndarray:
    """Inverse of :func:`normalize`: round(127.5*(v+1)) clamped to 0..255."""
    t = np.asarray(tensor, dtype=np.float64)
    return np.clip(np.rint(127.5 * (t + 1.0)), 0, 255).astype(np.uint8)


def rotate4(image: np.ndarray) -> list[np.ndarray]:
    """The image under rotations of 0, 90, 180, and 270 degrees.

    Pure index permutations (no interpolation); the first element is the
    original.  Requires a square image.
    """
    img = np.asarray(image)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ConfigurationError(f"rotation needs a square 2-D image, got {img.shape}")
    return [np.ascontiguousarray(np.rot90(img, k)) for k in range(4)]


def split_folds(dataset: LabeledDataset, seed: int) -> LabeledDataset:
    """Assign folds round-robin over a seeded shuffle; sizes differ by <= 1."""
    n = len(dataset)
    if n < N_FOLDS:
        raise ConfigurationError(f"need at least {N_FOLDS} samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    fold = np.empty(n, dtype=np.int64)
    fold[perm] = np.arange(n) % N_FOLDS
    return LabeledDataset(dataset.images, dataset.labels, fold, dataset.class_names)


def select(dataset: LabeledDataset, role: str) -> LabeledDataset:
    """Subset for one role: test = fold 0, val = fold 1, train = folds 2-5."""
    if role not in ROLE_FOLDS:
        raise ConfigurationError(f"role must be one of {sorted(ROLE_FOLDS)}, got {role!r}")
    mask = np.isin(dataset.fold, ROLE_FOLDS[role])
    return LabeledDataset(
        dataset.images[mask], dataset.labels[mask], dataset.fold[mask], dataset.class_names
    )


@dataclass
class SynthSpec:
    """Parameters of the synthetic subtle-texture dataset."""

    image_size: int = 32
    n_normal: int = 400
    n_abnormal: int = 100
    vacuole_count_range: tuple[int, int] = (1, 4)
    vacuole_radius_range: tuple[int, int] = (2, 4)
    grain_scale: int = 8
    contrast: float = 0.3
    seed: int = 42

    def validate(self) -> None:
        if self.n_normal < 0 or self.n_abnormal < 0:
            raise ConfigurationError("sample counts must be >= 0")
        lo, hi = self.vacuole_count_range
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"bad vacuole count range {self.vacuole_count_range}")
        rlo, rhi = self.vacuole_radius_range
        if rlo < 1 or rhi < rlo or rhi >= self.image_size / 4:
            raise ConfigurationError(
                f"vacuole radii must satisfy 1 <= lo <= hi < image_size/4, got {self.vacuole_radius_range}"
            )
        if self.grain_scale < 1:
            raise ConfigurationError("grain scale must be >= 1")
        if not 0 <= self.contrast <= 1:
            raise ConfigurationError("contrast must lie in [0, 1]")


DISC_VALUE = 0.5


def _value_noise(rng: np.random.Generator, size: int, grain: int, contrast: float) -> np.ndarray:
    """Bilinearly interpolated lattice noise scaled into [-contrast, contrast]."""
    nodes = int(np.ceil(size / grain)) + 2
    grid = rng.uniform(-1.0, 1.0, size=(nodes, nodes))
    pos = np.arange(size) / grain
    i0 = np.minimum(pos.astype(np.int64), nodes - 2)
    f = pos - i0
    a = grid[np.ix_(i0, i0)]
    b = grid[np.ix_(i0 + 1, i0)]
    c = grid[np.ix_(i0, i0 + 1)]
    d = grid[np.ix_(i0 + 1, i0 + 1)]
    fr, fc = f[:, None], f[None, :]
    img = a * (1 - fr) * (1 - fc) + b * fr * (1 - fc) + c * (1 - fr) * fc + d * fr * fc
    return img * contrast


def _add_discs(rng: np.random.Generator, img: np.ndarray, spec: SynthSpec) -> int:
    """Stamp non-overlapping bright discs into ``img``; returns the disc count."""
    lo, hi = spec.vacuole_count_range
    count = int(rng.integers(lo, hi + 1))
    size = spec.image_size
    rlo, rhi = spec.vacuole_radius_range
    yy, xx = np.ogrid[:size, :size]
    placed: list[tuple[int, int, int]] = []
    for _ in range(count):
        for _attempt in range(1000):
            rad = int(rng.integers(rlo, rhi + 1))
            cr = int(rng.integers(rad, size - rad))
            cc = int(rng.integers(rad, size - rad))
            if all((cr - pr) ** 2 + (cc - pc) ** 2 > (rad + prad) ** 2 for pr, pc, prad in placed):
                break
        else:
            raise GenerationError(
                f"could not place disc {len(placed) + 1}/{count} after 1000 attempts"
            )
        img[(yy - cr) ** 2 + (xx - cc) ** 2 <= rad * rad] = DISC_VALUE
        placed.append((cr, cc, rad))
    return count


def generate_synthetic(spec: SynthSpec) -> LabeledDataset:
    """Deterministic two-class dataset: plain textures vs textures with discs.

    The disc class is replicated under four rotations, so the result holds
    ``n_normal + 4 * n_abnormal`` samples.  Folds are assigned with
    :func:`split_folds` using the same seed.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    images: list[np.ndarray] = []
    labels: list[int] = []
    for _ in range(spec.n_normal):
        images.append(_value_noise(rng, spec.image_size, spec.grain_scale, spec.contrast))
        labels.append(0)
    for _ in range(spec.n_abnormal):
        img = _value_noise(rng, spec.image_size, spec.grain_scale, spec.contrast)
        _add_discs(rng, img, spec)
        for rot in rotate4(img):
            images.append(rot)
            labels.append(1)
    stack = np.stack(images)[:, None, :, :]
    ds = LabeledDataset(
        stack, np.array(labels), np.zeros(len(labels), dtype=np.int64), ("normal", "vacuoles")
    )
    return split_folds(ds, spec.seed)


# ---------------------------------------------------------------------------
# PGM / PPM files
# ---------------------------------------------------------------------------

def _pnm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated integer header tokens.

    Handles '#' comments; returns the tokens and the offset of the first
    pixel byte (one whitespace after the last token).
    """
    tokens: list[int] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise DataFormatError("file ended inside the header")
        ch = data[i : i + 1]
        if ch.isspace():
            i += 1
        elif ch == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            tok = data[i:j]
            if not tok.isdigit():
                raise DataFormatError(f"malformed header token {tok!r}")
            tokens.append(int(tok))
            i = j
    if i >= len(data) or not data[i : i + 1].isspace():
        raise DataFormatError("missing whitespace after the header")
    return tokens, i + 1


def read_pgm(path) -> np.ndarray:
    """Binary PGM (P5, maxval 255) as a (rows, cols) uint8 array."""
    data = Path(path).read_bytes()
    if len(data) < 2 or data[:2] != b"P5":
        raise DataFormatError(f"{path}: not a binary PGM (expected magic P5)")
    (width, height, maxval), start = _pnm_tokens(data[2:], 3)
    start += 2
    if maxval != 255:
        raise DataFormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    if width < 1 or height < 1:
        raise DataFormatError(f"{path}: bad dimensions {width}x{height}")
    need = width * height
    pixels = data[start : start + need]
    if len(pixels) < need:
        raise DataFormatError(f"{path}: short file, {len(pixels)} of {need} pixel bytes")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, gray: np.ndarray) -> None:
    """Write a (rows, cols) uint8 array as binary PGM (P5, maxval 255)."""
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ConfigurationError(f"grayscale image must be 2-D, got {gray.shape}")
    header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + gray.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write a (rows, cols, 3) uint8 array as binary PPM (P6, maxval 255)."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ConfigurationError(f"RGB image must be (rows, cols, 3), got {rgb.shape}")
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + rgb.tobytes())


def read_image(path) -> np.ndarray:
    """PGM file as a normalized (1, 1, rows, cols) tensor."""
    return normalize(read_pgm(path))


def write_image(tensor, path) -> None:
    """De-normalize a single-sample tensor and write it as PGM."""
    t = as_tensor4(tensor)
    if t.shape[0] != 1 or t.shape[1] != 1:
        raise ConfigurationError(f"expected a single one-channel sample, got {t.shape}")
    write_pgm(path, denormalize(t[0, 0]))


# ---------------------------------------------------------------------------
# Dataset directory: PGM files plus a tab-separated manifest
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"


def save_dataset(dataset: LabeledDataset, out_dir) -> Path:
    """Write every sample as a PGM plus a manifest of path/label/fold lines."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(dataset)):
        rel = f"images/{i:05d}.pgm"
        write_pgm(out_dir / rel, denormalize(dataset.images[i, 0]))
        lines.append(f"{rel}\t{dataset.labels[i]}\t{dataset.fold[i]}")
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="ascii")
    return manifest


def load_dataset(data_dir) -> LabeledDataset:
    """Read a dataset directory written by :func:`save_dataset`."""
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST_NAME
    if not manifest.is_file():
        raise DataFormatError(f"no {MANIFEST_NAME} in {data_dir}")
    images, labels, folds = [], [], []
    for ln, line in enumerate(manifest.read_text(encoding="ascii").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataFormatError(f"{manifest}:{ln}: expected path<TAB>label<TAB>fold")
        path, label, fold = parts
        images.append(read_image(data_dir / path)[0])
        labels.append(int(label))
        folds.append(int(fold))
    if not images:
        raise DataFormatError(f"{manifest}: empty manifest")
    n_classes = max(labels) + 1
    names = ("normal", "vacuoles") if n_classes == 2 else tuple(f"class{i}" for i in range(n_classes))
    return LabeledDataset(np.stack(images), labels, folds, names)
