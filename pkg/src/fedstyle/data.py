"""Synthetic multi-domain shape images plus splitting, batching and disk I/O.

Domains share one content distribution (five grayscale shape classes rendered
with position/scale jitter on a textured background) and differ only in a
per-channel style: ``pixel <- clamp((gain*pixel + bias)^gamma + noise, 0, 1)``.
Content is drawn before styling, so labels never depend on the style.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, IngestError

SHAPE_NAMES = ("disk", "square", "cross", "triangle", "ring")
_f32 = np.float32

# fraction of the canvas covered by each (area-normalized) shape
_AREA_FRACTION = 0.17
_SUPERSAMPLE = 4


@dataclass(frozen=True)
class DomainStyle:
    """Per-channel affine + contrast recolorization defining one domain."""

    name: str
    gain: tuple[float, float, float]
    bias: tuple[float, float, float]
    gamma: float = 1.0
    noise_std: float = 0.0

    def __post_init__(self):
        if len(self.gain) != 3 or len(self.bias) != 3:
            raise ContractError("styles are defined over exactly 3 channels")
        if any(g <= 0 for g in self.gain):
            raise ContractError("channel gains must be positive")
        if self.gamma <= 0:
            raise ContractError("contrast exponent must be positive")
        if self.noise_std < 0:
            raise ContractError("noise std must be nonnegative")


IDENTITY_STYLE = DomainStyle("identity", (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))


@dataclass
class DomainDataset:
    name: str
    images: T.Tensor
    labels: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    seed: int

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def split(self, which: str) -> np.ndarray:
        if which == "train":
            return self.train_idx
        if which == "test":
            return self.test_idx
        if which == "full":
            return np.arange(len(self.labels), dtype=self.train_idx.dtype)
        raise ContractError(
            f"unknown split {which!r} (want 'train', 'test' or 'full')")


def _shape_mask(label: int, dx, dy, area: float):
    if label == 0:
        r = math.sqrt(area / math.pi)
        return dx * dx + dy * dy <= r * r
    if label == 1:
        h = math.sqrt(area) / 2.0
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if label == 2:
        # two bars of half-length L, half-width 0.3 L; union area 2.04 L^2
        length = math.sqrt(area / 2.04)
        w = 0.3 * length
        return (((np.abs(dx) <= w) & (np.abs(dy) <= length))
                | ((np.abs(dy) <= w) & (np.abs(dx) <= length)))
    if label == 3:
        # apex-up triangle, width growing linearly downward; area 2 r^2
        r = math.sqrt(area / 2.0)
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if label == 4:
        outer = math.sqrt(area / (math.pi * (1.0 - 0.55 ** 2)))
        inner = 0.55 * outer
        d2 = dx * dx + dy * dy
        return (d2 <= outer * outer) & (d2 >= inner * inner)
    raise ContractError(f"no shape defined for class {label}")


def render_content(labels: np.ndarray, image_size: int, rng) -> np.ndarray:
    """Grayscale shape images in [0,1], anti-aliased by 4x supersampling.

    All three channels are identical; any channel separation between domains
    comes from the style alone.
    """
    big = image_size * _SUPERSAMPLE
    grid = np.arange(big, dtype=np.float64) + 0.5
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    out = np.empty((len(labels), 3, image_size, image_size), dtype=_f32)
    for i, label in enumerate(labels):
        bg = rng.uniform(0.22, 0.28)
        fg = rng.uniform(0.66, 0.74)
        texture = rng.uniform(-0.05, 0.05, size=(4, 4))
        scale = rng.uniform(0.92, 1.08)
        cx = big / 2 + rng.uniform(-0.08, 0.08) * big
        cy = big / 2 + rng.uniform(-0.08, 0.08) * big
        area = _AREA_FRACTION * big * big * scale * scale
        mask = _shape_mask(int(label), xx - cx, yy - cy, area)
        canvas = bg + np.kron(texture, np.ones((big // 4, big // 4)))
        canvas = np.where(mask, fg, canvas)
        small = canvas.reshape(image_size, _SUPERSAMPLE,
                               image_size, _SUPERSAMPLE).mean(axis=(1, 3))
        out[i] = small.astype(_f32)[None, :, :]
    return out


def apply_style(images: np.ndarray, style: DomainStyle, rng=None) -> np.ndarray:
    """clamp((gain*pixel + bias)^gamma + noise, 0, 1), per channel.

    The affine result is floored at zero before the exponent: fractional
    contrast powers are undefined on negatives.
    """
    gain = np.array(style.gain, dtype=_f32).reshape(1, 3, 1, 1)
    bias = np.array(style.bias, dtype=_f32).reshape(1, 3, 1, 1)
    base = np.maximum(images * gain + bias, _f32(0.0))
    out = base ** _f32(style.gamma)
    if style.noise_std > 0:
        if rng is None:
            raise ContractError("noisy styles need an rng")
        out = out + _f32(style.noise_std) * rng.standard_normal(out.shape).astype(_f32)
    return np.clip(out, 0.0, 1.0).astype(_f32)


def _balanced_labels(n: int, k: int, rng) -> np.ndarray:
    counts = np.full(k, n // k)
    counts[: n % k] += 1
    labels = np.repeat(np.arange(k), counts)
    rng.shuffle(labels)
    return labels


def _stratified_split(labels: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        rng.shuffle(members)
        n_train = int(round(0.8 * len(members)))
        if len(members) >= 2:
            n_train = min(max(n_train, 1), len(members) - 1)
        train.extend(members[:n_train])
        test.extend(members[n_train:])
    return np.sort(np.array(train)), np.sort(np.array(test))


def generate_domain(style: DomainStyle, n: int, k: int, image_size: int,
                    seed: int) -> DomainDataset:
    """Deterministic in (style, n, k, image_size, seed); the content stream
    depends on the seed only, so same-seed domains differ purely in style."""
    if k > len(SHAPE_NAMES):
        raise ContractError(f"at most {len(SHAPE_NAMES)} shape classes exist, got k={k}")
    if k < 1 or n < k:
        raise ContractError("need at least one sample per class")
    if image_size < 4:
        raise ContractError("image size too small to render shapes")
    labels = _balanced_labels(n, k, np.random.default_rng([seed, 0]))
    content = render_content(labels, image_size, np.random.default_rng([seed, 1]))
    images = apply_style(content, style, np.random.default_rng([seed, 2]))
    train_idx, test_idx = _stratified_split(labels, np.random.default_rng([seed, 3]))
    return DomainDataset(style.name, T.Tensor(images), labels.astype(np.int64),
                         train_idx, test_idx, seed)


def default_styles() -> list[DomainStyle]:
    """Four recolorizations; ``murk`` is deliberately hard: low contrast,
    mid-gray, with the gain ordering swapped relative to the other three."""
    return [
        DomainStyle("ember", (1.30, 0.80, 0.45), (0.12, 0.04, -0.02), 1.0, 0.015),
        DomainStyle("glacier", (0.50, 0.90, 1.45), (-0.03, 0.02, 0.16), 1.0, 0.015),
        DomainStyle("chalk", (1.05, 1.15, 0.95), (0.24, 0.26, 0.20), 0.75, 0.015),
        DomainStyle("murk", (0.42, 0.55, 0.38), (0.34, 0.28, 0.33), 1.40, 0.025),
    ]


def separation_ratio(datasets: list[DomainDataset]) -> float:
    """min over domain pairs of (best per-channel mean gap) / (5x the larger
    within-domain std of per-image channel means); > 1 means well separated."""
    per_image = [d.images.data.mean(axis=(2, 3)) for d in datasets]
    means = [p.mean(axis=0) for p in per_image]
    stds = [p.std(axis=0) for p in per_image]
    worst = math.inf
    for i in range(len(datasets)):
        for j in range(i + 1, len(datasets)):
            gaps = np.abs(means[i] - means[j])
            spread = np.maximum(stds[i], stds[j])
            worst = min(worst, float((gaps / (5.0 * spread)).max()))
    return worst


def make_domains(styles: list[DomainStyle], n: int, k: int, image_size: int,
                 seed: int) -> list[DomainDataset]:
    """One dataset per style, each with its own content seed; enforces the
    channel-separation requirement between every style pair."""
    if len({s.name for s in styles}) != len(styles):
        raise ContractError("style names must be unique")
    datasets = [generate_domain(style, n, k, image_size, seed + 101 * i)
                for i, style in enumerate(styles)]
    if len(datasets) > 1 and separation_ratio(datasets) <= 1.0:
        raise ContractError("styles do not separate the domains' channel means")
    return datasets


def leave_one_out(domains: list[DomainDataset],
                  target_index: int) -> tuple[list[DomainDataset], DomainDataset]:
    if len(domains) < 2:
        raise ContractError("leave-one-out needs at least two domains")
    if not 0 <= target_index < len(domains):
        raise ContractError(
            f"target index {target_index} out of range for {len(domains)} domains")
    sources = [d for i, d in enumerate(domains) if i != target_index]
    return sources, domains[target_index]


def batch_iter(dataset: DomainDataset, which: str, batch_size: int, seed: int,
               epoch: int = 0):
    """Seeded shuffle per (seed, epoch); the final short batch is kept."""
    if batch_size < 1:
        raise ContractError("batch size must be at least 1")
    idx = dataset.split(which)
    if len(idx) == 0:
        raise ContractError(f"{which} split of {dataset.name!r} is empty")
    order = np.random.default_rng([seed, epoch]).permutation(idx)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        yield T.Tensor(dataset.images.data[chunk]), dataset.labels[chunk]


# ---------------------------------------------------------------------------
# Folder layout: root/<domain>/<class>/<file>, grouped by label.  Raw images
# are float32 little-endian C-order (".rgb32") with a "shape.txt" sidecar in
# the domain directory; 8-bit binary PPM ("P6") is also understood.

def _class_dir_name(c: int) -> str:
    return f"class_{c:02d}"


def export_folder(dataset: DomainDataset, root, fmt: str = "rgb32") -> Path:
    if fmt not in ("rgb32", "ppm"):
        raise ContractError(f"unknown export format {fmt!r}")
    domain_dir = Path(root) / dataset.name
    domain_dir.mkdir(parents=True, exist_ok=True)
    s = dataset.image_size
    if fmt == "rgb32":
        (domain_dir / "shape.txt").write_text(f"3 {s} {s}\n")
    for c in range(dataset.num_classes):
        class_dir = domain_dir / _class_dir_name(c)
        class_dir.mkdir(exist_ok=True)
        for i in np.flatnonzero(dataset.labels == c):
            img = dataset.images.data[i]
            if fmt == "rgb32":
                path = class_dir / f"{i:05d}.rgb32"
                path.write_bytes(np.ascontiguousarray(img, dtype="<f4").tobytes())
            else:
                path = class_dir / f"{i:05d}.ppm"
                quantized = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
                header = f"P6\n{s} {s}\n255\n".encode("ascii")
                path.write_bytes(header + quantized.transpose(1, 2, 0).tobytes())
    return domain_dir


def _read_ppm(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IngestError(f"truncated PPM header in {path}")
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise IngestError(f"{path} is not binary PPM")
    w, h, maxval = (int(v) for v in fields[1:])
    pos += 1
    pixels = np.frombuffer(blob, dtype=np.uint8, count=-1, offset=pos)
    if len(pixels) != w * h * 3:
        raise IngestError(f"pixel payload of {path} does not match {w}x{h}")
    arr = pixels.reshape(h, w, 3).transpose(2, 0, 1)
    return (arr.astype(_f32) / _f32(maxval))


def _read_rgb32(path: Path, dims: tuple[int, int, int] | None) -> np.ndarray:
    if dims is None:
        raise IngestError(f"raw image {path} has no shape.txt sidecar")
    expected = dims[0] * dims[1] * dims[2]
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if len(raw) != expected:
        raise IngestError(f"{path} holds {len(raw)} values, expected {expected}")
    return raw.reshape(dims).astype(_f32)


def ingest_folder(path) -> DomainDataset:
    """Read one domain directory back into a dataset (sorted, deterministic);
    the 80/20 split is re-derived from a fixed seed."""
    domain_dir = Path(path)
    if not domain_dir.is_dir():
        raise IngestError(f"domain directory {domain_dir} does not exist")
    dims = None
    sidecar = domain_dir / "shape.txt"
    if sidecar.exists():
        parts = sidecar.read_text().split()
        if len(parts) != 3:
            raise IngestError(f"malformed sidecar {sidecar}")
        dims = tuple(int(p) for p in parts)
    class_dirs = sorted(d for d in domain_dir.iterdir() if d.is_dir())
    if not class_dirs:
        raise IngestError(f"no class directories under {domain_dir}")
    images, labels = [], []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir()
                       if p.suffix in (".rgb32", ".ppm"))
        if not files:
            raise ContractError(f"class directory {class_dir.name!r} is empty")
        for file in files:
            try:
                img = (_read_ppm(file) if file.suffix == ".ppm"
                       else _read_rgb32(file, dims))
            except OSError as exc:
                if isinstance(exc, IngestError):
                    raise
                raise IngestError(f"cannot read {file}: {exc}") from exc
            if images and img.shape != images[0].shape:
                raise IngestError(
                    f"{file} has shape {img.shape}, expected {images[0].shape}")
            images.append(img)
            labels.append(label)
    stacked = np.stack(images).astype(_f32)
    labels = np.array(labels, dtype=np.int64)
    train_idx, test_idx = _stratified_split(labels, np.random.default_rng([0, 3]))
    return DomainDataset(domain_dir.name, T.Tensor(stacked), labels,
                         train_idx, test_idx, seed=0)
