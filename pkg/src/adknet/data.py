"""Paired HR/LR data: PNG ingestion, aligned cropping, augmentation and
procedural synthetic pairs for desk-scale training."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .resample import classic_downscale

logger = logging.getLogger(__name__)

GENERATORS = ("box", "bicubic", "nearest")
MANIFEST_KEYS = ("hr_dir", "lr_dir", "scale", "split")


class DatasetError(ValueError):
    """A pair could not be loaded or validated; the message names the files."""


@dataclass(frozen=True)
class PairedSample:
    hr: np.ndarray
    lr: np.ndarray
    id: str

    def __post_init__(self):
        hh, hw = self.hr.shape[:2]
        lh, lw = self.lr.shape[:2]
        if lh == 0 or hh % lh or hw % lw or hh // lh != hw // lw:
            raise DatasetError(f"{self.id}: HR {hh}x{hw} is not an integer multiple of LR {lh}x{lw}")

    @property
    def scale(self) -> int:
        return self.hr.shape[0] // self.lr.shape[0]


@dataclass
class DatasetManifest:
    hr_dir: Path
    lr_dir: Path
    scale: int
    split: str = "train"
    rejected: list[str] = field(default_factory=list)

    @classmethod
    def from_file(cls, path) -> "DatasetManifest":
        """Parse ``key=value`` lines; relative directories resolve against the manifest."""
        path = Path(path)
        values: dict[str, str] = {}
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in MANIFEST_KEYS:
                raise DatasetError(f"{path}:{lineno}: unknown manifest key {key!r}")
            values[key] = value
        missing = {"hr_dir", "lr_dir", "scale"} - values.keys()
        if missing:
            raise DatasetError(f"{path}: missing keys {sorted(missing)}")
        base = path.parent
        return cls(
            hr_dir=base / values["hr_dir"],
            lr_dir=base / values["lr_dir"],
            scale=int(values["scale"]),
            split=values.get("split", "train"),
        )


def read_png(path) -> np.ndarray:
    """8-bit PNG -> float32 ``H x W x 3`` in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode {path}: {exc}") from exc
    return arr.astype(np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def load_pairs(manifest: DatasetManifest, strict: bool = True) -> list[PairedSample]:
    """Load every HR/LR pair sharing a basename.

    A file without a partner, or a pair whose extents are not related by the
    manifest scale, raises :class:`DatasetError` naming the files.  With
    ``strict=False`` such pairs are skipped and listed in ``manifest.rejected``.
    Undecodable files always raise.
    """
    for d in (manifest.hr_dir, manifest.lr_dir):
        if not Path(d).is_dir():
            raise DatasetError(f"directory {d} does not exist")
    hr_files = {p.stem: p for p in sorted(Path(manifest.hr_dir).glob("*.png"))}
    lr_files = {p.stem: p for p in sorted(Path(manifest.lr_dir).glob("*.png"))}
    if not hr_files and not lr_files:
        logger.warning("no PNG files under %s / %s", manifest.hr_dir, manifest.lr_dir)
        return []

    s = manifest.scale
    manifest.rejected = []
    pairs = []
    for stem in sorted(hr_files.keys() | lr_files.keys()):
        if stem not in lr_files or stem not in hr_files:
            have = hr_files.get(stem) or lr_files.get(stem)
            msg = f"{have}: no partner with basename {stem!r}"
            if strict:
                raise DatasetError(msg)
            logger.warning(msg)
            manifest.rejected.append(msg)
            continue
        hr = read_png(hr_files[stem])
        lr = read_png(lr_files[stem])
        if hr.shape[0] != s * lr.shape[0] or hr.shape[1] != s * lr.shape[1]:
            msg = (
                f"extent mismatch at scale {s}: {hr_files[stem]} is {hr.shape[0]}x{hr.shape[1]}, "
                f"{lr_files[stem]} is {lr.shape[0]}x{lr.shape[1]}"
            )
            if strict:
                raise DatasetError(msg)
            logger.warning(msg)
            manifest.rejected.append(msg)
            continue
        pairs.append(PairedSample(hr, lr, stem))
    return pairs


def crop_pair(sample: PairedSample, patch: int, rng: np.random.Generator) -> PairedSample:
    """Random aligned crop: HR origin uniform over multiples of the scale."""
    s = sample.scale
    hh, hw = sample.hr.shape[:2]
    if patch % s:
        raise DatasetError(f"patch {patch} is not divisible by scale {s}")
    if patch > min(hh, hw):
        raise DatasetError(f"patch {patch} larger than {sample.id} ({hh}x{hw})")
    oy = s * int(rng.integers(0, (hh - patch) // s + 1))
    ox = s * int(rng.integers(0, (hw - patch) // s + 1))
    return crop_at(sample, oy, ox, patch)


def crop_at(sample: PairedSample, oy: int, ox: int, patch: int) -> PairedSample:
    s = sample.scale
    if oy % s or ox % s:
        raise DatasetError(f"crop origin ({oy}, {ox}) not aligned to scale {s}")
    p = patch // s
    hr = sample.hr[oy : oy + patch, ox : ox + patch]
    lr = sample.lr[oy // s : oy // s + p, ox // s : ox // s + p]
    return replace(sample, hr=hr, lr=lr)


@dataclass(frozen=True)
class AugmentOp:
    flip: bool = False
    rotation: int = 0

    def __post_init__(self):
        if self.rotation not in (0, 90, 180, 270):
            raise ValueError(f"rotation must be 0, 90, 180 or 270, got {self.rotation}")

    @classmethod
    def random(cls, rng: np.random.Generator) -> "AugmentOp":
        return cls(bool(rng.integers(0, 2)), 90 * int(rng.integers(0, 4)))

    def apply(self, img: np.ndarray) -> np.ndarray:
        """Horizontal flip first, then counter-clockwise rotation."""
        if self.flip:
            img = img[:, ::-1]
        return np.ascontiguousarray(np.rot90(img, self.rotation // 90, axes=(0, 1)))


def augment(sample: PairedSample, op: AugmentOp) -> PairedSample:
    return replace(sample, hr=op.apply(sample.hr), lr=op.apply(sample.lr))


# ---------------------------------------------------------------------------
# synthetic pairs


def _smooth_noise(rng, size: int, cutoff: float) -> np.ndarray:
    spec = np.fft.fft2(rng.standard_normal((size, size)))
    f = np.fft.fftfreq(size)
    radius = np.hypot(f[:, None], f[None, :])
    spec *= np.exp(-((radius / cutoff) ** 2))
    noise = np.real(np.fft.ifft2(spec))
    noise -= noise.min()
    return noise / max(noise.max(), 1e-12)


def synth_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """A mixture of a colour gradient, a rotated checkerboard and band-limited noise."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.zeros((size, size, 3))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    period = rng.uniform(2.0, 6.0)
    theta = rng.uniform(0, np.pi)
    u = (np.cos(theta) * xx - np.sin(theta) * yy) * size / period
    v = (np.sin(theta) * xx + np.cos(theta) * yy) * size / period
    checker = ((np.floor(u) + np.floor(v)) % 2).astype(np.float64)
    mix = rng.dirichlet(np.ones(3))
    for c in range(3):
        noise = _smooth_noise(rng, size, rng.uniform(0.2, 0.8))
        color = rng.uniform(0.2, 1.0, size=3)
        img[:, :, c] = mix[0] * ramp * color[0] + mix[1] * checker * color[1] + mix[2] * noise * color[2]
    return np.clip(img, 0.0, 1.0)


def synth_pairs(
    count: int, hr_size: int, s: int, generator: str = "box", rng: np.random.Generator | int = 0
) -> list[PairedSample]:
    """Procedural HR textures with LR targets from a classical downscaler."""
    if generator not in GENERATORS:
        raise ValueError(f"unknown generator {generator!r}; choose from {GENERATORS}")
    if hr_size % s:
        raise DatasetError(f"HR size {hr_size} is not divisible by scale {s}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    out = []
    for i in range(count):
        hr = synth_texture(rng, hr_size).astype(np.float32)
        lr = classic_downscale(hr, s, generator)
        out.append(PairedSample(hr, lr, f"synth_{i:04d}"))
    return out


def split_validation(samples: list[PairedSample], fraction: float = 0.1) -> tuple[list, list]:
    """Deterministic train/validation split by a hash of the sample id.

    At least one sample goes to validation when there are two or more.
    """
    buckets = 1000
    cut = int(round(fraction * buckets))
    keyed = [(zlib.crc32(s.id.encode()) % buckets, s) for s in samples]
    val = [s for h, s in keyed if h < cut]
    train = [s for h, s in keyed if h >= cut]
    if not val and len(samples) > 1:
        lowest = min(keyed, key=lambda kv: (kv[0], kv[1].id))[1]
        val = [lowest]
        train = [s for s in samples if s is not lowest]
    return train, val
