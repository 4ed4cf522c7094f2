"""Procedural multi-domain shape-detection data and its on-disk format.

A scene is a list of shapes on a smooth background. A domain is a set of
photometric distortions (gain, offset, per-channel colour, noise, blur)
applied after the scene is drawn, so box annotations never depend on the
domain.

Files written by :func:`generate_dataset`::

    out_dir/
      manifest.json
      train/000000.dfim  train/000000.ann  ...
      test/...

``.dfim`` layout (little-endian): ``b"DFIM" | u16 version | u16 C | u16 H |
u16 W | C*H*W f32 pixels (CHW) | u32 CRC32 of the pixel bytes``.
``.ann`` holds one ``class x_min y_min x_max y_max`` line per object.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

IMAGE_SIZE = 64
CLASS_NAMES = ("circle", "square", "triangle")
IMAGE_MAGIC = b"DFIM"
IMAGE_VERSION = 1
MANIFEST_NAME = "manifest.json"
DOMAIN_MARGIN = 0.1


class DatasetError(IOError):
    """Missing, unreadable or malformed dataset file."""


class IntegrityError(DatasetError):
    """A file's checksum disagrees with its contents or the manifest."""


@dataclass(frozen=True)
class DomainSpec:
    brightness_gain: float = 1.0
    brightness_offset: float = 0.0
    channel_gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.0
    blur_radius: int = 0
    background_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channel_gains", tuple(float(g) for g in self.channel_gains))
        if not 0.4 <= self.brightness_gain <= 1.6:
            raise ValueError(f"brightness_gain {self.brightness_gain} outside [0.4, 1.6]")
        if not -0.2 <= self.brightness_offset <= 0.2:
            raise ValueError(f"brightness_offset {self.brightness_offset} outside [-0.2, 0.2]")
        if len(self.channel_gains) != 3 or not all(0.6 <= g <= 1.4 for g in self.channel_gains):
            raise ValueError(f"channel_gains {self.channel_gains} must be 3 values in [0.6, 1.4]")
        if not 0.0 <= self.noise_sigma <= 0.08:
            raise ValueError(f"noise_sigma {self.noise_sigma} outside [0, 0.08]")
        if self.blur_radius not in (0, 1, 2):
            raise ValueError(f"blur_radius {self.blur_radius} not in {{0, 1, 2}}")

    def photometric_vector(self) -> np.ndarray:
        return np.array([self.brightness_gain, self.brightness_offset, *self.channel_gains, self.noise_sigma])


def domain_distance(a: DomainSpec, b: DomainSpec) -> float:
    """Largest absolute difference across the photometric parameters."""
    return float(np.abs(a.photometric_vector() - b.photometric_vector()).max())


# default domains: train photometrics sit in a band around identity, test
# domains sit well outside it and use unseen backgrounds
TRAIN_DOMAINS = (
    DomainSpec(1.0, 0.0, (1.0, 1.0, 1.0), 0.0, 0, 11),
    DomainSpec(0.8, 0.05, (1.1, 0.95, 0.9), 0.02, 0, 12),
    DomainSpec(1.2, -0.05, (0.9, 1.05, 1.1), 0.01, 1, 13),
    DomainSpec(0.9, 0.02, (1.0, 1.1, 0.95), 0.03, 0, 14),
)
TEST_DOMAINS = (
    DomainSpec(0.5, 0.15, (1.35, 0.75, 0.7), 0.05, 1, 91),
    DomainSpec(1.5, -0.15, (0.7, 1.3, 1.35), 0.06, 0, 92),
)


@dataclass(frozen=True)
class SceneObject:
    cls: int
    x0: int
    y0: int
    size: int
    intensity: float

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (float(self.x0), float(self.y0), float(self.x0 + self.size), float(self.y0 + self.size))


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    seed: int = 0

    def boxes(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 5))
        return np.array([[*o.box, o.cls] for o in self.objects], dtype=np.float64)


@dataclass
class ImageSample:
    image: np.ndarray                       # (3, H, W) float32 in [0, 1]
    boxes: np.ndarray                       # (k, 5) x0, y0, x1, y1, class
    domain_id: int = 0


def _iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def sample_scene(rng_seed: int, max_objects: int = 8, max_iou: float = 0.3) -> Scene:
    """Draw 0..max_objects shapes with pairwise IoU at most ``max_iou``."""
    rng = np.random.default_rng(rng_seed)
    target = int(rng.integers(0, max_objects + 1))
    objects: list[SceneObject] = []
    attempts = 0
    while len(objects) < target and attempts < 200:
        attempts += 1
        size = int(rng.integers(6, 25))
        x0 = int(rng.integers(0, IMAGE_SIZE - size + 1))
        y0 = int(rng.integers(0, IMAGE_SIZE - size + 1))
        obj = SceneObject(int(rng.integers(0, 3)), x0, y0, size, float(rng.uniform(0.6, 0.95)))
        if all(_iou(obj.box, o.box) <= max_iou for o in objects):
            objects.append(obj)
    return Scene(tuple(objects), seed=int(rng_seed))


def _shape_mask(obj: SceneObject) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] + 0.5
    x0, y0, x1, y1 = obj.box
    cx, cy, half = (x0 + x1) / 2, (y0 + y1) / 2, obj.size / 2
    if obj.cls == 0:
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half ** 2
    if obj.cls == 1:
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    # apex at top centre, base along the bottom edge
    frac = (yy - y0) / obj.size
    return (yy >= y0) & (yy <= y1) & (np.abs(xx - cx) <= half * frac)


def background(seed: int) -> np.ndarray:
    """Smooth low-frequency RGB texture in roughly [0.1, 0.45]."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.1, 0.45, size=(3, 4, 4))
    return np.stack([ndimage.zoom(c, IMAGE_SIZE / 4, order=3, mode="nearest") for c in coarse]).clip(0.05, 0.5)


def draw_scene(scene: Scene, background_seed: int = 0) -> np.ndarray:
    img = background(background_seed)
    for obj in scene.objects:
        img[:, _shape_mask(obj)] = obj.intensity
    return img


def render(scene: Scene, domain: DomainSpec = DomainSpec(), domain_id: int = 0, clamp: bool = True) -> ImageSample:
    """Draw ``scene`` and apply the photometric distortions of ``domain``.

    ``clamp=False`` skips the final clip to [0, 1]; useful for spectral checks.
    """
    img = draw_scene(scene, domain.background_seed)
    gains = np.asarray(domain.channel_gains)[:, None, None]
    img = gains * (domain.brightness_gain * img + domain.brightness_offset)
    if domain.noise_sigma > 0:
        rng = np.random.default_rng([scene.seed, domain.background_seed, 0xD0])
        img = img + rng.normal(0.0, domain.noise_sigma, size=img.shape)
    if domain.blur_radius:
        img = ndimage.uniform_filter(img, size=(1, 2 * domain.blur_radius + 1, 2 * domain.blur_radius + 1),
                                     mode="nearest")
    if clamp:
        img = np.clip(img, 0.0, 1.0)
    return ImageSample(img.astype(np.float32), scene.boxes(), domain_id)


# ----------------------------------------------------------------------------
# file formats


def encode_image(image: np.ndarray) -> bytes:
    image = np.ascontiguousarray(image, dtype="<f4")
    c, h, w = image.shape
    payload = image.tobytes()
    return IMAGE_MAGIC + struct.pack("<HHHH", IMAGE_VERSION, c, h, w) + payload + struct.pack("<I", zlib.crc32(payload))


def decode_image(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 16 or blob[:4] != IMAGE_MAGIC:
        raise DatasetError(f"{source}: not a DFIM image")
    version, c, h, w = struct.unpack_from("<HHHH", blob, 4)
    if version != IMAGE_VERSION:
        raise DatasetError(f"{source}: unsupported image version {version}")
    expected = 12 + 4 * c * h * w + 4
    if len(blob) != expected:
        raise IntegrityError(f"{source}: expected {expected} bytes, found {len(blob)} (truncated or padded)")
    payload = blob[12:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise IntegrityError(f"{source}: pixel CRC mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float32)


def format_annotations(boxes: np.ndarray) -> str:
    return "".join(f"{int(b[4])} {b[0]:.2f} {b[1]:.2f} {b[2]:.2f} {b[3]:.2f}\n" for b in np.asarray(boxes).reshape(-1, 5))


def parse_annotations(text: str, source: str = "<text>") -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise DatasetError(f"{source}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            x0, y0, x1, y1 = map(float, parts[1:])
        except ValueError as exc:
            raise DatasetError(f"{source}:{lineno}: {exc}") from exc
        rows.append([x0, y0, x1, y1, cls])
    return np.array(rows, dtype=np.float64).reshape(-1, 5)


# ----------------------------------------------------------------------------
# generation and loading


def _check_domains(train_domains: Sequence[DomainSpec], test_domains: Sequence[DomainSpec], margin: float) -> None:
    if not train_domains or not test_domains:
        raise ValueError("train and test domain lists must be non-empty")
    for te in test_domains:
        for tr in train_domains:
            if domain_distance(te, tr) <= margin:
                raise ValueError(f"test domain {te} lies within {margin} of train domain {tr}")


def generate_dataset(n_train: int, n_test: int, out_dir: str | Path,
                     train_domains: Sequence[DomainSpec] = TRAIN_DOMAINS,
                     test_domains: Sequence[DomainSpec] = TEST_DOMAINS,
                     seed: int = 0, margin: float = DOMAIN_MARGIN) -> dict:
    """Render and write a train/test split; returns the manifest.

    Test domain ids continue after the train ids, so every id names exactly
    one :class:`DomainSpec` in the manifest.
    """
    _check_domains(train_domains, test_domains, margin)
    out = Path(out_dir)
    scene_seeds = np.random.SeedSequence(seed).generate_state(n_train + n_test, dtype=np.uint32)
    domains = list(train_domains) + list(test_domains)
    records = []
    for split, count, offset, doms, id_base in (("train", n_train, 0, train_domains, 0),
                                               ("test", n_test, n_train, test_domains, len(train_domains))):
        (out / split).mkdir(parents=True, exist_ok=True)
        for k in range(count):
            dom_idx = k % len(doms)
            sample = render(sample_scene(int(scene_seeds[offset + k])), doms[dom_idx], id_base + dom_idx)
            img_rel = f"{split}/{k:06d}.dfim"
            ann_rel = f"{split}/{k:06d}.ann"
            img_bytes = encode_image(sample.image)
            ann_bytes = format_annotations(sample.boxes).encode("ascii")
            try:
                (out / img_rel).write_bytes(img_bytes)
                (out / ann_rel).write_bytes(ann_bytes)
            except OSError as exc:
                raise DatasetError(f"{out / img_rel}: write failed ({exc.strerror})") from exc
            records.append({"split": split, "image": img_rel, "annotation": ann_rel,
                            "domain_id": sample.domain_id,
                            "image_crc": zlib.crc32(img_bytes), "annotation_crc": zlib.crc32(ann_bytes)})
    manifest = {"format": "progkd-dataset", "version": 1, "seed": seed, "image_size": IMAGE_SIZE,
                "classes": list(CLASS_NAMES), "domains": [asdict(d) for d in domains],
                "n_train": n_train, "n_test": n_test, "samples": records}
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


@dataclass
class Split:
    images: np.ndarray                      # (N, 3, H, W)
    boxes: list[np.ndarray]
    domain_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.images)

    def batch_indices(self, batch_size: int, shuffle_seed: int | None = None) -> Iterator[np.ndarray]:
        order = np.arange(len(self))
        if shuffle_seed is not None:
            order = np.random.default_rng(shuffle_seed).permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield order[start:start + batch_size]

    def subset(self, idx: np.ndarray) -> "Split":
        return Split(self.images[idx], [self.boxes[i] for i in idx], self.domain_ids[idx])

    def batches(self, batch_size: int, shuffle_seed: int | None = None) -> Iterator["Split"]:
        for idx in self.batch_indices(batch_size, shuffle_seed):
            yield self.subset(idx)

    def samples(self) -> Iterator[ImageSample]:
        for img, bx, d in zip(self.images, self.boxes, self.domain_ids):
            yield ImageSample(img, bx, int(d))


@dataclass
class Dataset:
    root: Path
    manifest: dict
    splits: dict[str, Split] = field(default_factory=dict)
    checksum: str = ""

    @property
    def train(self) -> Split:
        return self.splits["train"]

    @property
    def test(self) -> Split:
        return self.splits["test"]


def load_dataset(root: str | Path) -> Dataset:
    """Read and validate a dataset written by :func:`generate_dataset`."""
    root = Path(root)
    mpath = root / MANIFEST_NAME
    try:
        manifest = json.loads(mpath.read_text())
    except OSError as exc:
        raise DatasetError(f"{mpath}: cannot read manifest ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: invalid manifest ({exc})") from exc
    if manifest.get("format") != "progkd-dataset" or "samples" not in manifest:
        raise DatasetError(f"{mpath}: not a progkd dataset manifest")
    grouped: dict[str, tuple[list, list, list]] = {}
    crc_all = 0
    for rec in manifest["samples"]:
        ipath, apath = root / rec["image"], root / rec["annotation"]
        try:
            img_bytes = ipath.read_bytes()
            ann_bytes = apath.read_bytes()
        except OSError as exc:
            raise DatasetError(f"{exc.filename}: cannot read ({exc.strerror})") from exc
        if zlib.crc32(img_bytes) != rec["image_crc"]:
            raise IntegrityError(f"{ipath}: file CRC does not match manifest")
        if zlib.crc32(ann_bytes) != rec["annotation_crc"]:
            raise IntegrityError(f"{apath}: file CRC does not match manifest")
        crc_all = zlib.crc32(img_bytes + ann_bytes, crc_all)
        imgs, boxes, doms = grouped.setdefault(rec["split"], ([], [], []))
        imgs.append(decode_image(img_bytes, str(ipath)))
        boxes.append(parse_annotations(ann_bytes.decode("ascii"), str(apath)))
        doms.append(int(rec["domain_id"]))
    splits = {name: Split(np.stack(i) if i else np.zeros((0, 3, IMAGE_SIZE, IMAGE_SIZE), np.float32),
                          b, np.array(d, dtype=np.int64))
              for name, (i, b, d) in grouped.items()}
    for name in ("train", "test"):
        splits.setdefault(name, Split(np.zeros((0, 3, IMAGE_SIZE, IMAGE_SIZE), np.float32), [], np.zeros(0, np.int64)))
    return Dataset(root, manifest, splits, f"{crc_all:08x}")


def in_memory_dataset(n_train: int, n_test: int, seed: int = 0,
                      train_domains: Sequence[DomainSpec] = TRAIN_DOMAINS,
                      test_domains: Sequence[DomainSpec] = TEST_DOMAINS) -> Dataset:
    """Same samples as :func:`generate_dataset` without touching disk."""
    _check_domains(train_domains, test_domains, DOMAIN_MARGIN)
    scene_seeds = np.random.SeedSequence(seed).generate_state(n_train + n_test, dtype=np.uint32)
    splits = {}
    for split, count, offset, doms, id_base in (("train", n_train, 0, train_domains, 0),
                                               ("test", n_test, n_train, test_domains, len(train_domains))):
        samples = [render(sample_scene(int(scene_seeds[offset + k])), doms[k % len(doms)], id_base + k % len(doms))
                   for k in range(count)]
        splits[split] = Split(np.stack([s.image for s in samples]) if samples else
                              np.zeros((0, 3, IMAGE_SIZE, IMAGE_SIZE), np.float32),
                              [parse_annotations(format_annotations(s.boxes)) for s in samples],
                              np.array([s.domain_id for s in samples], dtype=np.int64))
    crc = 0
    for name in ("train", "test"):
        crc = zlib.crc32(splits[name].images.tobytes(), crc)
        crc = zlib.crc32("".join(format_annotations(b) for b in splits[name].boxes).encode(), crc)
    return Dataset(Path("<memory>"), {"seed": seed}, splits, f"mem{crc:08x}")
