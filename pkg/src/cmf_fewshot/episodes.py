"""Datasets, episodic sampling and the fixed supports used by the AZS protocols."""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .synth import FAMILIES, render_family

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
AZS_MODES = ("azs1", "azs2", "random-matrix")
DEFAULT_SPLIT_FRACTIONS = (0.5, 0.25, 0.25)


class DatasetError(ValueError):
    pass


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    id: str
    images: np.ndarray  # [M, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [M] int64 class ids
    splits: np.ndarray  # [M] one of SPLITS

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"{self.id}: images must be [M, C, H, W], got {self.images.shape}")
        if not (len(self.images) == len(self.labels) == len(self.splits)):
            raise DatasetError(f"{self.id}: images, labels and splits differ in length")
        for arr in (self.images, self.labels, self.splits):
            arr.setflags(write=False)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def indices(self, split: Optional[str] = None) -> np.ndarray:
        if split is None:
            return np.arange(len(self.labels))
        return np.flatnonzero(self.splits == split)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.id.encode())
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update("|".join(self.splits.tolist()).encode())
        return h.hexdigest()


def assign_splits(labels: np.ndarray, fractions=DEFAULT_SPLIT_FRACTIONS, seed: int = 0) -> np.ndarray:
    """Per-class random split of image indices into train/val/test."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DatasetError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    splits = np.empty(len(labels), dtype="<U5")
    rng = np.random.default_rng(seed)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        splits[idx[:n_train]] = "train"
        splits[idx[n_train : n_train + n_val]] = "val"
        splits[idx[n_train + n_val :]] = "test"
    return splits


def synth_domain(family: str, classes: int = 10, per_class: int = 60, size: int = 32, seed: int = 0, min_per_class: int = 2, split_fractions=DEFAULT_SPLIT_FRACTIONS, id: Optional[str] = None) -> Dataset:
    """Render a procedural domain.

    ``min_per_class`` is the smallest per-class count the caller intends to
    sample from (shot + query); anything below it is rejected.
    """
    if family not in FAMILIES:
        raise DatasetError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if classes < 2:
        raise DatasetError(f"a domain needs at least 2 classes, got {classes}")
    if per_class < max(min_per_class, 1):
        raise DatasetError(f"per_class={per_class} is below the sampling minimum {min_per_class}")
    images, labels = render_family(family, classes, per_class, size, seed)
    splits = assign_splits(labels, split_fractions, seed)
    return Dataset(id or family, images[:, None], labels.astype(np.int64), splits)


def desk_benchmark(classes: int = 10, per_class: int = 60, size: int = 32, seed: int = 0, families: Sequence[str] = FAMILIES) -> List[Dataset]:
    return [synth_domain(f, classes, per_class, size, seed) for f in families]


# loading ---------------------------------------------------------------------


def _resize(img: np.ndarray, size: Optional[int]) -> np.ndarray:
    if size is None or img.shape[-2:] == (size, size):
        return img
    from PIL import Image

    chans = [np.asarray(Image.fromarray(ch.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)) for ch in img]
    return np.stack(chans)


def _read_idx(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DatasetError(f"{path}: not an IDX file")
    type_code, ndim = raw[2], raw[3]
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    if type_code not in dtypes:
        raise DatasetError(f"{path}: unknown IDX type code 0x{type_code:02x}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    dt = np.dtype(dtypes[type_code])
    count = int(np.prod(dims))
    body = raw[4 + 4 * ndim :]
    if len(body) != count * dt.itemsize:
        raise DatasetError(f"{path}: expected {count * dt.itemsize} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dt).reshape(dims)


def load_dataset(path, format: str = "class-folders", size: Optional[int] = None, labels_path=None, split_fractions=DEFAULT_SPLIT_FRACTIONS, seed: int = 0, id: Optional[str] = None) -> Dataset:
    """Load images from disk into a :class:`Dataset` with values in [0, 1].

    Formats:
        ``class-folders``: ``<root>/<class>/<image>.png``; classes sorted by name.
        ``idx``: MNIST-style IDX image file; labels from ``labels_path`` (an
        IDX label file) or all zero.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path} does not exist")
    if format == "class-folders":
        from PIL import Image, UnidentifiedImageError

        class_dirs = sorted(p for p in path.iterdir() if p.is_dir())
        if not class_dirs:
            raise DatasetError(f"{path}: no class folders")
        images, labels = [], []
        for label, cdir in enumerate(class_dirs):
            files = sorted(p for p in cdir.iterdir() if p.is_file())
            if not files:
                raise DatasetError(f"{cdir}: empty class folder")
            for f in files:
                try:
                    with Image.open(f) as im:
                        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
                except (UnidentifiedImageError, OSError) as exc:
                    raise DatasetError(f"unreadable image file: {f} ({exc})") from None
                images.append(_resize(arr[None], size))
                labels.append(label)
        shapes = {im.shape for im in images}
        if len(shapes) != 1:
            raise DatasetError(f"{path}: image sizes differ {sorted(shapes)}; pass size= to resize")
        images = np.stack(images).astype(np.float32)
        labels = np.asarray(labels, dtype=np.int64)
    elif format == "idx":
        raw = _read_idx(path)
        if raw.ndim == 3:
            raw = raw[:, None]
        if raw.ndim != 4:
            raise DatasetError(f"{path}: expected 3 or 4 IDX dimensions, got {raw.ndim}")
        scale = 255.0 if raw.dtype.kind in "ui" else 1.0
        images = np.stack([_resize(im.astype(np.float32) / scale, size) for im in raw]).astype(np.float32)
        if labels_path is not None:
            labels = _read_idx(Path(labels_path)).astype(np.int64)
            if len(labels) != len(images):
                raise DatasetError(f"{labels_path}: {len(labels)} labels for {len(images)} images")
        else:
            labels = np.zeros(len(images), dtype=np.int64)
    else:
        raise DatasetError(f"unknown dataset format {format!r}")
    return Dataset(id or path.stem, images, labels, assign_splits(labels, split_fractions, seed))


# episodes --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Episode:
    support_images: np.ndarray
    support_labels: np.ndarray
    target_images: np.ndarray
    target_labels: np.ndarray
    way: int
    shot: int
    query: int
    source: str
    class_ids: Tuple[int, ...] = ()
    support_index: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    target_index: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))


def sample_episode(dataset: Dataset, way: int = 5, shot: int = 1, query: int = 10, seed: int = 0, split: Optional[str] = "train") -> Episode:
    """Sample a way-shot episode; labels are re-indexed 0..way-1 in draw order."""
    if way < 1 or shot < 1 or query < 1:
        raise EpisodeError("way, shot and query must all be positive")
    pool = dataset.indices(split)
    by_class: Dict[int, np.ndarray] = {}
    for c in np.unique(dataset.labels[pool]):
        idx = pool[dataset.labels[pool] == c]
        if len(idx) >= shot + query:
            by_class[int(c)] = idx
    if len(by_class) < way:
        raise EpisodeError(
            f"{dataset.id}/{split}: need {way} classes with >= {shot + query} images, only {len(by_class)} qualify"
        )
    rng = np.random.default_rng(seed)
    eligible = np.array(sorted(by_class))
    chosen = rng.choice(eligible, size=way, replace=False)
    s_idx, t_idx = [], []
    for c in chosen:
        pick = rng.choice(by_class[int(c)], size=shot + query, replace=False)
        s_idx.append(pick[:shot])
        t_idx.append(pick[shot:])
    s_idx = np.concatenate(s_idx)
    t_idx = np.concatenate(t_idx)
    return Episode(
        support_images=dataset.images[s_idx],
        support_labels=np.repeat(np.arange(way), shot),
        target_images=dataset.images[t_idx],
        target_labels=np.repeat(np.arange(way), query),
        way=way,
        shot=shot,
        query=query,
        source=dataset.id,
        class_ids=tuple(int(c) for c in chosen),
        support_index=s_idx,
        target_index=t_idx,
    )


# fixed supports --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FixedSupport:
    images: np.ndarray
    mode: str
    source: str
    seed: int

    def __post_init__(self):
        self.images.setflags(write=False)

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.images, dtype="<f4").tobytes()).hexdigest()[:16]

    def descriptor(self) -> str:
        return f"{self.mode}:{self.source}:seed={self.seed}:{self.digest()}"


def _draw_support(dataset: Dataset, size: int, seed: int, split: Optional[str]) -> np.ndarray:
    pool = dataset.indices(split)
    if len(pool) < size:
        raise DatasetError(f"{dataset.id}/{split}: {len(pool)} images, cannot draw a fixed support of {size}")
    rng = np.random.default_rng([seed, len(pool)])
    pick = np.sort(rng.choice(pool, size=size, replace=False))
    return np.array(dataset.images[pick], copy=True)


def make_fixed_support(mode: str, source: Union[str, Dataset, None] = None, datasets: Optional[Sequence[Dataset]] = None, size: int = 10, seed: int = 0, image_shape: Optional[Tuple[int, int, int]] = None, split: Optional[str] = "train"):
    """Build the fixed support(s) for an AZS protocol.

    * ``azs1``: one support per dataset in ``datasets``, each from its own images;
      returns ``{dataset id: FixedSupport}``.
    * ``azs2``: one support from ``source`` (an id looked up in ``datasets``, or
      a :class:`Dataset`), to be reused on every dataset.
    * ``random-matrix``: uniform noise in [0, 1] of ``image_shape``.
    """
    if size < 1:
        raise DatasetError("fixed support size must be >= 1")
    if mode == "azs1":
        if not datasets:
            raise DatasetError("azs1 needs the list of datasets")
        return {d.id: FixedSupport(_draw_support(d, size, seed, split), "azs1", d.id, seed) for d in datasets}
    if mode == "azs2":
        if isinstance(source, Dataset):
            ds = source
        else:
            lookup = {d.id: d for d in (datasets or [])}
            if source not in lookup:
                raise DatasetError(f"unknown fixed-support source {source!r}; known: {sorted(lookup)}")
            ds = lookup[source]
        return FixedSupport(_draw_support(ds, size, seed, split), "azs2", ds.id, seed)
    if mode == "random-matrix":
        if image_shape is None:
            if not datasets:
                raise DatasetError("random-matrix needs image_shape or a dataset to copy it from")
            image_shape = datasets[0].image_shape
        rng = np.random.default_rng(seed)
        noise = rng.uniform(0.0, 1.0, size=(size, *image_shape)).astype(np.float32)
        return FixedSupport(noise, "random-matrix", "noise", seed)
    raise DatasetError(f"unknown fixed-support mode {mode!r}; expected one of {AZS_MODES}")


def fixed_support_tensors(fixed: FixedSupport) -> Dict[str, np.ndarray]:
    """Checkpoint entries (``azs/`` namespace) for a fixed support."""
    return {"azs/images": fixed.images}


def fixed_support_meta(fixed: FixedSupport) -> Mapping[str, object]:
    return {"azs": {"mode": fixed.mode, "source": fixed.source, "seed": fixed.seed}}
