"""Dataset ingestion and non-IID client partitioning.

Supported on-disk layouts under a dataset root (``FEDVTC_DATA_ROOT`` overrides
the configured root):

* ``mnist``: IDX files ``train-images-idx3-ubyte``, ``train-labels-idx1-ubyte``,
  ``t10k-images-idx3-ubyte``, ``t10k-labels-idx1-ubyte`` (optionally ``.gz``),
  either directly in the root or in ``MNIST/raw``.
* ``cifar10`` / ``cifar100``: the python pickle batches
  (``cifar-10-batches-py/`` or ``cifar-100-python/``).
* ``tinyimagenet``: the ``tiny-imagenet-200/`` folder tree.
* any profile: ``<profile>.npz`` with ``train_x, train_y, test_x, test_y``
  (uint8 pixels or floats in [0, 1], images as N x C x H x W or N x H x W).
"""

from __future__ import annotations

import gzip
import os
import pickle
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .errors import IngestionError, PartitionError
from .models import DatasetProfile, get_profile

DATA_ROOT_ENV = "FEDVTC_DATA_ROOT"
PARTITION_METHOD = "per-class-dirichlet/v1"


@dataclass
class DatasetBundle:
    profile: str
    num_classes: int
    train_x: torch.Tensor
    train_y: torch.Tensor
    test_x: torch.Tensor
    test_y: torch.Tensor
    # positions of the kept samples in the source files, for audit
    train_source_idx: np.ndarray = field(default=None, repr=False)
    test_source_idx: np.ndarray = field(default=None, repr=False)

    @property
    def input_shape(self):
        return tuple(self.train_x.shape[1:])


@dataclass
class PartitionSpec:
    shards: List[List[int]]
    alpha: float
    seed: int
    method: str = PARTITION_METHOD

    @property
    def num_clients(self) -> int:
        return len(self.shards)

    def classes_of(self, labels: Sequence[int], client: int) -> List[int]:
        labels = np.asarray(labels)
        return sorted(set(labels[self.shards[client]].tolist()))

    def to_manifest(self) -> str:
        lines = [
            f"# method={self.method} alpha={self.alpha!r} seed={self.seed} clients={self.num_clients}",
        ]
        for k, shard in enumerate(self.shards):
            lines.append(f"{k}\t" + " ".join(str(i) for i in shard))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "PartitionSpec":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise PartitionError("partition manifest lacks a header line")
        header = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        shards = []
        for line in lines[1:]:
            if not line.strip():
                continue
            cid, _, rest = line.partition("\t")
            if int(cid) != len(shards):
                raise PartitionError(f"partition manifest out of order at client {cid}")
            shards.append([int(i) for i in rest.split()])
        return cls(shards, float(header["alpha"]), int(header["seed"]), header.get("method", PARTITION_METHOD))


def dirichlet_partition(labels: Sequence[int], num_clients: int, alpha: float, seed: int) -> PartitionSpec:
    """Split sample indices across clients with per-class Dirichlet(alpha) proportions.

    Any client left empty receives one sample taken from the currently largest
    shard, so every client can train.
    """
    labels = np.asarray(labels)
    if num_clients < 1:
        raise PartitionError(f"need at least one client, got {num_clients}")
    if not alpha > 0:
        raise PartitionError(f"alpha must be positive, got {alpha}")
    if len(labels) < num_clients:
        raise PartitionError(f"{len(labels)} samples cannot fill {num_clients} clients")

    rng = np.random.default_rng(seed)
    shards: List[List[int]] = [[] for _ in range(num_clients)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(num_clients, alpha))
        cuts = (np.cumsum(props) * len(idx)).astype(int)[:-1]
        for k, part in enumerate(np.split(idx, cuts)):
            shards[k].extend(part.tolist())

    for k in range(num_clients):
        if not shards[k]:
            donor = max(range(num_clients), key=lambda j: (len(shards[j]), -j))
            shards[k].append(shards[donor].pop())
    return PartitionSpec([sorted(s) for s in shards], float(alpha), int(seed))


# ---------------------------------------------------------------- ingestion

def _open_maybe_gz(path: Path) -> bytes:
    for candidate in (path, path.with_name(path.name + ".gz")):
        if candidate.exists():
            try:
                if candidate.suffix == ".gz":
                    with gzip.open(candidate, "rb") as fh:
                        return fh.read()
                return candidate.read_bytes()
            except (OSError, EOFError) as exc:
                raise IngestionError(candidate, f"unreadable ({exc})") from exc
    raise IngestionError(path, "missing (also tried .gz)")


def read_idx(path: Path) -> np.ndarray:
    raw = _open_maybe_gz(Path(path))
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
        raise IngestionError(path, "not an unsigned-byte IDX file")
    ndim = raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise IngestionError(path, "truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise IngestionError(path, f"expected {int(np.prod(dims))} values, found {body.size}")
    return body.reshape(dims)


def write_idx(path, array: np.ndarray, compress: bool = True) -> Path:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(">" + "I" * array.ndim, *array.shape)
    payload = header + array.tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if compress:
        path = path.with_name(path.name + ".gz")
        # mtime=0 keeps the archive bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)
    return path


def _load_mnist(root: Path):
    base = root / "MNIST" / "raw" if (root / "MNIST" / "raw").is_dir() else root
    tx = read_idx(base / "train-images-idx3-ubyte")
    ty = read_idx(base / "train-labels-idx1-ubyte")
    vx = read_idx(base / "t10k-images-idx3-ubyte")
    vy = read_idx(base / "t10k-labels-idx1-ubyte")
    if len(tx) != len(ty) or len(vx) != len(vy):
        raise IngestionError(base, "image/label counts disagree")
    return tx[:, None], ty, vx[:, None], vy


def _unpickle(path: Path) -> dict:
    if not path.exists():
        raise IngestionError(path, "missing")
    try:
        with open(path, "rb") as fh:
            return pickle.load(fh, encoding="latin1")
    except Exception as exc:  # corrupt pickle surfaces as many exception types
        raise IngestionError(path, f"unreadable ({exc})") from exc


def _load_cifar(root: Path, fine: bool):
    if fine:
        base = root / "cifar-100-python"
        train, test = [_unpickle(base / "train")], [_unpickle(base / "test")]
        key = "fine_labels"
    else:
        base = root / "cifar-10-batches-py"
        train = [_unpickle(base / f"data_batch_{i}") for i in range(1, 6)]
        test = [_unpickle(base / "test_batch")]
        key = "labels"

    def stack(batches):
        x = np.concatenate([np.asarray(b["data"], dtype=np.uint8) for b in batches]).reshape(-1, 3, 32, 32)
        y = np.concatenate([np.asarray(b[key]) for b in batches])
        return x, y

    return (*stack(train), *stack(test))


def _load_tinyimagenet(root: Path):
    from PIL import Image

    base = root / "tiny-imagenet-200"
    wnids_file = base / "wnids.txt"
    if not wnids_file.exists():
        raise IngestionError(wnids_file, "missing")
    wnids = wnids_file.read_text().split()
    index = {w: i for i, w in enumerate(wnids)}

    def read(path):
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1)

    tx, ty = [], []
    for w in wnids:
        for img in sorted((base / "train" / w / "images").glob("*.JPEG")):
            tx.append(read(img))
            ty.append(index[w])
    ann = base / "val" / "val_annotations.txt"
    if not ann.exists():
        raise IngestionError(ann, "missing")
    vx, vy = [], []
    for line in ann.read_text().splitlines():
        parts = line.split("\t")
        vx.append(read(base / "val" / "images" / parts[0]))
        vy.append(index[parts[1]])
    return np.stack(tx), np.array(ty), np.stack(vx), np.array(vy)


def _load_npz(path: Path):
    try:
        with np.load(path) as z:
            arrays = [z[k] for k in ("train_x", "train_y", "test_x", "test_y")]
    except KeyError as exc:
        raise IngestionError(path, f"missing array {exc}") from exc
    except Exception as exc:
        raise IngestionError(path, f"unreadable ({exc})") from exc
    tx, ty, vx, vy = arrays
    tx = tx[:, None] if tx.ndim == 3 else tx
    vx = vx[:, None] if vx.ndim == 3 else vx
    return tx, ty, vx, vy


def _to_unit(x: np.ndarray) -> torch.Tensor:
    if x.dtype == np.uint8:
        return torch.from_numpy(x.astype(np.float32) / 255.0)
    t = torch.from_numpy(np.asarray(x, dtype=np.float32))
    return t.clamp(0.0, 1.0)


def _subsample(n: int, cap: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if cap is None or cap >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=cap, replace=False))


def resolve_root(root) -> Path:
    override = os.environ.get(DATA_ROOT_ENV)
    return Path(override) if override else Path(root)


def load_dataset(
    profile,
    root,
    train_cap: Optional[int] = None,
    test_cap: Optional[int] = None,
    seed: int = 0,
) -> DatasetBundle:
    prof: DatasetProfile = get_profile(profile) if isinstance(profile, str) else profile
    root = resolve_root(root)
    npz = root / f"{prof.name}.npz"
    if npz.exists():
        tx, ty, vx, vy = _load_npz(npz)
    elif prof.name == "mnist":
        tx, ty, vx, vy = _load_mnist(root)
    elif prof.name in ("cifar10", "cifar100"):
        tx, ty, vx, vy = _load_cifar(root, fine=prof.name == "cifar100")
    elif prof.name == "tinyimagenet":
        tx, ty, vx, vy = _load_tinyimagenet(root)
    else:
        raise IngestionError(npz, "missing (profile has no native file layout)")

    if tuple(tx.shape[1:]) != prof.input_shape:
        raise IngestionError(root, f"images have shape {tuple(tx.shape[1:])}, profile expects {prof.input_shape}")

    rng = np.random.default_rng(seed)
    tr = _subsample(len(tx), train_cap, rng)
    te = _subsample(len(vx), test_cap, rng)
    return DatasetBundle(
        profile=prof.name,
        num_classes=prof.num_classes,
        train_x=_to_unit(tx[tr]),
        train_y=torch.as_tensor(np.asarray(ty)[tr], dtype=torch.long),
        test_x=_to_unit(vx[te]),
        test_y=torch.as_tensor(np.asarray(vy)[te], dtype=torch.long),
        train_source_idx=tr,
        test_source_idx=te,
    )


def toy_bundle(profile="tiny", n_train: int = 400, n_test: int = 200, seed: int = 0, num_classes: Optional[int] = None) -> DatasetBundle:
    """Small learnable image dataset: each class is a fixed random template plus noise."""
    prof = get_profile(profile) if isinstance(profile, str) else profile
    C = num_classes or prof.num_classes
    rng = np.random.default_rng(seed)
    templates = rng.random((C, *prof.input_shape)) > 0.6

    def draw(n):
        y = np.arange(n) % C
        rng.shuffle(y)
        x = templates[y] * 0.8 + rng.random((n, *prof.input_shape)) * 0.3
        return torch.from_numpy(np.clip(x, 0, 1).astype(np.float32)), torch.from_numpy(y).long()

    tx, ty = draw(n_train)
    vx, vy = draw(n_test)
    return DatasetBundle(prof.name, C, tx, ty, vx, vy, np.arange(n_train), np.arange(n_test))


def prepare_mnist_subset(dest, test_size: int = 1000, seed: int = 0) -> Path:
    """Write the 5000-image MNIST subset bundled with ``mlxtend`` as IDX files.

    The subset is split (stratified) into a train part and a disjoint
    ``test_size`` test part. Requires the optional ``mlxtend`` dependency.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise IngestionError("mlxtend", "install the 'mnist-subset' extra to build the MNIST subset") from exc
    x, y = mnist_data()
    x = x.reshape(-1, 28, 28).astype(np.uint8)
    y = y.astype(np.uint8)
    rng = np.random.default_rng(seed)
    per_class = test_size // 10
    test_idx = []
    for cls in range(10):
        idx = np.flatnonzero(y == cls)
        test_idx.extend(rng.choice(idx, size=per_class, replace=False).tolist())
    test_mask = np.zeros(len(y), dtype=bool)
    test_mask[test_idx] = True
    dest = Path(dest)
    write_idx(dest / "train-images-idx3-ubyte", x[~test_mask])
    write_idx(dest / "train-labels-idx1-ubyte", y[~test_mask])
    write_idx(dest / "t10k-images-idx3-ubyte", x[test_mask])
    write_idx(dest / "t10k-labels-idx1-ubyte", y[test_mask])
    return dest
