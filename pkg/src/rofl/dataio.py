"""Data ingestion: IDX files (MNIST), parity labels, federated splits, synthetic regression."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .objectives import Dataset, LabeledDataset, Objective

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_CODE_FOR_KIND = {(dt.kind, dt.itemsize): code for code, dt in IDX_DTYPES.items()}

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX input; ``offset`` is the byte position where parsing stopped."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class IdxTensor:
    dtype: int
    dims: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        if self.dtype not in IDX_DTYPES:
            raise ValueError(f"unknown IDX dtype code 0x{self.dtype:02X}")
        if int(np.prod(self.dims, dtype=object)) != self.data.size:
            raise ValueError(f"dims {self.dims} do not match {self.data.size} elements")

    @property
    def magic(self) -> int:
        return (self.dtype << 8) | len(self.dims)

    def array(self) -> np.ndarray:
        return self.data.reshape(self.dims)


def parse_idx(buf: bytes) -> IdxTensor:
    """Parse an IDX byte string (big-endian header and payload).

    Sizes are validated against the buffer length before anything is
    allocated, and trailing bytes are rejected.
    """
    buf = memoryview(buf).cast("B")
    n = len(buf)
    if n < 4:
        raise IdxFormatError("truncated magic number", n)
    if buf[0] != 0 or buf[1] != 0:
        raise IdxFormatError("bad magic: first two bytes must be zero", 0)
    code, ndim = buf[2], buf[3]
    if code not in IDX_DTYPES:
        raise IdxFormatError(f"unknown dtype code 0x{code:02X}", 2)
    if ndim == 0:
        raise IdxFormatError("zero dimensions", 3)
    header = 4 + 4 * ndim
    if n < header:
        raise IdxFormatError(f"truncated dimension list ({ndim} dims declared)", n)
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = 1
    for size in dims:
        count *= size
    dtype = IDX_DTYPES[code]
    if count * dtype.itemsize > n - header:
        if count * dtype.itemsize >= 2 ** 63:
            raise IdxFormatError(f"dimension overflow: {dims}", 4)
        raise IdxFormatError(
            f"truncated payload: need {count * dtype.itemsize} bytes, have {n - header}", n)
    end = header + count * dtype.itemsize
    if end != n:
        raise IdxFormatError(f"{n - end} trailing bytes after payload", end)
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=header)
    return IdxTensor(code, tuple(dims), data.astype(dtype.newbyteorder("=")))


def serialize_idx(tensor: IdxTensor) -> bytes:
    dtype = IDX_DTYPES[tensor.dtype]
    head = struct.pack(">HBB", 0, tensor.dtype, len(tensor.dims))
    head += struct.pack(f">{len(tensor.dims)}I", *tensor.dims)
    return head + np.ascontiguousarray(tensor.data, dtype=dtype).tobytes()


def idx_from_array(arr: np.ndarray) -> IdxTensor:
    arr = np.asarray(arr)
    code = _CODE_FOR_KIND.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise ValueError(f"no IDX type for numpy dtype {arr.dtype}")
    return IdxTensor(code, tuple(arr.shape), arr.ravel())


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def load_idx(path) -> IdxTensor:
    """Read an IDX file; ``.gz`` files are decompressed transparently."""
    path = Path(path)
    try:
        return parse_idx(_read_bytes(path))
    except IdxFormatError as exc:
        raise IdxFormatError(f"{path}: {exc.args[0]}", exc.offset) from None


def parity_labels(digits) -> np.ndarray:
    """Map digits to +1 (even) / -1 (odd)."""
    digits = np.asarray(digits)
    if digits.size and (digits.min() < 0 or digits.max() > 9):
        raise ValueError("digit labels must lie in 0..9")
    return np.where(digits % 2 == 0, 1.0, -1.0)


def _find_pairs(directory: Path) -> list[tuple[Path, Path]]:
    pairs = []
    for img in sorted(directory.iterdir()):
        name = img.name
        for suffix in ("-images-idx3-ubyte", "-images-idx3-ubyte.gz"):
            if name.endswith(suffix):
                stem = name[: -len(suffix)]
                for lab_suffix in ("-labels-idx1-ubyte", "-labels-idx1-ubyte.gz"):
                    lab = directory / (stem + lab_suffix)
                    if lab.exists():
                        pairs.append((img, lab))
                        break
    return pairs


def load_mnist(directory, bias: bool = True) -> tuple[LabeledDataset, np.ndarray]:
    """Load every ``<stem>-images-idx3-ubyte[.gz]`` / ``<stem>-labels-idx1-ubyte[.gz]`` pair.

    Pixels are scaled to ``[0, 1]``; with ``bias`` a constant-1 column is
    appended. Returns the parity dataset and the raw digit labels.
    """
    directory = Path(directory)
    pairs = _find_pairs(directory) if directory.is_dir() else []
    if not pairs:
        raise FileNotFoundError(
            f"no MNIST files in {directory}: expected e.g. train-images-idx3-ubyte[.gz] "
            "with train-labels-idx1-ubyte[.gz] (any '<stem>-images-idx3-ubyte' / "
            "'<stem>-labels-idx1-ubyte' pair); see scripts/fetch_mnist.py")
    feats, digits = [], []
    for img_path, lab_path in pairs:
        img, lab = load_idx(img_path), load_idx(lab_path)
        if img.magic != IMAGE_MAGIC or lab.magic != LABEL_MAGIC:
            raise IdxFormatError(f"{img_path.name}/{lab_path.name}: unexpected magic "
                                 f"0x{img.magic:08X}/0x{lab.magic:08X}", 0)
        if img.dims[0] != lab.dims[0]:
            raise ValueError(f"{img_path.name} has {img.dims[0]} images, "
                             f"{lab_path.name} has {lab.dims[0]} labels")
        feats.append(img.array().reshape(img.dims[0], -1).astype(float) / 255.0)
        digits.append(lab.data.astype(np.int64))
    X = np.vstack(feats)
    d = np.concatenate(digits)
    if bias:
        X = np.hstack([X, np.ones((X.shape[0], 1))])
    return LabeledDataset(X, parity_labels(d)), d


def fisher_yates(n: int, rng: np.random.Generator) -> np.ndarray:
    """Permutation of ``range(n)``: for i = n-1..1 swap i with j ~ U{0..i}.

    All swap targets are drawn up front with one ``rng.integers`` call.
    """
    perm = np.arange(n)
    if n < 2:
        return perm
    highs = np.arange(n, 1, -1)
    targets = rng.integers(0, highs)
    for i, j in zip(range(n - 1, 0, -1), targets.tolist()):
        perm[i], perm[j] = perm[j], perm[i]
    return perm


@dataclass(frozen=True)
class FederatedSplit:
    clients: list
    test: Dataset | None
    client_indices: list | None = None
    test_indices: np.ndarray | None = None

    @property
    def K(self) -> int:
        return len(self.clients)


def make_split(dataset: Dataset, K: int, per_client: int, test_size: int,
               rng: np.random.Generator) -> FederatedSplit:
    """Disjoint uniform-random split into ``K`` equal clients and a test set."""
    if K < 1 or per_client < 1 or test_size < 0:
        raise ValueError("need K >= 1, per_client >= 1, test_size >= 0")
    need = K * per_client + test_size
    if need > len(dataset):
        raise ValueError(f"need {need} samples for the split, dataset has {len(dataset)}")
    perm = fisher_yates(len(dataset), rng)
    client_idx = [perm[k * per_client:(k + 1) * per_client] for k in range(K)]
    test_idx = perm[K * per_client:need]
    clients = [dataset.subset(idx) for idx in client_idx]
    test = dataset.subset(test_idx) if test_size else None
    return FederatedSplit(clients, test, client_idx, test_idx)


def synth_quadratic(K: int, d: int, samples_per_client: int, condition_target: float,
                    rng: np.random.Generator, noise_std: float = 0.1,
                    lam: float = 0.0) -> tuple[FederatedSplit, Objective, np.ndarray]:
    """Least-squares clients whose pooled Gram matrix has a prescribed spectrum.

    A Gaussian design is whitened and rescaled so that the pooled
    ``A^T A / N`` has eigenvalues spaced geometrically from 1 down to
    ``1 / condition_target``. Targets are ``A w + noise`` for a planted
    ``w ~ N(0, I)``. Returns the split (test set = one extra client-sized
    draw), the objective, and the planted weights.
    """
    if min(K, d, samples_per_client) < 1 or condition_target < 1:
        raise ValueError("need positive sizes and condition_target >= 1")
    n_total = K * samples_per_client
    if n_total < d:
        raise ValueError(f"need at least d={d} pooled samples, got {n_total}")
    A = rng.standard_normal((n_total, d))
    gram = A.T @ A / n_total
    evals, evecs = np.linalg.eigh(gram)
    whiten = evecs @ np.diag(evals ** -0.5) @ evecs.T
    scales = condition_target ** (-np.arange(d) / (2.0 * max(d - 1, 1)))
    A = A @ whiten @ np.diag(scales)
    w_planted = rng.standard_normal(d)
    b = A @ w_planted + noise_std * rng.standard_normal(n_total)
    clients = [Dataset(A[k * samples_per_client:(k + 1) * samples_per_client],
                       b[k * samples_per_client:(k + 1) * samples_per_client]) for k in range(K)]
    A_test = rng.standard_normal((samples_per_client, d)) @ np.diag(scales)
    test = Dataset(A_test, A_test @ w_planted + noise_std * rng.standard_normal(samples_per_client))
    return FederatedSplit(clients, test), Objective("quadratic", lam), w_planted
