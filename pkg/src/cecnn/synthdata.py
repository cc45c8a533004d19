"""Block-structured 9x9 synthetic images and their response laws.

Images are nine independent 3x3 blocks.  "Dark" blocks have N(1, 0.5^2)
entries and "bright" blocks N(0, 1) entries.  Block operators summarise one
block into a scalar and responses are built from sums of block operators.

Random numbers: samples are generated in chunks of ``CHUNK`` consecutive
indices.  Chunk ``c`` of a dataset with seed ``s`` draws from
``numpy.random.Generator(PCG64(SeedSequence(s, spawn_key=(c,))))``, so any
chunk can be generated independently and the result does not depend on how
the work is scheduled.  A final partial chunk is generated in full and
truncated, so a dataset of size n is a prefix of any larger one with the same
seed.

Binary container (all little-endian)::

    offset  size  field
    0       8     magic  b"CECNNDS1"
    8       1     task   0 = rc, 1 = rr
    9       3     zero padding
    12      4     uint32 H
    16      4     uint32 W
    20      4     uint32 p (responses per sample)
    24      8     uint64 n
    32      ...   images   float64[n, H, W]
    ...     ...   y        float64[n, p]
    ...     ...   latent   float64[n, p]

The CSV manifest next to it has header ``index,y1,y2,g1,g2`` with one row
per sample (values written with ``repr`` so they round-trip exactly).
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .errors import ParameterError

CHUNK = 1024
SIZE = 9
BLOCK = 3
MAGIC = b"CECNNDS1"
_HEADER = struct.Struct("<8sB3xIIIQ")
TASKS = ("rc", "rr")

RC_DARK = ((3, 3),)
RR_DARK = ((1, 1), (2, 2), (3, 3), (1, 3), (3, 1))
RR_SIGMA = np.array([[1.0, 1.4], [1.4, 4.0]])


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray
    y1: float
    y2: float
    latent_mean: tuple[float, float]


@dataclass
class SyntheticDataset:
    task: str
    images: np.ndarray  # [n, 9, 9]
    y: np.ndarray  # [n, 2]
    latent: np.ndarray  # [n, 2]

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        n = self.images.shape[0]
        if self.y.shape[0] != n or self.latent.shape[0] != n:
            raise ValueError("images, responses and latent means disagree on n")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> SyntheticSample:
        return SyntheticSample(self.images[i], float(self.y[i, 0]), float(self.y[i, 1]),
                               (float(self.latent[i, 0]), float(self.latent[i, 1])))

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx)
        return SyntheticDataset(self.task, self.images[idx], self.y[idx], self.latent[idx])

    @property
    def inputs(self) -> np.ndarray:
        """Images with a channel axis, [n, 1, 9, 9]."""
        return self.images[:, None, :, :]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.task.encode())
        for arr in (self.images, self.y, self.latent):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    # -- persistence ------------------------------------------------------------
    def to_bytes(self) -> bytes:
        n, hh, ww = self.images.shape
        p = self.y.shape[1]
        head = _HEADER.pack(MAGIC, TASKS.index(self.task), hh, ww, p, n)
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                        for a in (self.images, self.y, self.latent))
        return head + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SyntheticDataset":
        magic, task, hh, ww, p, n = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise ValueError("not a synthetic dataset container")
        off = _HEADER.size
        sizes = (n * hh * ww, n * p, n * p)
        expected = off + 8 * sum(sizes)
        if len(raw) != expected:
            raise ValueError(f"container truncated: {len(raw)} bytes, expected {expected}")
        arrays = []
        for size in sizes:
            arrays.append(np.frombuffer(raw, dtype="<f8", count=size, offset=off).astype(np.float64))
            off += 8 * size
        return cls(TASKS[task], arrays[0].reshape(n, hh, ww), arrays[1].reshape(n, p),
                   arrays[2].reshape(n, p))

    def save(self, path: str | Path) -> tuple[Path, Path]:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        csv_path = path.with_suffix(path.suffix + ".csv")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "y1", "y2", "g1", "g2"])
            for i in range(len(self)):
                w.writerow([i, repr(float(self.y[i, 0])), repr(float(self.y[i, 1])),
                            repr(float(self.latent[i, 0])), repr(float(self.latent[i, 1]))])
        return path, csv_path

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticDataset":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# block operators
# ---------------------------------------------------------------------------


def block(images: np.ndarray, t: int, s: int) -> np.ndarray:
    """Block (t, s), 1-indexed, of each image: [n, 3, 3]."""
    return images[:, (t - 1) * BLOCK: t * BLOCK, (s - 1) * BLOCK: s * BLOCK]


def sum_tanh(b: np.ndarray) -> np.ndarray:
    return np.tanh(b).sum(axis=(1, 2))


def block_sum(b: np.ndarray) -> np.ndarray:
    return b.sum(axis=(1, 2))


def tanh_sum(b: np.ndarray) -> np.ndarray:
    return np.tanh(b.sum(axis=(1, 2)))


def g1_blocks(images: np.ndarray) -> np.ndarray:
    """S_11 + S_22 + S_33 shared by both tasks."""
    return sum_tanh(block(images, 1, 1)) + block_sum(block(images, 2, 2)) + tanh_sum(block(images, 3, 3))


def rc_logit(images: np.ndarray) -> np.ndarray:
    return block_sum(block(images, 2, 2))


def rr_g2(images: np.ndarray) -> np.ndarray:
    return sum_tanh(block(images, 1, 3)) + block_sum(block(images, 2, 2)) + tanh_sum(block(images, 3, 3))


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(chunk,))))


def _images(rng: np.random.Generator, m: int, dark) -> np.ndarray:
    x = rng.standard_normal((m, SIZE, SIZE))
    for t, s in dark:
        sl = (slice(None), slice((t - 1) * BLOCK, t * BLOCK), slice((s - 1) * BLOCK, s * BLOCK))
        x[sl] = 1.0 + 0.5 * x[sl]
    return x


def _generate(n: int, seed: int, task: str) -> SyntheticDataset:
    if n < 1:
        raise ValueError("n must be at least 1")
    images, ys, latents = [], [], []
    for c, start in enumerate(range(0, n, CHUNK)):
        m = CHUNK
        rng = chunk_rng(seed, c)
        if task == "rc":
            x = _images(rng, m, RC_DARK)
            g1, g2 = g1_blocks(x), rc_logit(x)
            y1 = g1 + rng.standard_normal(m)
            y2 = (rng.random(m) < special.expit(g2)).astype(np.float64)
        else:
            x = _images(rng, m, RR_DARK)
            g1, g2 = g1_blocks(x), rr_g2(x)
            eps = mvn_sample(np.zeros(2), RR_SIGMA, m, rng)
            y1, y2 = g1 + eps[:, 0], g2 + eps[:, 1]
        keep = min(CHUNK, n - start)
        images.append(x[:keep])
        ys.append(np.column_stack([y1, y2])[:keep])
        latents.append(np.column_stack([g1, g2])[:keep])
    return SyntheticDataset(task, np.concatenate(images), np.concatenate(ys), np.concatenate(latents))


def gen_rc_dataset(n: int, seed: int = 0) -> SyntheticDataset:
    """Regression-classification data: y1 ~ N(S11 + S22 + S33, 1), y2 ~ Bernoulli(sigmoid(S22))."""
    return _generate(n, seed, "rc")


def gen_rr_dataset(n: int, seed: int = 0) -> SyntheticDataset:
    """Regression-regression data with five dark blocks and correlated Gaussian noise."""
    return _generate(n, seed, "rr")


def mvn_sample(mean, cov, n: int, seed=None) -> np.ndarray:
    """``n`` draws from MVN(mean, cov) through a Cholesky factor of ``cov``.

    ``seed`` may be an int, a SeedSequence or an existing Generator.
    """
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (mean.size, mean.size):
        raise ValueError(f"cov {cov.shape} does not match mean of length {mean.size}")
    if not np.allclose(cov, cov.T):
        raise ParameterError("covariance must be symmetric")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ParameterError("covariance is not positive definite") from exc
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return mean + rng.standard_normal((n, mean.size)) @ chol.T
