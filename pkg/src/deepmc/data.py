"""Synthetic low-rank problems and MovieLens100K ingestion."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .exceptions import ConfigError, DataFormatError, InvalidInputError
from .training import MaskedMatrix

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "DEEPMC_DATA_ROOT"

# sample-size grid for the observed-entries sweep
SAMPLE_SIZE_GRID = (1000, 1500, 2000, 2500, 3000, 4000, 5000)


@dataclass(frozen=True)
class SyntheticSpec:
    m: int = 100
    n: int = 100
    rank: int = 5
    sample_size: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ConfigError(f"matrix dimensions must be positive, got {self.m}x{self.n}", "m")
        if not 1 <= self.rank <= min(self.m, self.n):
            raise ConfigError(f"rank must lie in [1, {min(self.m, self.n)}], got {self.rank}", "rank")
        if not 0 < self.sample_size <= self.m * self.n:
            raise ConfigError(
                f"sample_size must lie in (0, {self.m * self.n}], got {self.sample_size}", "sample_size"
            )


def low_rank_truth(spec: SyntheticSpec, rng=None):
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    u = rng.standard_normal((spec.m, spec.rank))
    v = rng.standard_normal((spec.n, spec.rank))
    return u @ v.T


def generate_low_rank(spec: SyntheticSpec) -> MaskedMatrix:
    """Rank-r truth ``U V^T`` (standard normal factors) with a uniform mask.

    The mask samples ``sample_size`` distinct cells without repetition. The
    same seed always gives the same truth and the same mask.
    """
    rng = np.random.default_rng(spec.seed)
    truth = low_rank_truth(spec, rng)
    flat = np.sort(rng.choice(spec.m * spec.n, size=spec.sample_size, replace=False))
    rows, cols = np.divmod(flat, spec.n)
    return MaskedMatrix((spec.m, spec.n), rows, cols, truth[rows, cols], ground_truth=truth)


def export_synthetic(data: MaskedMatrix, spec: SyntheticSpec, path):
    """Write ``row,col,value`` CSV plus ``<path>.json`` with shape/rank/seed."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "value"])
        for r, c, v in zip(data.rows, data.cols, data.values):
            writer.writerow([int(r), int(c), repr(float(v))])
    header = {"shape": list(data.shape), **asdict(spec)}
    Path(str(path) + ".json").write_text(json.dumps(header, indent=2))


def import_synthetic(path) -> tuple[MaskedMatrix, SyntheticSpec]:
    """Read a dataset written by :func:`export_synthetic`.

    The ground truth is regenerated from the sidecar's seed and checked
    against the stored observations.
    """
    path = Path(path)
    header = json.loads(Path(str(path) + ".json").read_text())
    spec = SyntheticSpec(**{k: header[k] for k in ("m", "n", "rank", "sample_size", "seed")})
    rows, cols, vals = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first != ["row", "col", "value"]:
            raise DataFormatError(f"unexpected header {first}", line=1)
        for lineno, rec in enumerate(reader, start=2):
            try:
                r, c, v = rec
                rows.append(int(r))
                cols.append(int(c))
                vals.append(float(v))
            except ValueError as exc:
                raise DataFormatError(f"bad record {rec!r}", line=lineno) from exc
    truth = low_rank_truth(spec)
    data = MaskedMatrix(tuple(header["shape"]), rows, cols, vals, ground_truth=truth)
    if not np.allclose(truth[data.rows, data.cols], data.values, rtol=0, atol=1e-12):
        raise DataFormatError("stored observations do not match the regenerated ground truth")
    return data, spec


class RatingTriples(NamedTuple):
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray

    def __len__(self):
        return int(self.ratings.size)


class RatingsDataset(NamedTuple):
    triples: RatingTriples
    n_users: int
    n_items: int


def read_ratings(path) -> RatingsDataset:
    """Parse a tab-separated ``user item rating timestamp`` file (1-based ids)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"ratings file not found: {path}")
    users, items, ratings, stamps = [], [], [], []
    seen = set()
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataFormatError(f"expected 4 tab-separated fields, got {len(parts)}", line=lineno)
            try:
                u, i, r, t = (int(p) for p in parts)
            except ValueError as exc:
                raise DataFormatError(f"non-integer field in {line.strip()!r}", line=lineno) from exc
            if not 1 <= r <= 5:
                raise DataFormatError(f"rating {r} outside 1..5", line=lineno)
            if u < 1 or i < 1:
                raise DataFormatError("ids are 1-based", line=lineno)
            if (u, i) in seen:
                raise DataFormatError(f"duplicate (user, item) pair ({u}, {i})", line=lineno)
            seen.add((u, i))
            users.append(u)
            items.append(i)
            ratings.append(r)
            stamps.append(t)
    triples = RatingTriples(
        np.array(users, dtype=np.int64),
        np.array(items, dtype=np.int64),
        np.array(ratings, dtype=float),
        np.array(stamps, dtype=np.int64),
    )
    n_users = int(triples.users.max()) if len(triples) else 0
    n_items = int(triples.items.max()) if len(triples) else 0
    return RatingsDataset(triples, n_users, n_items)


def split_triples(triples: RatingTriples, split_fraction, seed):
    if not 0.0 < split_fraction <= 1.0:
        raise ConfigError(f"split_fraction must lie in (0, 1], got {split_fraction}", "split")
    order = np.random.default_rng(seed).permutation(len(triples))
    n_train = int(round(split_fraction * len(triples)))
    pick = lambda idx: RatingTriples(*(a[idx] for a in triples))  # noqa: E731
    return pick(np.sort(order[:n_train])), pick(np.sort(order[n_train:]))


def load_movielens(path, split_fraction=0.9, seed=0):
    """Global uniform train/test split of a MovieLens ``u.data`` file.

    Returns ``(train, test)``: a :class:`MaskedMatrix` over the padded
    ``(n_users + 1) x (n_items + 1)`` grid (ids are used as-is, so row and
    column 0 stay empty) and the held-out :class:`RatingTriples`.
    """
    ds = read_ratings(path)
    train, test = split_triples(ds.triples, split_fraction, seed)
    shape = (ds.n_users + 1, ds.n_items + 1)
    log.info(
        "parsed %d ratings: %d users x %d items (1-based ids); training grid %dx%d with padded row/col 0",
        len(ds.triples), ds.n_users, ds.n_items, shape[0], shape[1],
    )
    matrix = MaskedMatrix(shape, train.users, train.items, train.ratings)
    return matrix, test


def rmse(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.size == 0:
        raise InvalidInputError("RMSE over an empty test set is undefined")
    return float(np.sqrt(np.mean((predictions - targets) ** 2)))


def resolve_data_path(name):
    """Resolve ``name`` against ``$DEEPMC_DATA_ROOT`` unless it is absolute."""
    p = Path(os.path.expanduser(str(name)))
    if p.is_absolute():
        return p
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) / p if root else p
