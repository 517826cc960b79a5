"""Sparse multi-label datasets, the extreme-classification text format, and
minibatch / negative-label sampling.

Text format (0-based indices)::

    N D K
    l1,l2,... f:v f:v ...
    ...

The label list may be empty, in which case the line starts directly with
features (or is blank).
"""

import gzip
import io
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ParseError

__all__ = [
    "Dataset",
    "Minibatch",
    "parse_xc_dataset",
    "load_dataset",
    "dump_xc_dataset",
    "save_dataset",
    "load_split",
    "make_minibatch",
    "full_batch",
    "sample_minibatch",
    "epoch_batches",
    "as_csr",
]


def as_csr(x, n_cols=None):
    """Return ``x`` as a canonical float64 CSR matrix (sorted, no duplicates)."""
    if sp.issparse(x):
        x = sp.csr_matrix(x, dtype=np.float64)
    else:
        x = sp.csr_matrix(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if n_cols is not None and x.shape[1] != n_cols:
        x = sp.csr_matrix((x.data, x.indices, x.indptr), shape=(x.shape[0], n_cols))
    if not x.has_canonical_format:
        x = x.copy()
        x.sum_duplicates()
    return x


def _row_sqnorms(x):
    return np.asarray(x.multiply(x).sum(axis=1), dtype=np.float64).ravel()


@dataclass(frozen=True, eq=False)
class Dataset:
    """Sparse features plus positive-label index lists.

    Labels are stored CSR-style: the positives of row ``i`` are
    ``label_indices[label_offsets[i]:label_offsets[i + 1]]``, sorted and
    unique. Negatives are implicit (the complement in ``range(n_labels)``).
    """

    features: sp.csr_matrix
    label_offsets: np.ndarray
    label_indices: np.ndarray
    n_labels: int

    def __post_init__(self):
        x = self.features
        if not sp.isspmatrix_csr(x) or not x.has_canonical_format:
            raise ValueError("features must be a canonical CSR matrix")
        off = np.asarray(self.label_offsets)
        lab = np.asarray(self.label_indices)
        if off.shape != (x.shape[0] + 1,) or off[0] != 0 or off[-1] != lab.size:
            raise ValueError("label_offsets inconsistent with label_indices")
        if np.any(np.diff(off) < 0):
            raise ValueError("label_offsets must be non-decreasing")
        if lab.size and (lab.min() < 0 or lab.max() >= self.n_labels):
            raise ValueError("label index out of range")
        for i in range(x.shape[0]):
            row = lab[off[i]:off[i + 1]]
            if row.size > 1 and np.any(np.diff(row) <= 0):
                raise ValueError(f"labels of row {i} are not sorted and unique")

    @classmethod
    def from_label_lists(cls, features, labels, n_labels):
        """Build from a feature matrix and a list of per-row label iterables."""
        features = as_csr(features)
        rows = [np.unique(np.asarray(list(r), dtype=np.int64)) for r in labels]
        if len(rows) != features.shape[0]:
            raise ValueError("one label list per feature row required")
        off = np.zeros(len(rows) + 1, dtype=np.int64)
        off[1:] = np.cumsum([r.size for r in rows])
        lab = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        return cls(features, off, lab.astype(np.int64), int(n_labels))

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def positives(self, i):
        return self.label_indices[self.label_offsets[i]:self.label_offsets[i + 1]]

    @property
    def n_positives(self):
        return np.diff(self.label_offsets)

    @cached_property
    def row_sqnorms(self):
        return _row_sqnorms(self.features)

    def label_matrix(self):
        """Binary N x K indicator matrix of positive labels (CSR)."""
        data = np.ones(self.label_indices.size)
        return sp.csr_matrix((data, self.label_indices, self.label_offsets),
                             shape=(self.n, self.n_labels))

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset.from_label_lists(self.features[rows],
                                        [self.positives(i) for i in rows],
                                        self.n_labels)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        a, b = self.features, other.features
        return (self.n_labels == other.n_labels and a.shape == b.shape
                and np.array_equal(a.indptr, b.indptr)
                and np.array_equal(a.indices, b.indices)
                and np.array_equal(a.data, b.data)
                and np.array_equal(self.label_offsets, other.label_offsets)
                and np.array_equal(self.label_indices, other.label_indices))

    __hash__ = None


# ---------------------------------------------------------------------------
# text format


def _parse_int(tok, what, lineno):
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"non-numeric {what} {tok!r}", lineno) from None


def parse_xc_dataset(stream):
    """Parse the extreme-classification text format from a text stream or string."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    header = stream.readline()
    parts = header.split()
    if len(parts) != 3:
        raise ParseError(f"header must be 'N D K', got {header.strip()!r}", 1)
    n, d, k = (_parse_int(t, "header field", 1) for t in parts)
    if n < 0 or d < 0 or k < 0:
        raise ParseError("header counts must be non-negative", 1)

    indptr = [0]
    indices = []
    values = []
    label_off = [0]
    label_idx = []
    row = 0
    for lineno, line in enumerate(stream, start=2):
        tokens = line.split()
        if row >= n:
            if tokens:
                raise ParseError(f"more than N={n} data lines", lineno)
            continue
        if tokens and ":" not in tokens[0]:
            labels = []
            for tok in tokens[0].split(","):
                if tok == "":
                    continue
                lab = _parse_int(tok, "label", lineno)
                if lab < 0 or lab >= k:
                    raise ParseError(f"label {lab} out of range for K={k}", lineno)
                labels.append(lab)
            if len(set(labels)) != len(labels):
                raise ParseError("duplicate label", lineno)
            label_idx.extend(sorted(labels))
            tokens = tokens[1:]
        label_off.append(len(label_idx))

        feats = {}
        for tok in tokens:
            f, sep, v = tok.partition(":")
            if not sep:
                raise ParseError(f"expected f:v, got {tok!r}", lineno)
            j = _parse_int(f, "feature index", lineno)
            if j < 0 or j >= d:
                raise ParseError(f"feature index {j} out of range for D={d}", lineno)
            if j in feats:
                raise ParseError(f"duplicate feature index {j}", lineno)
            try:
                feats[j] = float(v)
            except ValueError:
                raise ParseError(f"non-numeric feature value {v!r}", lineno) from None
        for j in sorted(feats):
            indices.append(j)
            values.append(feats[j])
        indptr.append(len(indices))
        row += 1
    if row != n:
        raise ParseError(f"expected N={n} data lines, found {row}")

    x = sp.csr_matrix((np.asarray(values, dtype=np.float64),
                       np.asarray(indices, dtype=np.int32),
                       np.asarray(indptr, dtype=np.int64)), shape=(n, d))
    return Dataset(x, np.asarray(label_off, dtype=np.int64),
                   np.asarray(label_idx, dtype=np.int64), k)


def _open_text(path, mode):
    path = os.fspath(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def load_dataset(path):
    """Read a dataset file; ``.gz`` files are decompressed transparently."""
    with _open_text(path, "r") as fh:
        return parse_xc_dataset(fh)


def load_split(path, column=0):
    """0-based row indices from a whitespace-separated split file.

    Each column of the file lists the 1-based rows of one split (the layout
    used by the public extreme-classification repository).
    """
    rows = []
    with _open_text(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if column >= len(tokens):
                raise ParseError(f"split column {column} missing", lineno)
            idx = _parse_int(tokens[column], "row index", lineno)
            if idx < 1:
                raise ParseError(f"row index {idx} must be 1-based", lineno)
            rows.append(idx - 1)
    return np.asarray(rows, dtype=np.int64)


def dump_xc_dataset(data, stream):
    """Write ``data`` in the text format. Values use ``repr`` so re-parsing is exact."""
    x = data.features
    stream.write(f"{data.n} {data.d} {data.n_labels}\n")
    for i in range(data.n):
        parts = []
        labels = data.positives(i)
        if labels.size:
            parts.append(",".join(str(int(l)) for l in labels))
        lo, hi = x.indptr[i], x.indptr[i + 1]
        parts.extend(f"{int(j)}:{float(v)!r}" for j, v in zip(x.indices[lo:hi], x.data[lo:hi]))
        stream.write(" ".join(parts) + "\n")


def save_dataset(data, path):
    with _open_text(path, "w") as fh:
        dump_xc_dataset(data, fh)


# ---------------------------------------------------------------------------
# minibatches


@dataclass(frozen=True, eq=False)
class Minibatch:
    """Rows of a dataset with their positive labels and sampled negatives.

    ``neg_population[i]`` is the size of the full negative set of row ``i``;
    the sampled negatives are reweighted by ``neg_population / n_sampled``.
    ``proj`` optionally holds the rows projected on a basis (``X_b X̃ᵀ``).
    """

    row_indices: np.ndarray
    features: sp.csr_matrix
    sqnorms: np.ndarray
    pos_offsets: np.ndarray
    pos_labels: np.ndarray
    neg_offsets: np.ndarray
    neg_labels: np.ndarray
    neg_population: np.ndarray
    n_labels: int
    proj: np.ndarray = None

    @property
    def size(self):
        return self.row_indices.size

    def positives(self, i):
        return self.pos_labels[self.pos_offsets[i]:self.pos_offsets[i + 1]]

    def negatives(self, i):
        return self.neg_labels[self.neg_offsets[i]:self.neg_offsets[i + 1]]

    def pairs(self):
        """Flattened (row, label, sign, weight) arrays of every likelihood term."""
        b = self.size
        n_pos = np.diff(self.pos_offsets)
        n_neg = np.diff(self.neg_offsets)
        w_neg = np.divide(self.neg_population, n_neg,
                          out=np.zeros(b), where=n_neg > 0)
        rows = np.concatenate([np.repeat(np.arange(b), n_pos),
                               np.repeat(np.arange(b), n_neg)])
        labels = np.concatenate([self.pos_labels, self.neg_labels])
        signs = np.concatenate([np.ones(self.pos_labels.size),
                                -np.ones(self.neg_labels.size)])
        weights = np.concatenate([np.ones(self.pos_labels.size),
                                  np.repeat(w_neg, n_neg)])
        return rows, labels, signs, weights


def _complement(pos, k):
    mask = np.ones(k, dtype=bool)
    mask[pos] = False
    return np.flatnonzero(mask)


def _nth_negative(pos, j):
    # j-th element (0-based) of the sorted complement of sorted ``pos``
    return j + np.searchsorted(pos - np.arange(pos.size), j, side="right")


def make_minibatch(data, rows, negatives=None, basis=None):
    """Assemble a Minibatch for explicit ``rows``.

    ``negatives`` is a per-row sequence of sampled negative labels; ``None``
    uses the full negative set of every row.
    """
    rows = np.asarray(rows, dtype=np.int64)
    k = data.n_labels
    pos = [data.positives(i) for i in rows]
    pop = np.array([k - p.size for p in pos], dtype=np.float64)
    if negatives is None:
        neg = [_complement(p, k) for p in pos]
    else:
        neg = [np.sort(np.asarray(l, dtype=np.int64)) for l in negatives]
        if len(neg) != rows.size:
            raise ValueError("one negative sample per row required")
        for p, l in zip(pos, neg):
            if np.intersect1d(p, l).size or np.unique(l).size != l.size:
                raise ValueError("negative sample overlaps positives or repeats")

    def _pack(lists):
        off = np.zeros(len(lists) + 1, dtype=np.int64)
        off[1:] = np.cumsum([l.size for l in lists])
        flat = np.concatenate(lists).astype(np.int64) if lists else np.zeros(0, np.int64)
        return off, flat

    pos_off, pos_lab = _pack(pos)
    neg_off, neg_lab = _pack(neg)
    feats = data.features[rows]
    proj = basis.project(feats, rows) if basis is not None else None
    return Minibatch(rows, feats, data.row_sqnorms[rows], pos_off, pos_lab,
                     neg_off, neg_lab, pop, k, proj)


def full_batch(data, basis=None):
    """Every row with its complete negative set; the estimator becomes exact."""
    return make_minibatch(data, np.arange(data.n), None, basis)


def _sample_negatives(data, rows, neg_size, rng):
    k = data.n_labels
    out = []
    for i in rows:
        p = data.positives(i)
        n_neg = k - p.size
        if neg_size >= n_neg:
            out.append(_complement(p, k))
        else:
            j = rng.choice(n_neg, size=neg_size, replace=False)
            out.append(_nth_negative(p, np.sort(j)))
    return out


def sample_minibatch(data, batch_size, neg_size, rng, basis=None):
    """Draw ``batch_size`` rows uniformly without replacement, then for each row
    ``min(neg_size, |N_i|)`` negatives uniformly without replacement."""
    if not 1 <= batch_size <= data.n:
        raise ValueError(f"batch_size must be in [1, {data.n}], got {batch_size}")
    if neg_size < 1:
        raise ValueError("neg_size must be >= 1")
    rows = np.sort(rng.choice(data.n, size=batch_size, replace=False))
    return make_minibatch(data, rows, _sample_negatives(data, rows, neg_size, rng), basis)


def epoch_batches(data, batch_size, neg_size, rng, basis=None, iid=False):
    """Yield the ``ceil(N / batch_size)`` minibatches of one epoch.

    By default the epoch is a shuffled pass without replacement (the last
    batch may be smaller). ``iid=True`` draws each batch independently with
    :func:`sample_minibatch` instead.
    """
    n_steps = -(-data.n // batch_size)
    if iid:
        for _ in range(n_steps):
            yield sample_minibatch(data, batch_size, neg_size, rng, basis)
        return
    perm = rng.permutation(data.n)
    for s in range(n_steps):
        rows = np.sort(perm[s * batch_size:(s + 1) * batch_size])
        yield make_minibatch(data, rows, _sample_negatives(data, rows, neg_size, rng), basis)
