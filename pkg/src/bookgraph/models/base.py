"""Shared recommender contract, interaction matrices and the model file format."""

from __future__ import annotations

import io
import json
import logging
import struct
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import scipy.sparse as sp

from bookgraph.graph import Interaction

log = logging.getLogger(__name__)

MAGIC = b"BGRM"
FORMAT_VERSION = 1


class NotFittedError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class ModelFileError(ValueError):
    pass


class SparseInteractionMatrix:
    """Users x books matrix over distinct training pairs, with CSR and CSC views."""

    def __init__(self, interactions: Sequence[Interaction], n_users: int, n_items: int, weighted: bool = False):
        users = np.fromiter((x.user for x in interactions), dtype=np.int64, count=len(interactions))
        items = np.fromiter((x.book for x in interactions), dtype=np.int64, count=len(interactions))
        if weighted:
            vals = np.fromiter((x.weight for x in interactions), dtype=np.float64, count=len(interactions))
        else:
            vals = np.ones(len(interactions))
        m = sp.coo_matrix((vals, (users, items)), shape=(n_users, n_items)).tocsr()
        m.sum_duplicates()
        if not weighted:
            m.data[:] = 1.0
        m.sort_indices()
        self.csr: sp.csr_matrix = m
        self.csc: sp.csc_matrix = m.tocsc()

    @property
    def nnz(self) -> int:
        return self.csr.nnz

    @property
    def shape(self) -> tuple[int, int]:
        return self.csr.shape


def interaction_arrays(interactions: Sequence[Interaction]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(interactions)
    users = np.fromiter((x.user for x in interactions), dtype=np.int64, count=n)
    items = np.fromiter((x.book for x in interactions), dtype=np.int64, count=n)
    weights = np.fromiter((x.weight for x in interactions), dtype=np.float64, count=n)
    return users, items, weights


def popularity_counts(interactions: Sequence[Interaction], n_items: int) -> np.ndarray:
    items = np.fromiter((x.book for x in interactions), dtype=np.int64, count=len(interactions))
    return np.bincount(items, minlength=n_items).astype(np.float64)


def top_n(scores: np.ndarray, exclude: np.ndarray, n: int, tiebreak: np.ndarray | None = None) -> np.ndarray:
    """Indices of the ``n`` best non-excluded entries.

    Order: score descending, then ``tiebreak`` descending, then index ascending.
    """
    cand = np.flatnonzero(~exclude)
    if n <= 0 or len(cand) == 0:
        return cand[:0]
    s = scores[cand]
    if n < len(cand):
        kth = np.partition(-s, n - 1)[n - 1]
        keep = -s <= kth  # every candidate tied with the n-th best survives
        cand, s = cand[keep], s[keep]
    keys = [cand, -s] if tiebreak is None else [cand, -tiebreak[cand], -s]
    return cand[np.lexsort(keys)][:n]


class Recommender:
    """Fit on training interactions, then rank the catalog for a user.

    ``rank`` never returns a masked book; by default the mask is the user's
    training items. Scores come out non-increasing with ties broken by the
    model's secondary key (if any) and then by ascending book index.
    """

    name = "base"
    defaults: dict[str, Any] = {}

    def __init__(self, n_users: int, n_items: int, **hparams):
        unknown = set(hparams) - set(self.defaults)
        if unknown:
            raise TypeError(f"{type(self).__name__} got unknown hyperparameters {sorted(unknown)}")
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.hparams = {**self.defaults, **hparams}
        self.seed: int | None = None
        self.fitted = False
        self._train_indptr = np.zeros(self.n_users + 1, dtype=np.int64)
        self._train_indices = np.zeros(0, dtype=np.int64)
        self.fit_log: list[dict] = []

    # -- fitting ------------------------------------------------------------
    def fit(self, train: Sequence[Interaction], graph=None, features=None, valid=None, seed: int = 0):
        self.seed = int(seed)
        m = SparseInteractionMatrix(train, self.n_users, self.n_items).csr
        self._train_indptr = m.indptr.astype(np.int64)
        self._train_indices = m.indices.astype(np.int64)
        self._fit(train, graph=graph, features=features, valid=valid, seed=self.seed)
        self.fitted = True
        return self

    def _fit(self, train, graph, features, valid, seed):
        raise NotImplementedError

    def train_items(self, user: int) -> np.ndarray:
        return self._train_indices[self._train_indptr[user] : self._train_indptr[user + 1]]

    def train_mask(self, user: int) -> np.ndarray:
        mask = np.zeros(self.n_items, dtype=bool)
        mask[self.train_items(user)] = True
        return mask

    # -- scoring ------------------------------------------------------------
    def score_user(self, user: int) -> np.ndarray:
        raise NotImplementedError

    def tiebreak(self, user: int) -> np.ndarray | None:
        return None

    def rank(self, user: int, mask: np.ndarray | None = None, n: int = 10) -> list[tuple[int, float]]:
        """Top-``n`` ``(book, score)`` pairs; ``mask[i]`` True excludes book ``i``."""
        if not self.fitted:
            raise NotFittedError(f"{self.name} is not fitted")
        if not 0 <= user < self.n_users:
            raise IndexError(f"user index {user} out of range")
        if mask is None:
            mask = self.train_mask(user)
        scores = np.asarray(self.score_user(user), dtype=np.float64)
        if not np.all(np.isfinite(scores)):
            raise TrainingDivergedError(f"{self.name}: non-finite scores for user {user}")
        order = top_n(scores, np.asarray(mask, dtype=bool), n, self.tiebreak(user))
        return [(int(i), float(scores[i])) for i in order]

    # -- persistence --------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        pass

    def config(self) -> dict:
        return {"model": self.name, "n_users": self.n_users, "n_items": self.n_items, "hparams": self.hparams}


# ---------------------------------------------------------------------------
# binary model file: magic, kind, JSON header, named row-major arrays


def _pack_str(buf: io.BytesIO, s: str, fmt: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack(fmt, len(b)))
    buf.write(b)


def _unpack_str(f, fmt: str) -> str:
    (n,) = struct.unpack(fmt, f.read(struct.calcsize(fmt)))
    return f.read(n).decode("utf-8")


def save_model(model: Recommender, path: str | Path, extra: dict | None = None) -> Path:
    """Write ``model`` to ``path`` and a JSON sidecar ``<path>.json``."""
    if not model.fitted:
        raise NotFittedError("refusing to save an unfitted model")
    path = Path(path)
    arrays = {
        "train_indptr": model._train_indptr,
        "train_indices": model._train_indices,
        **model.state_arrays(),
    }
    header = {"n_users": model.n_users, "n_items": model.n_items, "hparams": model.hparams, "seed": model.seed}
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", FORMAT_VERSION))
    _pack_str(buf, model.name, "<H")
    _pack_str(buf, json.dumps(header, sort_keys=True), "<I")
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        _pack_str(buf, name, "<H")
        _pack_str(buf, arr.dtype.str, "<B")
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    path.write_bytes(buf.getvalue())
    sidecar = {"model": model.name, "seed": model.seed, "config": model.config(), **(extra or {})}
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_model(path: str | Path) -> Recommender:
    from bookgraph.models import model_class

    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ModelFileError(f"{path}: not a model file")
        (version,) = struct.unpack("<B", f.read(1))
        if version != FORMAT_VERSION:
            raise ModelFileError(f"{path}: unsupported format version {version}")
        kind = _unpack_str(f, "<H")
        header = json.loads(_unpack_str(f, "<I"))
        (n_arrays,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(n_arrays):
            name = _unpack_str(f, "<H")
            dtype = np.dtype(_unpack_str(f, "<B"))
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if ndim else 1
            data = f.read(count * dtype.itemsize)
            arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    model = model_class(kind)(header["n_users"], header["n_items"], **header["hparams"])
    model.seed = header.get("seed")
    model._train_indptr = arrays.pop("train_indptr")
    model._train_indices = arrays.pop("train_indices")
    model.load_state_arrays(arrays)
    model.fitted = True
    return model
