"""Datasets: embedding matrices, label manifests, and synthetic generation.

Two on-disk formats live here:

* Embedding file (binary, little-endian): magic ``LPEM``, u32 version = 1,
  u64 n, u64 d, followed by n*d IEEE-754 32-bit floats in row-major order.
  No padding between sections.
* Manifest file: UTF-8 text, one JSON object per line. The first line is a
  header ``{"classes": [...]}`` giving the ordered class names; every
  following line describes one item with keys ``id``, ``file_id``, ``role``
  ("labeled" | "unlabeled" | "eval") and ``label`` (a class name, required
  exactly when role != "unlabeled").

Items with role "eval" carry ground truth that is withheld from
propagation: they enter the graph as unlabeled nodes and are only consulted
when scoring predictions. This mirrors a transductive evaluation protocol
where held-out items are merged into the unlabeled pool.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, ParamError

EMBEDDING_MAGIC = b"LPEM"
EMBEDDING_VERSION = 1

ROLE_LABELED = "labeled"
ROLE_UNLABELED = "unlabeled"
ROLE_EVAL = "eval"
VALID_ROLES = (ROLE_LABELED, ROLE_UNLABELED, ROLE_EVAL)


@dataclass
class EmbeddingMatrix:
    """Dense n x d matrix of per-item feature vectors, stored float32."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise DataError(f"embedding data must be 2-D, got {arr.ndim}-D")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"embedding matrix must be at least 1x1, got {arr.shape}")
        bad = ~np.isfinite(arr).all(axis=1)
        if bad.any():
            raise DataError(f"non-finite embedding value in row {int(np.argmax(bad))}")
        self.data = arr

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


@dataclass
class ItemRecord:
    """One dataset item; `label` is a class index into the manifest class list."""

    id: str
    file_id: str
    role: str
    label: int | None = None


@dataclass
class DatasetManifest:
    """Ordered item records plus the ordered class list.

    Item order matches embedding row order. The class list is authoritative:
    classes with zero labeled items (such as a catch-all bucket) still exist.
    """

    items: list[ItemRecord]
    classes: list[str]
    _labels: np.ndarray = field(init=False, repr=False)
    _roles: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.validate()
        self._labels = np.array(
            [-1 if it.label is None else it.label for it in self.items], dtype=np.int64
        )
        self._roles = np.array([it.role for it in self.items])

    def validate(self) -> None:
        if not self.items:
            raise DataError("manifest contains no items")
        if not self.classes:
            raise DataError("manifest declares no classes")
        if len(set(self.classes)) != len(self.classes):
            raise DataError("duplicate class name in manifest header")
        seen: set[str] = set()
        n_labeled = 0
        for pos, it in enumerate(self.items):
            if it.id in seen:
                raise DataError(f"duplicate item id {it.id!r}")
            seen.add(it.id)
            if not it.file_id:
                raise DataError(f"item {it.id!r} has an empty file_id")
            if it.role not in VALID_ROLES:
                raise DataError(f"item {it.id!r} has unknown role {it.role!r}")
            if it.role in (ROLE_LABELED, ROLE_EVAL):
                if it.label is None:
                    raise DataError(f"item {it.id!r} with role {it.role} has no label")
                if not 0 <= it.label < len(self.classes):
                    raise DataError(
                        f"item {it.id!r} label index {it.label} out of range "
                        f"(c={len(self.classes)})"
                    )
            elif it.label is not None:
                raise DataError(f"unlabeled item {it.id!r} must not carry a label")
            if it.role == ROLE_LABELED:
                n_labeled += 1
            del pos
        if n_labeled < 1:
            raise DataError("manifest has no labeled items")

    @property
    def n(self) -> int:
        return len(self.items)

    @property
    def c(self) -> int:
        return len(self.classes)

    @property
    def n_labeled(self) -> int:
        return int((self._roles == ROLE_LABELED).sum())

    def labels(self) -> np.ndarray:
        """Per-item class index; -1 where no label is present."""
        return self._labels.copy()

    def roles(self) -> np.ndarray:
        return self._roles.copy()

    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self._roles == ROLE_LABELED)

    def eval_indices(self) -> np.ndarray:
        return np.flatnonzero(self._roles == ROLE_EVAL)

    def class_index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise DataError(f"unknown class name {name!r}") from None


def load_embeddings(path) -> EmbeddingMatrix:
    """Read an LPEM embedding file.

    Raises FormatError for a bad magic, version, or truncated payload, and
    DataError (citing the first offending row) for non-finite values.
    """
    with open(path, "rb") as fh:
        header = fh.read(24)
        if len(header) < 24:
            raise FormatError(f"{path}: truncated header ({len(header)} bytes)")
        magic, version, n, d = struct.unpack("<4sIQQ", header)
        if magic != EMBEDDING_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != EMBEDDING_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if n < 1 or d < 1:
            raise DataError(f"{path}: invalid shape n={n}, d={d}")
        payload = fh.read()
    expected = n * d * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} "
            f"for n={n}, d={d}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    finite = np.isfinite(data).all(axis=1)
    if not finite.all():
        raise DataError(f"{path}: non-finite embedding value in row {int(np.argmin(finite))}")
    return EmbeddingMatrix(data=data.copy())


def write_embeddings(emb: EmbeddingMatrix, path) -> None:
    """Write an LPEM embedding file; load_embeddings round-trips byte-for-byte."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQQ", EMBEDDING_MAGIC, EMBEDDING_VERSION, emb.n, emb.d))
        fh.write(np.ascontiguousarray(emb.data, dtype="<f4").tobytes())


def load_manifest(path, n: int) -> DatasetManifest:
    """Read a manifest file and validate it against an expected item count."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in (raw.strip() for raw in fh) if ln]
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    header = _parse_line(path, 1, lines[0])
    classes = header.get("classes")
    if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes):
        raise FormatError(f"{path}: header must carry a 'classes' array of strings")

    items: list[ItemRecord] = []
    for lineno, ln in enumerate(lines[1:], start=2):
        rec = _parse_line(path, lineno, ln)
        for key in ("id", "file_id", "role"):
            if key not in rec:
                raise FormatError(f"{path}:{lineno}: record missing key {key!r}")
        role = rec["role"]
        if role not in VALID_ROLES:
            raise DataError(f"{path}:{lineno}: unknown role {role!r}")
        label_name = rec.get("label")
        if role != ROLE_UNLABELED and label_name is None:
            raise DataError(f"{path}:{lineno}: role {role} requires a label")
        if role == ROLE_UNLABELED and label_name is not None:
            raise DataError(f"{path}:{lineno}: unlabeled record must not carry a label")
        label = None
        if label_name is not None:
            if label_name not in classes:
                raise DataError(f"{path}:{lineno}: unknown class name {label_name!r}")
            label = classes.index(label_name)
        items.append(ItemRecord(id=str(rec["id"]), file_id=str(rec["file_id"]), role=role, label=label))

    if len(items) != n:
        raise DataError(f"{path}: manifest has {len(items)} items, expected {n}")
    return DatasetManifest(items=items, classes=list(classes))


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"classes": manifest.classes}, separators=(",", ":")) + "\n")
        for it in manifest.items:
            rec = {"id": it.id, "file_id": it.file_id, "role": it.role}
            if it.label is not None:
                rec["label"] = manifest.classes[it.label]
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def _parse_line(path, lineno: int, line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise FormatError(f"{path}:{lineno}: expected a JSON object")
    return obj


def _cluster_centers(c: int, d: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Centers with pairwise distance >= separation, pointing in distinct directions.

    For c <= d the centers are scaled standard basis vectors (pairwise
    distance exactly `separation`). Otherwise random unit directions are
    drawn and scaled so the closest pair sits `separation` apart.
    """
    if c <= d:
        centers = np.zeros((c, d))
        scale = separation / math.sqrt(2.0)
        for j in range(c):
            centers[j, j] = scale
        return centers
    while True:
        dirs = rng.standard_normal((c, d))
        norms = np.linalg.norm(dirs, axis=1)
        if (norms == 0).any():
            continue
        dirs /= norms[:, None]
        gaps = np.linalg.norm(dirs[:, None, :] - dirs[None, :, :], axis=2)
        closest = gaps[np.triu_indices(c, k=1)].min()
        if closest > 1e-6:
            return dirs * (separation / closest)


def generate_synthetic(
    n_per_class: int,
    c: int,
    d: int,
    separation: float,
    label_fraction: float,
    seed: int,
) -> tuple[EmbeddingMatrix, DatasetManifest]:
    """Generate c isotropic unit-variance Gaussian clusters plus a manifest.

    The first floor(label_fraction * n_per_class) items of every class are
    labeled; the remainder carry role "eval" so their generating class is
    retained as withheld truth. All randomness comes from numpy's PCG64
    generator seeded with `seed`, so a given call is fully reproducible.
    """
    if c < 2:
        raise ParamError(f"need at least 2 classes, got {c}")
    if d < 2:
        raise ParamError(f"need at least 2 dimensions, got {d}")
    if n_per_class < 1:
        raise ParamError(f"n_per_class must be positive, got {n_per_class}")
    if not separation > 0:
        raise ParamError(f"separation must be positive, got {separation}")
    if not 0 < label_fraction <= 1:
        raise ParamError(f"label_fraction must be in (0, 1], got {label_fraction}")
    n_lab = int(label_fraction * n_per_class)
    if n_lab == 0:
        raise ParamError(
            f"label_fraction={label_fraction} yields 0 labeled items per class "
            f"(n_per_class={n_per_class})"
        )

    rng = np.random.default_rng(seed)
    centers = _cluster_centers(c, d, separation, rng)
    n = c * n_per_class
    data = np.repeat(centers, n_per_class, axis=0) + rng.standard_normal((n, d))
    emb = EmbeddingMatrix(data=data.astype(np.float32))

    width = max(4, len(str(n - 1)))
    items: list[ItemRecord] = []
    for j in range(c):
        for i in range(n_per_class):
            idx = j * n_per_class + i
            item_id = f"item-{idx:0{width}d}"
            role = ROLE_LABELED if i < n_lab else ROLE_EVAL
            items.append(ItemRecord(id=item_id, file_id=item_id, role=role, label=j))
    classes = [f"class-{j}" for j in range(c)]
    return emb, DatasetManifest(items=items, classes=classes)
