"""Visual features: on-disk format and the matrix forms consumed by the models.

Three feature kinds exist, each with a fixed per-record shape:

* ``AvgPool``      -- pooled 2048-d video vector, attended as a 32 x 64 matrix;
* ``ConvMap``      -- 7 x 7 x 2048 convolutional map, attended as 49 regions;
* ``ActionScores`` -- 339 action-category scores, turned into a ten-hot
  embedding matrix (339 x d_emb) through a category embedding table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import Tensor, mul

MAGIC = b"MMFEAT1\n"
N_CATEGORIES = 339
TOP_K = 10

SHAPES = {
    "AvgPool": (2048,),
    "ConvMap": (7, 7, 2048),
    "ActionScores": (N_CATEGORIES,),
}
CONTEXT_ROWS = {"AvgPool": 32, "ConvMap": 49, "ActionScores": N_CATEGORIES}


class FeatureFormatError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class VisualFeature:
    tag: str
    data: np.ndarray

    def __post_init__(self):
        if self.tag not in SHAPES:
            raise FeatureFormatError(f"unknown feature tag {self.tag!r}")
        if self.data.shape != SHAPES[self.tag]:
            raise FeatureFormatError(f"{self.tag} expects shape {SHAPES[self.tag]}, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise FeatureFormatError(f"{self.tag} feature has non-finite values")


@dataclass(frozen=True)
class VisualContext:
    """R x D attention memory plus the tag it came from."""

    tag: str
    matrix: np.ndarray | Tensor

    def __post_init__(self):
        rows = self.matrix.shape[-2]
        if rows != CONTEXT_ROWS[self.tag]:
            raise FeatureFormatError(f"{self.tag} context must have {CONTEXT_ROWS[self.tag]} rows, got {rows}")


def avgpool_to_matrix(f: np.ndarray) -> np.ndarray:
    """Row-major reshape of a 2048-vector (or a batch of them) into 32 x 64."""
    f = np.asarray(f)
    if f.shape[-1:] != (2048,):
        raise FeatureFormatError(f"AvgPool feature must have length 2048, got shape {f.shape}")
    return f.reshape(f.shape[:-1] + (32, 64))


def conv_to_regions(f: np.ndarray) -> np.ndarray:
    """Flatten the 7 x 7 spatial grid row-major into 49 rows of 2048 channels."""
    f = np.asarray(f)
    if f.shape[-3:] != (7, 7, 2048):
        raise FeatureFormatError(f"ConvMap feature must be 7x7x2048, got shape {f.shape}")
    return f.reshape(f.shape[:-3] + (49, 2048))


def regions_to_conv(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows)
    return rows.reshape(rows.shape[:-2] + (7, 7, 2048))


def top_k_mask(scores: np.ndarray, k: int = TOP_K) -> np.ndarray:
    """Boolean mask of the ``k`` highest scores; ties resolve toward the lower index."""
    scores = np.asarray(scores)
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def ten_hot(scores: np.ndarray, table):
    """Keep the embedding rows of the 10 top-scoring categories, zero the rest.

    ``table`` is a 339 x d_emb array or Tensor; the result keeps its type so
    a learned table receives gradients.  ``scores`` may carry batch axes.
    """
    scores = np.asarray(scores)
    if scores.shape[-1] != N_CATEGORIES:
        raise FeatureFormatError(f"ActionScores must have {N_CATEGORIES} entries, got {scores.shape}")
    if table.shape[0] != N_CATEGORIES:
        raise FeatureFormatError(f"embedding table needs {N_CATEGORIES} rows, got {table.shape}")
    keep = top_k_mask(scores)[..., None]
    if isinstance(table, Tensor):
        return mul(table, keep.astype(table.dtype))
    return table * keep


def to_context(tag: str, data: np.ndarray, table=None) -> VisualContext:
    if tag == "AvgPool":
        return VisualContext(tag, avgpool_to_matrix(data))
    if tag == "ConvMap":
        return VisualContext(tag, conv_to_regions(data))
    if tag == "ActionScores":
        if table is None:
            raise ValueError("ActionScores need an action embedding table")
        return VisualContext(tag, ten_hot(data, table))
    raise FeatureFormatError(f"unknown feature tag {tag!r}")


def write_features(path, tag: str, records: np.ndarray) -> None:
    records = np.asarray(records, dtype="<f4")
    shape = SHAPES[tag]
    if records.shape[1:] != shape:
        raise FeatureFormatError(f"{tag} records must have shape (n, {shape}), got {records.shape}")
    header = f"{tag} {records.shape[0]} {','.join(map(str, shape))}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header)
        fh.write(np.ascontiguousarray(records).tobytes())


def read_feature_array(path, tag: str | None = None, expected: int | None = None) -> tuple[str, np.ndarray]:
    """Read a feature file into an (n, *shape) float32 array."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise FeatureFormatError(f"{path}: bad magic")
        header = fh.readline().decode("ascii", errors="replace").split()
        try:
            file_tag, n, dims = header[0], int(header[1]), tuple(int(d) for d in header[2].split(","))
        except (IndexError, ValueError):
            raise FeatureFormatError(f"{path}: corrupt header {header!r}") from None
        payload = fh.read()
    if file_tag not in SHAPES or dims != SHAPES[file_tag]:
        raise FeatureFormatError(f"{path}: header declares {file_tag} with dims {dims}")
    if tag is not None and tag != file_tag:
        raise FeatureFormatError(f"{path}: expected {tag}, file holds {file_tag}")
    count = n * int(np.prod(dims))
    if len(payload) != 4 * count:
        raise FeatureFormatError(f"{path}: payload has {len(payload)} bytes, header implies {4 * count}")
    if expected is not None and n != expected:
        raise AlignmentError(f"{path}: {n} feature records for {expected} sentences")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape((n,) + dims)
    return file_tag, arr


def load_features(path, tag: str | None = None, expected: int | None = None) -> list[VisualFeature]:
    file_tag, arr = read_feature_array(path, tag, expected)
    return [VisualFeature(file_tag, row) for row in arr]
