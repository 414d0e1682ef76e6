"""Class-weighted softmax cross-entropy with field-of-view masking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .projection import Visibility
from .tensor import ShapeError, Tensor, _make

UNKNOWN = 255
NUM_CLASSES = 12


@dataclass(frozen=True)
class ClassWeights:
    values: tuple

    def __post_init__(self):
        if any(w < 0 for w in self.values):
            raise ValueError("class weights must be non-negative")

    def array(self, dtype=np.float64) -> np.ndarray:
        return np.asarray(self.values, dtype=dtype)


def weight_schedule(
    epoch: int,
    nonempty: Optional[Sequence[float]] = None,
    num_classes: int = NUM_CLASSES,
    w0_start: float = 0.05,
    w0_step: float = 0.05,
    every: int = 40,
) -> ClassWeights:
    """Empty-class weight starts at 0.05 and grows by 0.05 every 40 epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    w0 = w0_start + w0_step * (epoch // every)
    rest = [1.0] * (num_classes - 1) if nonempty is None else list(nonempty)
    if len(rest) != num_classes - 1:
        raise ValueError(f"need {num_classes - 1} non-empty weights, got {len(rest)}")
    return ClassWeights((w0, *rest))


@dataclass
class EvalMask:
    in_loss: np.ndarray
    in_sc: np.ndarray
    in_ssc: np.ndarray

    @classmethod
    def from_visibility(cls, vis: np.ndarray, labels: np.ndarray, sc_region: str = "occluded") -> "EvalMask":
        """FOV masks from a visibility grid; unknown labels are excluded.

        ``sc_region`` is ``"occluded"`` (occluded voxels in view) or
        ``"all"`` (every voxel in view).
        """
        known = labels != UNKNOWN
        in_view = (vis != Visibility.OUTSIDE_FOV) & known
        if sc_region == "occluded":
            in_sc = in_view & (vis == Visibility.OCCLUDED)
        elif sc_region == "all":
            in_sc = in_view.copy()
        else:
            raise ValueError(f"unknown SC region {sc_region!r}")
        return cls(in_loss=in_view, in_sc=in_sc, in_ssc=in_view.copy())


def weighted_ce(
    logits: Tensor,
    labels: np.ndarray,
    weights: ClassWeights | np.ndarray,
    mask: np.ndarray | EvalMask | None = None,
    reduction: str = "mean",
) -> Tensor:
    """Masked, class-weighted softmax cross-entropy on unnormalised scores.

    ``reduction="mean"`` divides the weighted sum by the number of voxels in
    the loss mask; ``"sum"`` returns the raw weighted sum.  Voxels outside
    the mask or labelled 255 contribute zero loss and zero gradient.
    """
    labels = np.asarray(labels)
    nclass = logits.shape[-1]
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    w = weights.array() if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=np.float64)
    if w.shape != (nclass,):
        raise ShapeError(f"{nclass} classes but {w.shape} weights")
    bad = (labels != UNKNOWN) & ((labels < 0) | (labels >= nclass))
    if bad.any():
        raise ValueError(f"label out of range: {labels[bad].flat[0]}")
    if isinstance(mask, EvalMask):
        mask = mask.in_loss
    sel = labels != UNKNOWN
    if mask is not None:
        sel = sel & np.asarray(mask, dtype=bool)
    z = logits.data.reshape(-1, nclass)
    flat_sel = sel.reshape(-1)
    rows = np.nonzero(flat_sel)[0]
    y = labels.reshape(-1)[rows].astype(np.int64)
    zs = z[rows].astype(np.float64)
    logp = log_softmax(zs, axis=1)
    wy = w[y]
    total = -np.sum(wy * logp[np.arange(len(rows)), y])
    if reduction == "mean":
        denom = float(len(rows)) if len(rows) else 1.0
    elif reduction == "sum":
        denom = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = np.asarray(total / denom, dtype=logits.dtype)
    shape = logits.shape

    def backward(g):
        grad = np.zeros((z.shape[0], nclass), dtype=np.float64)
        if len(rows):
            p = softmax(zs, axis=1)
            p[np.arange(len(rows)), y] -= 1.0
            grad[rows] = p * (wy / denom)[:, None]
        return ((grad * g).astype(logits.dtype).reshape(shape),)

    return _make(out, (logits,), backward)
