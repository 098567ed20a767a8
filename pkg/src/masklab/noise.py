"""Class-transition structure masks, transition matrices, label corruption,
and structure extraction through a steep (tempered) sigmoid."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .nets import Rng

MASK_KINDS = (
    "column_diagonal",
    "tri_diagonal",
    "block_diagonal",
    "full",
    "identity",
    "custom",
)


def _as_square(m, what: str) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"{what} must be square, got shape {a.shape}")
    return a


def is_binary(m: np.ndarray) -> bool:
    return bool(np.all((m == 0.0) | (m == 1.0)))


@dataclass
class StructureMask:
    """C x C validity pattern over class transitions.

    Entries live in [0, 1]: 1 marks a transition that may occur, 0 one that
    may not. Human-supplied priors are exactly {0,1}-valued with an all-ones
    diagonal (staying in your own class is always valid); soft masks produced
    by structure extraction may sit anywhere in between.
    """

    c: int
    m: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        self.m = _as_square(self.m, "mask")
        if self.m.shape[0] != self.c:
            raise ValidationError(f"mask shape {self.m.shape} != C={self.c}")
        if self.kind not in MASK_KINDS:
            raise ValidationError(f"unknown mask kind {self.kind!r}")
        if np.any(self.m < 0.0) or np.any(self.m > 1.0):
            raise ValidationError("mask entries must lie in [0, 1]")
        if is_binary(self.m) and not np.all(np.diag(self.m) == 1.0):
            raise ValidationError("a hard mask must keep its diagonal at 1")

    @property
    def hard(self) -> bool:
        return is_binary(self.m)


@dataclass
class TransitionMatrix:
    """Row-stochastic C x C matrix; entry (i, j) is the probability that a
    true class-i label is observed as class j."""

    c: int
    t: np.ndarray

    def __post_init__(self):
        self.t = _as_square(self.t, "transition matrix")
        if self.t.shape[0] != self.c:
            raise ValidationError(f"matrix shape {self.t.shape} != C={self.c}")
        if np.any(self.t < 0.0):
            raise ValidationError("transition probabilities must be nonnegative")
        row_sums = self.t.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > 1e-9):
            worst = int(np.argmax(np.abs(row_sums - 1.0)))
            raise ValidationError(
                f"row {worst} sums to {row_sums[worst]!r}, not 1 within 1e-9"
            )


def identity_transition(c: int) -> TransitionMatrix:
    return TransitionMatrix(c, np.eye(c))


def build_mask(kind: str, c: int, *, noise_columns=None,
               block_sizes=None) -> StructureMask:
    """Construct one of the canonical hard masks.

    column_diagonal: identity plus full columns at ``noise_columns``.
    tri_diagonal: diagonal and both first off-diagonals.
    block_diagonal: all-ones blocks along the diagonal, sized ``block_sizes``.
    full / identity: every transition valid / none but self-transitions.
    """
    if c < 2:
        raise ValidationError("need at least 2 classes")
    if kind == "column_diagonal":
        if not noise_columns:
            raise ValidationError("column_diagonal needs at least one noise column")
        cols = sorted(set(int(j) for j in noise_columns))
        if cols[0] < 0 or cols[-1] >= c:
            raise ValidationError(
                f"noise column {cols[-1] if cols[-1] >= c else cols[0]} "
                f"out of range for C={c}"
            )
        m = np.eye(c)
        m[:, cols] = 1.0
    elif kind == "tri_diagonal":
        m = np.eye(c)
        idx = np.arange(c - 1)
        m[idx, idx + 1] = 1.0
        m[idx + 1, idx] = 1.0
    elif kind == "block_diagonal":
        if not block_sizes:
            raise ValidationError("block_diagonal needs block sizes")
        sizes = [int(s) for s in block_sizes]
        if any(s < 1 for s in sizes):
            raise ValidationError("block sizes must be positive")
        if sum(sizes) != c:
            raise ValidationError(
                f"block sizes {sizes} sum to {sum(sizes)}, expected C={c}"
            )
        m = np.zeros((c, c))
        start = 0
        for s in sizes:
            m[start:start + s, start:start + s] = 1.0
            start += s
    elif kind == "full":
        m = np.ones((c, c))
    elif kind == "identity":
        m = np.eye(c)
    else:
        raise ValidationError(f"cannot build mask of kind {kind!r}")
    return StructureMask(c, m, kind)


def build_transition(mask: StructureMask, noise_rate: float) -> TransitionMatrix:
    """Spread ``noise_rate`` uniformly over each row's unmasked off-diagonal
    entries; rows with nowhere to flip to keep probability 1 on the diagonal."""
    if not mask.hard:
        raise ValidationError(
            "build_transition takes a hard {0,1} mask; soft masks are "
            "extraction outputs, not corruption inputs"
        )
    if not np.all(np.diag(mask.m) == 1.0):
        raise ValidationError("mask diagonal must be all ones")
    if not (0.0 <= noise_rate < 1.0):
        raise ValidationError("noise_rate must lie in [0, 1)")
    c = mask.c
    t = np.zeros((c, c))
    off = mask.m.copy()
    np.fill_diagonal(off, 0.0)
    for i in range(c):
        k = int(off[i].sum())
        if k == 0 or noise_rate == 0.0:
            t[i, i] = 1.0
        else:
            t[i, i] = 1.0 - noise_rate
            t[i, off[i] == 1.0] = noise_rate / k
    return TransitionMatrix(c, t)


def corrupt_labels(clean: np.ndarray, transition: TransitionMatrix,
                   rng: Rng) -> np.ndarray:
    """Flip each label independently through its row of the transition
    matrix. Entries with zero probability never occur."""
    labels = np.asarray(clean)
    if labels.ndim != 1:
        raise ValidationError("labels must be a 1-d array of class indices")
    c = transition.c
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValidationError(f"label {bad} out of range for C={c}")
    cum = np.cumsum(transition.t, axis=1)
    u = rng.random(labels.size)
    noisy = np.empty(labels.size, dtype=np.int64)
    for cls in np.unique(labels):
        sel = labels == cls
        # searchsorted 'left' skips zero-width (zero-probability) intervals
        noisy[sel] = np.searchsorted(cum[cls], u[sel], side="left")
    return np.minimum(noisy, c - 1)


@dataclass
class TemperedSigmoidParams:
    """Location/scale of the quantizing sigmoid: transition probabilities
    above ``alpha`` read as valid structure, the scale ``beta`` sets how
    sharp the cut is."""

    alpha: float = 0.05
    beta: float = 0.005

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValidationError("alpha must lie in the open interval (0, 1)")
        if not self.beta > 0.0:
            raise ValidationError("beta must be positive")


def tempered_sigmoid(s, params: TemperedSigmoidParams) -> np.ndarray:
    """Elementwise 1 / (1 + exp(-(s - alpha)/beta)).

    The exponent argument is clamped to +-500 so extreme inputs saturate
    instead of overflowing; the function is total.
    """
    t = np.clip((np.asarray(s, dtype=np.float64) - params.alpha) / params.beta,
                -500.0, 500.0)
    out = np.empty_like(t)
    pos = t >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tempered_sigmoid_deriv(s, params: TemperedSigmoidParams) -> np.ndarray:
    """Exact elementwise derivative f(s) * (1 - f(s)) / beta."""
    f = tempered_sigmoid(s, params)
    return f * (1.0 - f) / params.beta


def extract_structure(t: TransitionMatrix | np.ndarray,
                      params: TemperedSigmoidParams) -> StructureMask:
    """Quantize a transition matrix into a soft structure mask."""
    raw = t.t if isinstance(t, TransitionMatrix) else np.asarray(t, dtype=np.float64)
    m = tempered_sigmoid(raw, params)
    return StructureMask(raw.shape[0], m, "custom")


def threshold_structure(mask: StructureMask | np.ndarray,
                        threshold: float = 0.5) -> StructureMask:
    """Harden a soft mask: entries strictly above the threshold become 1.
    For an extracted structure, thresholding at 0.5 is exactly the predicate
    (probability > alpha). The diagonal is forced valid."""
    raw = mask.m if isinstance(mask, StructureMask) else np.asarray(mask, dtype=np.float64)
    hard = (raw > threshold).astype(np.float64)
    np.fill_diagonal(hard, 1.0)
    return StructureMask(hard.shape[0], hard, "custom")


def distill_mask(t_hat: TransitionMatrix, hi: float, lo: float) -> StructureMask:
    """Read a hard mask off an estimated matrix: entries above ``hi`` are
    valid, below ``lo`` invalid, and the undecided band in between stays
    valid (leaving freedom beats masking a true transition). Diagonal is
    always valid."""
    if not (0.0 <= lo < hi <= 1.0):
        raise ValidationError("thresholds must satisfy 0 <= lo < hi <= 1")
    valid = t_hat.t > hi
    undecided = (t_hat.t >= lo) & (t_hat.t <= hi)
    m = (valid | undecided).astype(np.float64)
    np.fill_diagonal(m, 1.0)
    return StructureMask(t_hat.c, m, "custom")


# --- JSON round-tripping -------------------------------------------------
#
# Shared wire format for masks and matrices:
#   {"C": int, "rows": [[...], ...], "kind": string}
# Python's json emits float repr (17 significant digits), so values
# round-trip bit-exactly.


def mask_to_json(mask: StructureMask) -> dict:
    return {"C": mask.c, "rows": mask.m.tolist(), "kind": mask.kind}


def mask_from_json(doc: dict) -> StructureMask:
    _require_keys(doc, {"C", "rows", "kind"}, "mask")
    return StructureMask(int(doc["C"]), np.array(doc["rows"], dtype=np.float64),
                         str(doc["kind"]))


def transition_to_json(t: TransitionMatrix) -> dict:
    return {"C": t.c, "rows": t.t.tolist(), "kind": "transition"}


def transition_from_json(doc: dict) -> TransitionMatrix:
    _require_keys(doc, {"C", "rows", "kind"}, "transition matrix")
    return TransitionMatrix(int(doc["C"]), np.array(doc["rows"], dtype=np.float64))


def _require_keys(doc: dict, keys: set[str], what: str) -> None:
    if not isinstance(doc, dict):
        raise ValidationError(f"{what} JSON must be an object")
    missing = keys - set(doc)
    extra = set(doc) - keys
    if missing:
        raise ValidationError(f"{what} JSON missing keys {sorted(missing)}")
    if extra:
        raise ValidationError(f"{what} JSON has unknown keys {sorted(extra)}")


def save_mask(mask: StructureMask, path) -> None:
    Path(path).write_text(json.dumps(mask_to_json(mask), indent=1) + "\n")


def load_mask(path) -> StructureMask:
    return mask_from_json(json.loads(Path(path).read_text()))


def save_transition(t: TransitionMatrix, path) -> None:
    Path(path).write_text(json.dumps(transition_to_json(t), indent=1) + "\n")


def load_transition(path) -> TransitionMatrix:
    return transition_from_json(json.loads(Path(path).read_text()))
