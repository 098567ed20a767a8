"""Reference training procedures for noisy labels.

Three methods share a softmax classifier on the small dense-net core:
plain cross-entropy on the noisy labels, two-step forward correction with
an anchor-estimated transition matrix, and joint adaptation where a
trainable row-softmax transition layer sits between the classifier and the
noisy labels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import NonFiniteError, TrainingDiverged, ValidationError
from .nets import DenseNet, OptimizerState, Rng, backward, forward, softmax
from .noise import TransitionMatrix

PROB_FLOOR = 1e-12  # clamp inside every log so losses stay finite


@dataclass
class TrainConfig:
    """Knobs shared by the classifier-training procedures.

    The staircase schedule starts at 0.1 and decays by 0.1; defaults are
    sized for a long run (15k steps, batch 128) and benchmark configs
    shrink them to desk scale.
    """

    iterations: int = 15000
    batch_size: int = 128
    learning_rate: float = 0.1
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 5000
    hidden: tuple[int, ...] = (64, 64)
    eval_every: int = 100
    seed: int = 0
    anchor_percentile: float = 97.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValidationError("iterations must be nonnegative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive")
        if not (0.0 < self.anchor_percentile <= 100.0):
            raise ValidationError("anchor_percentile must lie in (0, 100]")
        self.hidden = tuple(int(h) for h in self.hidden)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return _dataclass_from_dict(cls, doc, "train config")

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "lr_decay_factor": self.lr_decay_factor,
            "lr_decay_every": self.lr_decay_every,
            "hidden": list(self.hidden),
            "eval_every": self.eval_every,
            "seed": self.seed,
            "anchor_percentile": self.anchor_percentile,
        }


def _dataclass_from_dict(cls, doc: dict, what: str):
    if not isinstance(doc, dict):
        raise ValidationError(f"{what} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"{what} has unknown keys {sorted(unknown)}")
    kwargs = dict(doc)
    if "hidden" in kwargs and kwargs["hidden"] is not None:
        kwargs["hidden"] = tuple(kwargs["hidden"])
    return cls(**kwargs)


class Classifier:
    """Dense net ending in a softmax over the class set."""

    def __init__(self, input_dim: int, n_classes: int,
                 hidden: tuple[int, ...], rng: Rng):
        dims = [input_dim, *hidden, n_classes]
        activations = ["relu"] * len(hidden) + ["softmax"]
        self.net = DenseNet(dims, activations, rng)
        self.n_classes = n_classes

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Per-sample class probability vectors."""
        return forward(self.net, x)[1]

    def accuracy(self, x: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict(x).argmax(axis=1) == labels).mean())


class TransitionLayer:
    """Trainable transition matrix realized as the row-softmax of free
    logits, so it is row-stochastic at every step by construction."""

    def __init__(self, t_init: TransitionMatrix, smoothing: float = 1e-8):
        # smoothing keeps masked zeros away from -inf logits
        self.logits = np.log(t_init.t + smoothing)

    def matrix(self) -> np.ndarray:
        return softmax(self.logits)

    def logits_grad(self, realized: np.ndarray, d_matrix: np.ndarray) -> np.ndarray:
        """Pull a gradient on the realized matrix back through the
        row-softmax."""
        inner = (d_matrix * realized).sum(axis=1, keepdims=True)
        return realized * (d_matrix - inner)


@dataclass
class CurvePoint:
    step: int
    loss: float
    test_accuracy: float


@dataclass
class TrainingLog:
    points: list[CurvePoint] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "test_accuracy"])
            for p in self.points:
                writer.writerow([p.step, repr(p.loss), repr(p.test_accuracy)])


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    n = probs.shape[0]
    p = np.clip(probs[np.arange(n), labels], PROB_FLOOR, None)
    return float(-np.log(p).mean())


def noisy_posterior(p: np.ndarray, transition: TransitionMatrix) -> np.ndarray:
    """Mix class probabilities through the transition matrix:
    q_j = sum_i T[i, j] p_i. Accepts a single vector or a batch."""
    arr = np.asarray(p, dtype=np.float64)
    single = arr.ndim == 1
    batch = arr[None, :] if single else arr
    if batch.shape[1] != transition.c:
        raise ValidationError(
            f"probability width {batch.shape[1]} != C={transition.c}"
        )
    sums = batch.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValidationError(
            f"input row {bad} sums to {sums[bad]!r}; not a probability vector"
        )
    q = batch @ transition.t
    return q[0] if single else q


def forward_loss(p: np.ndarray, transition: TransitionMatrix,
                 noisy_label: int) -> float:
    """Negative log of the noisy posterior at the observed label."""
    if not (0 <= noisy_label < transition.c):
        raise ValidationError(f"label {noisy_label} out of range for C={transition.c}")
    q = noisy_posterior(np.asarray(p, dtype=np.float64), transition)
    return float(-np.log(max(q[noisy_label], PROB_FLOOR)))


def noisy_nll_and_grads(probs: np.ndarray, t: np.ndarray,
                        labels: np.ndarray) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Batch-mean -ln((p @ T)[y]) and its gradients.

    Returns (loss, q, dloss/dprobs, dloss/dT). Shared by the forward loss,
    the adaptation layer, and the reconstruction objective.
    """
    n = probs.shape[0]
    q = probs @ t
    qy = np.clip(q[np.arange(n), labels], PROB_FLOOR, None)
    loss = float(-np.log(qy).mean())
    inv = 1.0 / (n * qy)
    g_probs = -t[:, labels].T * inv[:, None]
    weighted = probs * inv[:, None]
    g_t_cols = np.zeros((t.shape[1], t.shape[0]))
    np.add.at(g_t_cols, labels, -weighted)
    return loss, q, g_probs, g_t_cols.T


def _batch_stream(n: int, batch_size: int, rng: Rng):
    """Endless minibatch indices, reshuffled each epoch."""
    if n <= batch_size:
        while True:
            yield np.arange(n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]


def _staircase_state(cfg: TrainConfig) -> OptimizerState:
    return OptimizerState("sgd_staircase", cfg.learning_rate,
                          cfg.lr_decay_factor, cfg.lr_decay_every)


def _eval_accuracy(clf: Classifier, data) -> float:
    return clf.accuracy(data.test_features, data.test_eval_labels)


def _train_classifier(data, cfg: TrainConfig, *, transition: TransitionMatrix | None,
                      rng: Rng, log: TrainingLog, step_offset: int = 0,
                      iterations: int | None = None) -> Classifier:
    """Core loop: plain cross-entropy when transition is None, otherwise the
    forward-corrected loss under a frozen matrix."""
    clf = Classifier(data.d, data.c, cfg.hidden, rng.child(1))
    state = _staircase_state(cfg)
    x_train = data.train_features
    y_train = data.train_noisy_labels
    batches = _batch_stream(x_train.shape[0], cfg.batch_size, rng.child(2))
    t_mat = None if transition is None else transition.t
    total = cfg.iterations if iterations is None else iterations
    for t in range(total):
        idx = next(batches)
        cache, probs = forward(clf.net, x_train[idx])
        labels = y_train[idx]
        if t_mat is None:
            loss = cross_entropy(probs, labels)
            n = probs.shape[0]
            py = np.clip(probs[np.arange(n), labels], PROB_FLOOR, None)
            g_probs = np.zeros_like(probs)
            g_probs[np.arange(n), labels] = -1.0 / (n * py)
        else:
            loss, _, g_probs, _ = noisy_nll_and_grads(probs, t_mat, labels)
        if not np.isfinite(loss):
            raise TrainingDiverged(step_offset + t, "non-finite loss")
        grads, _ = backward(clf.net, cache, g_probs)
        try:
            clf.net.apply_step(grads, state, t)
        except NonFiniteError as exc:
            raise TrainingDiverged(step_offset + t, str(exc)) from exc
        if (t + 1) % cfg.eval_every == 0 or t + 1 == total:
            log.points.append(CurvePoint(step_offset + t + 1, loss,
                                         _eval_accuracy(clf, data)))
    return clf


def train_noisy(data, cfg: TrainConfig) -> tuple[Classifier, TrainingLog]:
    """Cross-entropy straight against the noisy labels."""
    if data.n_train == 0:
        raise ValidationError("dataset has no training rows")
    log = TrainingLog()
    rng = Rng(cfg.seed)
    clf = _train_classifier(data, cfg, transition=None, rng=rng, log=log)
    return clf, log


def estimate_T_anchor(clf: Classifier, features: np.ndarray,
                      percentile: float = 97.0,
                      labels: np.ndarray | None = None) -> TransitionMatrix:
    """Read a transition matrix off the classifier at per-class anchors.

    For each class i the anchor is the sample whose predicted P(i|x) sits at
    the given percentile of that class's distinct predicted values (distinct
    so duplicated samples cannot shift the anchor); its full renormalized
    softmax output becomes row i. percentile=100 reduces to the argmax rule.
    """
    if not (0.0 < percentile <= 100.0):
        raise ValidationError("percentile must lie in (0, 100]")
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        raise ValidationError("anchor estimation needs at least one sample")
    c = clf.n_classes
    if labels is not None:
        present = np.unique(labels)
        for cls in range(c):
            if cls not in present:
                raise ValidationError(f"class {cls} has no samples")
    probs = forward(clf.net, features)[1]
    rows = np.empty((c, c))
    for i in range(c):
        vals = probs[:, i]
        target = np.percentile(np.unique(vals), percentile, method="higher")
        anchor = int(np.flatnonzero(vals == target)[0])
        rows[i] = probs[anchor] / probs[anchor].sum()
    return TransitionMatrix(c, rows)


def is_degenerate_estimate(t: TransitionMatrix, tol: float = 0.05) -> bool:
    """True when every row is within total-variation ``tol`` of uniform,
    i.e. the anchors carried no class information."""
    uniform = np.full(t.c, 1.0 / t.c)
    tv = 0.5 * np.abs(t.t - uniform).sum(axis=1)
    return bool(np.all(tv < tol))


def train_f_correction(data, cfg: TrainConfig) -> tuple[Classifier, TransitionMatrix, TrainingLog]:
    """Two-step forward correction: train on noisy labels, estimate the
    transition matrix at anchors, then retrain a fresh classifier under the
    frozen estimate. Iterations split half/half between the phases."""
    log = TrainingLog()
    rng = Rng(cfg.seed)
    phase1 = cfg.iterations // 2
    _train_classifier(data, cfg, transition=None, rng=rng, log=log,
                      iterations=phase1)
    # the phase-1 classifier is rebuilt deterministically for estimation
    pilot_rng = Rng(cfg.seed)
    pilot_log = TrainingLog()
    pilot = _train_classifier(data, cfg, transition=None, rng=pilot_rng,
                              log=pilot_log, iterations=phase1)
    t_hat = estimate_T_anchor(pilot, data.train_features, cfg.anchor_percentile,
                              labels=data.train_noisy_labels)
    final_rng = rng.child(3)
    clf = _train_classifier(data, cfg, transition=t_hat, rng=final_rng, log=log,
                            step_offset=phase1,
                            iterations=cfg.iterations - phase1)
    return clf, t_hat, log


def train_s_adaptation(data, cfg: TrainConfig,
                       t_init: TransitionMatrix) -> tuple[Classifier, TransitionMatrix, TrainingLog]:
    """Joint training of the classifier and a trainable transition layer:
    both minimize the negative log-likelihood of the noisy labels through
    the realized row-stochastic matrix."""
    log = TrainingLog()
    rng = Rng(cfg.seed)
    clf = Classifier(data.d, data.c, cfg.hidden, rng.child(1))
    layer = TransitionLayer(t_init)
    clf_state = _staircase_state(cfg)
    layer_state = _staircase_state(cfg)
    x_train = data.train_features
    y_train = data.train_noisy_labels
    batches = _batch_stream(x_train.shape[0], cfg.batch_size, rng.child(2))
    for t in range(cfg.iterations):
        idx = next(batches)
        cache, probs = forward(clf.net, x_train[idx])
        realized = layer.matrix()
        loss, _, g_probs, g_t = noisy_nll_and_grads(probs, realized, y_train[idx])
        if not np.isfinite(loss):
            raise TrainingDiverged(t, "non-finite loss")
        grads, _ = backward(clf.net, cache, g_probs)
        try:
            clf.net.apply_step(grads, clf_state, t)
            step_params = [layer.logits]
            from .nets import step as _step
            _step(step_params, [layer.logits_grad(realized, g_t)], layer_state, t)
        except NonFiniteError as exc:
            raise TrainingDiverged(t, str(exc)) from exc
        if (t + 1) % cfg.eval_every == 0 or t + 1 == cfg.iterations:
            log.points.append(CurvePoint(t + 1, loss, _eval_accuracy(clf, data)))
    return clf, TransitionMatrix(data.c, layer.matrix()), log
