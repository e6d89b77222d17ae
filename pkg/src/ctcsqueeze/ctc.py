"""CTC probability model.

Log-space forward-backward loss with exact analytic gradients, greedy
framewise decoding, the collapse rule (merge consecutive equal
predictions, drop blanks), and a brute-force path-enumeration oracle for
desk-scale verification.

All dynamic programming runs in float64 log space; ``-inf`` represents
log 0. The loss gradient is returned with respect to the per-frame
log-probabilities; :func:`logit_grad_from_log_prob_grad` composes it
through a log-softmax to obtain the gradient with respect to pre-softmax
logits (the form the loss takes inside a model).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, OracleSizeError

BLANK_SYMBOL = "<blank>"

_ROW_NORM_TOL = 1e-6


@dataclass(frozen=True)
class Vocabulary:
    """Ordered label set augmented with a reserved blank symbol."""

    labels: tuple[str, ...]
    blank_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(set(self.labels)) != len(self.labels):
            raise InvalidInputError("vocabulary labels must be unique")
        if not 0 <= self.blank_index < len(self.labels):
            raise InvalidInputError(
                f"blank_index {self.blank_index} out of range for {len(self.labels)} labels"
            )

    @classmethod
    def from_labels(cls, labels: Sequence[str], blank_symbol: str = BLANK_SYMBOL) -> "Vocabulary":
        """Prepend the blank symbol (file convention: blank on line 0)."""
        if blank_symbol in labels:
            raise InvalidInputError(f"{blank_symbol!r} must not appear among the labels")
        return cls(labels=(blank_symbol,) + tuple(labels), blank_index=0)

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def blank_symbol(self) -> str:
        return self.labels[self.blank_index]

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "blank_index": self.blank_index}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocabulary":
        return cls(labels=tuple(data["labels"]), blank_index=int(data["blank_index"]))


@dataclass(frozen=True)
class LabelSequence:
    """Blank-free sequence of vocabulary indices (a CTC target or output)."""

    ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if any(i < 0 for i in self.ids):
            raise InvalidInputError("label ids must be non-negative")

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def validate_against(self, vocab: Vocabulary) -> None:
        for i in self.ids:
            if i >= vocab.size:
                raise InvalidInputError(f"label id {i} out of range for vocabulary of {vocab.size}")
            if i == vocab.blank_index:
                raise InvalidInputError("label sequences must not contain the blank index")


@dataclass
class FramePosteriors:
    """Per-frame log-probabilities over a blank-augmented vocabulary.

    ``log_probs`` is (T, C); rows up to ``length`` must be normalized
    (logsumexp 0 within 1e-6) and free of NaN.
    """

    log_probs: np.ndarray
    length: int = field(default=-1)

    def __post_init__(self):
        arr = np.asarray(self.log_probs, dtype=np.float64)
        if arr.ndim != 2:
            raise InvalidInputError(f"log_probs must be 2-D, got shape {arr.shape}")
        self.log_probs = arr
        if self.length < 0:
            self.length = arr.shape[0]
        if self.length > arr.shape[0]:
            raise InvalidInputError("length exceeds number of rows")
        valid = arr[: self.length]
        if valid.size:
            if np.isnan(valid).any():
                raise InvalidInputError("log_probs contain NaN")
            norms = _logsumexp(valid, axis=1)
            if not np.allclose(norms, 0.0, atol=_ROW_NORM_TOL):
                worst = float(np.abs(norms).max())
                raise InvalidInputError(f"rows are not normalized (max |logsumexp| = {worst:g})")

    @classmethod
    def from_logits(cls, logits: np.ndarray, length: int = -1) -> "FramePosteriors":
        logits = np.asarray(logits, dtype=np.float64)
        log_probs = logits - _logsumexp(logits, axis=1)[:, None]
        return cls(log_probs=log_probs, length=length)

    @property
    def num_labels(self) -> int:
        return self.log_probs.shape[1]


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Logsumexp that tolerates all -inf slices (returns -inf, no warnings)."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def ctc_collapse(frame_labels: Sequence[int], blank_index: int, vocab_size: int | None = None) -> LabelSequence:
    """Merge maximal runs of equal labels, then remove blanks."""
    out: list[int] = []
    prev: int | None = None
    for raw in frame_labels:
        lab = int(raw)
        if lab < 0 or (vocab_size is not None and lab >= vocab_size):
            raise InvalidInputError(f"frame label {lab} outside vocabulary")
        if lab != prev and lab != blank_index:
            out.append(lab)
        prev = lab
    return LabelSequence(tuple(out))


def greedy_decode(posteriors: FramePosteriors, blank_index: int = 0) -> tuple[list[int], LabelSequence]:
    """Framewise argmax (ties go to the lowest index) plus its collapse."""
    valid = posteriors.log_probs[: posteriors.length]
    if valid.shape[0] == 0:
        return [], LabelSequence(())
    frame_labels = [int(i) for i in np.argmax(valid, axis=1)]
    return frame_labels, ctc_collapse(frame_labels, blank_index)


def _extended_target(target: Sequence[int], blank_index: int) -> list[int]:
    ext = [blank_index]
    for y in target:
        ext.append(int(y))
        ext.append(blank_index)
    return ext


def min_alignable_frames(target: Sequence[int]) -> int:
    """L plus one forced blank frame per consecutive duplicate pair."""
    target = list(target)
    dups = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + dups


def _check_loss_inputs(posteriors: FramePosteriors, target: Sequence[int], blank_index: int) -> list[int]:
    ids = list(target.ids) if isinstance(target, LabelSequence) else [int(i) for i in target]
    C = posteriors.num_labels
    for i in ids:
        if not 0 <= i < C:
            raise InvalidInputError(f"target id {i} out of range for {C} labels")
        if i == blank_index:
            raise InvalidInputError("target contains the blank index")
    return ids


def _skip_allowed(ext: list[int], blank_index: int) -> np.ndarray:
    S = len(ext)
    allowed = np.zeros(S, dtype=bool)
    for s in range(2, S):
        allowed[s] = ext[s] != blank_index and ext[s] != ext[s - 2]
    return allowed


def _forward_alphas(lp_ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    T, S = lp_ext.shape
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = lp_ext[0, 0]
    if S > 1:
        alpha[0, 1] = lp_ext[0, 1]
    neg = np.full(1, -np.inf)
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate((neg, prev[:-1]))
        jump = np.concatenate((neg, neg, prev[: max(S - 2, 0)]))[:S]
        jump = np.where(skip, jump, -np.inf)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), jump) + lp_ext[t]
    return alpha


def _backward_betas(lp_ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    T, S = lp_ext.shape
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = lp_ext[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = lp_ext[T - 1, S - 2]
    neg = np.full(1, -np.inf)
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], neg))
        jump = np.concatenate((nxt[2:], neg, neg))[:S]
        # transition s -> s+2 is legal iff the landing position allows a skip
        landing_ok = np.concatenate((skip[2:], np.zeros(2, dtype=bool)))[:S]
        jump = np.where(landing_ok, jump, -np.inf)
        beta[t] = np.logaddexp(np.logaddexp(stay, step), jump) + lp_ext[t]
    return beta


def ctc_log_likelihood(
    posteriors: FramePosteriors,
    target: Sequence[int] | LabelSequence,
    blank_index: int = 0,
    direction: str = "forward",
) -> float:
    """log P(target | posteriors), via the forward or the backward recursion.

    Returns -inf for infeasible targets. Both directions must agree; the
    property suite checks them against each other.
    """
    ids = _check_loss_inputs(posteriors, target, blank_index)
    T = posteriors.length
    if T == 0:
        return 0.0 if not ids else -np.inf
    if T < min_alignable_frames(ids):
        return -np.inf
    lp = posteriors.log_probs[:T]
    ext = _extended_target(ids, blank_index)
    lp_ext = lp[:, ext]
    skip = _skip_allowed(ext, blank_index)
    S = len(ext)
    if direction == "forward":
        alpha = _forward_alphas(lp_ext, skip)
        total = alpha[T - 1, S - 1]
        if S > 1:
            total = np.logaddexp(total, alpha[T - 1, S - 2])
    elif direction == "backward":
        beta = _backward_betas(lp_ext, skip)
        total = beta[0, 0]
        if S > 1:
            total = np.logaddexp(total, beta[0, 1])
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return float(total)


def ctc_loss(
    posteriors: FramePosteriors,
    target: Sequence[int] | LabelSequence,
    blank_index: int = 0,
) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` plus its exact gradient.

    The gradient is d(-log P)/d(log_probs), a (T, C) matrix whose rows are
    the negated per-frame alignment posteriors. Infeasible targets (T too
    short) yield ``(inf, zeros)`` rather than an error so that batch code
    can skip degenerate items.
    """
    ids = _check_loss_inputs(posteriors, target, blank_index)
    T = posteriors.length
    C = posteriors.num_labels
    grad = np.zeros((T, C))
    if T == 0:
        return (0.0 if not ids else np.inf), grad
    if T < min_alignable_frames(ids):
        return np.inf, grad
    lp = posteriors.log_probs[:T]
    ext = _extended_target(ids, blank_index)
    lp_ext = lp[:, ext]
    skip = _skip_allowed(ext, blank_index)
    S = len(ext)
    alpha = _forward_alphas(lp_ext, skip)
    beta = _backward_betas(lp_ext, skip)
    total = alpha[T - 1, S - 1]
    if S > 1:
        total = np.logaddexp(total, alpha[T - 1, S - 2])
    if not np.isfinite(total):
        return np.inf, grad
    # Both alpha and beta include the emission at t, so divide it out once:
    # gamma[t, s] = P(paths through s at t), and sum_s gamma[t, s] = P for all t.
    gamma = alpha + beta - lp_ext
    occupancy = np.exp(gamma - total)  # (T, S), rows sum to 1
    for s, label in enumerate(ext):
        grad[:, label] -= occupancy[:, s]
    return float(-total), grad


def logit_grad_from_log_prob_grad(log_probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Compose a d/d(log p) gradient through log-softmax to get d/d(logits).

    For the CTC loss this evaluates to softmax(logits) minus the per-frame
    alignment posteriors.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    row_sums = grad.sum(axis=1, keepdims=True)
    return grad - np.exp(log_probs) * row_sums


def ctc_loss_bruteforce(
    posteriors: FramePosteriors,
    target: Sequence[int] | LabelSequence,
    blank_index: int = 0,
    max_paths: int = 10**6,
) -> float:
    """Oracle: enumerate every frame labelling and sum the matching paths.

    Definitionally the same quantity as :func:`ctc_loss`, computed without
    dynamic programming. Guarded to C**T <= max_paths.
    """
    ids = _check_loss_inputs(posteriors, target, blank_index)
    T = posteriors.length
    C = posteriors.num_labels
    if C**T > max_paths:
        raise OracleSizeError(f"{C}**{T} paths exceed the {max_paths} guard")
    if T == 0:
        return 0.0 if not ids else math.inf
    lp = posteriors.log_probs[:T]
    wanted = tuple(ids)
    prob = 0.0
    for path in itertools.product(range(C), repeat=T):
        if ctc_collapse(path, blank_index).ids == wanted:
            prob += math.exp(sum(lp[t, path[t]] for t in range(T)))
    if prob <= 0.0:
        return math.inf
    return -math.log(prob)


def ctc_loss_batch(
    log_probs: np.ndarray,
    lengths: Sequence[int],
    targets: Sequence[Sequence[int]],
    blank_index: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Padded-stack CTC loss: (B, T, C) log-probs with per-item lengths.

    Padded frames are ignored and receive zero gradient. Returns per-item
    losses (inf where infeasible) and the stacked gradients.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.ndim != 3:
        raise InvalidInputError(f"expected (B, T, C) log-probs, got shape {log_probs.shape}")
    B, T, C = log_probs.shape
    if len(lengths) != B or len(targets) != B:
        raise InvalidInputError("lengths/targets must match the batch dimension")
    losses = np.zeros(B)
    grads = np.zeros((B, T, C))
    for b in range(B):
        post = FramePosteriors(log_probs[b], length=int(lengths[b]))
        loss, grad = ctc_loss(post, targets[b], blank_index)
        losses[b] = loss
        grads[b, : int(lengths[b])] = grad[: int(lengths[b])]
    return losses, grads
