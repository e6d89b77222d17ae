"""Collapse-same-predictions block.

Encoder states are segmented into maximal runs of identical greedy CTC
predictions; each run is pooled into a single vector by a convex
combination of its frames. Three weighting policies:

* average:  w_t = 1 / run_length
* weighted: w_t = p_t / sum(p_s), where p_t is the probability the frame
  assigns to the run's shared label (the prediction confidence)
* softmax:  w_t = softmax over the run of the p_t values (softmax applied
  to probabilities, temperature 1)

Gradients flow through the states and, for weighted/softmax, through the
confidences; run boundaries come from an argmax and are constants.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
import torch

from .ctc import FramePosteriors
from .errors import InvalidInputError


class PolicyKind(str, Enum):
    AVERAGE = "average"
    WEIGHTED = "weighted"
    SOFTMAX = "softmax"


@dataclass(frozen=True)
class CompressionPolicy:
    kind: PolicyKind
    keep_blank_segments: bool = True
    detach_weights: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "keep_blank_segments": self.keep_blank_segments,
            "detach_weights": self.detach_weights,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CompressionPolicy":
        return cls(
            kind=PolicyKind(data["kind"]),
            keep_blank_segments=bool(data.get("keep_blank_segments", True)),
            detach_weights=bool(data.get("detach_weights", False)),
        )


@dataclass(frozen=True)
class SegmentSpan:
    """Half-open frame interval sharing one predicted label."""

    start: int
    end: int
    label: int

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise InvalidInputError(f"bad span [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start


@dataclass
class CompressResult:
    compressed: torch.Tensor  # (T', D)
    spans: list[SegmentSpan]  # all runs, in order, covering [0, T)
    weights: torch.Tensor  # (T,) per-frame weight inside its own span
    kept: list[bool]  # span -> included in the compressed output


def segment_runs(frame_labels: Sequence[int]) -> list[SegmentSpan]:
    """Maximal runs of equal labels, in order."""
    spans: list[SegmentSpan] = []
    start = 0
    for i in range(1, len(frame_labels) + 1):
        if i == len(frame_labels) or frame_labels[i] != frame_labels[start]:
            spans.append(SegmentSpan(start, i, int(frame_labels[start])))
            start = i
    return spans


def _span_weights(log_probs: torch.Tensor, span: SegmentSpan, kind: PolicyKind) -> torch.Tensor:
    n = len(span)
    if kind is PolicyKind.AVERAGE:
        return torch.full((n,), 1.0 / n, dtype=log_probs.dtype, device=log_probs.device)
    confidences = torch.exp(log_probs[span.start : span.end, span.label])
    if kind is PolicyKind.WEIGHTED:
        return confidences / confidences.sum()
    return torch.softmax(confidences, dim=0)


def _as_tensor_log_probs(posteriors, states: torch.Tensor) -> torch.Tensor:
    if isinstance(posteriors, FramePosteriors):
        arr = posteriors.log_probs[: posteriors.length]
        return torch.as_tensor(arr, dtype=states.dtype, device=states.device)
    if isinstance(posteriors, torch.Tensor):
        return posteriors
    return torch.as_tensor(np.asarray(posteriors), dtype=states.dtype, device=states.device)


def compress(
    states: torch.Tensor,
    posteriors: "FramePosteriors | torch.Tensor",
    policy: CompressionPolicy,
    blank_index: int = 0,
) -> CompressResult:
    """Pool consecutive states that share a greedy CTC prediction.

    ``states`` is (T, D); ``posteriors`` supplies the (T, C) log-probs the
    greedy labels and confidences come from. Blank-labelled runs are kept
    as single vectors unless the policy drops them; an all-blank sequence
    falls back to keeping them so the output is never empty.
    """
    if not isinstance(states, torch.Tensor):
        states = torch.as_tensor(np.asarray(states), dtype=torch.get_default_dtype())
    log_probs = _as_tensor_log_probs(posteriors, states)
    if log_probs.ndim != 2 or states.ndim != 2:
        raise InvalidInputError("states and posteriors must be 2-D")
    if log_probs.shape[0] != states.shape[0]:
        raise InvalidInputError(
            f"states have {states.shape[0]} frames but posteriors have {log_probs.shape[0]}"
        )
    frame_labels = torch.argmax(log_probs, dim=1).tolist()
    spans = segment_runs(frame_labels)

    kept = [True] * len(spans)
    if not policy.keep_blank_segments:
        non_blank = [s.label != blank_index for s in spans]
        if any(non_blank):
            kept = non_blank

    per_span_weights: list[torch.Tensor] = []
    pooled: list[torch.Tensor] = []
    for span, keep in zip(spans, kept):
        w = _span_weights(log_probs, span, policy.kind)
        if policy.detach_weights:
            w = w.detach()
        per_span_weights.append(w)
        if keep:
            pooled.append((w.unsqueeze(1) * states[span.start : span.end]).sum(dim=0))
    if per_span_weights:
        weights = torch.cat(per_span_weights)  # spans tile [0, T) in order
    else:
        weights = states.new_zeros((0,))
    if pooled:
        compressed = torch.stack(pooled, dim=0)
    else:
        compressed = states.new_zeros((0, states.shape[1]))
    return CompressResult(compressed=compressed, spans=spans, weights=weights, kept=kept)


def compress_batch(
    states: torch.Tensor,
    log_probs: torch.Tensor,
    lengths: Sequence[int],
    policy: CompressionPolicy,
    blank_index: int = 0,
) -> tuple[torch.Tensor, list[int], list[list[SegmentSpan]]]:
    """Compress each item of a padded (B, T, D) stack and re-pad to max T'.

    Returns the zero-padded compressed stack, the new per-item lengths and
    the spans per item.
    """
    B = states.shape[0]
    results = []
    for b in range(B):
        n = int(lengths[b])
        results.append(compress(states[b, :n], log_probs[b, :n], policy, blank_index))
    new_lengths = [r.compressed.shape[0] for r in results]
    max_len = max(new_lengths) if new_lengths else 0
    out = states.new_zeros((B, max_len, states.shape[2]))
    for b, r in enumerate(results):
        out[b, : new_lengths[b]] = r.compressed
    return out, new_lengths, [r.spans for r in results]
