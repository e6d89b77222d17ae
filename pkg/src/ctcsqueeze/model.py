"""Speech-to-text Transformer with a CTC tap and optional state compression.

Layout: two 2D convolutions subsample the features, encoder layers run with
a logarithmic distance penalty on their self-attention logits, the layer at
``ctc_layer`` feeds a linear projection + log-softmax that produces the CTC
posteriors, and (when configured) the collapse-same-predictions block pools
the states before the remaining encoder layers. The decoder is a standard
Transformer decoder over the (possibly shortened) encoder output.

Training objective: CTC loss on the tap plus label-smoothed cross entropy
on the decoder, combined by :func:`multitask_loss`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import binio
from .compress import CompressionPolicy, SegmentSpan, compress_batch
from .ctc import FramePosteriors, Vocabulary, ctc_loss_batch, greedy_decode
from .errors import InvalidInputError

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"


@dataclass(frozen=True)
class TargetVocabulary:
    """Decoder-side vocabulary; ids 0..2 are <pad>, <bos>, <eos>."""

    labels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if list(self.labels[:3]) != [PAD, BOS, EOS]:
            raise InvalidInputError("target vocabulary must start with <pad>, <bos>, <eos>")
        if len(set(self.labels)) != len(self.labels):
            raise InvalidInputError("target vocabulary labels must be unique")

    @classmethod
    def from_labels(cls, labels: Sequence[str]) -> "TargetVocabulary":
        return cls(labels=(PAD, BOS, EOS) + tuple(labels))

    @property
    def size(self) -> int:
        return len(self.labels)

    pad_id, bos_id, eos_id = 0, 1, 2

    def encode(self, tokens: Sequence[str]) -> list[int]:
        table = {lab: i for i, lab in enumerate(self.labels)}
        try:
            return [table[t] for t in tokens]
        except KeyError as exc:
            raise InvalidInputError(f"unknown target token {exc.args[0]!r}") from exc

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.labels[i] for i in ids]

    def to_dict(self) -> dict:
        return {"labels": list(self.labels)}

    @classmethod
    def from_dict(cls, data: dict) -> "TargetVocabulary":
        return cls(labels=tuple(data["labels"]))


@dataclass
class ModelConfig:
    """Architecture and placement knobs.

    ``conv_time_strides``/``conv_freq_strides`` control the two conv layers;
    the (2, 2) default reduces time by a factor of 4. The desk profile keeps
    time at full resolution so CTC-level run lengths equal the synthetic
    symbol durations.
    """

    ctc_vocab: Vocabulary
    target_vocab: TargetVocabulary
    n_encoder_layers: int = 8
    n_decoder_layers: int = 6
    ctc_layer: int = 8
    compression: CompressionPolicy | None = None
    d_model: int = 512
    n_heads: int = 8
    ffn_dim: int = 2048
    dropout: float = 0.2
    label_smoothing: float = 0.1
    loss_weight_ctc: float = 1.0
    feature_dim: int = 40
    conv_channels: int = 64
    conv_time_strides: tuple[int, int] = (2, 2)
    conv_freq_strides: tuple[int, int] = (2, 2)
    max_target_len: int = 512

    def __post_init__(self):
        if not 1 <= self.ctc_layer <= self.n_encoder_layers:
            raise InvalidInputError(
                f"ctc_layer must lie in [1, {self.n_encoder_layers}], got {self.ctc_layer}"
            )
        if self.d_model % self.n_heads != 0:
            raise InvalidInputError("d_model must be divisible by n_heads")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise InvalidInputError("label_smoothing must lie in [0, 1)")
        if self.n_decoder_layers < 1 or self.n_encoder_layers < 1:
            raise InvalidInputError("need at least one encoder and one decoder layer")

    @classmethod
    def desk(cls, ctc_vocab: Vocabulary, target_vocab: TargetVocabulary, **overrides) -> "ModelConfig":
        """Small trainable profile for desk-scale experiments."""
        defaults = dict(
            n_encoder_layers=4,
            n_decoder_layers=2,
            ctc_layer=3,
            d_model=64,
            n_heads=4,
            ffn_dim=256,
            dropout=0.05,
            conv_channels=16,
            conv_time_strides=(1, 1),
            conv_freq_strides=(2, 2),
            max_target_len=64,
        )
        defaults.update(overrides)
        return cls(ctc_vocab=ctc_vocab, target_vocab=target_vocab, **defaults)

    def to_dict(self) -> dict:
        return {
            "ctc_vocab": self.ctc_vocab.to_dict(),
            "target_vocab": self.target_vocab.to_dict(),
            "n_encoder_layers": self.n_encoder_layers,
            "n_decoder_layers": self.n_decoder_layers,
            "ctc_layer": self.ctc_layer,
            "compression": self.compression.to_dict() if self.compression else None,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "ffn_dim": self.ffn_dim,
            "dropout": self.dropout,
            "label_smoothing": self.label_smoothing,
            "loss_weight_ctc": self.loss_weight_ctc,
            "feature_dim": self.feature_dim,
            "conv_channels": self.conv_channels,
            "conv_time_strides": list(self.conv_time_strides),
            "conv_freq_strides": list(self.conv_freq_strides),
            "max_target_len": self.max_target_len,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["ctc_vocab"] = Vocabulary.from_dict(data["ctc_vocab"])
        data["target_vocab"] = TargetVocabulary.from_dict(data["target_vocab"])
        comp = data.get("compression")
        data["compression"] = CompressionPolicy.from_dict(comp) if comp else None
        data["conv_time_strides"] = tuple(data["conv_time_strides"])
        data["conv_freq_strides"] = tuple(data["conv_freq_strides"])
        return cls(**data)


@dataclass
class EncoderOutput:
    """Encoder states plus the CTC tap and length bookkeeping."""

    states: torch.Tensor  # (B, T_out, D)
    lengths: list[int]  # post-compression (== pre when no compression)
    pre_lengths: list[int]  # lengths at the CTC tap
    ctc_log_probs: torch.Tensor  # (B, T_ctc, C)
    spans: list[list[SegmentSpan]] | None = None

    def posteriors(self, item: int) -> FramePosteriors:
        arr = self.ctc_log_probs[item].detach().cpu().double().numpy()
        arr = arr - _np_logsumexp_rows(arr)
        return FramePosteriors(arr, length=self.pre_lengths[item])


def _np_logsumexp_rows(arr: np.ndarray) -> np.ndarray:
    m = arr.max(axis=1, keepdims=True)
    return np.log(np.exp(arr - m).sum(axis=1, keepdims=True)) + m


def log_distance_penalty(length: int, *, dtype=torch.float32, device=None) -> torch.Tensor:
    """Attention-logit bias -ln(1 + |i - j|); zero on the diagonal."""
    if length < 1:
        raise InvalidInputError("length must be >= 1")
    idx = torch.arange(length, dtype=dtype, device=device)
    return -torch.log1p((idx[:, None] - idx[None, :]).abs())


def sinusoidal_positions(length: int, d_model: int, *, dtype=torch.float32, device=None) -> torch.Tensor:
    position = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    half = torch.arange(0, d_model, 2, dtype=dtype, device=device)
    div = torch.exp(-math.log(10000.0) * half / d_model)
    table = torch.zeros(length, d_model, dtype=dtype, device=device)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: d_model // 2])
    return table


def lengths_to_padding_mask(lengths: Sequence[int], max_len: int, device=None) -> torch.Tensor:
    """True at padded positions."""
    idx = torch.arange(max_len, device=device)
    lens = torch.as_tensor(list(lengths), device=device)
    return idx[None, :] >= lens[:, None]


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key, value, bias=None, key_padding_mask=None, causal=False):
        B, Lq, _ = query.shape
        Lk = key.shape[1]
        h, dh = self.n_heads, self.head_dim
        q = self.q_proj(query).view(B, Lq, h, dh).transpose(1, 2)
        k = self.k_proj(key).view(B, Lk, h, dh).transpose(1, 2)
        v = self.v_proj(value).view(B, Lk, h, dh).transpose(1, 2)
        scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(dh)
        if bias is not None:
            scores = scores + bias
        if causal:
            future = torch.triu(
                torch.ones(Lq, Lk, dtype=torch.bool, device=scores.device), diagonal=1
            )
            scores = scores.masked_fill(future, float("-inf"))
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        attn = self.dropout(attn)
        out = torch.matmul(attn, v).transpose(1, 2).reshape(B, Lq, h * dh)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.ffn = FeedForward(d_model, ffn_dim, dropout)
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, bias, key_padding_mask):
        x = self.ln1(x + self.dropout(self.self_attn(x, x, x, bias, key_padding_mask)))
        x = self.ln2(x + self.dropout(self.ffn(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.ffn = FeedForward(d_model, ffn_dim, dropout)
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.ln3 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, memory, memory_padding_mask):
        x = self.ln1(x + self.dropout(self.self_attn(x, x, x, causal=True)))
        x = self.ln2(
            x + self.dropout(self.cross_attn(x, memory, memory, key_padding_mask=memory_padding_mask))
        )
        x = self.ln3(x + self.dropout(self.ffn(x)))
        return x


class ConvSubsampler(nn.Module):
    """Two 3x3 convolutions with configurable strides, then a linear map."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        ch = config.conv_channels
        (t1, t2), (f1, f2) = config.conv_time_strides, config.conv_freq_strides
        self.strides = (t1, t2)
        self.conv1 = nn.Conv2d(1, ch, kernel_size=3, stride=(t1, f1), padding=1)
        self.conv2 = nn.Conv2d(ch, ch, kernel_size=3, stride=(t2, f2), padding=1)
        freq = config.feature_dim
        freq = (freq - 1) // f1 + 1
        freq = (freq - 1) // f2 + 1
        self.out_proj = nn.Linear(ch * freq, config.d_model)

    @staticmethod
    def _out_len(length: int, stride: int) -> int:
        return (length - 1) // stride + 1

    def output_lengths(self, lengths: Sequence[int]) -> list[int]:
        out = []
        for n in lengths:
            if n < 1:
                raise InvalidInputError("cannot subsample an empty sequence")
            out.append(self._out_len(self._out_len(int(n), self.strides[0]), self.strides[1]))
        return out

    def forward(self, feats: torch.Tensor, lengths: Sequence[int]):
        if feats.ndim != 3 or feats.shape[1] == 0:
            raise InvalidInputError(f"expected non-empty (B, T, F) features, got {tuple(feats.shape)}")
        mid_lengths = [self._out_len(int(n), self.strides[0]) for n in lengths]
        out_lengths = self.output_lengths(lengths)
        h = F.relu(self.conv1(feats.unsqueeze(1)))
        # zero padded frames so the second conv never reads bias garbage and
        # item outputs do not depend on how the batch was padded
        h = h * (~lengths_to_padding_mask(mid_lengths, h.shape[2], h.device))[:, None, :, None]
        h = F.relu(self.conv2(h))
        h = h * (~lengths_to_padding_mask(out_lengths, h.shape[2], h.device))[:, None, :, None]
        B, ch, T, freq = h.shape
        x = h.permute(0, 2, 1, 3).reshape(B, T, ch * freq)
        return self.out_proj(x), out_lengths


def conv_subsample(model_or_config, feats: torch.Tensor, lengths: Sequence[int] | None = None):
    """Functional wrapper around the conv frontend (builds one if given a config)."""
    sub = model_or_config if isinstance(model_or_config, ConvSubsampler) else ConvSubsampler(model_or_config)
    if lengths is None:
        lengths = [feats.shape[1]] * feats.shape[0]
    return sub(feats, lengths)


class SpeechTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, h, f, p = config.d_model, config.n_heads, config.ffn_dim, config.dropout
        self.subsample = ConvSubsampler(config)
        self.encoder_layers = nn.ModuleList(
            EncoderLayer(d, h, f, p) for _ in range(config.n_encoder_layers)
        )
        self.ctc_proj = nn.Linear(d, config.ctc_vocab.size)
        self.tgt_embed = nn.Embedding(config.target_vocab.size, d, padding_idx=TargetVocabulary.pad_id)
        self.embed_dropout = nn.Dropout(p)
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(d, h, f, p) for _ in range(config.n_decoder_layers)
        )
        self.out_proj = nn.Linear(d, config.target_vocab.size)
        self._reset_parameters()

    def _reset_parameters(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                nn.init.zeros_(module.bias)
        nn.init.normal_(self.tgt_embed.weight, mean=0.0, std=self.config.d_model**-0.5)
        with torch.no_grad():
            self.tgt_embed.weight[TargetVocabulary.pad_id].zero_()

    def encode(self, feats: torch.Tensor, lengths: Sequence[int]) -> EncoderOutput:
        cfg = self.config
        x, enc_lengths = self.subsample(feats, lengths)
        kpm = lengths_to_padding_mask(enc_lengths, x.shape[1], x.device)
        bias = log_distance_penalty(x.shape[1], dtype=x.dtype, device=x.device)
        for layer in self.encoder_layers[: cfg.ctc_layer]:
            x = layer(x, bias, kpm)
        ctc_log_probs = F.log_softmax(self.ctc_proj(x), dim=-1)
        pre_lengths = list(enc_lengths)
        spans = None
        out_lengths = pre_lengths
        if cfg.compression is not None:
            x, out_lengths, spans = compress_batch(
                x, ctc_log_probs, pre_lengths, cfg.compression, cfg.ctc_vocab.blank_index
            )
            kpm = lengths_to_padding_mask(out_lengths, x.shape[1], x.device)
            bias = log_distance_penalty(x.shape[1], dtype=x.dtype, device=x.device)
        for layer in self.encoder_layers[cfg.ctc_layer :]:
            x = layer(x, bias, kpm)
        return EncoderOutput(
            states=x,
            lengths=list(out_lengths),
            pre_lengths=pre_lengths,
            ctc_log_probs=ctc_log_probs,
            spans=spans,
        )

    def decode(self, encoder_output: EncoderOutput, tgt_in: torch.Tensor) -> torch.Tensor:
        """Teacher-forced decoder logits over the target vocabulary."""
        d = self.config.d_model
        x = self.tgt_embed(tgt_in) * math.sqrt(d)
        x = x + sinusoidal_positions(tgt_in.shape[1], d, dtype=x.dtype, device=x.device)
        x = self.embed_dropout(x)
        mem = encoder_output.states
        mem_kpm = lengths_to_padding_mask(encoder_output.lengths, mem.shape[1], mem.device)
        for layer in self.decoder_layers:
            x = layer(x, mem, mem_kpm)
        return self.out_proj(x)

    def forward(self, feats, lengths, tgt_in):
        enc = self.encode(feats, lengths)
        return self.decode(enc, tgt_in), enc

    def compute_losses(
        self,
        feats: torch.Tensor,
        feat_lengths: Sequence[int],
        ctc_targets: Sequence[Sequence[int]],
        tgt_in: torch.Tensor,
        tgt_out: torch.Tensor,
        reduction: str = "token_mean",
    ) -> tuple[torch.Tensor, "LossStats"]:
        cfg = self.config
        enc = self.encode(feats, feat_lengths)
        item_losses = ctc_loss_torch(
            enc.ctc_log_probs, enc.pre_lengths, ctc_targets, cfg.ctc_vocab.blank_index
        )
        feasible = torch.isfinite(item_losses)
        n_skipped = int((~feasible).sum().item())
        if feasible.any():
            ctc_sum = item_losses[feasible].sum()
            ctc_red = ctc_sum if reduction == "sum" else ctc_sum / int(feasible.sum().item())
        else:
            ctc_red = item_losses.new_zeros(())
        logits = self.decode(enc, tgt_in)
        ce, n_tokens, n_correct = label_smoothed_ce(
            logits, tgt_out, cfg.label_smoothing, TargetVocabulary.pad_id, reduction=reduction
        )
        lam = multitask_loss(ctc_red, ce, cfg.loss_weight_ctc)
        # logged values are recombined in float64 so the lambda = w*ctc + ce
        # identity survives float32 training arithmetic
        ctc_f = float(ctc_red.detach())
        ce_f = float(ce.detach())
        stats = LossStats(
            lam=multitask_loss(ctc_f, ce_f, cfg.loss_weight_ctc),
            ctc=ctc_f,
            ce=ce_f,
            ctc_skipped=n_skipped,
            n_tokens=n_tokens,
            n_correct=n_correct,
            pre_lengths=list(enc.pre_lengths),
            post_lengths=list(enc.lengths),
        )
        return lam, stats


@dataclass
class LossStats:
    lam: float
    ctc: float
    ce: float
    ctc_skipped: int
    n_tokens: int
    n_correct: int
    pre_lengths: list[int] = field(default_factory=list)
    post_lengths: list[int] = field(default_factory=list)


class _CtcLossFn(torch.autograd.Function):
    """Bridge to the float64 forward-backward engine.

    Forward returns per-item negative log-likelihoods (inf where the target
    is infeasible, NaN when the activations themselves are NaN); backward
    applies the exact analytic gradient with respect to the log-probs.
    """

    @staticmethod
    def forward(ctx, log_probs, lengths, targets, blank_index):
        lp = log_probs.detach().cpu().double().numpy()
        if np.isnan(lp).any():
            ctx.save_for_backward(torch.zeros_like(log_probs))
            return log_probs.new_full((lp.shape[0],), float("nan"))
        lp = lp - _np_logsumexp_rows(lp.reshape(-1, lp.shape[-1])).reshape(lp.shape[0], lp.shape[1], 1)
        losses, grads = ctc_loss_batch(lp, lengths, targets, blank_index)
        ctx.save_for_backward(torch.as_tensor(grads, dtype=log_probs.dtype, device=log_probs.device))
        return torch.as_tensor(losses, dtype=log_probs.dtype, device=log_probs.device)

    @staticmethod
    def backward(ctx, grad_output):
        (grads,) = ctx.saved_tensors
        return grads * grad_output[:, None, None], None, None, None


def ctc_loss_torch(log_probs, lengths, targets, blank_index=0) -> torch.Tensor:
    return _CtcLossFn.apply(log_probs, list(lengths), [list(t) for t in targets], blank_index)


def label_smoothed_ce(
    logits: torch.Tensor,
    targets: torch.Tensor,
    epsilon: float,
    pad_id: int = 0,
    reduction: str = "token_mean",
) -> tuple[torch.Tensor, int, int]:
    """Label-smoothed NLL; returns (loss, n_tokens, n_correct).

    The smoothed target distribution is (1 - eps) * onehot + eps / V, so
    eps = 0 recovers plain cross entropy and a uniform prediction costs
    ln V regardless of eps.
    """
    if logits.ndim != 3:
        raise InvalidInputError("expected (B, L, V) logits")
    mask = targets != pad_id
    n_tokens = int(mask.sum().item())
    if n_tokens == 0:
        return logits.sum() * 0.0, 0, 0
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    smooth = -logp.mean(dim=-1)
    per_token = (1.0 - epsilon) * nll + epsilon * smooth
    total = (per_token * mask).sum()
    n_correct = int(((logits.argmax(dim=-1) == targets) & mask).sum().item())
    if reduction == "token_mean":
        return total / n_tokens, n_tokens, n_correct
    if reduction == "sum":
        return total, n_tokens, n_correct
    raise InvalidInputError(f"unknown reduction {reduction!r}")


def multitask_loss(ctc_loss_value, ce_loss_value, loss_weight_ctc: float = 1.0):
    """Combined objective: loss_weight_ctc * CTC + CE (weight 1 is the plain sum)."""
    return loss_weight_ctc * ctc_loss_value + ce_loss_value


@dataclass
class TranslationResult:
    tokens: list[int]  # target ids, <bos>/<eos> stripped
    ctc_frame_labels: list[int]
    ctc_tokens: list[int]  # collapsed CTC output ids
    truncated: bool
    score: float
    pre_length: int
    post_length: int


def _finish_hypothesis(tokens: list[int], max_len: int) -> tuple[list[int], bool]:
    if TargetVocabulary.eos_id in tokens:
        return tokens[: tokens.index(TargetVocabulary.eos_id)], False
    return tokens, len(tokens) >= max_len


@torch.no_grad()
def greedy_translate(model: SpeechTransformer, enc: EncoderOutput, max_len: int) -> list[tuple[list[int], bool, float]]:
    B = enc.states.shape[0]
    device = enc.states.device
    tokens = torch.full((B, 1), TargetVocabulary.bos_id, dtype=torch.long, device=device)
    scores = torch.zeros(B, dtype=torch.float64, device=device)
    alive = torch.ones(B, dtype=torch.bool, device=device)
    for _ in range(max_len):
        logits = model.decode(enc, tokens)
        logp = F.log_softmax(logits[:, -1].double(), dim=-1)
        nxt = logp.argmax(dim=-1)
        step_score = logp.gather(1, nxt[:, None]).squeeze(1)
        scores = scores + torch.where(alive, step_score, torch.zeros_like(step_score))
        nxt = torch.where(alive, nxt, torch.full_like(nxt, TargetVocabulary.pad_id))
        tokens = torch.cat([tokens, nxt[:, None]], dim=1)
        alive = alive & (nxt != TargetVocabulary.eos_id)
        if not alive.any():
            break
    out = []
    for b in range(B):
        seq = [int(t) for t in tokens[b, 1:] if int(t) != TargetVocabulary.pad_id]
        seq, truncated = _finish_hypothesis(seq, max_len)
        out.append((seq, truncated, float(scores[b])))
    return out


@torch.no_grad()
def beam_translate_item(
    model: SpeechTransformer, enc: EncoderOutput, item: int, beam_size: int, max_len: int
) -> tuple[list[int], bool, float]:
    """Beam search over one utterance; hypotheses scored by summed log-prob."""
    device = enc.states.device
    n = enc.lengths[item]
    states = enc.states[item : item + 1, :n]
    sub = EncoderOutput(
        states=states,
        lengths=[n],
        pre_lengths=[enc.pre_lengths[item]],
        ctc_log_probs=enc.ctc_log_probs[item : item + 1],
    )
    beams: list[tuple[list[int], float]] = [([TargetVocabulary.bos_id], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for _ in range(max_len):
        if not beams:
            break
        tok = torch.tensor([b[0] for b in beams], dtype=torch.long, device=device)
        expanded = EncoderOutput(
            states=states.expand(len(beams), -1, -1),
            lengths=[n] * len(beams),
            pre_lengths=[enc.pre_lengths[item]] * len(beams),
            ctc_log_probs=sub.ctc_log_probs.expand(len(beams), -1, -1),
        )
        logits = model.decode(expanded, tok)
        logp = F.log_softmax(logits[:, -1].double(), dim=-1)
        candidates: list[tuple[list[int], float]] = []
        for i, (prefix, score) in enumerate(beams):
            top = torch.topk(logp[i], k=min(beam_size, logp.shape[1]))
            for val, idx in zip(top.values.tolist(), top.indices.tolist()):
                candidates.append((prefix + [idx], score + val))
        candidates.sort(key=lambda c: -c[1])
        beams = []
        for prefix, score in candidates:
            if prefix[-1] == TargetVocabulary.eos_id:
                finished.append((prefix, score))
            elif len(beams) < beam_size:
                beams.append((prefix, score))
            if len(beams) >= beam_size and len(finished) >= beam_size:
                break
        if len(finished) >= beam_size:
            break
    if finished:
        best, score = max(finished, key=lambda c: c[1])
        tokens = best[1:-1]
        return tokens, False, score
    best, score = max(beams, key=lambda c: c[1])
    tokens, truncated = _finish_hypothesis(best[1:], max_len)
    return tokens, True, score


@torch.no_grad()
def decode_translation(
    model: SpeechTransformer,
    feats: torch.Tensor,
    lengths: Sequence[int],
    max_len: int | None = None,
    beam_size: int = 5,
) -> list[TranslationResult]:
    """Translate a batch, contextually returning the CTC transcript output."""
    was_training = model.training
    model.eval()
    try:
        max_len = max_len or model.config.max_target_len
        enc = model.encode(feats, lengths)
        if beam_size <= 1:
            decoded = greedy_translate(model, enc, max_len)
        else:
            decoded = [
                beam_translate_item(model, enc, b, beam_size, max_len)
                for b in range(enc.states.shape[0])
            ]
        results = []
        for b, (tokens, truncated, score) in enumerate(decoded):
            frame_labels, collapsed = greedy_decode(
                enc.posteriors(b), model.config.ctc_vocab.blank_index
            )
            results.append(
                TranslationResult(
                    tokens=tokens,
                    ctc_frame_labels=frame_labels,
                    ctc_tokens=list(collapsed.ids),
                    truncated=truncated,
                    score=score,
                    pre_length=enc.pre_lengths[b],
                    post_length=enc.lengths[b],
                )
            )
        return results
    finally:
        if was_training:
            model.train()


def save_model(path, model: SpeechTransformer, extra: dict | None = None) -> None:
    params = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    binio.save_checkpoint(path, params, config=model.config.to_dict(), extra=extra)


def load_model(path) -> tuple[SpeechTransformer, dict]:
    params, config_dict, extra = binio.load_checkpoint(path)
    if config_dict is None:
        raise InvalidInputError(f"{path}: checkpoint carries no model config")
    config = ModelConfig.from_dict(config_dict)
    model = SpeechTransformer(config)
    model.load_state_dict({k: torch.as_tensor(v.copy()) for k, v in params.items()})
    model.eval()
    return model, extra
