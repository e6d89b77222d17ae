"""Optimization loop.

Adam with a linear-warmup / inverse-square-root learning-rate schedule,
gradient accumulation, epoch-level validation with early stopping, a ring
buffer of epoch checkpoints that is averaged at the end, JSON-lines
metrics, and an activation-element accountant that serves as the
platform-independent stand-in for RAM measurements.

``--deterministic`` mode pins torch to a single thread and enforces
deterministic kernels; two runs with the same seed then produce
byte-identical metrics logs and checkpoints, and resuming from a saved
state continues the exact trajectory.
"""
from __future__ import annotations

import base64
import json
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import binio
from .errors import DataError, InvalidInputError, TrainingDivergedError
from .features import SpecAugmentConfig, Utterance, spec_augment
from .model import ModelConfig, SpeechTransformer, TargetVocabulary, save_model

METRICS_FILE = "metrics.jsonl"
FINAL_CHECKPOINT = "model_final.ckpt"
TRAIN_STATE_FILE = "train_state.ckpt"


@dataclass
class TrainConfig:
    lr_start: float = 3e-4
    lr_peak: float = 5e-3
    warmup_updates: int = 4000
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-8
    batch_sentences: int = 8
    accumulation_steps: int = 8
    patience_epochs: int = 5
    checkpoint_avg_n: int = 5
    max_epochs: int = 200
    seed: int = 1
    deterministic: bool = False
    loss_reduction: str = "token_mean"
    spec_augment: SpecAugmentConfig | None = None

    def __post_init__(self):
        if self.lr_start > self.lr_peak:
            raise InvalidInputError("lr_start must not exceed lr_peak")
        if self.warmup_updates < 1:
            raise InvalidInputError("warmup_updates must be >= 1")
        for name in ("batch_sentences", "accumulation_steps", "checkpoint_avg_n", "max_epochs"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.patience_epochs < 0:
            raise InvalidInputError("patience_epochs must be >= 0")
        if self.loss_reduction not in ("token_mean", "sum"):
            raise InvalidInputError(f"unknown loss_reduction {self.loss_reduction!r}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Scaled-down schedule for desk-scale datasets."""
        defaults = dict(
            lr_peak=2e-3,
            warmup_updates=500,
            accumulation_steps=1,
            max_epochs=30,
        )
        defaults.update(overrides)
        return cls(**defaults)

    def to_dict(self) -> dict:
        out = {
            "lr_start": self.lr_start,
            "lr_peak": self.lr_peak,
            "warmup_updates": self.warmup_updates,
            "adam_betas": list(self.adam_betas),
            "adam_eps": self.adam_eps,
            "batch_sentences": self.batch_sentences,
            "accumulation_steps": self.accumulation_steps,
            "patience_epochs": self.patience_epochs,
            "checkpoint_avg_n": self.checkpoint_avg_n,
            "max_epochs": self.max_epochs,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "loss_reduction": self.loss_reduction,
            "spec_augment": self.spec_augment.to_dict() if self.spec_augment else None,
        }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["adam_betas"] = tuple(data.get("adam_betas", (0.9, 0.98)))
        aug = data.get("spec_augment")
        data["spec_augment"] = SpecAugmentConfig.from_dict(aug) if aug else None
        return cls(**data)


def lr_at_step(update_count: int, config: TrainConfig) -> float:
    """Linear warmup to the peak, then inverse-square-root decay."""
    if update_count < 0:
        raise InvalidInputError("update_count must be >= 0")
    u, w = update_count, config.warmup_updates
    if u <= w:
        return config.lr_start + (config.lr_peak - config.lr_start) * u / w
    return config.lr_peak * (w / u) ** 0.5


@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step_count: int = 0
    skipped: int = 0

    @classmethod
    def init(cls, params: dict[str, torch.Tensor]) -> "AdamState":
        return cls(
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.98),
    eps: float = 1e-8,
) -> bool:
    """Bias-corrected Adam update in place; skips entirely on non-finite grads."""
    for g in grads.values():
        if not torch.isfinite(g).all():
            state.skipped += 1
            return False
    state.step_count += 1
    t = state.step_count
    b1, b2 = betas
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m[name]
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / bc1
            v_hat = v / bc2
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return True


def average_checkpoints(snapshots: Sequence[dict[str, torch.Tensor]], expected_n: int | None = None) -> dict[str, torch.Tensor]:
    """Elementwise mean of parameter snapshots (accumulated in float64)."""
    if not snapshots:
        raise InvalidInputError("cannot average an empty checkpoint buffer")
    if expected_n is not None and len(snapshots) < expected_n:
        warnings.warn(
            f"averaging {len(snapshots)} checkpoints, fewer than the configured {expected_n}",
            stacklevel=2,
        )
    out = {}
    for name in snapshots[0]:
        acc = torch.zeros_like(snapshots[0][name], dtype=torch.float64)
        for snap in snapshots:
            acc += snap[name].double()
        out[name] = (acc / len(snapshots)).to(snapshots[0][name].dtype)
    return out


def peak_activation_elements(
    config: ModelConfig,
    pre_lengths: Sequence[int],
    post_lengths: Sequence[int],
    target_lengths: Sequence[int],
) -> int:
    """Elements of every sequence-length-dependent activation of one batch.

    Counted per item: the frontend output, each encoder layer's output
    states and h*T*T self-attention score matrix (layers above the tap see
    the post-compression length), and each decoder layer's states,
    self-attention scores and cross-attention scores over the encoder
    memory. Pooled buffers are not double counted, so a compression run
    with no contraction costs exactly the baseline.
    """
    h, d = config.n_heads, config.d_model
    compressed = config.compression is not None
    total = 0
    for pre, post, tgt in zip(pre_lengths, post_lengths, target_lengths):
        pre, post, tgt = int(pre), int(post), int(tgt)
        mem = post if compressed else pre
        total += pre * d  # frontend output feeding layer 1
        for layer in range(1, config.n_encoder_layers + 1):
            t = pre if layer <= config.ctc_layer else mem
            total += h * t * t + t * d
        for _ in range(config.n_decoder_layers):
            total += h * tgt * tgt + tgt * d + h * tgt * mem
    return total


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------


@dataclass
class EncodedUtterance:
    uid: str
    frames: np.ndarray
    ctc_ids: list[int]
    target_ids: list[int]


def encode_utterances(utterances: Sequence[Utterance], model_config: ModelConfig) -> list[EncodedUtterance]:
    ctc_table = {lab: i for i, lab in enumerate(model_config.ctc_vocab.labels)}
    tgt_table = {lab: i for i, lab in enumerate(model_config.target_vocab.labels)}
    out = []
    for u in utterances:
        try:
            ctc_ids = [ctc_table[p] for p in u.phones]
            tgt_ids = [tgt_table[w] for w in u.translation]
        except KeyError as exc:
            raise DataError(f"{u.uid}: token {exc.args[0]!r} missing from the model vocabularies") from exc
        out.append(
            EncodedUtterance(
                uid=u.uid,
                frames=np.asarray(u.features.frames, dtype=np.float32),
                ctc_ids=ctc_ids,
                target_ids=tgt_ids,
            )
        )
    return out


def collate(
    items: Sequence[EncodedUtterance],
    dtype=torch.float32,
    augment: SpecAugmentConfig | None = None,
    rng: np.random.Generator | None = None,
) -> dict:
    """Pad a list of utterances into the tensor batch compute_losses expects."""
    B = len(items)
    feat_lengths = [it.frames.shape[0] for it in items]
    T = max(feat_lengths)
    F_dim = items[0].frames.shape[1]
    feats = torch.zeros(B, T, F_dim, dtype=dtype)
    for b, it in enumerate(items):
        frames = it.frames
        if augment is not None:
            from .features import FeatureSequence

            frames = spec_augment(FeatureSequence(frames=frames), augment, rng).frames
        feats[b, : feat_lengths[b]] = torch.as_tensor(np.ascontiguousarray(frames), dtype=dtype)
    L = max(len(it.target_ids) for it in items) + 1
    tgt_in = torch.full((B, L), TargetVocabulary.pad_id, dtype=torch.long)
    tgt_out = torch.full((B, L), TargetVocabulary.pad_id, dtype=torch.long)
    for b, it in enumerate(items):
        ids = it.target_ids
        tgt_in[b, 0] = TargetVocabulary.bos_id
        tgt_in[b, 1 : 1 + len(ids)] = torch.tensor(ids, dtype=torch.long)
        tgt_out[b, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        tgt_out[b, len(ids)] = TargetVocabulary.eos_id
    return dict(
        feats=feats,
        feat_lengths=feat_lengths,
        ctc_targets=[it.ctc_ids for it in items],
        tgt_in=tgt_in,
        tgt_out=tgt_out,
    )


def batch_target_lengths(batch: dict) -> list[int]:
    return [int((batch["tgt_out"][b] != TargetVocabulary.pad_id).sum()) for b in range(batch["tgt_out"].shape[0])]


# ---------------------------------------------------------------------------
# Train state serialization
# ---------------------------------------------------------------------------


def _rng_payload(data_rng: np.random.Generator) -> dict:
    return {
        "torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii"),
        "numpy": json.dumps(data_rng.bit_generator.state),
    }


def _restore_rngs(payload: dict, data_rng: np.random.Generator) -> None:
    raw = base64.b64decode(payload["torch"])
    torch.set_rng_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))
    data_rng.bit_generator.state = json.loads(payload["numpy"])


def save_train_state(
    path,
    model: SpeechTransformer,
    adam: AdamState,
    ring: Sequence[dict[str, torch.Tensor]],
    data_rng: np.random.Generator,
    counters: dict,
) -> None:
    params: dict[str, np.ndarray] = {}
    for k, v in model.state_dict().items():
        params[f"model.{k}"] = v.detach().cpu().numpy()
    for k, v in adam.m.items():
        params[f"adam.m.{k}"] = v.detach().cpu().numpy()
    for k, v in adam.v.items():
        params[f"adam.v.{k}"] = v.detach().cpu().numpy()
    for i, snap in enumerate(ring):
        for k, v in snap.items():
            params[f"ring.{i}.{k}"] = v.detach().cpu().numpy()
    extra = {
        "counters": dict(counters),
        "adam_step_count": adam.step_count,
        "adam_skipped": adam.skipped,
        "ring_size": len(ring),
        "rng": _rng_payload(data_rng),
    }
    binio.save_checkpoint(path, params, config=model.config.to_dict(), extra=extra)


def load_train_state(path, model: SpeechTransformer, adam: AdamState, data_rng: np.random.Generator):
    params, _, extra = binio.load_checkpoint(path)
    model_sd = {}
    ring: list[dict[str, torch.Tensor]] = [dict() for _ in range(int(extra["ring_size"]))]
    for key, value in params.items():
        tensor = torch.as_tensor(value.copy())
        scope, _, rest = key.partition(".")
        if scope == "model":
            model_sd[rest] = tensor
        elif scope == "adam":
            kind, _, name = rest.partition(".")
            getattr(adam, kind)[name].copy_(tensor)
        elif scope == "ring":
            idx, _, name = rest.partition(".")
            ring[int(idx)][name] = tensor
    model.load_state_dict(model_sd)
    adam.step_count = int(extra["adam_step_count"])
    adam.skipped = int(extra["adam_skipped"])
    _restore_rngs(extra["rng"], data_rng)
    return ring, dict(extra["counters"])


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: SpeechTransformer
    metrics: list[dict]
    best_val_ce: float
    epochs_run: int
    averaged_from: int
    out_dir: Path | None = None
    metrics_path: Path | None = None
    final_checkpoint: Path | None = None


def _chunk(seq: list, size: int) -> list[list]:
    return [seq[i : i + size] for i in range(0, len(seq), size)]


def _clone_params(model: SpeechTransformer) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


@torch.no_grad()
def evaluate(model: SpeechTransformer, items: Sequence[EncodedUtterance], batch_size: int) -> dict:
    """Dev-set label-smoothed CE (token mean) and teacher-forced accuracy."""
    was_training = model.training
    model.eval()
    total_ce = 0.0
    total_tokens = 0
    total_correct = 0
    for chunk in _chunk(list(items), batch_size):
        batch = collate(chunk)
        _, stats = model.compute_losses(**batch, reduction="sum")
        total_ce += stats.ce
        total_tokens += stats.n_tokens
        total_correct += stats.n_correct
    if was_training:
        model.train()
    return {
        "ce": total_ce / max(total_tokens, 1),
        "token_accuracy": total_correct / max(total_tokens, 1),
        "n_tokens": total_tokens,
    }


def train_loop(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_utterances: Sequence[Utterance],
    dev_utterances: Sequence[Utterance],
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    if not train_utterances or not dev_utterances:
        raise InvalidInputError("train and dev sets must be non-empty")
    cfg = train_config
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    model = SpeechTransformer(model_config)
    model.train()
    params = dict(model.named_parameters())
    adam = AdamState.init(params)
    data_rng = np.random.default_rng([cfg.seed, 0x5EED])

    train_items = encode_utterances(train_utterances, model_config)
    dev_items = encode_utterances(dev_utterances, model_config)

    counters = {
        "update_count": 0,
        "epoch": 0,
        "best_val_ce": float("inf"),
        "epochs_since_improvement": 0,
    }
    ring: deque[dict[str, torch.Tensor]] = deque(maxlen=cfg.checkpoint_avg_n)
    if resume_from is not None:
        loaded_ring, counters = load_train_state(resume_from, model, adam, data_rng)
        ring.extend(loaded_ring)

    out_path = Path(out_dir) if out_dir is not None else None
    metrics: list[dict] = []
    writer = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume_from is not None else "w"
        writer = open(out_path / METRICS_FILE, mode, encoding="utf-8")

    def emit(record: dict) -> None:
        metrics.append(record)
        if writer is not None:
            writer.write(json.dumps(record, sort_keys=True) + "\n")

    try:
        while counters["epoch"] < cfg.max_epochs:
            counters["epoch"] += 1
            epoch = counters["epoch"]
            order = [int(i) for i in data_rng.permutation(len(train_items))]
            batches = _chunk([train_items[i] for i in order], cfg.batch_sentences)
            update_groups = _chunk(batches, cfg.accumulation_steps)
            epoch_finite = False
            epoch_peak = 0
            epoch_pre = 0
            epoch_post = 0
            epoch_lam_sum = 0.0
            epoch_steps = 0
            for group in update_groups:
                model.zero_grad(set_to_none=False)
                lam_acc = ctc_acc = ce_acc = 0.0
                skipped_items = 0
                for batch_items in group:
                    batch = collate(
                        [it for it in batch_items],
                        augment=cfg.spec_augment,
                        rng=data_rng,
                    )
                    lam, stats = model.compute_losses(**batch, reduction=cfg.loss_reduction)
                    scale = 1.0 / len(group) if cfg.loss_reduction == "token_mean" else 1.0
                    (lam * scale).backward()
                    lam_acc += stats.lam
                    ctc_acc += stats.ctc
                    ce_acc += stats.ce
                    skipped_items += stats.ctc_skipped
                    epoch_peak = max(
                        epoch_peak,
                        peak_activation_elements(
                            model_config, stats.pre_lengths, stats.post_lengths, batch_target_lengths(batch)
                        ),
                    )
                    epoch_pre += sum(stats.pre_lengths)
                    epoch_post += sum(stats.post_lengths)
                grads = {
                    k: (p.grad if p.grad is not None else torch.zeros_like(p))
                    for k, p in params.items()
                }
                lr = lr_at_step(counters["update_count"], cfg)
                applied = adam_step(params, grads, adam, lr, cfg.adam_betas, cfg.adam_eps)
                counters["update_count"] += 1
                n = len(group)
                if np.isfinite(lam_acc):
                    epoch_finite = True
                epoch_lam_sum += lam_acc / n
                epoch_steps += 1
                emit(
                    {
                        "event": "step",
                        "epoch": epoch,
                        "update": counters["update_count"],
                        "lambda": lam_acc / n,
                        "ctc": ctc_acc / n,
                        "ce": ce_acc / n,
                        "lr": lr,
                        "ctc_skipped": skipped_items,
                        "applied": applied,
                    }
                )
            if not epoch_finite:
                raise TrainingDivergedError(
                    f"loss was non-finite for every update of epoch {epoch}"
                )
            val = evaluate(model, dev_items, cfg.batch_sentences)
            improved = val["ce"] < counters["best_val_ce"]
            if improved:
                counters["best_val_ce"] = val["ce"]
                counters["epochs_since_improvement"] = 0
            else:
                counters["epochs_since_improvement"] += 1
            ring.append(_clone_params(model))
            emit(
                {
                    "event": "epoch",
                    "epoch": epoch,
                    "train_lambda": epoch_lam_sum / max(epoch_steps, 1),
                    "val_ce": val["ce"],
                    "val_token_accuracy": val["token_accuracy"],
                    "mean_pre_length": epoch_pre / len(train_items),
                    "mean_post_length": epoch_post / len(train_items),
                    "compression_ratio": epoch_post / max(epoch_pre, 1),
                    "peak_activation_elements": epoch_peak,
                    "improved": improved,
                    "epochs_since_improvement": counters["epochs_since_improvement"],
                    "adam_skipped": adam.skipped,
                }
            )
            if out_path is not None:
                save_train_state(out_path / TRAIN_STATE_FILE, model, adam, list(ring), data_rng, counters)
            if counters["epochs_since_improvement"] >= cfg.patience_epochs:
                break

        averaged = average_checkpoints(list(ring), expected_n=cfg.checkpoint_avg_n)
        final_model = SpeechTransformer(model_config)
        final_model.load_state_dict(averaged)
        final_model.eval()
        final_path = None
        if out_path is not None:
            final_path = out_path / FINAL_CHECKPOINT
            save_model(
                final_path, final_model, extra={"averaged_from": len(ring), "epochs": counters["epoch"]}
            )
        emit(
            {
                "event": "final",
                "epochs": counters["epoch"],
                "best_val_ce": counters["best_val_ce"],
                "averaged_from": len(ring),
            }
        )
    finally:
        if writer is not None:
            writer.close()

    return TrainResult(
        model=final_model,
        metrics=metrics,
        best_val_ce=counters["best_val_ce"],
        epochs_run=counters["epoch"],
        averaged_from=len(ring),
        out_dir=out_path,
        metrics_path=(out_path / METRICS_FILE) if out_path else None,
        final_checkpoint=final_path,
    )
