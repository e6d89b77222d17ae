"""Command-line interface.

Subcommands:

* ``synth``          generate a synthetic dataset directory from a config
* ``train``          train a model from a config file, writing checkpoints
                     and a JSON-lines metrics log
* ``decode``         translate a manifest split with a checkpoint, emitting
                     one JSON line per utterance with both the translation
                     and the CTC transcript
* ``eval``           score hypotheses against references (WER + BLEU) and
                     optionally render loss/length curves from a metrics log
* ``compress-dump``  write the compression spans and weights per segment

Exit codes: 0 success, 1 usage error, 2 data error. ``CTCSQUEEZE_CONFIG_DIR``
overrides the directory searched for a default config file when ``--config``
is omitted.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch
import yaml

from . import binio
from .compress import CompressionPolicy, compress
from .errors import DataError, InvalidInputError, OracleSizeError, TrainingDivergedError, UsageError
from .features import SyntheticConfig, SyntheticTask, load_dataset, write_dataset
from .metrics import EvalReport, bleu, tokenize_13a
from .model import ModelConfig, decode_translation, load_model
from .train import TrainConfig, train_loop


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_yaml(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"{path}: no such config file") from exc
    except yaml.YAMLError as exc:
        raise DataError(f"{path}: bad YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise DataError(f"{path}: config must be a mapping")
    return data


def _resolve_config(arg: str | None, default_name: str) -> Path:
    if arg is not None:
        return Path(arg)
    search_dir = Path(os.environ.get("CTCSQUEEZE_CONFIG_DIR", "."))
    candidate = search_dir / default_name
    if not candidate.exists():
        raise UsageError(
            f"--config not given and {candidate} does not exist "
            f"(set CTCSQUEEZE_CONFIG_DIR to change the search directory)"
        )
    return candidate


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_yaml(_resolve_config(args.config, "synth.yaml"))
    out_dir = Path(args.out or cfg.get("out_dir") or "")
    if not str(out_dir):
        raise UsageError("an output directory is required (--out or out_dir in the config)")
    gen = SyntheticConfig.from_dict(cfg.get("generator", {}))
    task = SyntheticTask(gen)
    seed = int(cfg.get("seed", 1))
    splits = {}
    for split, tag in (("train", 0), ("dev", 1), ("test", 2)):
        n = int(cfg.get(f"n_{split}", 0))
        if n > 0:
            splits[split] = task.make_dataset(n, master_seed=seed, split_tag=tag)
    if not splits:
        raise DataError("config requests no utterances (n_train/n_dev/n_test all zero)")
    write_dataset(out_dir, task, splits)
    counts = ", ".join(f"{k}={len(v)}" for k, v in splits.items())
    print(f"wrote {out_dir} ({counts})")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _model_config_from_yaml(section: dict, data) -> ModelConfig:
    section = dict(section or {})
    profile = section.pop("profile", "desk")
    compression = section.pop("compression", None)
    if compression is not None:
        compression = CompressionPolicy.from_dict(compression)
    section["compression"] = compression
    if "feature_dim" not in section:
        section["feature_dim"] = data.utterances[0].features.dim
    if profile == "desk":
        return ModelConfig.desk(data.ctc_vocab, data.target_vocab, **section)
    if profile == "paper":
        return ModelConfig(ctc_vocab=data.ctc_vocab, target_vocab=data.target_vocab, **section)
    raise DataError(f"unknown model profile {profile!r} (expected 'desk' or 'paper')")


def _train_config_from_yaml(section: dict, args) -> TrainConfig:
    section = dict(section or {})
    profile = section.pop("profile", "desk")
    if args.seed is not None:
        section["seed"] = args.seed
    if args.deterministic:
        section["deterministic"] = True
    if profile == "desk":
        return TrainConfig.desk(**section)
    if profile == "paper":
        return TrainConfig.from_dict({**TrainConfig().to_dict(), **section})
    raise DataError(f"unknown train profile {profile!r} (expected 'desk' or 'paper')")


def cmd_train(args) -> int:
    cfg = _load_yaml(_resolve_config(args.config, "train.yaml"))
    data_dir = args.data or cfg.get("data_dir")
    out_dir = args.out or cfg.get("out_dir")
    if not data_dir or not out_dir:
        raise UsageError("train needs a dataset directory and an output directory")
    train_data = load_dataset(data_dir, "train")
    dev_data = load_dataset(data_dir, "dev")
    model_config = _model_config_from_yaml(cfg.get("model", {}), train_data)
    train_config = _train_config_from_yaml(cfg.get("train", {}), args)
    try:
        result = train_loop(
            model_config,
            train_config,
            train_data.utterances,
            dev_data.utterances,
            out_dir=out_dir,
            resume_from=args.resume,
        )
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    print(
        f"trained {result.epochs_run} epochs, best dev CE {result.best_val_ce:.4f}, "
        f"checkpoint {result.final_checkpoint}"
    )
    return 0


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------


def _batched(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def cmd_decode(args) -> int:
    model, _ = load_model(args.checkpoint)
    data = load_dataset(args.data, args.split)
    if data.ctc_vocab.labels != model.config.ctc_vocab.labels:
        raise DataError("dataset CTC vocabulary does not match the checkpoint")
    records = []
    for chunk in _batched(data.utterances, args.batch_size):
        lengths = [u.features.num_frames for u in chunk]
        feats = torch.zeros(len(chunk), max(lengths), chunk[0].features.dim)
        for b, u in enumerate(chunk):
            feats[b, : lengths[b]] = torch.as_tensor(u.features.frames, dtype=torch.float32)
        results = decode_translation(model, feats, lengths, max_len=args.max_len, beam_size=args.beam)
        for u, r in zip(chunk, results):
            records.append(
                {
                    "id": u.uid,
                    "tokens": [model.config.target_vocab.labels[i] for i in r.tokens],
                    "ctc_tokens": [model.config.ctc_vocab.labels[i] for i in r.ctc_tokens],
                    "truncated": r.truncated,
                    "pre_length": r.pre_length,
                    "post_length": r.post_length,
                }
            )
    binio.write_jsonl(args.out, records)
    print(f"decoded {len(records)} utterances -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _read_token_file(path: str) -> dict[str, list[str]]:
    """JSONL {id, tokens} or plain text (one utterance per line, 13a-tokenized)."""
    p = Path(path)
    if p.suffix == ".txt":
        lines = p.read_text(encoding="utf-8").splitlines()
        return {f"line{i:06d}": tokenize_13a(line) for i, line in enumerate(lines)}
    table = {}
    for record in binio.read_jsonl(p):
        table[str(record["id"])] = [str(t) for t in record["tokens"]]
    return table


def _reference_tables(args) -> tuple[dict[str, list[str]], dict[str, list[str]] | None]:
    refs = Path(args.refs)
    if refs.is_dir():
        data = load_dataset(refs, args.split)
        translations = {u.uid: list(u.translation) for u in data.utterances}
        phones = {u.uid: list(u.phones) for u in data.utterances}
        return translations, phones
    return _read_token_file(args.refs), None


def cmd_eval(args) -> int:
    hyp_records = binio.read_jsonl(args.hyps)
    hyps = {str(r["id"]): r for r in hyp_records}
    translations, phones = _reference_tables(args)
    missing = sorted(set(translations) - set(hyps))
    if missing:
        raise DataError(f"hypotheses missing for {len(missing)} utterances (first: {missing[0]})")
    ids = sorted(translations)
    bleu_score = bleu([hyps[i]["tokens"] for i in ids], [translations[i] for i in ids])

    wer_value = None
    total_dist = 0
    total_ref = 0
    if phones is not None and all("ctc_tokens" in hyps[i] for i in ids):
        from .metrics import edit_distance

        for i in ids:
            total_dist += edit_distance(hyps[i]["ctc_tokens"], phones[i])
            total_ref += len(phones[i])
        wer_value = total_dist / total_ref if total_ref else 0.0

    ratios = [
        hyps[i]["post_length"] / hyps[i]["pre_length"]
        for i in ids
        if hyps[i].get("pre_length") and hyps[i].get("post_length") is not None
    ]
    report = EvalReport(
        wer=wer_value,
        bleu=bleu_score,
        mean_compression_ratio=(sum(ratios) / len(ratios)) if ratios else None,
        n_utterances=len(ids),
        truncated=sum(1 for i in ids if hyps[i].get("truncated")),
        utterances=[
            {
                "id": i,
                "bleu_ref_len": len(translations[i]),
                "hyp_len": len(hyps[i]["tokens"]),
                "exact_match": hyps[i]["tokens"] == translations[i],
            }
            for i in ids
        ],
    )
    payload = json.dumps(report.to_dict(), sort_keys=True, indent=2)
    if args.report:
        Path(args.report).write_text(payload + "\n", encoding="utf-8")
    wer_text = f"{wer_value:.4f}" if wer_value is not None else "n/a"
    print(f"BLEU {bleu_score.score:.2f}  WER {wer_text}  utterances {len(ids)}")
    if args.plots:
        if not args.metrics_log:
            raise UsageError("--plots needs --metrics-log to read training curves from")
        _write_plots(args.metrics_log, Path(args.plots))
    return 0


def _write_plots(metrics_log: str, out_dir: Path) -> None:
    records = [r for r in binio.read_jsonl(metrics_log) if r.get("event") == "epoch"]
    if not records:
        raise DataError(f"{metrics_log}: no epoch records to plot")
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = [r["epoch"] for r in records]
    columns = {
        "train_lambda": [r["train_lambda"] for r in records],
        "val_ce": [r["val_ce"] for r in records],
        "compression_ratio": [r["compression_ratio"] for r in records],
    }
    with open(out_dir / "curves.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch," + ",".join(columns) + "\n")
        for i, e in enumerate(epochs):
            fh.write(str(e))
            for series in columns.values():
                fh.write(f",{series[i]}")
            fh.write("\n")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(epochs, columns["train_lambda"], label="train lambda")
    ax1.plot(epochs, columns["val_ce"], label="dev CE")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, columns["compression_ratio"], label="post/pre length")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("compression ratio")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "curves.png", dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# compress-dump
# ---------------------------------------------------------------------------


def cmd_compress_dump(args) -> int:
    model, _ = load_model(args.checkpoint)
    policy = model.config.compression
    if policy is None:
        raise DataError("checkpoint was trained without compression; nothing to dump")
    data = load_dataset(args.data, args.split)
    utterances = data.utterances[: args.limit] if args.limit else data.utterances
    records = []
    for u in utterances:
        feats = torch.as_tensor(u.features.frames, dtype=torch.float32).unsqueeze(0)
        enc = model.encode(feats, [u.features.num_frames])
        n = enc.pre_lengths[0]
        # re-run the block on the tap states to recover per-frame weights
        result = compress(
            states=enc.ctc_log_probs.new_zeros(n, 1),
            posteriors=enc.ctc_log_probs[0, :n],
            policy=policy,
            blank_index=model.config.ctc_vocab.blank_index,
        )
        for span in result.spans:
            records.append(
                {
                    "id": u.uid,
                    "start": span.start,
                    "end": span.end,
                    "label": model.config.ctc_vocab.labels[span.label],
                    "weights": [float(w) for w in result.weights[span.start : span.end]],
                }
            )
    binio.write_jsonl(args.out, records)
    print(f"wrote {len(records)} segments -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="ctcsqueeze", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--config", help="YAML config (default: synth.yaml in the config dir)")
    p.add_argument("--out", help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="YAML config (default: train.yaml in the config dir)")
    p.add_argument("--data", help="dataset directory (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--resume", help="train_state.ckpt to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="translate a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="dev")
    p.add_argument("--out", required=True, help="hypotheses JSONL path")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score hypotheses against references")
    p.add_argument("--hyps", required=True, help="hypotheses JSONL from decode")
    p.add_argument("--refs", required=True, help="dataset directory or references JSONL/TXT")
    p.add_argument("--split", default="dev", help="split when --refs is a dataset directory")
    p.add_argument("--report", help="write the EvalReport JSON here")
    p.add_argument("--plots", help="directory for loss/length curve files")
    p.add_argument("--metrics-log", help="metrics.jsonl to plot curves from")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compress-dump", help="dump compression spans and weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="dev")
    p.add_argument("--out", required=True, help="spans JSONL path")
    p.add_argument("--limit", type=int, default=0, help="only the first N utterances")
    p.set_defaults(func=cmd_compress_dump)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_help()
            return 1
        return int(args.func(args) or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, InvalidInputError, OracleSizeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse --help
        code = exc.code
        return int(code) if isinstance(code, int) else 0


def console_entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    console_entry()
