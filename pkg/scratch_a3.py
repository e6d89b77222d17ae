"""Scratch run of the A3 learnability experiment (not part of the package)."""
import json
import time

import torch

from ctcsqueeze.compress import CompressionPolicy, PolicyKind
from ctcsqueeze.features import SyntheticConfig, SyntheticTask
from ctcsqueeze.metrics import bleu
from ctcsqueeze.model import ModelConfig, decode_translation
from ctcsqueeze.train import TrainConfig, encode_utterances, evaluate, train_loop

t0 = time.time()
task = SyntheticTask(
    SyntheticConfig(
        vocab_size=12,
        feature_dim=40,
        duration_min=2,
        duration_max=4,
        noise_sigma=0.1,
        words_min=2,
        words_max=3,
        word_len_min=1,
        word_len_max=2,
        positional_suffixes=True,
    )
)
train = task.make_dataset(2000, master_seed=101, split_tag=0)
dev = task.make_dataset(200, master_seed=101, split_tag=1)
print(f"dataset ready in {time.time()-t0:.1f}s; ctc vocab {task.ctc_vocabulary().size}, tgt vocab {task.target_vocabulary().size}")
mean_T = sum(u.features.num_frames for u in train) / len(train)
mean_L = sum(len(u.phones) for u in train) / len(train)
print(f"mean frames {mean_T:.1f}, mean phones {mean_L:.1f}")

model_cfg = ModelConfig.desk(
    task.ctc_vocabulary(),
    task.target_vocabulary(),
    compression=CompressionPolicy(PolicyKind.AVERAGE),
    dropout=0.05,
    
    
    
)
train_cfg = TrainConfig.desk(max_epochs=30, seed=7, deterministic=True, patience_epochs=30)

t1 = time.time()
result = train_loop(model_cfg, train_cfg, train, dev, out_dir="/tmp/a3run")
print(f"train time {time.time()-t1:.1f}s for {result.epochs_run} epochs")

for r in result.metrics:
    if r["event"] == "epoch":
        print(
            f"epoch {r['epoch']:2d} lam {r['train_lambda']:.3f} val_ce {r['val_ce']:.4f} "
            f"acc {r['val_token_accuracy']:.4f} ratio {r['compression_ratio']:.3f} peak {r['peak_activation_elements']}"
        )

# final-averaged model dev metrics
model = result.model
items = encode_utterances(dev, model_cfg)
report = evaluate(model, items, 16)
print("averaged model dev:", report)

t2 = time.time()
hyps, refs = [], []
for i in range(0, len(dev), 16):
    chunk = dev[i : i + 16]
    lengths = [u.features.num_frames for u in chunk]
    feats = torch.zeros(len(chunk), max(lengths), 40)
    for b, u in enumerate(chunk):
        feats[b, : lengths[b]] = torch.as_tensor(u.features.frames, dtype=torch.float32)
    for u, r in zip(chunk, decode_translation(model, feats, lengths, max_len=30, beam_size=1)):
        hyps.append([model.config.target_vocab.labels[t] for t in r.tokens])
        refs.append(u.translation)
score = bleu(hyps, refs)
print(f"decode time {time.time()-t2:.1f}s  BLEU {score.score:.2f}  precisions {score.precisions}")
exact = sum(h == r for h, r in zip(hyps, refs))
print(f"exact match {exact}/{len(refs)}")
print(f"total {time.time()-t0:.1f}s")
