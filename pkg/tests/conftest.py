import numpy as np
import pytest
import torch

from ctcsqueeze.compress import CompressionPolicy, PolicyKind
from ctcsqueeze.ctc import Vocabulary
from ctcsqueeze.model import ModelConfig, SpeechTransformer, TargetVocabulary


def make_vocabs(n_ctc_labels=3, n_target_labels=4):
    ctc_vocab = Vocabulary.from_labels([f"p{i}" for i in range(n_ctc_labels)])
    target_vocab = TargetVocabulary.from_labels([f"w{i}" for i in range(n_target_labels)])
    return ctc_vocab, target_vocab


def micro_config(**overrides):
    """Smallest config that still exercises every architectural path."""
    ctc_vocab, target_vocab = make_vocabs()
    defaults = dict(
        n_encoder_layers=2,
        n_decoder_layers=1,
        ctc_layer=2,
        compression=None,
        d_model=8,
        n_heads=2,
        ffn_dim=16,
        dropout=0.0,
        feature_dim=8,
        conv_channels=2,
        conv_time_strides=(1, 1),
        conv_freq_strides=(2, 2),
        max_target_len=16,
    )
    defaults.update(overrides)
    return ModelConfig(ctc_vocab=ctc_vocab, target_vocab=target_vocab, **defaults)


def micro_batch(rng, config, batch_size=2, T=7, target_len=3):
    feats = torch.tensor(rng.normal(size=(batch_size, T, config.feature_dim)), dtype=torch.float64)
    feat_lengths = [T] * batch_size
    if batch_size > 1:
        feat_lengths[-1] = max(1, T - 2)
        feats[-1, feat_lengths[-1] :] = 0.0
    n_labels = config.ctc_vocab.size
    ctc_targets = [
        [int(x) for x in rng.integers(1, n_labels, size=max(1, target_len - 1))]
        for _ in range(batch_size)
    ]
    tgt_ids = [
        [int(x) for x in rng.integers(3, config.target_vocab.size, size=target_len)]
        for _ in range(batch_size)
    ]
    max_l = max(len(t) for t in tgt_ids) + 1
    tgt_in = torch.zeros(batch_size, max_l, dtype=torch.long)
    tgt_out = torch.zeros(batch_size, max_l, dtype=torch.long)
    for b, ids in enumerate(tgt_ids):
        tgt_in[b, 0] = TargetVocabulary.bos_id
        tgt_in[b, 1 : 1 + len(ids)] = torch.tensor(ids)
        tgt_out[b, : len(ids)] = torch.tensor(ids)
        tgt_out[b, len(ids)] = TargetVocabulary.eos_id
    return dict(
        feats=feats,
        feat_lengths=feat_lengths,
        ctc_targets=ctc_targets,
        tgt_in=tgt_in,
        tgt_out=tgt_out,
    )


def micro_model(config=None, seed=0, dtype=torch.float64, **overrides):
    config = config or micro_config(**overrides)
    torch.manual_seed(seed)
    model = SpeechTransformer(config)
    return model.to(dtype)


AVG_POLICY = CompressionPolicy(PolicyKind.AVERAGE)
WEIGHTED_POLICY = CompressionPolicy(PolicyKind.WEIGHTED)
SOFTMAX_POLICY = CompressionPolicy(PolicyKind.SOFTMAX)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
