import json
import math

import numpy as np
import pytest
import torch

from conftest import AVG_POLICY, micro_batch, micro_config, micro_model
from ctcsqueeze.errors import DataError, InvalidInputError, TrainingDivergedError
from ctcsqueeze.features import SyntheticConfig, SyntheticTask
from ctcsqueeze.model import ModelConfig, SpeechTransformer
from ctcsqueeze.train import (
    AdamState,
    TrainConfig,
    adam_step,
    average_checkpoints,
    collate,
    encode_utterances,
    evaluate,
    lr_at_step,
    peak_activation_elements,
    train_loop,
)

PAPER_CFG = TrainConfig()


class TestLrSchedule:
    def test_paper_anchor_points(self):
        assert lr_at_step(0, PAPER_CFG) == pytest.approx(3e-4, abs=0)
        assert lr_at_step(4000, PAPER_CFG) == pytest.approx(5e-3, abs=1e-18)
        assert lr_at_step(16000, PAPER_CFG) == pytest.approx(2.5e-3, abs=1e-18)

    def test_continuity_at_warmup_boundary(self):
        just_before = lr_at_step(4000, PAPER_CFG)
        just_after = PAPER_CFG.lr_peak * math.sqrt(4000 / 4000)
        assert abs(just_before - just_after) < 1e-12

    def test_monotone_rise_then_decay(self):
        values = [lr_at_step(u, PAPER_CFG) for u in range(0, 20000, 250)]
        peak_idx = values.index(max(values))
        assert all(a <= b + 1e-18 for a, b in zip(values[:peak_idx], values[1 : peak_idx + 1]))
        assert all(a >= b for a, b in zip(values[peak_idx:], values[peak_idx + 1 :]))

    def test_negative_update_rejected(self):
        with pytest.raises(InvalidInputError):
            lr_at_step(-1, PAPER_CFG)

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            TrainConfig(lr_start=1.0, lr_peak=0.1)
        with pytest.raises(InvalidInputError):
            TrainConfig(warmup_updates=0)
        with pytest.raises(InvalidInputError):
            TrainConfig(batch_sentences=0)


class TestAdam:
    def params_and_state(self, value=1.0):
        params = {"w": torch.tensor([value], dtype=torch.float64)}
        return params, AdamState.init(params)

    def test_zero_gradient_never_moves(self):
        params, state = self.params_and_state(0.7)
        for _ in range(25):
            adam_step(params, {"w": torch.zeros(1, dtype=torch.float64)}, state, lr=0.5)
        assert params["w"].item() == pytest.approx(0.7, abs=0)

    def test_first_step_closed_form(self):
        params, state = self.params_and_state(1.0)
        adam_step(params, {"w": torch.ones(1, dtype=torch.float64)}, state, lr=0.1)
        # t=1: m_hat = g, v_hat = g*g -> step = lr * 1 / (1 + eps)
        expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))
        assert params["w"].item() == pytest.approx(expected, abs=1e-10)
        assert params["w"].item() == pytest.approx(0.9, abs=1e-6)

    def test_trajectory_is_deterministic(self):
        runs = []
        for _ in range(2):
            params, state = self.params_and_state(2.0)
            grads = np.random.default_rng(4).normal(size=10)
            for g in grads:
                adam_step(params, {"w": torch.tensor([g], dtype=torch.float64)}, state, lr=0.01)
            runs.append(params["w"].item())
        assert runs[0] == runs[1]

    def test_non_finite_gradient_skips_update(self):
        params, state = self.params_and_state(1.5)
        ok = adam_step(params, {"w": torch.tensor([float("nan")])}, state, lr=0.1)
        assert not ok
        assert state.skipped == 1
        assert state.step_count == 0
        assert params["w"].item() == 1.5


class TestAverageCheckpoints:
    def test_identical_checkpoints(self):
        snap = {"w": torch.tensor([3.0, -1.0])}
        avg = average_checkpoints([snap, dict(snap), dict(snap)], expected_n=3)
        torch.testing.assert_close(avg["w"], snap["w"])

    def test_two_point_mean(self):
        a = {"w": torch.tensor([0.0])}
        b = {"w": torch.tensor([2.0])}
        avg = average_checkpoints([a, b], expected_n=2)
        assert avg["w"].item() == pytest.approx(1.0, abs=0)

    def test_short_buffer_warns(self):
        snaps = [{"w": torch.tensor([float(i)])} for i in range(3)]
        with pytest.warns(UserWarning):
            avg = average_checkpoints(snaps, expected_n=5)
        assert avg["w"].item() == pytest.approx(1.0)

    def test_empty_buffer_rejected(self):
        with pytest.raises(InvalidInputError):
            average_checkpoints([])


class TestPeakActivation:
    def base_config(self, compression=None, ctc_layer=3):
        from conftest import make_vocabs

        ctc_vocab, tgt = make_vocabs()
        return ModelConfig(
            ctc_vocab,
            tgt,
            n_encoder_layers=4,
            n_decoder_layers=2,
            ctc_layer=ctc_layer,
            compression=compression,
            d_model=64,
            n_heads=4,
            ffn_dim=256,
        )

    def test_no_contraction_equals_baseline(self):
        base = self.base_config()
        comp = self.base_config(compression=AVG_POLICY)
        pre = [12, 15]
        tgt = [6, 7]
        assert peak_activation_elements(comp, pre, pre, tgt) == peak_activation_elements(
            base, pre, pre, tgt
        )

    def test_compression_never_costs_more(self):
        rng = np.random.default_rng(0)
        base = self.base_config()
        comp = self.base_config(compression=AVG_POLICY)
        for _ in range(100):
            pre = [int(x) for x in rng.integers(4, 30, size=4)]
            post = [int(rng.integers(1, p + 1)) for p in pre]
            tgt = [int(x) for x in rng.integers(2, 10, size=4)]
            b = peak_activation_elements(base, pre, pre, tgt)
            c = peak_activation_elements(comp, pre, post, tgt)
            assert c <= b
            if any(p < q for p, q in zip(post, pre)):
                assert c < b

    def test_earlier_tap_strictly_cheaper(self):
        pre, post, tgt = [15, 12], [5, 4], [6, 5]
        counts = [
            peak_activation_elements(self.base_config(AVG_POLICY, ctc_layer=k), pre, post, tgt)
            for k in (1, 2, 3, 4)
        ]
        assert counts[0] < counts[1] < counts[2] < counts[3]

    def test_layers_above_tap_scale_with_ratio(self):
        # with run length 2 the layers above the tap cost half the states and
        # a quarter of the attention-score elements; check the exact formula
        cfg = self.base_config(AVG_POLICY, ctc_layer=2)
        d, h = cfg.d_model, cfg.n_heads
        T, Tp, L = 16, 8, 6
        total = peak_activation_elements(cfg, [T], [Tp], [L])
        expected = T * d  # frontend
        for layer in range(1, cfg.n_encoder_layers + 1):
            t = T if layer <= cfg.ctc_layer else Tp
            expected += h * t * t + t * d
        expected += cfg.n_decoder_layers * (h * L * L + L * d + h * L * Tp)
        assert total == expected
        above_full = h * T * T + T * d
        above_comp = h * Tp * Tp + Tp * d
        assert above_comp == h * (T * T) // 4 + (T // 2) * d


class TestAccumulationEquivalence:
    def test_k_micro_steps_equal_one_big_step_in_sum_mode(self, rng):
        cfg = micro_config()
        batches = [micro_batch(np.random.default_rng(s), cfg, batch_size=2, T=7) for s in (1, 2)]
        big = {
            "feats": torch.cat([b["feats"] for b in batches]),
            "feat_lengths": batches[0]["feat_lengths"] + batches[1]["feat_lengths"],
            "ctc_targets": batches[0]["ctc_targets"] + batches[1]["ctc_targets"],
            "tgt_in": torch.cat([b["tgt_in"] for b in batches]),
            "tgt_out": torch.cat([b["tgt_out"] for b in batches]),
        }
        results = []
        for mode in ("micro", "big"):
            model = micro_model(cfg, seed=11)
            params = dict(model.named_parameters())
            state = AdamState.init(params)
            model.zero_grad(set_to_none=False)
            if mode == "micro":
                for b in batches:
                    lam, _ = model.compute_losses(**b, reduction="sum")
                    lam.backward()
            else:
                lam, _ = model.compute_losses(**big, reduction="sum")
                lam.backward()
            grads = {k: p.grad.clone() for k, p in params.items()}
            adam_step(params, grads, state, lr=0.01)
            results.append({k: p.detach().clone() for k, p in params.items()})
        for k in results[0]:
            torch.testing.assert_close(results[0][k], results[1][k], atol=1e-6, rtol=0)


def tiny_task():
    return SyntheticTask(
        SyntheticConfig(
            vocab_size=4,
            feature_dim=8,
            duration_min=2,
            duration_max=3,
            noise_sigma=0.05,
            words_min=1,
            words_max=2,
            word_len_min=1,
            word_len_max=2,
            positional_suffixes=False,
        )
    )


def tiny_model_config(task, **overrides):
    defaults = dict(
        n_encoder_layers=2,
        n_decoder_layers=1,
        ctc_layer=2,
        d_model=16,
        n_heads=2,
        ffn_dim=32,
        dropout=0.1,
        feature_dim=8,
        conv_channels=4,
        conv_time_strides=(1, 1),
        conv_freq_strides=(2, 2),
        max_target_len=16,
    )
    defaults.update(overrides)
    return ModelConfig(task.ctc_vocabulary(), task.target_vocabulary(), **defaults)


def tiny_train_config(**overrides):
    defaults = dict(
        lr_peak=1e-3,
        warmup_updates=20,
        batch_sentences=4,
        accumulation_steps=1,
        patience_epochs=2,
        checkpoint_avg_n=2,
        max_epochs=2,
        seed=3,
        deterministic=True,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestTrainLoop:
    def test_patience_zero_runs_exactly_one_epoch(self, tmp_path):
        task = tiny_task()
        train = task.make_dataset(8, master_seed=1, split_tag=0)
        dev = task.make_dataset(4, master_seed=1, split_tag=1)
        with pytest.warns(UserWarning):
            result = train_loop(
                tiny_model_config(task),
                tiny_train_config(patience_epochs=0, max_epochs=10),
                train,
                dev,
            )
        assert result.epochs_run == 1

    def test_step_records_satisfy_loss_identity(self):
        task = tiny_task()
        train = task.make_dataset(12, master_seed=2, split_tag=0)
        dev = task.make_dataset(4, master_seed=2, split_tag=1)
        cfg = tiny_model_config(task, loss_weight_ctc=0.7)
        result = train_loop(cfg, tiny_train_config(max_epochs=2), train, dev)
        steps = [m for m in result.metrics if m["event"] == "step"]
        assert steps
        for record in steps:
            assert record["lambda"] == pytest.approx(
                0.7 * record["ctc"] + record["ce"], abs=1e-6
            )

    def test_two_identical_runs_are_byte_identical(self, tmp_path):
        task = tiny_task()
        train = task.make_dataset(10, master_seed=5, split_tag=0)
        dev = task.make_dataset(4, master_seed=5, split_tag=1)
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            train_loop(tiny_model_config(task), tiny_train_config(), train, dev, out_dir=out)
            outputs.append(out)
        assert (outputs[0] / "metrics.jsonl").read_bytes() == (outputs[1] / "metrics.jsonl").read_bytes()
        assert (outputs[0] / "model_final.ckpt").read_bytes() == (outputs[1] / "model_final.ckpt").read_bytes()

    def test_resume_reproduces_straight_run(self, tmp_path):
        task = tiny_task()
        train = task.make_dataset(10, master_seed=7, split_tag=0)
        dev = task.make_dataset(4, master_seed=7, split_tag=1)
        straight = tmp_path / "straight"
        train_loop(
            tiny_model_config(task),
            tiny_train_config(max_epochs=4, patience_epochs=10),
            train,
            dev,
            out_dir=straight,
        )
        resumed = tmp_path / "resumed"
        train_loop(
            tiny_model_config(task),
            tiny_train_config(max_epochs=2, patience_epochs=10),
            train,
            dev,
            out_dir=resumed,
        )
        train_loop(
            tiny_model_config(task),
            tiny_train_config(max_epochs=4, patience_epochs=10),
            train,
            dev,
            out_dir=resumed,
            resume_from=resumed / "train_state.ckpt",
        )
        assert (straight / "model_final.ckpt").read_bytes() == (resumed / "model_final.ckpt").read_bytes()
        # the resumed log carries the first session's "final" record in the
        # middle; the step/epoch trajectory itself must match line for line
        def trajectory(path):
            records = [json.loads(line) for line in path.read_text().splitlines()]
            return [r for r in records if r["event"] in ("step", "epoch")]

        assert trajectory(straight / "metrics.jsonl") == trajectory(resumed / "metrics.jsonl")

    def test_divergence_aborts_with_diagnostic(self, monkeypatch):
        task = tiny_task()
        train = task.make_dataset(6, master_seed=9, split_tag=0)
        dev = task.make_dataset(2, master_seed=9, split_tag=1)
        original = SpeechTransformer.compute_losses

        def poisoned(self, *args, **kwargs):
            lam, stats = original(self, *args, **kwargs)
            stats.lam = float("nan")
            return lam * float("nan"), stats

        monkeypatch.setattr(SpeechTransformer, "compute_losses", poisoned)
        with pytest.raises(TrainingDivergedError):
            train_loop(tiny_model_config(task), tiny_train_config(), train, dev)

    def test_empty_dataset_rejected(self):
        task = tiny_task()
        with pytest.raises(InvalidInputError):
            train_loop(tiny_model_config(task), tiny_train_config(), [], [])


class TestDataPlumbing:
    def test_unknown_token_raises_data_error(self):
        task = tiny_task()
        utt = task.sample_utterance(0, master_seed=1)
        utt.phones[0] = "zz"
        with pytest.raises(DataError):
            encode_utterances([utt], tiny_model_config(task))

    def test_collate_shapes_and_padding(self):
        task = tiny_task()
        cfg = tiny_model_config(task)
        utts = task.make_dataset(3, master_seed=4)
        items = encode_utterances(utts, cfg)
        batch = collate(items)
        B, T, F_dim = batch["feats"].shape
        assert B == 3 and F_dim == 8
        assert T == max(batch["feat_lengths"])
        for b, item in enumerate(items):
            assert batch["tgt_in"][b, 0].item() == 1  # <bos>
            n = len(item.target_ids)
            assert batch["tgt_out"][b, n].item() == 2  # <eos>
            assert (batch["tgt_out"][b, n + 1 :] == 0).all()

    def test_evaluate_reports_token_accuracy(self):
        task = tiny_task()
        cfg = tiny_model_config(task)
        model = SpeechTransformer(cfg)
        items = encode_utterances(task.make_dataset(4, master_seed=6), cfg)
        report = evaluate(model, items, batch_size=2)
        assert 0.0 <= report["token_accuracy"] <= 1.0
        assert report["ce"] > 0.0
        assert report["n_tokens"] > 0
