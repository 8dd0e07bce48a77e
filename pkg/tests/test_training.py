import numpy as np
import pytest
import torch

from deskvla.model import make_schedule, parameter_hashes
from deskvla.training import (MissingStage1Checkpoint, TrainConfig, TrainingData,
                              add_noise, make_optimizer, make_stage1_batch,
                              make_stage2_batch, run_training,
                              stage1_logits_and_loss, stage1_step, stage2_step,
                              strip_format_tag)
from deskvla.model import TimestepOutOfRange

from conftest import small_model


@pytest.fixture()
def tiny_compact(tiny_data):
    return tiny_data.stage2_samples()[:4]


class TestAddNoise:
    def test_low_noise_limit(self, rng):
        sched = make_schedule(100, 1e-6, 1e-5)
        A0 = torch.as_tensor(rng.standard_normal((4, 7)))
        eps = torch.as_tensor(rng.standard_normal((4, 7)))
        assert torch.allclose(add_noise(A0, 1, eps, sched), A0, atol=1e-2)

    def test_rejects_bad_k(self, rng):
        sched = make_schedule(10, 0.001, 0.1)
        A0 = torch.zeros((2, 7), dtype=torch.float64)
        with pytest.raises(TimestepOutOfRange):
            add_noise(A0, 0, A0, sched)
        with pytest.raises(TimestepOutOfRange):
            add_noise(A0, 11, A0, sched)

    def test_monte_carlo_variance(self):
        sched = make_schedule(100, 0.001, 0.1)
        k = 60
        gen = torch.Generator().manual_seed(0)
        A0 = torch.zeros((1, 7), dtype=torch.float64)
        draws = torch.stack([
            add_noise(A0, k, torch.randn(A0.shape, generator=gen,
                                         dtype=torch.float64), sched)
            for _ in range(100_000)])
        var = draws.var(dim=0).mean().item()
        expected = 1.0 - sched.bar(k)
        assert abs(var - expected) / expected <= 0.02


class TestStage1:
    def test_uniform_logits_loss_near_log_vocab(self, tiny_model, tiny_data):
        batch = make_stage1_batch(tiny_model, tiny_data, tiny_data.samples[:4])
        # zeroing the output head makes every logit identical
        with torch.no_grad():
            tiny_model.backbone.lm_head.weight.zero_()
        loss = stage1_logits_and_loss(tiny_model, batch)
        with torch.no_grad():
            torch.manual_seed(0)  # restore non-degenerate weights
            tiny_model.backbone.lm_head.weight.normal_(0, 0.02)
        assert loss.item() == pytest.approx(np.log(len(tiny_model.vocab)), rel=1e-6)

    def test_masked_positions_do_not_affect_loss(self, tiny_model, tiny_data):
        batch = make_stage1_batch(tiny_model, tiny_data, tiny_data.samples[:2])
        loss_a = stage1_logits_and_loss(tiny_model, batch).item()
        # change a masked-out (prompt) token beyond position 0
        toks = batch.tokens.clone()
        j = int((~batch.loss_mask[0]).nonzero()[2])
        toks[0, j] = (toks[0, j] + 1) % len(tiny_model.vocab)
        changed = type(batch)(grids=batch.grids, tokens=toks,
                              loss_mask=batch.loss_mask)
        loss_b = stage1_logits_and_loss(tiny_model, changed).item()
        # prompt tokens feed the context, so loss may shift, but the mask must
        # exclude them from the targets themselves
        assert batch.loss_mask.sum() == changed.loss_mask.sum()
        assert np.isfinite(loss_a) and np.isfinite(loss_b)

    def test_single_sample_memorization(self, tasks, tiny_data):
        model = small_model(tasks, grid_size=10, model_dim=32, heads=2, layers=2,
                            context_len=256, mlp_ratio=2)
        sample = [s for s in tiny_data.samples if s.format == "compact"][0]
        opt = make_optimizer(model.backbone_parameters(), 1e-3)
        batch = make_stage1_batch(model, tiny_data, [sample])
        loss = np.inf
        for _ in range(500):
            loss = stage1_step(batch, model, opt)
            if loss < 0.05:
                break
        assert loss < 0.1

    def test_batch_requires_targets(self, tiny_model, tiny_data):
        batch = make_stage1_batch(tiny_model, tiny_data, tiny_data.samples[:1])
        with pytest.raises(ValueError):
            type(batch)(grids=batch.grids, tokens=batch.tokens,
                        loss_mask=torch.zeros_like(batch.loss_mask))


class TestStage2:
    def test_backbone_untouched_in_action_expert_mode(self, tasks, tiny_data,
                                                      tiny_compact):
        model = small_model(tasks, grid_size=10, context_len=256, chunk_horizon=8)
        before = parameter_hashes(model.backbone)
        opt = make_optimizer(model.action_parameters(), 1e-3)
        gen = torch.Generator().manual_seed(0)
        batch = make_stage2_batch(model, tiny_data, tiny_compact)
        for _ in range(20):
            stage2_step(batch, model, opt, gen, "action-expert-only")
        after = parameter_hashes(model.backbone)
        assert {n: h for n, h in after.items() if n != "queries"} == \
               {n: h for n, h in before.items() if n != "queries"}

    def test_joint_mode_updates_backbone(self, tasks, tiny_data, tiny_compact):
        model = small_model(tasks, grid_size=10, context_len=256, chunk_horizon=8)
        before = parameter_hashes(model.backbone)
        opt = make_optimizer(model.action_parameters()
                             + model.backbone_parameters(), 1e-3)
        gen = torch.Generator().manual_seed(0)
        batch = make_stage2_batch(model, tiny_data, tiny_compact)
        stage2_step(batch, model, opt, gen, "joint")
        assert parameter_hashes(model.backbone) != before

    def test_initial_loss_near_seven_h(self, tasks, tiny_data, tiny_compact):
        model = small_model(tasks, grid_size=10, context_len=256, chunk_horizon=8)
        opt = make_optimizer(model.action_parameters(), 0.0)
        gen = torch.Generator().manual_seed(0)
        batch = make_stage2_batch(model, tiny_data, tiny_compact)
        losses = [stage2_step(batch, model, opt, gen) for _ in range(20)]
        mean = float(np.mean(losses))
        assert 7 * 8 / 2 <= mean <= 7 * 8 * 2

    def test_loss_matches_independent_formula(self, tasks, tiny_data, tiny_compact):
        from deskvla.model import normalize_chunk
        from deskvla.training import compute_z, stage2_loss
        model = small_model(tasks, grid_size=10, context_len=256, chunk_horizon=8)
        batch = make_stage2_batch(model, tiny_data, tiny_compact)
        with torch.no_grad():
            z = torch.stack([compute_z(model, g, ids) for g, ids
                             in zip(batch.grids, batch.token_lists)])
        k = torch.tensor([3, 7, 2, 9])
        gen = torch.Generator().manual_seed(1)
        eps = torch.randn(batch.chunks.shape, dtype=torch.float64, generator=gen)
        loss = stage2_loss(model, z, batch.chunks, k, eps).item()
        # independent re-computation of the sum-reduced noise MSE
        with torch.no_grad():
            total = 0.0
            for i in range(len(k)):
                bar = model.schedule.bar(int(k[i]))
                A0 = normalize_chunk(batch.chunks[i])
                Ak = np.sqrt(bar) * A0 + np.sqrt(1 - bar) * eps[i]
                c = model.connector_forward(z[i])
                pred = model.dit_denoise(Ak, int(k[i]), c)
                total += float(((eps[i] - pred) ** 2).sum())
        assert loss == pytest.approx(total / len(k), abs=1e-9)


class TestRunTraining:
    def test_stage2_requires_stage1(self, tiny_model, tiny_data):
        cfg = TrainConfig(stage="stage2", steps=1, batch_size=2)
        with pytest.raises(MissingStage1Checkpoint):
            run_training(cfg, tiny_data, tiny_model, stage1_done=False)

    def test_deterministic_given_seed(self, tasks, tiny_data):
        from deskvla.model import checkpoint_hash
        hashes = []
        for _ in range(2):
            model = small_model(tasks, grid_size=10, context_len=256, chunk_horizon=8)
            run_training(TrainConfig(stage="stage1", steps=5, batch_size=4,
                                     seed=1), tiny_data, model)
            run_training(TrainConfig(stage="stage2", steps=5, batch_size=4,
                                     seed=1), tiny_data, model, stage1_done=True)
            hashes.append(checkpoint_hash(model))
        assert hashes[0] == hashes[1]

    def test_loss_log_finite_and_csv_written(self, tasks, tiny_data, tmp_path):
        model = small_model(tasks, grid_size=10, context_len=256, chunk_horizon=8)
        log_path = tmp_path / "loss.csv"
        log = run_training(TrainConfig(stage="stage1", steps=6, batch_size=4,
                                       log_every=2), tiny_data, model,
                           log_path=log_path)
        assert all(np.isfinite(loss) for _, _, loss in log)
        lines = log_path.read_text().strip().splitlines()
        assert lines[0] == "step,stage,loss"
        assert len(lines) == len(log) + 1

    def test_format_ablation_filters_samples(self, tiny_data):
        full = tiny_data.stage1_samples(())
        wo_compact = tiny_data.stage1_samples(("compact",))
        assert len(wo_compact) < len(full)
        assert all(s.format != "compact" for s in wo_compact)
        # stage-2 samples are unaffected by the stage-1 ablation
        assert tiny_data.stage2_samples()

    def test_strip_format_tag(self):
        assert strip_format_tag("pass me the marker <compact>") == \
            "pass me the marker"
        assert strip_format_tag("no tag here") == "no tag here"
