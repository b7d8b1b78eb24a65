import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fmpn.dataset import AugmentPolicy, load_aligned
from fmpn.exceptions import ConfigError, CoverageError, ShapeError, ValidationError
from fmpn.maskgen import MaskBank, generate_mask_bank
from fmpn.networks import FMPN, ArchConfig
from fmpn.synthdata import SynthSpec, generate
from fmpn.training import (
    HISTORY_COLUMNS,
    StageSchedule,
    TrainConfig,
    classification_loss,
    joint_step,
    lr_at,
    mask_loss,
    mask_targets,
    total_loss,
    train_joint,
    train_stage1,
    write_history,
)

import oracles

ARCH32 = dict(fmg_channels=(8, 8), backbone_widths=(8, 8, 8))


class TestLosses:
    def test_mask_loss_examples(self):
        x = torch.rand(2, 4, 4)
        assert mask_loss(x, x.clone()).item() == 0.0
        assert mask_loss(torch.ones(2, 4, 4), torch.zeros(2, 4, 4)).item() == 1.0

    def test_mask_loss_matches_loop(self):
        rng = np.random.default_rng(0)
        p, t = rng.random((3, 4, 4)), rng.random((3, 4, 4))
        assert abs(mask_loss(torch.from_numpy(p), torch.from_numpy(t)).item() - oracles.mse_loop(p, t)) < 1e-7

    def test_mask_loss_shape(self):
        with pytest.raises(ShapeError):
            mask_loss(torch.zeros(1, 4, 4), torch.zeros(1, 4, 5))

    def test_ce_uniform(self):
        assert abs(classification_loss(torch.zeros(3, 7), torch.tensor([0, 3, 6])).item() - 1.9459101490553132) < 1e-6

    def test_ce_saturated(self):
        logits = torch.zeros(1, 5, dtype=torch.float64)
        logits[0, 2] = 1000.0
        assert classification_loss(logits, torch.tensor([2])).item() < 1e-6

    def test_ce_oracle(self):
        value = classification_loss(torch.tensor([[1.0, 2.0, 0.5]], dtype=torch.float64), torch.tensor([1])).item()
        assert abs(value - oracles.cross_entropy_exact([1.0, 2.0, 0.5], 1)) < 1e-12
        assert abs(value - 0.46436878410794485) < 1e-12

    def test_ce_label_range(self):
        with pytest.raises(ValidationError):
            classification_loss(torch.zeros(1, 3), torch.tensor([3]))
        with pytest.raises(ValidationError):
            classification_loss(torch.zeros(1, 3), torch.tensor([-1]))

    def test_total_examples(self):
        cfg = TrainConfig()
        assert total_loss(0.5, 2.0, cfg) == 7.0
        assert total_loss(0.0, 0.0, cfg) == 0.0
        assert total_loss(0.3, 1.7, TrainConfig(lambda1=0.0, lambda2=2.0)) == 2.0 * 1.7

    @settings(max_examples=200)
    @given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(0, 100), st.floats(0, 100))
    def test_total_exact(self, a, b, l1, l2):
        cfg = TrainConfig(lambda1=l1, lambda2=l2)
        assert total_loss(a, b, cfg) - (l1 * a + l2 * b) == 0


class TestSchedule:
    def test_paper_values(self):
        s = TrainConfig().stage1_schedule()
        assert lr_at(s, 0) == 1e-4
        assert lr_at(s, 225) == pytest.approx(5e-5, rel=1e-12)
        assert lr_at(s, 300) == 0.0

    def test_stage2_groups(self):
        fmg, rest = TrainConfig().stage2_schedules()
        assert (lr_at(fmg, 0), lr_at(rest, 0)) == (1e-5, 1e-4)
        assert lr_at(fmg, 99) == 1e-5 and lr_at(rest, 150) == pytest.approx(5e-5)

    def test_out_of_range(self):
        s = StageSchedule(1e-3, 10, 5)
        with pytest.raises(ValidationError):
            lr_at(s, 11)
        with pytest.raises(ValidationError):
            lr_at(s, -1)

    @settings(max_examples=100)
    @given(st.integers(1, 400), st.data())
    def test_monotone_with_single_knee(self, total, data):
        start = data.draw(st.integers(0, total - 1))
        s = StageSchedule(1e-3, total, start)
        lrs = np.array([lr_at(s, e) for e in range(total + 1)])
        assert np.all(np.diff(lrs) <= 0) and lrs[-1] == 0
        assert np.all(lrs[:start] == 1e-3)
        if total - start >= 2:
            np.testing.assert_allclose(np.diff(lrs[start:]), -1e-3 / (total - start), rtol=1e-9)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(lambda1=-1)
        with pytest.raises(ConfigError):
            TrainConfig(decay_start_stage1=300)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"lambda3": 1})
        cfg = TrainConfig.desk(seed=4)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.fixture
def tiny_data(tiny_corpus):
    manifest, _ = tiny_corpus
    return load_aligned(manifest), generate_mask_bank(manifest)


def _model(k=3, size=32, seed=0, variant="full"):
    return FMPN.build(ArchConfig(n_classes=k, input_size=size, **ARCH32), seed, variant)


def _snapshot(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def _same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


POLICY = AugmentPolicy(32, 0.5)


class TestStage1:
    def test_zero_epochs_bit_exact(self, tiny_data):
        data, bank = tiny_data
        model = _model()
        before = _snapshot(model)
        assert train_stage1(model, data, bank, TrainConfig.desk(stage1_epochs=0), POLICY) == []
        assert _same(before, _snapshot(model))

    def test_zero_lr(self, tiny_data):
        data, bank = tiny_data
        model = _model()
        before = {n: p.detach().clone() for n, p in model.fmg.named_parameters()}
        train_stage1(model, data, bank, TrainConfig.desk(stage1_epochs=2, decay_start_stage1=1,
                                                         lr_fmg_stage1=0.0), POLICY)
        for n, p in model.fmg.named_parameters():
            assert torch.max(torch.abs(p - before[n])).item() <= 1e-12

    def test_only_fmg_updated(self, tiny_data):
        data, bank = tiny_data
        model = _model()
        pfn, cn = _snapshot(model.pfn), _snapshot(model.cn)
        fmg = {n: p.detach().clone() for n, p in model.fmg.named_parameters()}
        hist = train_stage1(model, data, bank, TrainConfig.desk(stage1_epochs=2, decay_start_stage1=0), POLICY)
        assert _same(pfn, _snapshot(model.pfn)) and _same(cn, _snapshot(model.cn))
        assert any(not torch.equal(p, fmg[n]) for n, p in model.fmg.named_parameters())
        assert [h["epoch"] for h in hist] == [0, 1]
        assert hist[1]["lr_fmg"] == hist[0]["lr_fmg"] / 2

    def test_missing_mask_class(self, tiny_data):
        data, bank = tiny_data
        short = MaskBank(bank.masks[:2], bank.class_names[:2])
        with pytest.raises(CoverageError, match=data.class_names[2]):
            train_stage1(_model(), data, short, TrainConfig.desk(), POLICY)
        with pytest.raises(CoverageError):
            mask_targets(short, np.array([0, 2]), 8)

    def test_mask_loss_decreases_over_50_epochs(self, tmp_path):
        spec = SynthSpec(n_classes=7, subjects=2, samples_per_subject_per_class=1, image_size=32, seed=2)
        manifest = generate(spec, tmp_path)
        data, bank = load_aligned(manifest), generate_mask_bank(manifest)
        cfg = TrainConfig.desk(stage1_epochs=50, decay_start_stage1=25)
        hist = train_stage1(_model(k=7), data, bank, cfg, POLICY)
        assert len(hist) == 50
        assert hist[-1]["lG"] < hist[0]["lG"]


def _batch(data, bank, n=6):
    x = torch.from_numpy(data.rgb[:n]).permute(0, 3, 1, 2).contiguous()
    y = torch.from_numpy(data.labels[:n])
    m = torch.from_numpy(mask_targets(bank, data.labels[:n], 32)).unsqueeze(1)
    return x, y, m


class TestGradientRouting:
    def test_lambda2_zero_kills_cn_grads(self, tiny_data):
        data, bank = tiny_data
        model = _model().train()
        loss, *_ = joint_step(model, *_batch(data, bank), TrainConfig.desk(lambda2=0.0))
        loss.backward()
        for p in model.cn.parameters():
            assert p.grad is None or torch.count_nonzero(p.grad) == 0
        assert any(torch.count_nonzero(p.grad) > 0 for p in model.fmg.parameters())

    def test_lambda1_zero_keeps_fmg_grads(self, tiny_data):
        data, bank = tiny_data
        model = _model().train()
        loss, l_g, l_c, _ = joint_step(model, *_batch(data, bank), TrainConfig.desk(lambda1=0.0))
        assert loss.item() == l_c.item()
        loss.backward()
        assert sum(torch.count_nonzero(p.grad).item() for p in model.fmg.parameters()) > 0

    def test_one_step_lambda2_zero_cn_unchanged(self, tiny_data):
        data, bank = tiny_data
        sub = data.subset(np.arange(4))
        model = _model()
        cn = _snapshot(model.cn)
        cfg = TrainConfig.desk(lambda2=0.0, stage2_epochs=1, decay_start_stage2=0, batch_size=4)
        train_joint(model, sub, bank, cfg, POLICY)
        after = _snapshot(model.cn)
        # BN running statistics move on the forward pass; trainable weights must not
        for name, p in model.cn.named_parameters():
            assert torch.equal(p.detach(), cn[name]), name
        assert set(after) == set(cn)


class TestJoint:
    def test_frozen_fmg_reduces_to_classifier_training(self, tiny_data):
        data, bank = tiny_data
        model = _model()
        fmg = _snapshot(model.fmg)
        cfg = TrainConfig.desk(lambda1=0.0, freeze_fmg=True, stage2_epochs=2, decay_start_stage2=1)
        hist = train_joint(model, data, bank, cfg, POLICY)
        assert _same(fmg, _snapshot(model.fmg))
        assert all(math.isnan(h["lr_fmg"]) for h in hist)
        assert all(h["l_total"] == pytest.approx(h["lC"]) for h in hist)

    def test_two_groups_distinct_rates(self, tiny_data):
        data, bank = tiny_data
        cfg = TrainConfig.desk(stage2_epochs=2, decay_start_stage2=0)
        hist = train_joint(_model(), data, bank, cfg, POLICY, epoch_offset=8)
        assert [h["epoch"] for h in hist] == [8, 9]
        assert hist[0]["lr_fmg"] == 2e-4 and hist[0]["lr_rest"] == 2e-3
        assert hist[1]["lr_rest"] == pytest.approx(1e-3)

    def test_baseline_never_touches_fmg(self, tiny_data):
        data, _ = tiny_data
        model = _model(variant="baseline_cnn")
        calls = []
        model.fmg.register_forward_hook(lambda *a: calls.append(1))
        hist = train_joint(model, data, None, TrainConfig.desk(stage2_epochs=1, decay_start_stage2=0), POLICY)
        assert calls == [] and math.isnan(hist[0]["lG"])

    def test_determinism(self, tiny_data):
        data, bank = tiny_data
        cfg = TrainConfig.desk(stage1_epochs=2, decay_start_stage1=1, stage2_epochs=2, decay_start_stage2=1, seed=3)

        def run():
            model = _model(seed=cfg.seed)
            h = train_stage1(model, data, bank, cfg, POLICY)
            return h + train_joint(model, data, bank, cfg, POLICY, len(h)), model

        (h1, m1), (h2, m2) = run(), run()
        assert repr(h1) == repr(h2)
        assert _same(m1.state_dict(), m2.state_dict())


def test_history_csv(tmp_path):
    hist = [{"stage": 1, "epoch": 0, "lG": 0.25, "lC": math.nan, "l_total": 2.5, "lr_fmg": 1e-4,
             "lr_rest": math.nan, "train_acc": math.nan},
            {"stage": 2, "epoch": 1, "lG": 0.125, "lC": 1.0, "l_total": 2.25, "lr_fmg": 1e-5,
             "lr_rest": 1e-4, "train_acc": 0.5}]
    path = write_history(hist, tmp_path / "h" / "history.csv")
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == HISTORY_COLUMNS
    assert rows[1] == ["0", "0.25", "", "2.5", "0.0001", "", ""]
    assert float(rows[2][6]) == 0.5
