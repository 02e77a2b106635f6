import json

import numpy as np
import pytest
import torch

from conftest import tiny_variant
from stvenhance.autoencoder import AutoencoderConfig
from stvenhance.checkpoint import CheckpointError
from stvenhance.synthdata import make_clips
from stvenhance.trainer import (
    TrainConfig,
    TrainingDivergedError,
    attach_controlnet,
    load_checkpoint,
    make_batch,
    make_bundle,
    predict_base,
    predict_full,
    pretrain_base,
    save_checkpoint,
    smoothed,
    tensor_digest,
    train_controlnet,
    train_step,
    v_loss,
    make_optimizer,
)

CFG = tiny_variant(in_channels=48, max_frames=9)


@pytest.fixture(scope="module")
def clips():
    return make_clips(3, 0, f=5, H=16, W=16)


def _tcfg(**kw):
    base = dict(batch_size=2, steps=3, lr=1e-3, log_every=1, checkpoint_every=0, windows=(1, 2, 4))
    base.update(kw)
    return TrainConfig(**base)


def test_hand_computed_loss():
    pred = torch.tensor([[0.5, -1.0]])
    target = torch.tensor([[0.0, 1.0]])
    assert v_loss(pred, target).item() == pytest.approx((0.25 + 4.0) / 2)


def test_make_batch_deterministic_and_shapes(clips):
    bundle = make_bundle(CFG)
    a = make_batch(clips, np.random.default_rng([0, 1]), _tcfg(), bundle.schedule, bundle.autoencoder)
    b = make_batch(clips, np.random.default_rng([0, 1]), _tcfg(), bundle.schedule, bundle.autoencoder)
    assert torch.equal(a.z_t, b.z_t) and torch.equal(a.cond, b.cond) and a.captions == b.captions
    assert a.z0.shape == (2, 5, 48, 4, 4) and a.key_mask.shape == (2, 5)
    assert ((1 <= a.t) & (a.t <= 1000)).all()
    # non-key rows of the condition are empty
    assert a.cond[~a.key_mask].abs().sum() == 0


def test_text_dropout_frequency(clips):
    bundle = make_bundle(CFG)
    cfg = _tcfg(batch_size=8)
    drops = []
    for i in range(100):
        batch = make_batch(clips, np.random.default_rng([1, i]), cfg, bundle.schedule, bundle.autoencoder)
        drops += batch.dropped
        assert all((c == "") == d for c, d in zip(batch.captions, batch.dropped))
    # 800 Bernoulli(0.1) draws: 4 standard deviations is about 0.042
    assert abs(np.mean(drops) - 0.1) < 0.042


@pytest.mark.parametrize("p,expected", [(0.0, False), (1.0, True)])
def test_text_dropout_extremes(clips, p, expected):
    bundle = make_bundle(CFG)
    batch = make_batch(clips, np.random.default_rng(0), _tcfg(text_dropout=p), bundle.schedule,
                       bundle.autoencoder)
    assert all(d == expected for d in batch.dropped)


def test_dropout_hook_sees_empty_captions(clips):
    seen = []
    bundle = attach_controlnet(make_bundle(CFG))
    train_controlnet(clips, bundle, _tcfg(text_dropout=1.0, steps=2), hook=lambda s, b: seen.extend(b.captions))
    assert seen == [""] * 4


def test_loss_equal_at_init(clips):
    bundle = attach_controlnet(make_bundle(CFG, seed=2))
    batch = make_batch(clips, np.random.default_rng(0), _tcfg(), bundle.schedule, bundle.autoencoder)
    with torch.no_grad():
        assert torch.equal(predict_full(bundle, batch), predict_base(bundle, batch))


def test_frozen_backbone_and_gradients(clips):
    bundle = attach_controlnet(make_bundle(CFG, seed=1))
    digest = tensor_digest(bundle.backbone)
    cfg = _tcfg(steps=5)
    train_controlnet(clips, bundle, cfg)
    assert tensor_digest(bundle.backbone) == digest
    assert all(p.grad is None for p in bundle.backbone.parameters())
    # after a few steps the zero layers have moved, so every tensor gets gradient
    batch = make_batch(clips, np.random.default_rng(9), cfg, bundle.schedule, bundle.autoencoder)
    bundle.controlnet.zero_grad()
    v_loss(predict_full(bundle, batch), batch.v).backward()
    grads = [p.grad is not None and torch.count_nonzero(p.grad) > 0 for p in bundle.controlnet.parameters()]
    assert np.mean(grads) >= 0.99


def test_zero_steps_leaves_parameters(clips):
    bundle = attach_controlnet(make_bundle(CFG))
    digest = tensor_digest(bundle.controlnet)
    hist = train_controlnet(clips, bundle, _tcfg(steps=0))
    assert hist.losses == [] and tensor_digest(bundle.controlnet) == digest


def test_empty_dataset():
    with pytest.raises(ValueError):
        train_controlnet([], attach_controlnet(make_bundle(CFG)), _tcfg())
    with pytest.raises(ValueError):
        pretrain_base([], make_bundle(CFG), _tcfg())


def test_invalid_config():
    with pytest.raises(ValueError):
        _tcfg(text_dropout=1.5).validate()


def test_divergence_detected(clips):
    bundle = attach_controlnet(make_bundle(CFG))
    cfg = _tcfg()
    batch = make_batch(clips, np.random.default_rng(0), cfg, bundle.schedule, bundle.autoencoder)
    batch.v[0, 0, 0, 0, 0] = float("nan")
    opt = make_optimizer(bundle.controlnet.parameters(), cfg)
    with pytest.raises(TrainingDivergedError, match="step 7"):
        train_step(bundle, batch, opt, cfg, step=7)


def test_pretrain_updates_backbone(clips):
    bundle = make_bundle(CFG)
    digest = tensor_digest(bundle.backbone)
    hist = pretrain_base(clips[:1], bundle, _tcfg(steps=2))
    assert len(hist.losses) == 2 and tensor_digest(bundle.backbone) != digest
    assert bundle.base_steps == 2


def test_checkpoint_round_trip(tmp_path, clips):
    bundle = attach_controlnet(make_bundle(CFG, seed=4))
    train_controlnet(clips, bundle, _tcfg(steps=2))
    save_checkpoint(bundle, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert tensor_digest(back.backbone) == tensor_digest(bundle.backbone)
    assert tensor_digest(back.controlnet) == tensor_digest(bundle.controlnet)
    assert back.controlnet_steps == 2 and back.backbone_frozen
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    flags = {e["name"].split(".")[0]: e["trainable"] for e in manifest["tensors"]}
    assert flags == {"backbone": False, "controlnet": True}


def test_checkpoint_shape_mismatch(tmp_path, clips):
    bundle = attach_controlnet(make_bundle(CFG))
    save_checkpoint(bundle, tmp_path / "ck")
    path = tmp_path / "ck" / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["meta"]["backbone_config"]["base_channels"] = 16
    manifest["meta"]["backbone_config"]["groups"] = 4
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_checkpoint_truncated(tmp_path):
    bundle = attach_controlnet(make_bundle(CFG))
    save_checkpoint(bundle, tmp_path / "ck")
    data = tmp_path / "ck" / "tensors.bin"
    data.write_bytes(data.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_resume_reproduces_losses(tmp_path, clips):
    cfg = _tcfg(steps=4, checkpoint_every=2)
    full = attach_controlnet(make_bundle(CFG, seed=5))
    ref = train_controlnet(clips, full, cfg, out_dir=tmp_path / "a")

    part = attach_controlnet(make_bundle(CFG, seed=5))
    train_controlnet(clips, part, _tcfg(steps=2, checkpoint_every=2), out_dir=tmp_path / "b")
    resumed_bundle = make_bundle(CFG, seed=99)
    resumed = train_controlnet(clips, resumed_bundle, cfg, out_dir=tmp_path / "c",
                               resume=tmp_path / "b" / "checkpoints" / "step_000002")
    assert resumed.steps == [3, 4]
    assert resumed.losses == ref.losses[2:]
    assert tensor_digest(resumed_bundle.controlnet) == tensor_digest(full.controlnet)


def test_log_files(tmp_path, clips):
    bundle = attach_controlnet(make_bundle(CFG))
    train_controlnet(clips, bundle, _tcfg(steps=2), out_dir=tmp_path)
    lines = (tmp_path / "logs" / "controlnet.log").read_text().split("\n")
    assert lines[0].split()[0] == "1" and len(lines[0].split()) == 3
    assert (tmp_path / "checkpoints" / "final" / "manifest.json").exists()


def test_smoothed():
    np.testing.assert_allclose(smoothed([1, 3, 5, 7], 2), [1, 2, 4, 6])


def test_channel_mismatch():
    with pytest.raises(ValueError):
        make_bundle(CFG, ae=AutoencoderConfig(factor=2))
