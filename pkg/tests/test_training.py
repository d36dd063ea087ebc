import json
import math

import numpy as np
import pytest
import torch

from clipose.encoders import PromptConfig, TrainabilityPolicy
from clipose.synthdata import ChecksumError, category_mean_scales
from clipose.training import (
    ABLATIONS, CLIPoseModel, NonFiniteLossError, PretrainError, Stage1, TrainConfig, apply_ablation,
    collate, compute_losses, fit, load_checkpoint, lr_schedule, model_from_checkpoint, pretrain_align,
    read_history, save_checkpoint, train_step,
)

from conftest import tiny_config


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_schedule(50, 100, cfg) == 1e-4
    assert abs(lr_schedule(100, 100, cfg)) < 1e-12
    assert abs(lr_schedule(86, 100, cfg) - 0.5e-4) < 1e-9


def test_lr_schedule_continuous_at_anneal_start():
    cfg = TrainConfig()
    total = 10**6
    k = int(0.72 * total)
    assert lr_schedule(k - 1, total, cfg) == cfg.base_lr
    assert abs(lr_schedule(k, total, cfg) - cfg.base_lr) < 1e-15
    assert abs(lr_schedule(k + 1, total, cfg) - cfg.base_lr) < 1e-12


def test_lr_schedule_monotone_non_increasing():
    cfg = TrainConfig(base_lr=2e-3)
    lrs = [lr_schedule(s, 500, cfg) for s in range(501)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(anneal_start_fraction=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    cfg = apply_ablation(tiny_config(), "C1")
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.to_dict() == cfg.to_dict()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"weights": {"gamma": 1.0}})


def test_default_matches_d0():
    assert apply_ablation(TrainConfig(), "D0").to_dict() == {**TrainConfig().to_dict(), "ablation": "D0"}


def test_ablation_rows():
    a0 = apply_ablation(TrainConfig(), "A0")
    assert (a0.weights.alpha, a0.weights.beta, a0.weights.lam, a0.weights.ce) == (0, 0, 0, 0)
    b2 = apply_ablation(TrainConfig(), "B2")
    assert (b2.weights.alpha, b2.weights.beta, b2.weights.ce) == (1, 1, 0)
    assert b2.prompt.length == 0 and not b2.policy.image_projection and not b2.text_with_pose
    d1 = apply_ablation(TrainConfig(), "D1")
    assert d1.weights.lam == 1.0 and d1.weights.ce == 0.0
    assert apply_ablation(TrainConfig(), "D2").one_hot
    assert apply_ablation(TrainConfig(), "IV-1").prompt.location == "append"
    assert apply_ablation(TrainConfig(), "IV-4").prompt.length == 50
    assert apply_ablation(TrainConfig(), "V-1").policy.text_projection
    assert apply_ablation(TrainConfig(), "V-4").prompt.layers == (1, 2)
    assert apply_ablation(TrainConfig(), "V-7").prompt.layers == (2,)
    assert apply_ablation(TrainConfig(), "VII-0").weights.tau == 0.2
    with pytest.raises(ValueError):
        apply_ablation(TrainConfig(), "Z9")


@pytest.mark.parametrize("tag", list(ABLATIONS))
def test_every_ablation_tag_trains(tag, tiny_dataset):
    cfg = apply_ablation(tiny_config(), tag)
    torch.manual_seed(0)
    model = CLIPoseModel(cfg.model, cfg.prompt, cfg.one_hot)
    state = Stage1(model, cfg, category_mean_scales(tiny_dataset["train"]))
    rec = train_step(collate(tiny_dataset["train"][:6], cfg.text_with_pose), state)
    assert math.isfinite(rec["total"])
    if tag == "A0":
        assert rec["nce_pc_img"] == rec["nce_pc_text"] == rec["ce_img_text"] == 0.0


def test_b2_drops_ce_from_value_and_gradient(tiny_dataset):
    cfg = apply_ablation(tiny_config(), "B2")
    model = CLIPoseModel(cfg.model, cfg.prompt)
    for p in model.parameters():
        p.requires_grad_(True)
    batch = collate(tiny_dataset["train"][:6], cfg.text_with_pose)
    res = compute_losses(model, batch, cfg, torch.tensor(category_mean_scales(tiny_dataset["train"])).float())
    assert res.terms["ce_img_text"].item() == 0.0
    model.zero_grad()
    (res.total - res.terms["nce_pc_img"]).backward()
    assert all(p.grad is None or not p.grad.any() for p in model.image_encoder.parameters())


def test_non_finite_loss_names_term(tiny_dataset):
    cfg = tiny_config()
    state = Stage1(CLIPoseModel(cfg.model, cfg.prompt), cfg, category_mean_scales(tiny_dataset["train"]))
    batch = collate(tiny_dataset["train"][:6])
    batch.s[0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as err:
        train_step(batch, state)
    assert err.value.term in ("scale", "total")


def test_train_step_rejects_single_sample(tiny_dataset):
    cfg = tiny_config()
    state = Stage1(CLIPoseModel(cfg.model, cfg.prompt), cfg, category_mean_scales(tiny_dataset["train"]))
    with pytest.raises(ValueError):
        train_step(collate(tiny_dataset["train"][:1]), state)


def test_pretrain_zero_steps_leaves_parameters(tiny_dataset):
    cfg = tiny_config()
    model = CLIPoseModel(cfg.model, cfg.prompt)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    assert pretrain_align(model, tiny_dataset["train"], 0, cfg) == []
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_pretrain_floor_failure_is_explicit(tiny_dataset):
    cfg = tiny_config()
    cfg.pretrain.retrieval_floor = 1.0
    model = CLIPoseModel(cfg.model, cfg.prompt)
    with pytest.raises(PretrainError, match="did not exceed floor"):
        pretrain_align(model, tiny_dataset["train"], 3, cfg)
    # prompts come back after Stage 0
    assert model.image_encoder.prompt.length == cfg.prompt.length


def test_fit_zero_epochs(tiny_dataset):
    cfg = tiny_config(epochs=0)
    ckpt, hist = fit(cfg, tiny_dataset)
    assert hist == [] and ckpt.epoch == 0 and ckpt.step == 0
    fresh = CLIPoseModel(cfg.model, cfg.prompt, seed=cfg.seed)
    assert all(torch.equal(fresh.state_dict()[k], v) for k, v in ckpt.model_state.items())


def test_fit_history_records(tiny_dataset, tmp_path):
    cfg = tiny_config(epochs=2, eval_interval=2)
    ckpt, hist = fit(cfg, tiny_dataset, out_dir=tmp_path)
    assert [h["epoch"] for h in hist] == [1, 2]
    for term in ("total", "nce_pc_img", "nce_pc_text", "nce_img_text", "ce_img_text", "rot", "trans",
                 "scale", "sym"):
        assert term in hist[0]
    assert "metrics" not in hist[0] and "5°2cm" in hist[1]["metrics"]["map"]
    assert read_history(tmp_path / "history.jsonl") == json.loads(json.dumps(hist))
    assert load_checkpoint(tmp_path / "checkpoint").epoch == 2


def test_fit_deterministic(tiny_dataset):
    cfg = tiny_config()
    a, ha = fit(cfg, tiny_dataset)
    b, hb = fit(cfg, tiny_dataset)
    assert ha == hb
    assert all(torch.equal(a.model_state[k], b.model_state[k]) for k in a.model_state)


def test_resume_is_bit_exact(tiny_dataset, tmp_path):
    cfg = tiny_config(epochs=3)
    full, hist_full = fit(cfg, tiny_dataset)
    fit(cfg, tiny_dataset, out_dir=tmp_path, stop_after_epoch=1)
    resumed, hist_res = fit(cfg, tiny_dataset, resume=load_checkpoint(tmp_path / "checkpoint"))
    assert hist_res == hist_full
    assert all(torch.equal(full.model_state[k], resumed.model_state[k]) for k in full.model_state)


def test_checkpoint_round_trip_and_corruption(tiny_dataset, tmp_path):
    cfg = tiny_config(epochs=1)
    ckpt, _ = fit(cfg, tiny_dataset)
    save_checkpoint(ckpt, tmp_path / "c")
    back = load_checkpoint(tmp_path / "c")
    assert back.config == ckpt.config and back.step == ckpt.step
    assert all(torch.equal(back.model_state[k], v) for k, v in ckpt.model_state.items())
    model, cfg2 = model_from_checkpoint(back)
    assert cfg2.to_dict() == cfg.to_dict()
    blob = tmp_path / "c" / "tensors.bin"
    raw = bytearray(blob.read_bytes())
    raw[100] ^= 0x01
    blob.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "c")


def test_fit_with_stage0(tiny_dataset):
    cfg = tiny_config(epochs=1)
    cfg.pretrain.steps = 4
    cfg.pretrain.retrieval_floor = 0.0
    ckpt, hist = fit(cfg, tiny_dataset)
    assert len(ckpt.pretrain_history) == 4 and "heldout_top1" in ckpt.pretrain_history[-1]
    assert len(hist) == 1


def test_default_policy_keeps_text_backbone_frozen(tiny_dataset):
    cfg = tiny_config()
    model = CLIPoseModel(cfg.model, cfg.prompt)
    before = [p.detach().clone() for p in model.parameter_groups()["text_backbone"]]
    state = Stage1(model, cfg, category_mean_scales(tiny_dataset["train"]))
    for _ in range(3):
        train_step(collate(tiny_dataset["train"][:6]), state)
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameter_groups()["text_backbone"]))
