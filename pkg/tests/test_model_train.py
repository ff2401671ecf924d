import dataclasses

import numpy as np
import pytest

from reaps.checkpoint import MAGIC, CheckpointError, load_model, read_checkpoint, save_checkpoint
from reaps.config import ModelConfig, RunConfig, TrainConfig, desk_train_config
from reaps.model import (
    NonFiniteLossError,
    build_model,
    forward_train,
    joint_dim,
    joint_loss,
    joint_representation,
    run_stages,
)
from reaps.psn import psn_forward
from reaps.ran import BBox, compute_cam, ran_forward
from reaps.synthdata import SynthSpec, generate_dataset
from reaps.tensor_core import SGD, Tensor
from reaps.train import LOG_COLUMNS, TrainingAborted, evaluate, lr_schedule, train

TINY = dict(channels=(4, 8), pool_after=(0, 1), seq_len=4, hidden=8, crop_size=32)


def tiny_cfg(**kw):
    return ModelConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SynthSpec(num_classes=3, train_per_class=8, test_per_class=4, image_size=32, min_parts=2, max_parts=2))


def test_stage_backbones_share_init_not_storage():
    model = build_model(tiny_cfg(stages=2), 3, 32)
    ran = model.ran.backbone.layers[0].weight
    for psn in model.psn_stages:
        other = psn.backbone.layers[0].weight
        np.testing.assert_array_equal(other.data, ran.data)
        assert other is not ran and other.data is not ran.data


def test_joint_dimension_per_ablation():
    for abl, want in (("full", 8 + 8 + 4 * 8), ("wo-part", 8 + 8), ("wo-attend", 8 + 8 + 4 * 8)):
        cfg = tiny_cfg(ablation=abl)
        assert joint_dim(cfg, 8, 8) == want
        assert build_model(cfg, 3, 32).joint_weight.shape == (want, 3)
    assert joint_dim(tiny_cfg(stages=2), 8, 8) == 8 + 2 * (8 + 32)


def test_joint_representation_layout():
    a, g, p = np.arange(3.0), np.arange(3.0, 5.0), np.arange(6.0).reshape(3, 2) + 10
    f = joint_representation(Tensor(a), Tensor(g), Tensor(p)).data
    np.testing.assert_array_equal(f, np.concatenate([a, g, p.ravel()]))
    assert joint_representation(Tensor(a), Tensor(g)).shape == (5,)


def test_forward_shapes_and_detached_joint(data):
    train_ds, _ = data
    model = build_model(tiny_cfg(), 3, 32)
    res = run_stages(train_ds.images[:5], model, labels=train_ds.labels[:5])
    assert res.joint.shape == (5, joint_dim(model.config, 8, 8))
    assert res.joint._ctx is None and not res.joint.requires_grad
    assert res.final_logits.shape == (5, 3)
    st = res.stages[0]
    assert st.regions.shape == (5, 3, 32, 32) and len(st.boxes) == 5
    assert all(b.is_valid(32, 32) for b in st.boxes)


def test_stage_one_crops_with_the_label_class_map(data):
    train_ds, _ = data
    model = build_model(tiny_cfg(head_init="normal"), 3, 32)
    x, y = train_ds.images[:3], train_ds.labels[:3]
    res = run_stages(x, model, tau=0.3, labels=y)
    for i in range(3):
        cam = compute_cam(res.ran.features.data[i], model.ran.head_weight.data, int(y[i]))
        np.testing.assert_array_equal(res.stages[0].cams[i].values, cam.values)


def test_second_stage_uses_first_stage_features(data):
    train_ds, _ = data
    model = build_model(tiny_cfg(stages=2, head_init="normal"), 3, 32)
    x = train_ds.images[:2]
    res = run_stages(x, model, tau=0.3)
    first = res.stages[0]
    pred = first.psn.logits_global.data.argmax(1)
    for i in range(2):
        cam = compute_cam(first.psn.features.data[i], model.psn_stages[0].global_weight.data, int(pred[i]))
        np.testing.assert_array_equal(res.stages[1].cams[i].values, cam.values)
        assert res.stages[1].boxes[i].is_valid(32, 32)


def test_wo_attend_uses_whole_image(data):
    train_ds, _ = data
    model = build_model(tiny_cfg(ablation="wo-attend"), 3, 32)
    res = run_stages(train_ds.images[:3], model)
    assert all(b == BBox(0, 0, 32, 32) for b in res.stages[0].boxes)
    np.testing.assert_allclose(res.stages[0].regions, train_ds.images[:3], atol=1e-6)


def test_wo_part_drops_branch_and_its_parameters(data):
    train_ds, _ = data
    model = build_model(tiny_cfg(ablation="wo-part"), 3, 32)
    assert not any(".lstm_" in n or "part_head" in n for n in model.trainable_parameters())
    step = forward_train(train_ds.images[:4], train_ds.labels[:4], model, TrainConfig())
    assert np.isnan(step.losses["L_p"])
    assert step.result.stages[0].psn.parts is None


def test_joint_loss_weights():
    la, lg, lp = (Tensor(np.array(v)) for v in (1.0, 2.0, 4.0))
    cfg = TrainConfig(lambda1=0.5, lambda2=2.0, lambda3=0.25)
    assert float(joint_loss(la, lg, lp, cfg).data) == pytest.approx(0.5 + 4.0 + 1.0)
    assert float(joint_loss(la, lg, None, cfg).data) == pytest.approx(4.5)


def test_joint_loss_non_finite_names_branch():
    with pytest.raises(NonFiniteLossError, match="L_g"):
        joint_loss(Tensor(np.array(1.0)), Tensor(np.array(np.nan)), None, TrainConfig())


def _grads_after_step(model, data, cfg):
    train_ds, _ = data
    model.zero_grad()
    forward_train(train_ds.images[:6], train_ds.labels[:6], model, cfg).loss.backward()
    return {n: p.grad for n, p in model.named_parameters().items()}


def test_lambda1_zero_silences_attention_network(data):
    model = build_model(tiny_cfg(head_init="normal"), 3, 32)
    grads = _grads_after_step(model, data, TrainConfig(lambda1=0.0))
    ran = [n for n in grads if n.startswith("ran.")]
    assert ran
    for n in ran:
        assert grads[n] is None or not grads[n].any(), n
    assert any(grads[n] is not None and grads[n].any() for n in grads if n.startswith("psn0.backbone"))


def test_lambda3_zero_silences_part_branch(data):
    model = build_model(tiny_cfg(head_init="normal"), 3, 32)
    grads = _grads_after_step(model, data, TrainConfig(lambda3=0.0))
    for n in model.part_parameters():
        assert grads[n] is None or not grads[n].any(), n


def test_final_head_does_not_touch_the_trunk(data):
    model = build_model(tiny_cfg(head_init="normal"), 3, 32)
    grads = _grads_after_step(model, data, TrainConfig(lambda1=0.0, lambda2=0.0, lambda3=0.0))
    for n, g in grads.items():
        if not n.startswith("joint_head"):
            assert g is None or not g.any(), n
    assert grads["joint_head.weight"].any()


def test_lr_schedule_steps():
    cfg = TrainConfig()
    assert [lr_schedule(e, cfg) for e in (0, 59, 60, 119, 120)] == [0.001, 0.001, 0.001 * 0.1, 0.001 * 0.1, 0.001 * 0.1**2]
    desk = desk_train_config()
    assert lr_schedule(19, desk) == 0.001 and lr_schedule(20, desk) == 0.001 * 0.1


def test_training_log_format(tmp_path, data):
    train_ds, _ = data
    model = build_model(tiny_cfg(), 3, 32)
    log = train(model, train_ds, desk_train_config(epochs=2, batch_size=8), log_path=tmp_path / "log.tsv")
    lines = (tmp_path / "log.tsv").read_text().splitlines()
    assert lines[0] == "#" + "\t".join(LOG_COLUMNS)
    assert len(lines) == 3 and len(log.records) == 2
    cols = lines[2].split("\t")
    assert cols[0] == "1" and len(cols) == len(LOG_COLUMNS)
    assert all(np.isfinite(float(c)) for c in cols[1:])


def test_training_reduces_loss(data):
    train_ds, _ = data
    model = build_model(tiny_cfg(), 3, 32)
    log = train(model, train_ds, desk_train_config(epochs=12, batch_size=8, lr0=0.01))
    first, last = log.records[0], log.records[-1]
    assert last.L_A < first.L_A and last.L_g < first.L_g


def test_nan_aborts_and_keeps_last_checkpoint(data, monkeypatch):
    import reaps.train as train_mod

    train_ds, _ = data
    model = build_model(tiny_cfg(), 3, 32)
    saved = []
    real = train_mod.forward_train
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 3:  # first epoch has 3 batches
            raise NonFiniteLossError("L_A", float("nan"))
        return real(*args, **kwargs)

    monkeypatch.setattr(train_mod, "forward_train", flaky)
    with pytest.raises(TrainingAborted, match="epoch 1"):
        train(model, train_ds, desk_train_config(epochs=3, batch_size=8), checkpoint=lambda m, o, e: saved.append(e))
    assert saved == [1]


def test_post_head_mode_trains_only_joint_head(data):
    train_ds, _ = data
    model = build_model(tiny_cfg(), 3, 32)
    before = {n: p.data.copy() for n, p in model.named_parameters().items()}
    cfg = desk_train_config(epochs=0, final_head_mode="post", post_epochs=2, batch_size=8)
    train(model, train_ds, cfg)
    for n, p in model.named_parameters().items():
        changed = not np.array_equal(before[n], p.data)
        assert changed == n.startswith("joint_head"), n


def test_evaluate_reports_every_branch(data):
    _, test_ds = data
    m = evaluate(build_model(tiny_cfg(stages=2), 3, 32), test_ds)
    for key in ("final_acc", "ran_acc", "psn_global_acc", "psn_part_acc", "mean_iou", "psn2_global_acc"):
        assert key in m
    assert 0.0 <= m["mean_iou"] <= 1.0


# ---- checkpoints -------------------------------------------------------------------


def _run_config():
    cfg = RunConfig()
    cfg.model = tiny_cfg()
    cfg.synth = dataclasses.replace(cfg.synth, num_classes=3, image_size=32, min_parts=2, max_parts=2)
    return cfg


def test_checkpoint_round_trip(tmp_path, data):
    train_ds, test_ds = data
    cfg = _run_config()
    model = build_model(cfg.model, 3, 32, seed=cfg.train.seed)
    opt = SGD(model.trainable_parameters(), lr=0.01)
    train(model, train_ds, desk_train_config(epochs=1, batch_size=8), optimizer=opt)
    save_checkpoint(tmp_path / "m.bin", model, cfg, 1, opt.state, train_ds.class_names)
    loaded, ck = load_model(tmp_path / "m.bin")
    assert ck.epoch == 1 and ck.num_classes == 3 and ck.image_size == 32
    assert ck.class_names == train_ds.class_names
    assert ck.config == cfg
    for name, p in model.named_parameters().items():
        np.testing.assert_array_equal(loaded.named_parameters()[name].data, p.data)
    for name, v in opt.state.velocity.items():
        np.testing.assert_array_equal(ck.velocities[name], v)
    assert evaluate(loaded, test_ds) == evaluate(model, test_ds)


def test_checkpoint_layout(tmp_path):
    cfg = _run_config()
    model = build_model(cfg.model, 3, 32)
    save_checkpoint(tmp_path / "m.bin", model, cfg, 0)
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:8] == MAGIC
    assert int.from_bytes(raw[8:12], "little") == 1
    assert int.from_bytes(raw[12:16], "little") == len(model.named_parameters())
    name_len = int.from_bytes(raw[16:20], "little")
    assert raw[20 : 20 + name_len].decode() == next(iter(model.named_parameters()))


def test_bad_magic_names_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(CheckpointError, match="junk.bin"):
        read_checkpoint(path)


def test_truncated_checkpoint(tmp_path):
    cfg = _run_config()
    save_checkpoint(tmp_path / "m.bin", build_model(cfg.model, 3, 32), cfg, 0)
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "cut.bin")


def test_psn_forward_on_crop_matches_stage_output(data):
    train_ds, _ = data
    model = build_model(tiny_cfg(), 3, 32)
    res = run_stages(train_ds.images[:2], model)
    again = psn_forward(Tensor(res.stages[0].regions), model.psn_stages[0])
    np.testing.assert_array_equal(again.logits_part.data, res.stages[0].psn.logits_part.data)
    pooled = ran_forward(Tensor(train_ds.images[:2]), model.ran).pooled.data
    np.testing.assert_allclose(res.joint.data[:, :8], 16.0 * pooled / np.linalg.norm(pooled, axis=1, keepdims=True), rtol=1e-6)
    raw = run_stages(train_ds.images[:2], build_model(tiny_cfg(joint_block_norm=0.0), 3, 32))
    np.testing.assert_array_equal(raw.joint.data[:, :8], pooled)


def test_joint_blocks_have_equal_norm(data):
    train_ds, _ = data
    res = run_stages(train_ds.images[:3], build_model(tiny_cfg(joint_block_norm=2.5), 3, 32))
    for lo, hi in ((0, 8), (8, 16), (16, 48)):
        np.testing.assert_allclose(np.linalg.norm(res.joint.data[:, lo:hi], axis=1), 2.5, rtol=1e-5)
    assert res.joint._ctx is None and not res.joint.requires_grad
