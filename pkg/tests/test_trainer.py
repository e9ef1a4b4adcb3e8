import math
import struct

import numpy as np
import pytest
import torch

from lia import trainer
from lia.data import synth_dataset
from lia.trainer import (
    CheckpointError,
    Moments,
    NonFiniteError,
    TrainConfig,
    TrainState,
    adam_step,
    checkpoint_bytes,
    clip_global_norm,
    load_checkpoint,
    metrics_line,
    parse_metrics,
    read_checkpoint,
    running_mean,
    save_checkpoint,
    train,
)


def tiny_config(**kw):
    base = dict(latent_dim=8, dict_size=3, base_channels=2, batch_size=2, num_seqs=2, seq_len=4, steps=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return synth_dataset(2, seed=0, length=4)


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.dict_size, cfg.lam, cfg.lr, cfg.latent_dim, cfg.batch_size, cfg.resolution) == (20, 10, 0.002, 128, 8, 64)
    with pytest.raises(ValueError, match="dict_size"):
        TrainConfig(dict_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)


def test_adam_fixed_points():
    p = {"w": torch.randn(4, 3, dtype=torch.float64)}
    before = p["w"].clone()
    adam_step(p, {"w": torch.zeros(4, 3, dtype=torch.float64)}, {}, lr=0.002, t=1)
    assert torch.equal(p["w"], before)
    adam_step(p, {"w": torch.randn(4, 3, dtype=torch.float64)}, {}, lr=0.0, t=1)
    assert torch.equal(p["w"], before)


def test_adam_single_step_matches_hand_computation():
    p = {"x": torch.tensor([1.0], dtype=torch.float64)}
    moments = {}
    adam_step(p, {"x": torch.tensor([0.5], dtype=torch.float64)}, moments, lr=0.002, t=1)
    m, v = 0.1 * 0.5, 0.001 * 0.25
    m_hat, v_hat = m / (1 - 0.9), v / (1 - 0.999)
    expected = 1.0 - 0.002 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert abs(float(p["x"]) - expected) <= 1e-9
    assert abs(float(moments["x"].m) - m) <= 1e-15 and abs(float(moments["x"].v) - v) <= 1e-15


def test_adam_two_steps_match_reference():
    g1, g2 = 0.3, -0.7
    p = {"x": torch.tensor([2.0], dtype=torch.float64)}
    moments = {}
    adam_step(p, {"x": torch.tensor([g1], dtype=torch.float64)}, moments, lr=0.01, t=1)
    adam_step(p, {"x": torch.tensor([g2], dtype=torch.float64)}, moments, lr=0.01, t=2)
    x, m, v = 2.0, 0.0, 0.0
    for t, g in ((1, g1), (2, g2)):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert abs(float(p["x"]) - x) <= 1e-12


def test_adam_rejects_non_finite_and_leaves_state_alone():
    p = {"good": torch.ones(2), "bad": torch.ones(3)}
    moments = {"good": Moments(torch.full((2,), 0.5), torch.full((2,), 0.25))}
    with pytest.raises(NonFiniteError, match="bad"):
        adam_step(p, {"good": torch.ones(2), "bad": torch.tensor([1.0, float("nan"), 0.0])}, moments, 0.1, 3)
    assert torch.equal(p["good"], torch.ones(2)) and torch.equal(moments["good"].m, torch.full((2,), 0.5))
    with pytest.raises(ValueError, match="shape"):
        adam_step({"a": torch.ones(2)}, {"a": torch.ones(3)}, {}, 0.1, 1)
    with pytest.raises(ValueError):
        adam_step({"a": torch.ones(2)}, {"a": torch.ones(2)}, {}, 0.1, 0)


def test_clip_global_norm():
    grads = {"a": torch.tensor([3.0]), "b": torch.tensor([4.0])}
    assert clip_global_norm(grads, 10.0) == 5.0 and float(grads["a"]) == 3.0
    clip_global_norm(grads, 1.0)
    assert abs(math.hypot(float(grads["a"]), float(grads["b"])) - 1.0) <= 1e-6
    grads = {"a": torch.tensor([30.0])}
    clip_global_norm(grads, 0.0)
    assert float(grads["a"]) == 30.0


def test_train_step_contract(tiny_data):
    state = TrainState.fresh(tiny_config())
    before = {k: v.clone() for k, v in state.model.state_dict().items()}
    frozen = {k: v.clone() for k, v in state.extractor.state_dict().items()}
    results = train(state, steps=2, dataset=tiny_data)
    assert state.step == 2 and len(results) == 2
    for r in results:
        assert all(math.isfinite(x) for x in r.floats().values())
        parts = r.losses
        assert abs(float(parts.total) - float(parts.recon + 10 * parts.perceptual + parts.adversarial)) <= 1e-5
    delta = sum(float((v - before[k]).abs().sum()) for k, v in state.model.state_dict().items())
    assert delta > 0
    assert all(torch.equal(v, frozen[k]) for k, v in state.extractor.state_dict().items())
    d = state.model.directions().detach().double()
    assert (d @ d.T - torch.eye(3, dtype=torch.float64)).abs().max() <= 1e-5
    x = torch.from_numpy(tiny_data[0].frames[:2])
    with torch.no_grad():
        masks = state.model(x, x.flip(0)).flows.masks
    assert all(0 <= float(m.min()) and float(m.max()) <= 1 for m in masks)


def test_same_seed_same_trajectory(tiny_data):
    runs = []
    for _ in range(2):
        state = TrainState.fresh(tiny_config())
        runs.append([r.floats() for r in train(state, dataset=tiny_data)])
    assert runs[0] == runs[1]


def test_checkpoint_round_trip_is_byte_identical(tmp_path, tiny_data):
    state = TrainState.fresh(tiny_config())
    train(state, steps=1, dataset=tiny_data)
    first = save_checkpoint(state, tmp_path / "a.ckpt")
    loaded = load_checkpoint(first)
    save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for (k, v), (k2, v2) in zip(state.model.state_dict().items(), loaded.model.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    assert loaded.step == 1 and loaded.config == state.config
    assert set(loaded.moments_g) == set(state.moments_g)
    assert loaded.rng.bit_generator.state == state.rng.bit_generator.state
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_contains_every_field(tmp_path, tiny_data):
    state = TrainState.fresh(tiny_config())
    train(state, steps=1, dataset=tiny_data)
    header, table = read_checkpoint(save_checkpoint(state, tmp_path / "c.ckpt"))
    assert set(header) == {"config", "step", "rng"}
    assert "G.motion.dictionary.store.weight" in table
    assert {"extractor.w0", "extractor.w3"} <= set(table)
    assert any(k.startswith("adam.G.") and k.endswith(".v") for k in table)
    assert any(k.startswith("adam.D.") and k.endswith(".m") for k in table)
    assert any(k.startswith("D.") for k in table)


def test_resume_reproduces_uninterrupted_run(tmp_path, tiny_data):
    full = TrainState.fresh(tiny_config(steps=4))
    reference = [r.floats() for r in train(full, dataset=tiny_data)]
    part = TrainState.fresh(tiny_config(steps=4))
    head = [r.floats() for r in train(part, steps=2, dataset=tiny_data, checkpoint=tmp_path / "r.ckpt")]
    resumed = load_checkpoint(tmp_path / "r.ckpt")
    tail = [r.floats() for r in train(resumed, dataset=tiny_data)]
    assert head + tail == reference
    assert checkpoint_bytes(resumed) == checkpoint_bytes(full)


@pytest.mark.parametrize(
    "corrupt, message",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 99) + b[8:], "version"),
        (lambda b: b[:-7], "truncated"),
        (lambda b: b + b"\0", "trailing"),
    ],
)
def test_corrupt_checkpoints_rejected(tmp_path, corrupt, message):
    good = checkpoint_bytes(TrainState.fresh(tiny_config()))
    path = tmp_path / "bad.ckpt"
    path.write_bytes(corrupt(good))
    with pytest.raises(CheckpointError, match=message):
        load_checkpoint(path)


def test_non_finite_loss_keeps_last_good_checkpoint(tmp_path, tiny_data, monkeypatch):
    state = TrainState.fresh(tiny_config(steps=5))
    ckpt = tmp_path / "m.ckpt"
    train(state, steps=2, dataset=tiny_data, checkpoint=ckpt)
    good = ckpt.read_bytes()
    monkeypatch.setattr(trainer, "recon_loss", lambda a, b: torch.tensor(float("nan")))
    with pytest.raises(NonFiniteError, match="step 3"):
        train(state, dataset=tiny_data, checkpoint=ckpt, checkpoint_every=1)
    assert ckpt.read_bytes() == good


def test_metrics_log_format(tmp_path, tiny_data):
    log = tmp_path / "m.log"
    state = TrainState.fresh(tiny_config(steps=2))
    results = train(state, dataset=tiny_data, metrics=log)
    lines = log.read_text().splitlines()
    assert len(lines) == 2
    assert [tok.split("=")[0] for tok in lines[0].split()] == ["step", "recon", "vgg", "adv", "d"]
    assert lines[1] == metrics_line(2, results[1])
    rows = parse_metrics(log)
    assert rows[0]["step"] == 1 and abs(rows[1]["recon"] - results[1].floats()["recon"]) <= 1e-6


def test_running_mean():
    vals = list(range(1, 11))
    assert running_mean(vals, 10, 5) == np.mean([6, 7, 8, 9, 10])
    assert running_mean(vals, 3, 50) == 2.0
