import csv
import math

import numpy as np
import pytest

from granet.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from granet.config import ConfigError
from granet.data import RainParams, make_scene, synth_rain
from granet.model import GraNetConfig
from granet.tensor import Tensor
from granet.train import (
    AdamState,
    PlateauScheduler,
    RunConfig,
    TrainConfig,
    Trainer,
    TrainingError,
    adam_step,
    augment,
    evaluate,
    train,
)

TINY = GraNetConfig(coarse_channels=(4, 6, 8), fine_channels=4, fine_num_dense_blocks=2, merge_k=2,
                    dense_growth=2, dense_layers=2)


def toy_pairs(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        clean = make_scene(size, size, rng)
        rainy, _ = synth_rain(clean, RainParams(), rng)
        out.append((f"img{i}", rainy, clean))
    return out


def param(value):
    p = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    return p


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_is_noop():
    w = {"a": param([[1.0, -2.0]])}
    w["a"].grad = np.zeros((1, 2))
    adam_step(w, AdamState(lr=0.1))
    np.testing.assert_array_equal(w["a"].data, [[1.0, -2.0]])


def test_adam_first_step():
    w = {"a": param([1.0])}
    w["a"].grad = np.array([1.0])
    adam_step(w, AdamState(lr=0.1))
    assert w["a"].data[0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)


def scalar_adam_oracle(w, steps, lr=0.1, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return w


def test_adam_quadratic_matches_oracle():
    w = {"w": param([5.0])}
    state = AdamState(lr=0.1)
    for _ in range(100):
        w["w"].grad = 2 * w["w"].data
        adam_step(w, state)
    assert abs(w["w"].data[0]) < 0.5
    assert w["w"].data[0] == pytest.approx(scalar_adam_oracle(5.0, 100), abs=1e-12)


def test_adam_order_independent():
    rng = np.random.default_rng(0)
    vals = {k: rng.normal(size=3) for k in "abc"}
    grads = {k: rng.normal(size=3) for k in "abc"}
    results = []
    for order in ("abc", "cab"):
        w = {k: param(vals[k]) for k in order}
        state = AdamState(lr=0.01)
        for _ in range(3):
            for k in order:
                w[k].grad = grads[k]
            adam_step(w, state)
        results.append({k: w[k].data for k in "abc"})
    for k in "abc":
        np.testing.assert_array_equal(results[0][k], results[1][k])


def test_adam_missing_gradient_named():
    w = {"good": param([1.0]), "orphan": param([2.0])}
    w["good"].grad = np.ones(1)
    with pytest.raises(ValueError, match="orphan"):
        adam_step(w, AdamState())


# ---------------------------------------------------------------- scheduler


def test_scheduler_rising_keeps_lr():
    s = PlateauScheduler()
    assert {s.step(p) for p in np.linspace(20, 30, 30)} == {5e-4}


def test_scheduler_flat_first_cut_after_fourth_stall():
    s = PlateauScheduler(patience=3)
    lrs = [s.step(25.0) for _ in range(6)]
    assert lrs[:4] == [5e-4] * 4
    assert lrs[4] == pytest.approx(4.5e-4)
    assert lrs[5] == lrs[4]


def test_scheduler_floor_and_monotone():
    s = PlateauScheduler(patience=0)
    lrs = [s.step(10.0) for _ in range(100)]
    assert min(lrs) == 1e-4
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert s.at_floor


def test_scheduler_equal_is_not_improvement():
    s = PlateauScheduler(patience=1)
    s.step(30.0)
    s.step(30.0)
    assert s.step(30.0) < 5e-4


# ---------------------------------------------------------------- augmentation


def test_flip_is_paired_and_involutive():
    a = np.arange(24, dtype=np.float32).reshape(2, 4, 3)
    b = a + 100
    fa, fb = augment(a, b, np.random.default_rng(0), p=1.0)
    np.testing.assert_array_equal(fa, a[:, ::-1])
    np.testing.assert_array_equal(fb - fa, 100)
    ffa, _ = augment(fa, fb, np.random.default_rng(0), p=1.0)
    np.testing.assert_array_equal(ffa, a)
    na, _ = augment(a, b, np.random.default_rng(0), p=0.0)
    assert na is a


def test_flip_rate():
    rng = np.random.default_rng(1)
    a = np.zeros((1, 2, 3))
    a[0, 0] = 1
    flips = sum(augment(a, a, rng)[0][0, 1, 0] == 1 for _ in range(10_000))
    assert 0.48 <= flips / 10_000 <= 0.52


# ---------------------------------------------------------------- config


def test_run_config_roundtrip():
    run = RunConfig(model=TINY, train=TrainConfig(lr=1e-3, max_steps=7), rain=RainParams(seed=3))
    assert RunConfig.from_text(run.to_text()) == run


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="model.fine_chanels") as err:
        RunConfig.from_text("model.fine_chanels = 3\n")
    assert err.value.key == "model.fine_chanels"
    with pytest.raises(ConfigError, match="optim.lr"):
        RunConfig.from_text("optim.lr = 1\n")


def test_bad_value_named():
    with pytest.raises(ConfigError, match="train.lr"):
        RunConfig.from_text("train.lr = fast\n")


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=1e-5, min_lr=1e-4)


# ---------------------------------------------------------------- loop


def tiny_run(**train_kw):
    kw = dict(max_epochs=3, seed=0)
    kw.update(train_kw)
    return RunConfig(model=TINY, train=TrainConfig(**kw))


def test_evaluate_identity_network():
    pairs = toy_pairs(2)
    m = evaluate(GraNetConfig(), Trainer(RunConfig()).weights, pairs)
    # zero heads: every output equals the rainy input
    assert m["psnr_final"] == pytest.approx(m["psnr_input"])
    assert m["psnr_coarse"] == pytest.approx(m["psnr_input"])
    assert len(m["per_image"]) == 2


def test_single_pair_loss_decreases():
    pair = toy_pairs(1)[0]
    tr = Trainer(tiny_run(flip_prob=0.0, lr=2e-3))
    losses = [tr.train_step(pair[1], pair[2]) for _ in range(150)]
    assert np.mean(losses[-50:]) < np.mean(losses[:50])


def test_training_is_deterministic():
    pairs = toy_pairs(2)
    curves = []
    for _ in range(2):
        tr = Trainer(tiny_run())
        curves.append([tr.run_epoch(pairs) for _ in range(2)])
    assert curves[0] == curves[1]


def test_nonfinite_loss_aborts():
    name, rainy, clean = toy_pairs(1)[0]
    tr = Trainer(tiny_run())
    bad = rainy.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="step 1.*'bad'"):
        tr.train_step(bad, clean, "bad")


def test_train_writes_csv_and_checkpoints(tmp_path):
    pairs = toy_pairs(3)
    best = train(tiny_run(), pairs[:2], pairs[2:], out_path=tmp_path / "m.ckpt", csv_path=tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["epoch", "lr", "train_loss", "val_psnr_final", "val_psnr_coarse", "val_psnr_mask", "val_ssim_final"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    on_disk = load_checkpoint(tmp_path / "m.ckpt", TINY.fingerprint())
    assert on_disk.epoch == best.epoch
    assert load_checkpoint(str(tmp_path / "m.ckpt") + ".last").epoch == 3
    assert best.meta["best_psnr"] == max(float(r[3]) for r in rows[1:])


def test_stop_rule_at_floor():
    run = tiny_run(max_epochs=1000, lr=1e-4, min_lr=1e-4, stop_patience=2)
    tr = Trainer(run)
    tr.end_epoch({"psnr_final": 20.0})
    assert not tr.should_stop()
    tr.end_epoch({"psnr_final": 19.0})
    tr.end_epoch({"psnr_final": 19.0})
    assert tr.should_stop()


def test_target_psnr_stops():
    tr = Trainer(tiny_run(target_psnr=30.0))
    tr.end_epoch({"psnr_final": 29.0})
    assert not tr.should_stop()
    tr.end_epoch({"psnr_final": 30.5})
    assert tr.should_stop()


def test_train_rejects_empty():
    with pytest.raises(ValueError, match="non-empty"):
        train(tiny_run(), [], toy_pairs(1))


def test_resume_reproduces_next_step(tmp_path):
    pairs = toy_pairs(2)
    tr = Trainer(tiny_run())
    tr.run_epoch(pairs)
    save_checkpoint(tmp_path / "c.ckpt", tr.checkpoint())
    expected = tr.train_step(pairs[0][1], pairs[0][2])
    resumed = Trainer.from_checkpoint(load_checkpoint(tmp_path / "c.ckpt"))
    assert resumed.epoch == 1 and resumed.steps == 2
    assert abs(resumed.train_step(pairs[0][1], pairs[0][2]) - expected) < 1e-5


def test_resume_continues_epochs(tmp_path):
    pairs = toy_pairs(2)
    train(tiny_run(max_epochs=2), pairs, pairs, out_path=tmp_path / "m.ckpt", csv_path=tmp_path / "m.csv")
    last = load_checkpoint(str(tmp_path / "m.ckpt") + ".last")
    train(tiny_run(max_epochs=4), pairs, pairs, out_path=tmp_path / "m.ckpt", csv_path=tmp_path / "m.csv", resume=last)
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]


# ---------------------------------------------------------------- checkpoint file


@pytest.fixture
def ckpt():
    tr = Trainer(tiny_run())
    pair = toy_pairs(1)[0]
    tr.train_step(pair[1], pair[2])
    return tr.checkpoint()


def test_checkpoint_roundtrip(tmp_path, ckpt):
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.fingerprint == ckpt.fingerprint and back.config_text == ckpt.config_text
    assert back.scheduler == ckpt.scheduler and back.meta == ckpt.meta
    for k in ckpt.weights:
        np.testing.assert_array_equal(back.weights[k], ckpt.weights[k])
        np.testing.assert_array_equal(back.adam["m"][k], ckpt.adam["m"][k])
        np.testing.assert_array_equal(back.adam["v"][k], ckpt.adam["v"][k])
    assert back.adam["step"] == 1


def test_checkpoint_detects_every_flipped_section(tmp_path, ckpt):
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    blob = bytearray((tmp_path / "a.ckpt").read_bytes())
    rng = np.random.default_rng(0)
    for pos in rng.integers(40, len(blob) - 20, size=25):
        bad = bytearray(blob)
        bad[pos] ^= 0x41
        (tmp_path / "b.ckpt").write_bytes(bytes(bad))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "b.ckpt")


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:], "version"),
    (lambda b: b[: len(b) // 2], "truncated"),
    (lambda b: b + b"junk", "unexpected bytes"),
])
def test_checkpoint_structural_errors(tmp_path, ckpt, mutate, match):
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    (tmp_path / "b.ckpt").write_bytes(mutate((tmp_path / "a.ckpt").read_bytes()))
    with pytest.raises(CheckpointError, match=match):
        load_checkpoint(tmp_path / "b.ckpt")


def test_checkpoint_fingerprint_refused(tmp_path, ckpt):
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    with pytest.raises(CheckpointError, match="config"):
        load_checkpoint(tmp_path / "a.ckpt", GraNetConfig().fingerprint())


def test_checkpoint_shape_mismatch(ckpt):
    bad = Checkpoint(**{**ckpt.__dict__, "weights": dict(ckpt.weights)})
    bad.weights["fine.head.conv.bias"] = np.zeros(4, np.float32)
    with pytest.raises(CheckpointError, match="fine.head.conv.bias"):
        Trainer.from_checkpoint(bad)
