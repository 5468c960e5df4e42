import json

import numpy as np
import pytest

from supermeshing import fieldgen as fg
from supermeshing.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from supermeshing.errors import ConfigurationError, DataError, FormatError, TrainingError
from supermeshing.evaluator import baseline_predict, predict_cases
from supermeshing.smnet import ModelConfig, SuperMeshingNet
from supermeshing.trainer import (
    TrainConfig,
    Trainer,
    learning_rate_at,
    pretrain_perceptual,
    reconstruction_mse,
    split_dataset,
    train,
)


def tiny_config(**overrides):
    model = overrides.pop("model", {})
    m = dict(base_channels=4, bottleneck_blocks=1, scale=2)
    m.update(model)
    base = dict(epochs=3, perceptual_epochs=3, perceptual_channels=4, model=ModelConfig(**m))
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return fg.build_dataset("poisson", 20, 32, 2, "solve", seed=11)


# -- splitting ------------------------------------------------------------------

def test_split_sizes_and_partition():
    tr, va, te = split_dataset(100, (0.8, 0.1, 0.1), seed=3)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    assert sorted(tr + va + te) == list(range(100))
    assert not (set(tr) & set(va) or set(tr) & set(te) or set(va) & set(te))
    assert split_dataset(100, seed=3) == (tr, va, te)


def test_split_errors():
    with pytest.raises(DataError):
        split_dataset(9)
    with pytest.raises(ConfigurationError):
        split_dataset(100, (0.5, 0.1, 0.1))


# -- config ---------------------------------------------------------------------

def test_train_config_json_round_trip(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_json(path) == cfg
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"epoch": 3})
    with pytest.raises(ConfigurationError):
        TrainConfig(fractions=(0.5, 0.5, 0.5))
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)


def test_cosine_schedule():
    cfg = TrainConfig(epochs=10, learning_rate=1e-3)
    assert learning_rate_at(cfg, 1) == 1e-3
    rates = [learning_rate_at(cfg, e) for e in range(1, 11)]
    assert all(a > b for a, b in zip(rates, rates[1:])) and rates[-1] > 0
    assert learning_rate_at(TrainConfig(lr_schedule="constant"), 7) == 1e-3


# -- perceptual pretraining --------------------------------------------------------

def test_pretrain_reduces_reconstruction_error(tiny_data):
    hr = tiny_data.hr_array()
    ext, history = pretrain_perceptual(hr, epochs=20, seed=0, channels=4)
    assert history[-1] <= 0.8 * history[0]
    assert ext.frozen and all(p.frozen for p in ext.parameters())
    again, _ = pretrain_perceptual(hr, epochs=20, seed=0, channels=4)
    for a, b in zip(ext.parameters(), again.parameters()):
        assert np.array_equal(a.data, b.data)


def test_pretrain_constant_field():
    hr = np.full((64, 1, 16, 16), 0.5, np.float32)
    ext, _ = pretrain_perceptual(hr, epochs=50, seed=0, channels=4)
    # an all-zero reconstruction would score 0.25
    assert reconstruction_mse(ext, hr) < 1e-3


# -- training -------------------------------------------------------------------

def test_training_deterministic(tiny_data):
    cfg = tiny_config()
    a_ckpt, a_rec = train(cfg, tiny_data)
    b_ckpt, b_rec = train(cfg, tiny_data)
    assert a_rec.curve("train") == b_rec.curve("train")
    assert a_rec.curve("val", "mae") == b_rec.curve("val", "mae")
    assert a_ckpt.to_bytes() == b_ckpt.to_bytes()
    assert all(np.isfinite(a_rec.curve("train")))
    val = a_rec.curve("val", "mae")
    assert a_rec.best_val_mae == min(val) and a_rec.best_val_mae <= val[-1]
    assert a_ckpt.split["test"] and a_rec.train_seconds >= 0


def test_early_stop_when_never_improving(tiny_data):
    cfg = tiny_config(epochs=10, early_stop_patience=1, learning_rate=0.0,
                      model={"use_perceptual": False})
    _, rec = train(cfg, tiny_data)
    assert rec.stopped_early and rec.best_epoch == 1
    assert max(e.epoch for e in rec.epochs) == 2


def test_non_finite_loss_aborts_with_checkpoint(tiny_data):
    pairs = [fg.SamplePair(p.lr, p.hr.copy(), p.scale) for p in tiny_data.pairs]
    for p in pairs:
        p.hr[0, 0] = np.nan
    bad = fg.Dataset(pairs, tiny_data.lr_shape, 2)
    cfg = tiny_config(model={"use_perceptual": False, "use_geometric": False})
    with pytest.raises(TrainingError) as info:
        train(cfg, bad)
    assert info.value.epoch == 1
    ckpt = info.value.checkpoint
    assert isinstance(ckpt, Checkpoint)
    fresh = SuperMeshingNet(cfg.model).state_dict()
    assert all(np.array_equal(ckpt.state[k], v) for k, v in fresh.items())


def test_scale_mismatch(tiny_data):
    with pytest.raises(ConfigurationError, match="scale"):
        Trainer(tiny_config(model={"scale": 4}), tiny_data)


def test_training_log_csv(tiny_data, tmp_path):
    _, rec = train(tiny_config(epochs=2), tiny_data)
    rec.write_log_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,content,perceptual,geometric,total,mae"
    assert len(lines) == 1 + 2 * 2


def test_memorization_beats_baseline():
    ds = fg.build_dataset("poisson", 10, 32, 2, "solve", seed=2)
    cfg = tiny_config(epochs=200, early_stop_patience=200, batch_size=2,
                      model={"base_channels": 8, "use_perceptual": False})
    trainer = Trainer(cfg, ds)
    trainer.run()
    idx = trainer.split["train"]
    # evaluate the final weights rather than the best-validation snapshot
    model = SuperMeshingNet(cfg.model)
    model.load_state_dict(trainer.final_state)
    pred = predict_cases(model, ds.lr_array(idx))
    base = baseline_predict(ds.lr_array(idx), 2)
    hr = ds.hr_array(idx)
    assert np.mean(np.abs(pred - hr)) < 0.5 * np.mean(np.abs(base - hr))


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    net = SuperMeshingNet(ModelConfig(base_channels=4, bottleneck_blocks=1, seed=4))
    ckpt = Checkpoint.from_model(net, (0.125, 7.5), seed=4, split={"test": [1, 2]})
    path = tmp_path / "m.smnt"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert (back.norm_min, back.norm_max) == (0.125, 7.5)
    assert back.split == {"test": [1, 2]} and back.config == ckpt.config
    save_checkpoint(tmp_path / "n.smnt", back)
    assert path.read_bytes() == (tmp_path / "n.smnt").read_bytes()
    x = np.random.default_rng(0).uniform(size=(1, 1, 16, 16)).astype(np.float32)
    assert np.array_equal(back.build_model().predict(x), net.predict(x))


def test_checkpoint_corruption(tmp_path):
    net = SuperMeshingNet(ModelConfig(base_channels=4, bottleneck_blocks=1))
    raw = Checkpoint.from_model(net).to_bytes()
    with pytest.raises(FormatError, match="magic"):
        Checkpoint.from_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError, match="version"):
        Checkpoint.from_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(raw[:-3])
    with pytest.raises(FormatError, match="trailing"):
        Checkpoint.from_bytes(raw + b"\0\0\0\0")
    meta_len = int.from_bytes(raw[8:12], "little")
    meta = json.loads(raw[12:12 + meta_len])
    meta["parameters"][1]["offset"] += 4
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    bad = raw[:8] + len(blob).to_bytes(4, "little") + blob + raw[12 + meta_len:]
    with pytest.raises(FormatError, match="offset"):
        Checkpoint.from_bytes(bad)
