import json
import math

import numpy as np
import pytest

from hazegan.checkpoint import load_checkpoint
from hazegan.dataset import PairSet, to_network
from hazegan.losses import preset
from hazegan.models import Discriminator, FeatureNet, Generator
from hazegan.optim import Adam
from hazegan.physics import compose_haze, sample_haze_params, transmission_from_depth
from hazegan.scenes import make_scene
from hazegan.train import (
    TrainConfig,
    TrainingDiverged,
    train_loop,
    train_step_discriminator,
    train_step_generator,
)


def _batch(seed=0, n=4, size=8):
    """Procedural scenes hazed with sampled parameters, in network range."""
    rng = np.random.default_rng(seed)
    hazy, clean = [], []
    for _ in range(n):
        img, depth = make_scene(rng, size, size)
        p = sample_haze_params(rng)
        hazy.append(to_network(compose_haze(img, transmission_from_depth(depth, p.beta), p)))
        clean.append(to_network(img))
    return np.array(hazy, np.float32), np.array(clean, np.float32)


# Adam moves every weight by about lr per step, so at the training rate the loss on one
# batch wobbles once it gets close; the descent oracles use a small rate instead.
ORACLE_LR = 5e-6


def _snapshot(module):
    return {k: v.copy() for k, v in module.state_dict().items()}


def _same(a, b):
    return all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_fresh_discriminator_loss_near_2ln2():
    for seed in range(5):
        hazy, clean = _batch(seed, size=16)
        G, D = Generator(seed=seed), Discriminator(seed=100 + seed)
        out = train_step_discriminator(hazy, clean, G, D, Adam(D))
        assert abs(out["d_loss"] - 2 * math.log(2)) < 0.4


def test_discriminator_step_isolates_generator():
    hazy, clean = _batch()
    G, D = Generator(), Discriminator()
    before = _snapshot(G)
    train_step_discriminator(hazy, clean, G, D, Adam(D))
    assert _same(before, _snapshot(G))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_discriminator_overfits_one_batch(seed):
    hazy, clean = _batch(seed, size=32)
    G, D = Generator(seed=seed), Discriminator(seed=seed + 9)
    opt = Adam(D, lr=ORACLE_LR)
    losses = [train_step_discriminator(hazy, clean, G, D, opt)["d_loss"] for _ in range(20)]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_discriminator_descends_at_training_rate():
    hazy, clean = _batch(1, size=16)
    G, D = Generator(), Discriminator()
    opt = Adam(D)
    losses = [train_step_discriminator(hazy, clean, G, D, opt)["d_loss"] for _ in range(20)]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_generator_step_isolates_discriminator():
    hazy, clean = _batch()
    G, D = Generator(), Discriminator()
    before = _snapshot(D)
    train_step_generator(hazy, clean, G, D, Adam(G), preset("CANDY-L1-9P"), FeatureNet())
    assert _same(before, _snapshot(D))


def test_gen_preset_needs_no_discriminator():
    hazy, clean = _batch()
    G1, G2 = Generator(seed=3), Generator(seed=3)
    a = train_step_generator(hazy, clean, G1, None, Adam(G1), preset("GEN"), FeatureNet())
    b = train_step_generator(hazy, clean, G2, Discriminator(), Adam(G2), preset("GEN"), FeatureNet())
    assert a == b and "adv" not in a
    assert _same(_snapshot(G1), _snapshot(G2))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_generator_overfits_one_batch(seed):
    hazy, clean = _batch(seed, size=16)
    G, D = Generator(seed=seed), Discriminator(seed=seed + 9)
    opt = Adam(G, lr=ORACLE_LR)
    feats = FeatureNet()
    content = [train_step_generator(hazy, clean, G, D, opt, preset("CANDY-L1-9P"), feats)["s1"] for _ in range(50)]
    assert all(b < a for a, b in zip(content, content[1:])), content


def test_generator_descends_at_training_rate():
    hazy, clean = _batch(2, size=16)
    G = Generator()
    opt = Adam(G)
    feats = FeatureNet()
    content = [train_step_generator(hazy, clean, G, None, opt, preset("GEN"), feats)["l2"] for _ in range(30)]
    assert np.mean(content[-5:]) < 0.5 * np.mean(content[:5])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(pretrain_epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(fake_bn_mode="sometimes")
    assert TrainConfig(loss_weights={"w_feat": 2.0}).weights().w_feat == 2.0


def _small_cfg(**kw):
    base = dict(variant="CANDY-L1-9P", batch_size=4, crop_size=None, pretrain_epochs=2, adversarial_epochs=1,
                eval_every=1, checkpoint_every=1, seed=7)
    base.update(kw)
    return TrainConfig(**base)


def test_two_phase_loop(tiny_dataset, tmp_path):
    train, val = tiny_dataset.subset(range(4)), tiny_dataset.subset(range(4, 8))
    res = train_loop(_small_cfg(), train, val, tmp_path)
    names = [p.name for p in res.checkpoints]
    assert names == ["GEN-1.ckpt", "GEN-2.ckpt", "CANDY-L1-9P-1.ckpt"]
    recs = [json.loads(line) for line in res.log_path.read_text().splitlines()]
    steps = [r for r in recs if r["phase"] in ("pretrain", "adversarial")]
    assert [r["phase"] for r in steps] == ["pretrain", "pretrain", "adversarial"]
    for r in steps:
        assert {"step", "phase", "d_loss", "g_adv", "l2", "s1", "feat", "total", "wall_ms"} <= set(r)
    assert steps[0]["d_loss"] is None and steps[2]["d_loss"] is not None
    assert 0 < steps[2]["d_min"] <= steps[2]["d_max"] < 1
    vals = [r for r in recs if r["phase"].endswith("-val")]
    assert len(vals) == 3 and all(r["ssim"] <= 1 for r in vals)
    ck = load_checkpoint(res.checkpoints[-1])
    assert ck.slots()[:2] == ["generator", "discriminator"]
    assert ck.metadata["variant"] == "CANDY-L1-9P"


def test_warm_start_continuity(tiny_dataset, tmp_path):
    # one batch per epoch, so each step sees the same four pairs
    train = tiny_dataset.subset(range(4))
    res = train_loop(_small_cfg(pretrain_epochs=30, adversarial_epochs=1, eval_every=0, checkpoint_every=0),
                     train, None, tmp_path)
    recs = [json.loads(line) for line in res.log_path.read_text().splitlines()]
    last_pre = [r for r in recs if r["phase"] == "pretrain"][-1]
    first_adv = [r for r in recs if r["phase"] == "adversarial"][0]
    assert abs(first_adv["l2"] - last_pre["l2"]) <= 0.05 * last_pre["l2"]


def test_validation_does_not_touch_training(tiny_dataset, tmp_path):
    train = tiny_dataset.subset(range(4))
    a = train_loop(_small_cfg(adversarial_epochs=0, eval_every=1), train, tiny_dataset.subset(range(4, 8)),
                   tmp_path / "a")
    b = train_loop(_small_cfg(adversarial_epochs=0, eval_every=0), train, None, tmp_path / "b")
    assert a.checkpoints[-1].read_bytes() == b.checkpoints[-1].read_bytes()


def test_nan_halts_and_keeps_checkpoint(tiny_dataset, tmp_path, monkeypatch):
    import hazegan.train as tr

    calls = {"n": 0}
    real = tr.train_step_generator

    def flaky(*args, **kw):
        calls["n"] += 1
        out = real(*args, **kw)
        if calls["n"] == 3:
            out["total"] = float("nan")
        return out

    monkeypatch.setattr(tr, "train_step_generator", flaky)
    train = tiny_dataset.subset(range(4))
    with pytest.raises(TrainingDiverged) as err:
        train_loop(_small_cfg(pretrain_epochs=5, adversarial_epochs=0), train, None, tmp_path)
    assert err.value.last_checkpoint.name == "GEN-2.ckpt"
    assert err.value.last_checkpoint.exists()
    last = json.loads((tmp_path / "train_log.jsonl").read_text().splitlines()[-1])
    assert last["phase"] == "halt"


def test_pairset_batches(tiny_dataset):
    ps = PairSet.from_manifest(tiny_dataset)
    rng = np.random.default_rng(0)
    batches = list(ps.batches(3, rng, crop=8))
    assert len(batches) == 2
    assert batches[0][0].shape == (3, 3, 8, 8)
    assert batches[0][0].min() >= -1 and batches[0][0].max() <= 1
