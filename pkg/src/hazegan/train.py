"""Two-phase training: content-only generator pretraining, then adversarial fine-tuning.

Phase 1 trains the generator with the ``GEN`` loss preset and writes
``GEN-<epoch>.ckpt`` files. Phase 2 reloads the last phase-1 checkpoint (or
``warm_start``) and, per batch, performs ``d_steps`` discriminator updates
followed by one generator update under the chosen variant preset.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataset import PairSet, from_network
from .io import Manifest
from .losses import (
    LossWeights,
    adversarial_d_loss,
    adversarial_g_loss,
    combined_loss,
    feature_loss,
    l2_loss,
    preset,
    smooth_l1_loss,
)
from .metrics import psnr, ssim
from .models import Discriminator, FeatureNet, Generator
from .nn import frozen_params, frozen_stats
from .optim import Adam, NonFiniteGradientError
from .runtime import thread_limit
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    variant: str = "CANDY-L1-9P"
    batch_size: int = 4
    crop_size: int | None = 256
    pretrain_epochs: int = 500
    adversarial_epochs: int = 500
    seed: int = 0
    eval_every: int = 50
    checkpoint_every: int = 50
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    d_steps: int = 1
    # batch-norm mode of the generator when it renders fakes for a D update
    fake_bn_mode: str = "train"
    prelu_channels: int = 1
    feature_seed: int = 0x5EED
    feature_checkpoint: str | None = None
    warm_start: str | None = None
    loss_weights: dict | None = None
    deterministic: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.pretrain_epochs < 0 or self.adversarial_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.fake_bn_mode not in ("train", "eval"):
            raise ValueError("fake_bn_mode must be 'train' or 'eval'")
        if self.d_steps < 1:
            raise ValueError("d_steps must be >= 1")
        self.weights()

    def weights(self) -> LossWeights:
        w = preset(self.variant)
        if self.loss_weights:
            w = LossWeights(**{**w.to_dict(), **self.loss_weights})
        return w


# ---------------------------------------------------------------- single steps


def train_step_discriminator(hazy: np.ndarray, clean: np.ndarray, G: Generator, D: Discriminator, opt_D: Adam,
                             fake_bn_mode: str = "train") -> dict:
    """One D update on a real pair (hazy, clean) and a fake pair (hazy, G(hazy))."""
    hz, cl = Tensor(hazy), Tensor(clean)
    was_training = G.training
    with T.no_grad(), frozen_stats(G):
        G.train(fake_bn_mode == "train")
        fake = G(hz)
    G.train(was_training)
    opt_D.zero_grad()
    d_real = D(T.channel_concat(hz, cl))
    d_fake = D(T.channel_concat(hz, fake))
    loss = adversarial_d_loss(d_real, d_fake)
    T.backward(loss)
    opt_D.step()
    return {
        "d_loss": loss.item(),
        "d_real": float(d_real.data.mean()),
        "d_fake": float(d_fake.data.mean()),
        "d_min": float(min(d_real.data.min(), d_fake.data.min())),
        "d_max": float(max(d_real.data.max(), d_fake.data.max())),
    }


def train_step_generator(hazy: np.ndarray, clean: np.ndarray, G: Generator, D: Discriminator | None, opt_G: Adam,
                         weights: LossWeights, features: FeatureNet | None) -> dict:
    """One G update on the weighted objective; D (if used) is read but never changed."""
    hz, cl = Tensor(hazy), Tensor(clean)
    opt_G.zero_grad()
    out = G(hz)
    comps = {"l2": l2_loss(cl, out), "s1": smooth_l1_loss(cl, out)}
    if weights.w_feat > 0:
        if features is None:
            raise ValueError("feature loss requested but no feature network given")
        comps["feat"] = feature_loss(features, cl, out, weights.tap)
    if weights.adversarial:
        if D is None:
            raise ValueError("adversarial weight set but no discriminator given")
        with frozen_params(D), frozen_stats(D):
            comps["adv"] = adversarial_g_loss(D(T.channel_concat(hz, out)))
    report = combined_loss(weights, comps)
    T.backward(report.total)
    opt_G.step()
    terms = dict(report.terms)
    terms["content"] = weights.w_l2 * terms["l2"] + weights.w_s1 * terms["s1"]
    return terms


# ---------------------------------------------------------------- evaluation


def dehaze_array(G: Generator, image: np.ndarray) -> np.ndarray:
    """H x W x 3 [0, 1] image -> dehazed image, generator in eval mode."""
    was = G.training
    G.eval()
    try:
        with T.no_grad():
            x = Tensor((np.transpose(image, (2, 0, 1)) * 2.0 - 1.0)[None])
            y = G(x).data[0]
    finally:
        G.train(was)
    return from_network(y.astype(np.float64))


def validate(G: Generator, pairs: PairSet) -> dict:
    ps, ss = [], []
    for hz, cl in zip(pairs.hazy, pairs.clean):
        clean_img = from_network(cl)
        out = dehaze_array(G, from_network(hz))
        ps.append(psnr(clean_img, out))
        if min(clean_img.shape[:2]) >= 11:
            ss.append(ssim(clean_img, out))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)) if ss else math.nan}


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    out_dir: Path
    log_path: Path
    checkpoints: list[Path] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)

    @property
    def final_checkpoint(self) -> Path | None:
        return self.checkpoints[-1] if self.checkpoints else None


class _Run:
    def __init__(self, cfg: TrainConfig, train: PairSet, val: PairSet | None, out_dir: Path):
        self.cfg = cfg
        self.train = train
        self.val = val
        self.out_dir = out_dir
        self.result = TrainResult(out_dir, out_dir / "train_log.jsonl")
        self.step = 0
        self.t0 = time.perf_counter()
        seeds = np.random.SeedSequence(cfg.seed).spawn(4)
        self.g_seed, self.d_seed = (int(s.generate_state(1)[0]) for s in seeds[:2])
        self.batch_rngs = [np.random.default_rng(s) for s in seeds[2:]]
        self.features = self._feature_net()
        self._log = open(self.result.log_path, "w")

    def close(self):
        self._log.close()

    def _feature_net(self) -> FeatureNet:
        net = FeatureNet(seed=self.cfg.feature_seed)
        if self.cfg.feature_checkpoint:
            load_checkpoint(self.cfg.feature_checkpoint).restore("features", net)
        return net

    def emit(self, rec: dict) -> None:
        self.result.records.append(rec)
        self._log.write(json.dumps(rec) + "\n")
        self._log.flush()

    def _adam(self, module) -> Adam:
        c = self.cfg
        return Adam(module, lr=c.lr, beta1=c.beta1, beta2=c.beta2, eps=c.adam_eps)

    def save(self, name: str, G: Generator, D: Discriminator | None, epoch: int, phase: str,
             weights: LossWeights, opt_G: Adam, opt_D: Adam | None) -> Path:
        models = {"generator": G}
        extra = {"adam.generator": opt_G.state_arrays()}
        meta = {"variant": name.rsplit("-", 1)[0], "epoch": epoch, "phase": phase, "seed": self.cfg.seed,
                "loss_weights": weights.to_dict(), "adam_step_generator": opt_G.state.t}
        if D is not None and opt_D is not None:
            models["discriminator"] = D
            extra["adam.discriminator"] = opt_D.state_arrays()
            meta["adam_step_discriminator"] = opt_D.state.t
        path = save_checkpoint(self.out_dir / f"{name}.ckpt", models, meta, extra)
        self.result.checkpoints.append(path)
        return path

    def maybe_validate(self, G: Generator, epoch: int, phase: str, last: bool) -> None:
        if self.val is None or not len(self.val):
            return
        if not last and (self.cfg.eval_every <= 0 or epoch % self.cfg.eval_every):
            return
        scores = validate(G, self.val)
        self.emit({"step": self.step, "phase": f"{phase}-val", "epoch": epoch, **scores})

    def run_phase(self, phase: str, G: Generator, weights: LossWeights, epochs: int, name_offset: int,
                  name_prefix: str, rng: np.random.Generator) -> None:
        cfg = self.cfg
        D = opt_D = None
        if weights.adversarial:
            D = Discriminator(seed=self.d_seed)
            opt_D = self._adam(D)
        opt_G = self._adam(G)
        for epoch in range(1, epochs + 1):
            for hazy, clean in self.train.batches(cfg.batch_size, rng, cfg.crop_size):
                start = time.perf_counter()
                rec = {"step": self.step, "phase": phase, "d_loss": None, "g_adv": None}
                try:
                    if D is not None:
                        for _ in range(cfg.d_steps):
                            d = train_step_discriminator(hazy, clean, G, D, opt_D, cfg.fake_bn_mode)
                        rec.update(d_loss=d["d_loss"], d_min=d["d_min"], d_max=d["d_max"])
                    terms = train_step_generator(hazy, clean, G, D, opt_G, weights, self.features)
                except (T.NonFiniteError, NonFiniteGradientError) as exc:
                    self._diverged(f"step {self.step} ({phase}): {exc}")
                if not all(math.isfinite(v) for v in terms.values()):
                    self._diverged(f"step {self.step} ({phase}): non-finite loss {terms}")
                rec.update(g_adv=terms.get("adv"), l2=terms["l2"], s1=terms["s1"], feat=terms.get("feat"),
                           content=terms["content"], total=terms["total"],
                           wall_ms=round((time.perf_counter() - start) * 1000, 3))
                self.emit(rec)
                self.step += 1
            last = epoch == epochs
            if last or (cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0):
                self.save(f"{name_prefix}-{epoch + name_offset}", G, D, epoch + name_offset, phase, weights, opt_G, opt_D)
            self.maybe_validate(G, epoch + name_offset, phase, last)

    def _diverged(self, message: str):
        last = self.result.final_checkpoint
        self.emit({"step": self.step, "phase": "halt", "error": message,
                   "last_checkpoint": str(last) if last else None})
        raise TrainingDiverged(message, last)


def train_loop(cfg: TrainConfig, train_manifest: Manifest, val_manifest: Manifest | None,
               out_dir: str | Path) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = PairSet.from_manifest(train_manifest)
    if not len(train):
        raise ValueError("training manifest has no pairs")
    val = PairSet.from_manifest(val_manifest) if val_manifest is not None else None
    (out_dir / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))

    guard = thread_limit(1) if cfg.deterministic else contextlib.nullcontext()
    run = _Run(cfg, train, val, out_dir)
    try:
        with guard:
            G = Generator(seed=run.g_seed, prelu_channels=cfg.prelu_channels)
            warm: Path | None = Path(cfg.warm_start) if cfg.warm_start else None
            if warm is None and cfg.pretrain_epochs > 0:
                run.run_phase("pretrain", G, preset("GEN"), cfg.pretrain_epochs, 0, "GEN", run.batch_rngs[0])
                warm = run.result.final_checkpoint
            if cfg.adversarial_epochs > 0:
                if warm is not None:
                    # phase 2 always restarts from the stored weights, not the live objects
                    G = Generator(seed=run.g_seed, prelu_channels=cfg.prelu_channels)
                    load_checkpoint(warm).restore("generator", G)
                weights = cfg.weights()
                offset = cfg.pretrain_epochs if (cfg.variant == "GEN" and not cfg.warm_start) else 0
                run.run_phase("adversarial" if weights.adversarial else "content", G, weights,
                              cfg.adversarial_epochs, offset, cfg.variant, run.batch_rngs[1])
    finally:
        run.close()
    return run.result


def load_generator(path: str | Path) -> tuple[Generator, Checkpoint]:
    ckpt = load_checkpoint(path)
    state = ckpt.slot("generator")
    prelu = state["conv1.act.leak"].shape[0]
    G = Generator(prelu_channels=prelu)
    G.load_state_dict(state)
    return G, ckpt
