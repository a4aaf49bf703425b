"""Training loops, learning-rate schedule and resumable checkpoints.

Three run kinds share one loop:

* ``l1``: generator only, mean absolute error.
* ``perceptual``: stage 1 trains the generator alone on 1 - MS-SSIM; stage 2
  starts from that generator and alternates one discriminator update and one
  generator update (SSIM + alpha * l1 + beta * adversarial) per mini-batch.
* ``ssim`` / ``ms_ssim``: generator-only reference runs used to check the
  stages of the perceptual method in isolation.

Epochs are numbered globally, so in a perceptual run stage 2 continues the
learning-rate schedule where stage 1 stopped.  Everything is a deterministic
function of the dataset, the configuration and the seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import autodiff as ad
from ..core.autodiff import GradientTape, Tensor
from ..core.optim import AdamState, adam_step
from ..core.params import ParameterSet
from ..losses import (LossWeights, combined_generator_terms, l1_loss, ms_ssim_loss,
                      ragan_discriminator_loss, ssim_loss)
from ..models import (METHODS, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ModelBundle,
                      build_discriminator, build_generator, checksum64)
from .dataset import BlockPairDataset

CKPT_MAGIC = b"PPKC"
CKPT_VERSION = 1
LOG_HEADER = "epoch,step,loss_total,loss_ssim,loss_l1,loss_adv,lr"
RUN_KINDS = ("l1", "perceptual", "ssim", "ms_ssim")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "l1"
    epochs: int = 200
    stage1_epochs: int | None = None  # perceptual only; half of ``epochs`` when unset
    lr: float = 1e-4
    lr_decay: float = 0.1
    decay_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    seed: int = 0
    alpha: float = 0.025
    beta: float = 5e-3
    max_steps: int | None = None  # cap on updates per stage
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0 or self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("lr, batch_size and decay_every must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.stage1_epochs is not None and not 0 <= self.stage1_epochs <= self.epochs:
            raise ValueError(f"stage1_epochs must be in [0, {self.epochs}]")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        LossWeights(self.alpha, self.beta)
        if self.method == "perceptual" and \
                self.discriminator.input_block_size != self.generator.input_block_size:
            raise ValueError("generator and discriminator block sizes differ")

    @property
    def stage1(self) -> int:
        return self.epochs // 2 if self.stage1_epochs is None else self.stage1_epochs

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["generator"] = GeneratorConfig(**d["generator"])
        d["discriminator"] = DiscriminatorConfig(**d["discriminator"])
        return cls(**d)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Step decay: ``lr * lr_decay ** (epoch // decay_every)``."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.lr * config.lr_decay ** (epoch // config.decay_every)


def _phases(kind: str, config: TrainConfig) -> list[tuple[str, int, int]]:
    """(loss, first epoch, end epoch) for each stage of a run."""
    if kind == "perceptual":
        return [("ms_ssim", 0, config.stage1), ("gan", config.stage1, config.epochs)]
    return [(kind, 0, config.epochs)]


@dataclass
class TrainState:
    kind: str
    config: TrainConfig
    generator: ParameterSet
    discriminator: ParameterSet | None
    adam_g: AdamState
    adam_d: AdamState | None
    rng: np.random.Generator
    dataset_digest: str
    phase: int = 0
    epoch: int = 0
    step: int = 0
    phase_step: int = 0
    history: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    stage1: dict | None = None
    stage2_initial: dict | None = None

    @property
    def finished(self) -> bool:
        return self.epoch >= self.config.epochs


@dataclass
class TrainResult:
    bundle: ModelBundle | None
    state: TrainState

    @property
    def history(self) -> list:
        return self.state.history

    @property
    def trace(self) -> list:
        return self.state.trace


def dataset_digest(ds: BlockPairDataset) -> str:
    h = hashlib.blake2b(digest_size=16)
    for arr in (ds.compressed, ds.original):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _seeds(seed: int):
    """Independent integer seeds for generator init, discriminator init and data order."""
    return tuple(int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(3))


def _fresh_adam(config: TrainConfig) -> AdamState:
    return AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2)


def initial_state(kind: str, dataset: BlockPairDataset, config: TrainConfig) -> TrainState:
    if kind not in RUN_KINDS:
        raise ValueError(f"unknown run kind {kind!r}")
    g_seed, d_seed, o_seed = _seeds(config.seed)
    gen = build_generator(config.generator, seed=g_seed).params
    disc = build_discriminator(config.discriminator, seed=d_seed).params if kind == "perceptual" else None
    return TrainState(kind, config, gen, disc, _fresh_adam(config), None, np.random.default_rng(o_seed),
                      dataset_digest(dataset))


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    if n <= batch_size:
        return [order]
    return [order[i * batch_size : (i + 1) * batch_size] for i in range(n // batch_size)]


def _generator_step(gen: Generator, adam: AdamState, x: np.ndarray, y: np.ndarray, loss: str,
                    lr: float) -> dict:
    params = gen.params.trainable()
    with GradientTape() as tape:
        tape.watch(params.values())
        out = gen(Tensor(x))
        fn = {"l1": l1_loss, "ssim": ssim_loss, "ms_ssim": ms_ssim_loss}[loss]
        value = fn(out, Tensor(y))
    adam_step(adam, gen.params, tape.gradient(value, params), lr)
    v = value.item()
    return {"total": v, "l1": v if loss == "l1" else None, "ssim": None if loss == "l1" else v, "adv": None}


def discriminator_step(disc: Discriminator, adam: AdamState, real: np.ndarray, fake: np.ndarray,
                       lr: float) -> float:
    """One relativistic discriminator update on a joint real + fake batch.

    Real and fake blocks share a single training-mode forward pass, so batch
    normalisation sees both populations.  Running statistics are updated.
    """
    n = len(real)
    params = disc.params.trainable()
    with GradientTape() as tape:
        tape.watch(params.values())
        s = disc(ad.concat([Tensor(real), Tensor(fake)]), mode="train", update_stats=True)
        loss = ragan_discriminator_loss(ad.take_rows(s, 0, n), ad.take_rows(s, n, 2 * n))
    adam_step(adam, disc.params, tape.gradient(loss, params), lr)
    return loss.item()


def _gan_step(gen: Generator, disc: Discriminator, state: TrainState, x, y, lr: float) -> dict:
    cfg = state.config
    gp = gen.params.trainable()
    n = len(x)
    tape = GradientTape()
    with tape:
        tape.watch(gp.values())
        fake = gen(Tensor(x))
    d_loss = discriminator_step(disc, state.adam_d, y, fake.data, lr)
    with tape:
        s = disc(ad.concat([Tensor(y), fake]), mode="train")
        terms = combined_generator_terms(fake, Tensor(y), ad.take_rows(s, 0, n), ad.take_rows(s, n, 2 * n),
                                         LossWeights(cfg.alpha, cfg.beta))
    adam_step(state.adam_g, gen.params, tape.gradient(terms["total"], gp), lr)
    out = {k: v.item() for k, v in terms.items()}
    return {"total": out["total"], "ssim": out["ssim"], "l1": out["l1"], "adv": out["adv"], "d": d_loss}


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


class _Log:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path and (not self.path.exists() or self.path.stat().st_size == 0):
            self.path.write_text(LOG_HEADER + "\n", encoding="utf-8")

    def rows(self, rows: list[str]) -> None:
        if self.path and rows:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write("".join(r + "\n" for r in rows))


def _enter_phase(state: TrainState, idx: int) -> None:
    """Apply the stage transition into phase ``idx`` exactly once."""
    if idx == state.phase:
        return
    state.phase = idx
    state.phase_step = 0
    if state.kind == "perceptual" and idx == 1:
        state.stage1 = state.generator.arrays()
        # Stage 2 starts from the stage-1 generator with fresh optimiser moments.
        state.adam_g = _fresh_adam(state.config)
        state.adam_d = _fresh_adam(state.config)


def run(state: TrainState, dataset: BlockPairDataset, log_path=None, checkpoint_path=None,
        stop_after_epoch: int | None = None) -> TrainState:
    """Advance ``state`` until training ends or ``stop_after_epoch`` completes.

    A checkpoint (when requested) is written after every epoch.
    """
    cfg = state.config
    if len(dataset) == 0:
        raise ValueError("training needs a non-empty dataset")
    if dataset.block_size != cfg.generator.input_block_size:
        raise ValueError(f"dataset blocks are {dataset.block_size}px, generator expects "
                         f"{cfg.generator.input_block_size}px")
    if dataset_digest(dataset) != state.dataset_digest:
        raise CheckpointError("dataset differs from the one this run started with")
    log = _Log(log_path)
    gen = Generator(cfg.generator, state.generator)
    disc = Discriminator(cfg.discriminator, state.discriminator) if state.discriminator is not None else None
    for idx, (loss, first, end) in enumerate(_phases(state.kind, cfg)):
        if state.epoch >= end:
            continue
        _enter_phase(state, idx)
        while state.epoch < end:
            epoch = state.epoch
            lr = lr_at_epoch(cfg, epoch)
            rows, totals, d_losses = [], [], []
            capped = False
            for batch in _epoch_batches(len(dataset), cfg.batch_size, state.rng):
                x, y = dataset.batch(batch, gen.dtype)
                if loss == "gan":
                    if state.stage2_initial is None:
                        state.stage2_initial = state.generator.arrays()
                    terms = _gan_step(gen, disc, state, x, y, lr)
                    d_losses.append(terms["d"])
                else:
                    terms = _generator_step(gen, state.adam_g, x, y, loss, lr)
                state.step += 1
                state.phase_step += 1
                totals.append(terms["total"])
                state.trace.append(terms["total"])
                rows.append(f"{epoch},{state.step},{_fmt(terms['total'])},{_fmt(terms['ssim'])},"
                            f"{_fmt(terms['l1'])},{_fmt(terms['adv'])},{_fmt(lr)}")
                if cfg.max_steps is not None and state.phase_step >= cfg.max_steps:
                    capped = True
                    break
            log.rows(rows)
            state.history.append({"phase": loss, "epoch": epoch, "steps": len(totals),
                                  "loss_total": float(np.mean(totals)),
                                  "loss_d": float(np.mean(d_losses)) if d_losses else None})
            state.epoch = end if capped else epoch + 1
            if checkpoint_path:
                save_checkpoint(state, checkpoint_path)
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                return state
    return state


def _bundle(state: TrainState, dataset: BlockPairDataset) -> ModelBundle | None:
    if state.kind not in METHODS:
        return None
    cfg = state.config
    return ModelBundle(
        codec=dataset.codec, qp_group=dataset.qp_group, method=state.kind,
        generator_config=cfg.generator, generator_params=state.generator,
        discriminator_config=cfg.discriminator if state.discriminator is not None else None,
        discriminator_params=state.discriminator,
        extra={"seed": str(cfg.seed), "steps": str(state.step), "epochs": str(cfg.epochs)},
    )


def _train(kind: str, dataset: BlockPairDataset, config: TrainConfig, seed: int | None, log_path,
           checkpoint_path, resume, stop_after_epoch) -> TrainResult:
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    if len(dataset) == 0:
        raise ValueError("training needs a non-empty dataset")
    if resume is not None:
        state = load_checkpoint(resume, expect_config=config, expect_kind=kind)
    else:
        state = initial_state(kind, dataset, config)
    state = run(state, dataset, log_path, checkpoint_path, stop_after_epoch)
    return TrainResult(_bundle(state, dataset) if state.finished else None, state)


def train_l1(dataset: BlockPairDataset, config: TrainConfig, seed: int | None = None, log_path=None,
             checkpoint_path=None, resume=None, stop_after_epoch: int | None = None) -> TrainResult:
    """Generator-only training on the l1 loss."""
    return _train("l1", dataset, dataclasses.replace(config, method="l1"), seed, log_path,
                  checkpoint_path, resume, stop_after_epoch)


def train_perceptual(dataset: BlockPairDataset, config: TrainConfig, seed: int | None = None,
                     log_path=None, checkpoint_path=None, resume=None,
                     stop_after_epoch: int | None = None) -> TrainResult:
    """Two-stage training: MS-SSIM warm-up, then joint relativistic GAN training."""
    return _train("perceptual", dataset, dataclasses.replace(config, method="perceptual"), seed, log_path,
                  checkpoint_path, resume, stop_after_epoch)


def train_generator_only(dataset: BlockPairDataset, config: TrainConfig, loss: str = "ssim",
                         seed: int | None = None, log_path=None) -> TrainResult:
    """Reference run optimising a single SSIM-type loss; returns no bundle."""
    if loss not in ("ssim", "ms_ssim"):
        raise ValueError(f"reference runs use 'ssim' or 'ms_ssim', got {loss!r}")
    return _train(loss, dataset, config, seed, log_path, None, None, None)


# Checkpoints

def _state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    out = {f"g/{k}": v for k, v in state.generator.arrays().items()}
    if state.discriminator is not None:
        out.update({f"d/{k}": v for k, v in state.discriminator.arrays().items()})
    for prefix, adam in (("ag", state.adam_g), ("ad", state.adam_d)):
        if adam is not None:
            out.update({f"{prefix}/{k}": v for k, v in adam.arrays().items()})
    for prefix, snap in (("s1", state.stage1), ("s2", state.stage2_initial)):
        if snap is not None:
            out.update({f"{prefix}/{k}": v for k, v in snap.items()})
    return out


def _adam_meta(adam: AdamState | None):
    if adam is None:
        return None
    return {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t,
            "names": list(adam.m)}


def checkpoint_to_bytes(state: TrainState) -> bytes:
    arrays = _state_arrays(state)
    header = {
        "kind": state.kind, "config": state.config.to_dict(), "dataset_digest": state.dataset_digest,
        "phase": state.phase, "epoch": state.epoch, "step": state.step, "phase_step": state.phase_step,
        "rng": state.rng.bit_generator.state, "history": state.history, "trace": state.trace,
        "adam_g": _adam_meta(state.adam_g), "adam_d": _adam_meta(state.adam_d),
        "has_stage1": state.stage1 is not None, "has_stage2_initial": state.stage2_initial is not None,
        "arrays": [[k, v.dtype.str, list(v.shape)] for k, v in arrays.items()],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(head)), head]
    parts += [np.ascontiguousarray(v).tobytes() for v in arrays.values()]
    payload = b"".join(parts)
    return payload + checksum64(payload)


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_to_bytes(state))
    os.replace(tmp, path)


def _restore_adam(meta, arrays: dict, prefix: str) -> AdamState | None:
    if meta is None:
        return None
    adam = AdamState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"], t=meta["t"])
    for name in meta["names"]:
        adam.m[name] = arrays[f"{prefix}/m/{name}"].copy()
        adam.v[name] = arrays[f"{prefix}/v/{name}"].copy()
    return adam


def checkpoint_from_bytes(raw: bytes) -> TrainState:
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError("not a training checkpoint (bad magic bytes)")
    if len(raw) < 18:
        raise CheckpointError("checkpoint truncated")
    version, head_len = struct.unpack("<HI", raw[4:10])
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, this build reads {CKPT_VERSION}")
    if checksum64(raw[:-8]) != raw[-8:]:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    header = json.loads(raw[10 : 10 + head_len].decode("utf-8"))
    pos = 10 + head_len
    arrays = {}
    for name, dt, shape in header["arrays"]:
        dtype = np.dtype(dt)
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype, count, pos).reshape(shape).copy()
        pos += count * dtype.itemsize
    if pos != len(raw) - 8:
        raise CheckpointError("checkpoint payload size does not match its header")
    config = TrainConfig.from_dict(header["config"])
    kind = header["kind"]
    g_seed, d_seed, _ = _seeds(config.seed)
    gen = build_generator(config.generator, seed=g_seed).params
    gen.load_arrays({k[2:]: v for k, v in arrays.items() if k.startswith("g/")})
    disc = None
    if any(k.startswith("d/") for k in arrays):
        disc = build_discriminator(config.discriminator, seed=d_seed).params
        disc.load_arrays({k[2:]: v for k, v in arrays.items() if k.startswith("d/")})
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]

    def snap(prefix, present):
        return {k[3:]: v for k, v in arrays.items() if k.startswith(prefix + "/")} if present else None

    return TrainState(
        kind=kind, config=config, generator=gen, discriminator=disc,
        adam_g=_restore_adam(header["adam_g"], arrays, "ag"), adam_d=_restore_adam(header["adam_d"], arrays, "ad"),
        rng=rng, dataset_digest=header["dataset_digest"], phase=header["phase"], epoch=header["epoch"],
        step=header["step"], phase_step=header["phase_step"], history=header["history"], trace=header["trace"],
        stage1=snap("s1", header["has_stage1"]), stage2_initial=snap("s2", header["has_stage2_initial"]),
    )


def load_checkpoint(path, expect_config: TrainConfig | None = None, expect_kind: str | None = None) -> TrainState:
    state = checkpoint_from_bytes(Path(path).read_bytes())
    if expect_kind is not None and state.kind != expect_kind:
        raise CheckpointError(f"checkpoint is from a {state.kind} run, not {expect_kind}")
    if expect_config is not None and state.config != expect_config:
        if state.config.generator != expect_config.generator:
            raise CheckpointError(f"checkpoint generator {state.config.generator} does not match "
                                  f"{expect_config.generator}")
        diff = [f.name for f in dataclasses.fields(TrainConfig)
                if getattr(state.config, f.name) != getattr(expect_config, f.name)]
        raise CheckpointError(f"checkpoint training config differs in: {', '.join(diff)}")
    return state
