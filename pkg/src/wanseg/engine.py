"""Source training, the four adversarial adaptation regimes, fine-tuning and retention."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from wanseg.core.optim import Adam
from wanseg.core.tensor import Tensor
from wanseg.data.dataset import PatchSet
from wanseg.errors import ContractError
from wanseg.losses import LossWeights, adv_loss, disc_loss, generator_loss, seg_loss, weak_label_loss
from wanseg.metrics import evaluate_dataset
from wanseg.models import LATENT_SPACE, OUTPUT_SPACE, DetectionHead, Discriminator, UNetGenerator

log = logging.getLogger(__name__)

MODES = ("source_only", "osa", "lta", "os_wan", "lt_wan", "finetune")
ADVERSARIAL_MODES = ("osa", "lta", "os_wan", "lt_wan")
WAN_MODES = ("os_wan", "lt_wan")
OUTPUT_MODES = ("osa", "os_wan")
METHOD_NAMES = {"source_only": "baseline"}

# independent random streams derived from the run seed
STREAM_GENERATOR, STREAM_SOURCE, STREAM_TARGET, STREAM_DISC, STREAM_HEAD = range(5)


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


@dataclass
class AdaptConfig:
    """Hyperparameters of one run; ``None`` fields take mode-dependent defaults in ``resolved()``."""

    mode: str = "source_only"
    lr_generator: float = 1e-3
    lr_discriminator: Optional[float] = None
    lr_adversarial: float = 1e-6
    lambda_adv: Optional[float] = None
    alpha_hd: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    weight_decay: float = 1e-6
    batch_size: int = 8
    max_steps: int = 2000
    seed: int = 0
    eval_every: int = 0
    base_width: int = 32
    aux_width_factor: float = 1.0
    dtype: str = "float32"

    def resolved(self) -> "AdaptConfig":
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        LossWeights(self.lambda_adv or 0.0, self.alpha_hd or 0.0)
        latent = self.mode in ("lta", "lt_wan")
        c = dataclasses.replace(self)
        if c.lr_discriminator is None:
            c.lr_discriminator = 1e-5 if latent else 1e-4
        if c.lambda_adv is None:
            c.lambda_adv = (0.01 if latent else 0.1) if self.mode in ADVERSARIAL_MODES else 0.0
        if c.alpha_hd is None:
            c.alpha_hd = 0.1 if self.mode in WAN_MODES else 0.0
        if self.mode not in WAN_MODES:
            c.alpha_hd = 0.0
        if self.mode not in ADVERSARIAL_MODES:
            c.lambda_adv = 0.0
        for name in ("lr_generator", "lr_discriminator", "lr_adversarial"):
            v = getattr(c, name)
            if not (math.isfinite(v) and v > 0):
                raise ContractError(f"{name} must be positive, got {v}")
        if c.batch_size < 1 or c.max_steps < 0 or c.eval_every < 0:
            raise ContractError("batch_size >= 1, max_steps >= 0 and eval_every >= 0 required")
        if c.dtype not in ("float32", "float64"):
            raise ContractError(f"dtype must be float32 or float64, got {c.dtype!r}")
        LossWeights(c.lambda_adv, c.alpha_hd)
        return c

    @property
    def weights(self) -> LossWeights:
        r = self.resolved()
        return LossWeights(r.lambda_adv, r.alpha_hd)

    def config_hash(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in dataclasses.asdict(self.resolved()).items())
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    mode: str
    seed: int
    config_hash: str
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        cols = ["step", "seg_loss"]
        if self.mode in ADVERSARIAL_MODES:
            cols += ["adv_loss", "disc_loss"]
        if self.mode in WAN_MODES:
            cols.append("hd_loss")
        return cols

    def log_step(self, step: int, **losses: float) -> None:
        if self.steps and step <= self.steps[-1]["step"]:
            raise ContractError("step indices must strictly increase")
        for k, v in losses.items():
            if not math.isfinite(v):
                raise FloatingPointError(f"non-finite {k} at step {step}: {v}")
        self.steps.append({"step": step, **losses})

    def trace(self, key: str = "seg_loss") -> list[float]:
        return [s[key] for s in self.steps]

    def write_csv(self, path) -> None:
        cols = self.columns
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for s in self.steps:
                w.writerow([s["step"]] + [f"{s.get(c, 0.0):.10g}" for c in cols[1:]])

    def write_eval_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "source_iou", "target_iou"])
            for e in self.evals:
                w.writerow([e["step"], _fmt(e.get("source_iou")), _fmt(e.get("target_iou"))])


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


class BatchStream:
    """Endless shuffled index batches; the order depends only on the generator state."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n == 0:
            raise ContractError("cannot draw batches from an empty dataset")
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0

    def __next__(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._perm):
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return np.sort(idx)


def new_generator(config: AdaptConfig) -> UNetGenerator:
    return UNetGenerator(rng_for(config.seed, STREAM_GENERATOR), config.base_width, dtype=config.dtype)


def new_discriminator(config: AdaptConfig, generator: UNetGenerator) -> Discriminator:
    if config.mode in OUTPUT_MODES:
        return Discriminator(rng_for(config.seed, STREAM_DISC), OUTPUT_SPACE, 1,
                             config.aux_width_factor, dtype=config.dtype)
    return Discriminator(rng_for(config.seed, STREAM_DISC), LATENT_SPACE, generator.latent_channels,
                         config.aux_width_factor, dtype=config.dtype)


def new_head(config: AdaptConfig, generator: UNetGenerator) -> DetectionHead:
    return DetectionHead(rng_for(config.seed, STREAM_HEAD), generator.latent_channels, generator.widths[0],
                         config.aux_width_factor, dtype=config.dtype)


def _batch(images: np.ndarray, idx, dtype) -> Tensor:
    return Tensor(images[idx].astype(dtype, copy=False))


def _gather(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    grads = {}
    for k, p in params.items():
        grads[k] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return grads


def _maybe_eval(config, record, step, generator, source_eval, target_eval) -> None:
    if not config.eval_every or step % config.eval_every or (source_eval is None and target_eval is None):
        return
    entry = {"step": step}
    if source_eval is not None:
        entry["source_iou"] = evaluate_dataset(generator, source_eval).iou
    if target_eval is not None:
        entry["target_iou"] = evaluate_dataset(generator, target_eval).iou
    record.evals.append(entry)


def _supervised(config: AdaptConfig, dataset: PatchSet, generator: Optional[UNetGenerator], stream: int,
                source_eval=None, target_eval=None) -> tuple[UNetGenerator, RunRecord]:
    cfg = config.resolved()
    if not dataset.has_masks:
        raise ContractError("supervised training needs a dense mask for every sample")
    masks = dataset.masks
    if generator is None:
        generator = new_generator(cfg)
    record = RunRecord(cfg.mode, cfg.seed, cfg.config_hash())
    if cfg.max_steps == 0:
        return generator, record
    opt = Adam(generator.params, cfg.lr_generator, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    batches = BatchStream(len(dataset), cfg.batch_size, rng_for(cfg.seed, stream))
    dtype = next(generator.parameters()).dtype
    for step in range(1, cfg.max_steps + 1):
        idx = next(batches)
        _, seg, _ = generator(_batch(dataset.images, idx, dtype))
        loss = seg_loss(seg, masks[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        record.log_step(step, seg_loss=float(loss.data))
        _maybe_eval(cfg, record, step, generator, source_eval, target_eval)
    return generator, record


def train_source(config: AdaptConfig, source: PatchSet, generator: Optional[UNetGenerator] = None,
                 source_eval: Optional[PatchSet] = None,
                 target_eval: Optional[PatchSet] = None) -> tuple[UNetGenerator, RunRecord]:
    """Supervised segmentation training on the source domain (continues ``generator`` if given)."""
    return _supervised(config, source, generator, STREAM_SOURCE, source_eval, target_eval)


def finetune(config: AdaptConfig, generator: UNetGenerator, target_labeled: PatchSet,
             source_eval: Optional[PatchSet] = None,
             target_eval: Optional[PatchSet] = None) -> tuple[UNetGenerator, RunRecord]:
    """Supervised continuation on labelled target data: the upper-bound reference."""
    return _supervised(config, target_labeled, generator, STREAM_TARGET, source_eval, target_eval)


@dataclass
class AdaptResult:
    generator: UNetGenerator
    discriminator: Discriminator
    head: Optional[DetectionHead]
    record: RunRecord

    def __iter__(self):
        return iter((self.generator, self.discriminator, self.head, self.record))


def adapt(config: AdaptConfig, generator: UNetGenerator, source: PatchSet, target: PatchSet,
          source_eval: Optional[PatchSet] = None, target_eval: Optional[PatchSet] = None,
          discriminator: Optional[Discriminator] = None, head: Optional[DetectionHead] = None) -> AdaptResult:
    """Alternating adversarial adaptation.

    Per batch: one discriminator step on detached source/target representations,
    then one generator step. The generator step applies ``seg + alpha_hd * hd`` through
    an Adam group at ``lr_generator`` (with weight decay, covering the detection head too)
    and ``lambda_adv * adv`` through a second Adam group at ``lr_adversarial``. Both
    gradients are taken from the same forward pass before either update is applied.
    """
    cfg = config.resolved()
    if cfg.mode not in ADVERSARIAL_MODES:
        raise ContractError(f"adapt() handles {ADVERSARIAL_MODES}, got {cfg.mode!r}")
    if not source.has_masks:
        raise ContractError("source stream needs dense masks")
    wan = cfg.mode in WAN_MODES
    if wan and target.weak_labels is None:
        raise ContractError(f"{cfg.mode} needs image-level weak labels on every target sample")
    # the target stream is rebuilt without masks so no code path below can read them
    target = target.without_masks()
    source_masks = source.masks
    output_space = cfg.mode in OUTPUT_MODES
    weights = LossWeights(cfg.lambda_adv, cfg.alpha_hd)

    disc = discriminator if discriminator is not None else new_discriminator(cfg, generator)
    if wan and head is None:
        head = new_head(cfg, generator)
    betas = (cfg.beta1, cfg.beta2)
    main_params = dict(generator.params)
    if wan:
        main_params.update({f"head/{k}": p for k, p in head.params.items()})
    opt_main = Adam(main_params, cfg.lr_generator, betas, cfg.adam_eps, cfg.weight_decay)
    opt_adv = Adam(generator.params, cfg.lr_adversarial, betas, cfg.adam_eps, 0.0)
    opt_disc = Adam(disc.params, cfg.lr_discriminator, betas, cfg.adam_eps, cfg.weight_decay)

    record = RunRecord(cfg.mode, cfg.seed, cfg.config_hash())
    src_batches = BatchStream(len(source), cfg.batch_size, rng_for(cfg.seed, STREAM_SOURCE))
    tgt_batches = BatchStream(len(target), cfg.batch_size, rng_for(cfg.seed, STREAM_TARGET))
    dtype = next(generator.parameters()).dtype

    for step in range(1, cfg.max_steps + 1):
        si, ti = next(src_batches), next(tgt_batches)
        lat_s, seg_s, _ = generator(_batch(source.images, si, dtype))
        lat_t, seg_t, dec_t = generator(_batch(target.images, ti, dtype))
        rep_s, rep_t = (seg_s, seg_t) if output_space else (lat_s, lat_t)
        rep_size = seg_s.shape[2]  # scores are upsampled to image extent in both variants

        # discriminator step: the generator is not part of this graph
        disc.set_trainable(True)
        d_loss = disc_loss(disc(rep_s.detach(), rep_size), disc(rep_t.detach(), rep_size))
        d_loss.backward()
        opt_disc.step(_gather(disc.params))

        # generator step: discriminator frozen
        disc.set_trainable(False)
        s_loss = seg_loss(seg_s, source_masks[si])
        h_val = 0.0
        if wan and weights.alpha_hd > 0:
            h_loss = weak_label_loss(head(lat_t, dec_t), target.weak_labels[ti].reshape(-1, 1))
            main = generator_loss(s_loss, h_loss, weights)
            h_val = float(h_loss.data)
        else:
            main = s_loss
        main.backward()
        main_grads = _gather(main_params)
        adv_grads = None
        if weights.lambda_adv > 0:
            a_loss = adv_loss(disc(rep_t, rep_size))
            (weights.lambda_adv * a_loss).backward()
            adv_grads = _gather(generator.params)
            a_val = float(a_loss.data)
        else:
            a_val = float(adv_loss(disc(rep_t.detach(), rep_size)).data)
        opt_main.step(main_grads)
        if adv_grads is not None:
            opt_adv.step(adv_grads)
        disc.set_trainable(True)

        losses = {"seg_loss": float(s_loss.data), "adv_loss": a_val, "disc_loss": float(d_loss.data)}
        if wan:
            losses["hd_loss"] = h_val
        record.log_step(step, **losses)
        _maybe_eval(cfg, record, step, generator, source_eval, target_eval)
    return AdaptResult(generator, disc, head, record)


def evaluate_retention(generator_before: UNetGenerator, generator_after: UNetGenerator,
                       source_eval: PatchSet) -> tuple[float, float, float]:
    """Source IoU before/after and the relative drop ``(before - after) / before``."""
    if len(source_eval) == 0:
        raise ContractError("retention needs a non-empty evaluation set")
    before = evaluate_dataset(generator_before, source_eval).iou
    after = evaluate_dataset(generator_after, source_eval).iou
    drop = 0.0 if before == after else (before - after) / before if before > 0 else float("inf")
    return before, after, drop
