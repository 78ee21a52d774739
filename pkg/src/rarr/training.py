"""Losses, the pretraining and fine-tuning loops, and the four experiment variants."""

from __future__ import annotations

import copy
import enum
import json
import logging
from dataclasses import dataclass, field, replace
from typing import IO, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import rng
from .dataset import LABELS, Corpus, DatasetError, Modality, corpus_features, split
from .model import ArchMeta, ForwardOutput, LatentSequence, ModelError, MultitaskVAE, build_model

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


class FreezePolicy(str, enum.Enum):
    NONE = "none"
    TASK_SELECTIVE = "task_selective"
    FULL_FINETUNE = "full_finetune"


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_rec: float = 1.0
    beta_kl: float = 1e-3
    kl_warmup_epochs: int = 5

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_rec", "beta_kl"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise TrainingError(f"{name} must be finite and >= 0, got {v}")
        if self.kl_warmup_epochs < 0:
            raise TrainingError("kl_warmup_epochs must be >= 0")

    def beta_at(self, epoch: int) -> float:
        """KL weight for a 0-based epoch: linear ramp from 0 over the warmup."""
        if self.kl_warmup_epochs == 0:
            return self.beta_kl
        return self.beta_kl * min(1.0, epoch / self.kl_warmup_epochs)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    freeze_policy: FreezePolicy = FreezePolicy.NONE
    patience: int = 10

    def __post_init__(self):
        if self.epochs < 0:
            raise TrainingError("epochs must be >= 0")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be > 0")
        object.__setattr__(self, "freeze_policy", FreezePolicy(self.freeze_policy))


PRETRAIN_CONFIG = TrainConfig()
FINETUNE_CONFIG = TrainConfig(epochs=100, batch_size=8, learning_rate=5e-4,
                              freeze_policy=FreezePolicy.TASK_SELECTIVE)


# -- losses ------------------------------------------------------------------


def kl_gaussian(latent: LatentSequence) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over latent cells, averaged over batch."""
    mu, sigma = latent
    if bool((sigma <= 0).any()):
        raise ModelError("sigma must be strictly positive")
    if mu.dim() == 2:
        mu, sigma = mu.unsqueeze(0), sigma.unsqueeze(0)
    cell = mu.pow(2) + sigma.pow(2) - 2.0 * torch.log(sigma) - 1.0
    return 0.5 * cell.flatten(1).sum(1).mean()


def multitask_loss(out: ForwardOutput, x: torch.Tensor, y: torch.Tensor, w: LossWeights,
                   epoch: int) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    logits = out.logits if out.logits.dim() == 2 else out.logits.unsqueeze(0)
    y = torch.as_tensor(y).reshape(-1)
    n_classes = logits.shape[-1]
    if bool(((y < 0) | (y >= n_classes)).any()):
        raise TrainingError(f"label outside [0, {n_classes})")
    cls = F.cross_entropy(logits, y)
    rec = F.mse_loss(out.reconstruction, x.reshape(out.reconstruction.shape))
    kl = kl_gaussian(out.latent)
    beta = w.beta_at(epoch)
    total = w.lambda_cls * cls + w.lambda_rec * rec + beta * kl
    return total, {"cls": cls, "rec": rec, "kl": kl, "beta_eff": torch.tensor(beta)}


# -- batching & logging --------------------------------------------------------


def stratified_batches(labels: np.ndarray, batch_size: int, g: np.random.Generator) -> list[np.ndarray]:
    """Shuffle within each label, interleave labels round-robin, then chunk."""
    labels = np.asarray(labels)
    pools = [g.permutation(np.flatnonzero(labels == lab)) for lab in np.unique(labels)]
    order = []
    for i in range(max(len(p) for p in pools)):
        for j in g.permutation(len(pools)):
            if i < len(pools[j]):
                order.append(pools[j][i])
    order = np.asarray(order, dtype=np.int64)
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


class MetricsLog:
    """Line-delimited JSON metrics sink; keeps records in memory too."""

    def __init__(self, fh: Optional[IO[str]] = None):
        self.fh = fh
        self.records: list[dict] = []

    def write(self, **rec) -> None:
        rec = {k: (round(float(v), 8) if isinstance(v, (float, np.floating)) else v) for k, v in rec.items()}
        self.records.append(rec)
        if self.fh is not None:
            self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self.fh.flush()


@dataclass
class FitResult:
    best_epoch: int
    history: list[dict]


def _as_tensors(features: np.ndarray, labels: np.ndarray):
    return torch.from_numpy(np.ascontiguousarray(features)), torch.from_numpy(np.asarray(labels, dtype=np.int64))


def _snapshot(model: MultitaskVAE) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _fit(model: MultitaskVAE, train: tuple, val: tuple, cfg: TrainConfig, *, phase: str,
         use_adapter: bool, classification_only: bool, select: str,
         metrics: Optional[MetricsLog] = None) -> FitResult:
    """Shared mini-batch loop.

    ``select`` is ``"loss"`` (lowest validation total loss) or ``"accuracy"``
    (highest validation accuracy, ties to lower loss). Epoch 0 is the
    untrained state, so the selected model never scores worse than the start.
    With ``classification_only`` and a frozen encoder the encoder latents are
    computed once and reused every epoch.
    """
    metrics = metrics or MetricsLog()
    x_tr, y_tr = _as_tensors(*train)
    x_va, y_va = _as_tensors(*val)
    params = model.trainable_parameters()
    opt = torch.optim.Adam(params, lr=cfg.learning_rate) if params else None
    eps_gen = rng.torch_generator(cfg.seed, phase, "eps")
    cache = classification_only and model.freeze_mask.get("encoder", False)
    if cache:
        with torch.no_grad():
            enc_tr = _encode_batched(model, x_tr)
            enc_va = _encode_batched(model, x_va)

    def run_split(x, y, enc, epoch: int, train_mode: bool, batches) -> dict:
        sums = {"total": 0.0, "cls": 0.0, "rec": 0.0, "kl": 0.0}
        correct, n = 0, 0
        val_gen = rng.torch_generator(cfg.seed, phase, "val-eps")
        for idx in batches:
            idx_t = torch.from_numpy(idx)
            xb, yb = x[idx_t], y[idx_t]
            gen = eps_gen if train_mode else val_gen
            with torch.set_grad_enabled(train_mode):
                if classification_only:
                    latent = LatentSequence(enc.mu[idx_t], enc.sigma[idx_t]) if cache else model.encode(xb)
                    if use_adapter:
                        latent = model.adapt(latent)
                    logits = model.classify(latent.mu)
                    loss = F.cross_entropy(logits, yb)
                    comps = {"cls": loss}
                else:
                    out = model(xb, use_adapter=use_adapter, generator=gen)
                    logits = out.logits
                    loss, comps = multitask_loss(out, xb, yb, cfg.weights, epoch)
                    if comps["kl"].item() < 0:
                        raise TrainingError("negative KL divergence")
            if train_mode:
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
            b = len(idx)
            sums["total"] += loss.item() * b
            for k in ("cls", "rec", "kl"):
                if k in comps:
                    sums[k] += comps[k].item() * b
            correct += int((logits.argmax(1) == yb).sum())
            n += b
        rec = {k: v / max(n, 1) for k, v in sums.items()}
        rec["accuracy"] = correct / max(n, 1)
        return rec

    eval_batches = lambda n: [np.arange(i, min(i + 64, n)) for i in range(0, n, 64)]  # noqa: E731
    enc_tr_ = enc_tr if cache else None
    enc_va_ = enc_va if cache else None

    def score(rec):
        if select == "loss":
            return (-rec["total"],)
        return (rec["accuracy"], -rec["total"])

    model.eval()
    history = []
    va = run_split(x_va, y_va, enc_va_, 0, False, eval_batches(len(x_va)))
    metrics.write(phase=phase, epoch=0, split="val", **va)
    history.append({"epoch": 0, "val": va})
    best, best_epoch, best_state = score(va), 0, _snapshot(model)
    best_loss, stale = va["total"], 0
    for epoch in range(1, cfg.epochs + 1):
        if opt is None:
            break
        batches = stratified_batches(y_tr.numpy(), cfg.batch_size, rng.stream(cfg.seed, phase, "batch", epoch))
        model.train()
        tr = run_split(x_tr, y_tr, enc_tr_, epoch - 1, True, batches)
        model.eval()
        va = run_split(x_va, y_va, enc_va_, epoch - 1, False, eval_batches(len(x_va)))
        metrics.write(phase=phase, epoch=epoch, split="train", **tr)
        metrics.write(phase=phase, epoch=epoch, split="val", **va)
        history.append({"epoch": epoch, "train": tr, "val": va})
        if score(va) > best:
            best, best_epoch, best_state = score(va), epoch, _snapshot(model)
        if va["total"] < best_loss:
            best_loss, stale = va["total"], 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                log.info("%s: early stop at epoch %d", phase, epoch)
                break
    model.load_state_dict(best_state)
    model.eval()
    return FitResult(best_epoch, history)


@torch.no_grad()
def _encode_batched(model: MultitaskVAE, x: torch.Tensor, batch_size: int = 64) -> LatentSequence:
    parts = [model.encode(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    if not parts:
        shape = (0, model.arch.d, model.arch.T_latent)
        return LatentSequence(torch.zeros(shape), torch.ones(shape))
    return LatentSequence(torch.cat([p.mu for p in parts]), torch.cat([p.sigma for p in parts]))


# -- phases ------------------------------------------------------------------


def _require(corpus: Corpus, modality: Modality, what: str) -> None:
    if len(corpus) == 0:
        raise TrainingError(f"{what}: empty corpus")
    if corpus.modality is not modality:
        raise TrainingError(f"{what}: expected a {modality.value} corpus, got {corpus.modality.value}")
    if len(corpus.class_counts) < 2:
        raise TrainingError(f"{what}: corpus has a single class")


def _features(corpus: Corpus) -> tuple[np.ndarray, np.ndarray]:
    return corpus_features(corpus), corpus.labels


def pretrain(near_surface: Corpus, cfg: TrainConfig = PRETRAIN_CONFIG, arch: ArchMeta = ArchMeta(),
             train_fraction: float = 0.6, metrics: Optional[MetricsLog] = None) -> MultitaskVAE:
    """Train every parameter group on near-surface audio.

    The corpus is split by source (``train_fraction`` for training) and the
    epoch with the lowest validation total loss is kept.
    """
    _require(near_surface, Modality.NEAR_SURFACE_AUDIO, "pretrain")
    counts = set(near_surface.class_counts.values())
    if len(counts) != 1 or len(near_surface.class_counts) != len(LABELS):
        raise TrainingError(f"pretrain: corpus is not balanced: {near_surface.class_counts}")
    train, val = split(near_surface, train_fraction, cfg.seed)
    model = build_model(arch, seed=rng.stream_seed(cfg.seed, "pretrain", "init"))
    model.set_freeze_mask({})
    result = _fit(model, _features(train), _features(val), cfg, phase="pretrain", use_adapter=False,
                  classification_only=False, select="loss", metrics=metrics)
    model.provenance = {
        "variant": "PretrainedVAE",
        "corpora": [near_surface.digest],
        "corpus_digest": near_surface.digest,
        "rng_label": rng.stream_label(cfg.seed, "pretrain"),
        "best_epoch": result.best_epoch,
    }
    return model


def _finetune_common(pretrained: MultitaskVAE, on_surface: Corpus, cfg: TrainConfig,
                     val: Optional[Corpus], what: str) -> tuple[MultitaskVAE, Corpus]:
    _require(on_surface, Modality.ON_SURFACE_VIBRATION, what)
    if pretrained.adapter is not None:
        raise TrainingError(f"{what}: expected a pretrained model without an adapter")
    return copy.deepcopy(pretrained), (val if val is not None and len(val) else on_surface)


TASK_SELECTIVE_MASK = {"encoder": True, "decoder": True, "tcn_stack": True,
                       "tcn_head": False, "adapter": False}


def finetune(pretrained: MultitaskVAE, on_surface: Corpus, cfg: TrainConfig = FINETUNE_CONFIG,
             val: Optional[Corpus] = None, metrics: Optional[MetricsLog] = None) -> MultitaskVAE:
    """Task-selective transfer: fresh identity adapter plus the TCN's final layer.

    Encoder, decoder and the TCN temporal stack stay frozen; the objective is
    cross-entropy only. The epoch with the best accuracy on ``val`` (default:
    the fine-tuning corpus itself) is kept.
    """
    model, val = _finetune_common(pretrained, on_surface, cfg, val, "finetune")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.stream_seed(cfg.seed, "finetune", "adapter-init"))
        model.add_adapter()
    model.set_freeze_mask(TASK_SELECTIVE_MASK)
    ft_cfg = replace(cfg, freeze_policy=FreezePolicy.TASK_SELECTIVE,
                     weights=replace(cfg.weights, lambda_rec=0.0, beta_kl=0.0))
    result = _fit(model, _features(on_surface), _features(val), ft_cfg, phase="finetune",
                  use_adapter=True, classification_only=True, select="accuracy", metrics=metrics)
    model.provenance = {
        **pretrained.provenance,
        "variant": "RARR",
        "corpora": [*pretrained.provenance.get("corpora", []), on_surface.digest],
        "finetune_corpus_digest": on_surface.digest,
        "best_epoch": result.best_epoch,
    }
    return model


def full_finetune(pretrained: MultitaskVAE, on_surface: Corpus, cfg: TrainConfig = FINETUNE_CONFIG,
                  val: Optional[Corpus] = None, metrics: Optional[MetricsLog] = None) -> MultitaskVAE:
    """Every group trainable, no adapter, full multitask objective."""
    model, val = _finetune_common(pretrained, on_surface, cfg, val, "full_finetune")
    model.set_freeze_mask({})
    ft_cfg = replace(cfg, freeze_policy=FreezePolicy.FULL_FINETUNE)
    result = _fit(model, _features(on_surface), _features(val), ft_cfg, phase="full_finetune",
                  use_adapter=False, classification_only=False, select="accuracy", metrics=metrics)
    model.provenance = {
        **pretrained.provenance,
        "variant": "A2V_VAE",
        "corpora": [*pretrained.provenance.get("corpora", []), on_surface.digest],
        "finetune_corpus_digest": on_surface.digest,
        "best_epoch": result.best_epoch,
    }
    return model


def train_from_scratch(on_surface: Corpus, cfg: TrainConfig = PRETRAIN_CONFIG, arch: ArchMeta = ArchMeta(),
                       val: Optional[Corpus] = None, metrics: Optional[MetricsLog] = None) -> MultitaskVAE:
    """Supervised multitask VAE trained only on the vibration corpus."""
    _require(on_surface, Modality.ON_SURFACE_VIBRATION, "train_from_scratch")
    val = val if val is not None and len(val) else on_surface
    model = build_model(arch, seed=rng.stream_seed(cfg.seed, "scratch", "init"))
    result = _fit(model, _features(on_surface), _features(val), cfg, phase="scratch", use_adapter=False,
                  classification_only=False, select="accuracy", metrics=metrics)
    model.provenance = {
        "variant": "SimpleVAE",
        "corpora": [on_surface.digest],
        "corpus_digest": on_surface.digest,
        "rng_label": rng.stream_label(cfg.seed, "scratch"),
        "best_epoch": result.best_epoch,
    }
    return model


def overfit_clip(model: MultitaskVAE, x: np.ndarray, label: int, steps: int = 200, lr: float = 4e-3,
                 weights: LossWeights = LossWeights(), seed: int = 0) -> dict:
    """Memorize one spectrogram with the full multitask objective.

    Runs ``steps`` Adam updates on the single clip and reports the per-pixel
    MSE of the deterministic reconstruction decode(mu) and the predicted label.
    Used as a wiring check: a model that cannot do this is broken.
    """
    xt = torch.as_tensor(np.asarray(x, dtype=np.float32)).reshape(1, model.arch.F, model.arch.T)
    yt = torch.tensor([int(label)])
    model.set_freeze_mask({})
    opt = torch.optim.Adam(model.trainable_parameters(), lr=lr)
    gen = rng.torch_generator(seed, "overfit", "eps")
    model.train()
    for _ in range(steps):
        loss, _ = multitask_loss(model(xt, generator=gen), xt, yt, weights, epoch=0)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    model.eval()
    with torch.no_grad():
        mu = model.encode(xt).mu
        mse = F.mse_loss(model.decode(mu), xt).item()
        pred = int(model.classify(mu).argmax(1))
    return {"steps": steps, "mse": mse, "predicted": pred, "label": int(label)}


# -- variants ----------------------------------------------------------------


class VariantName(str, enum.Enum):
    SIMPLE_VAE = "SimpleVAE"
    PRETRAINED_VAE = "PretrainedVAE"
    A2V_VAE = "A2V_VAE"
    RARR = "RARR"


@dataclass(frozen=True)
class VariantSpec:
    name: VariantName
    requires_pretrain: bool
    finetune_policy: Optional[FreezePolicy]
    uses_adapter: bool


VARIANTS = {
    VariantName.SIMPLE_VAE: VariantSpec(VariantName.SIMPLE_VAE, False, FreezePolicy.NONE, False),
    VariantName.PRETRAINED_VAE: VariantSpec(VariantName.PRETRAINED_VAE, True, None, False),
    VariantName.A2V_VAE: VariantSpec(VariantName.A2V_VAE, True, FreezePolicy.FULL_FINETUNE, False),
    VariantName.RARR: VariantSpec(VariantName.RARR, True, FreezePolicy.TASK_SELECTIVE, True),
}
VARIANT_ORDER = tuple(VARIANTS)


def build_variant(spec: VariantSpec, finetune_corpus: Optional[Corpus], *,
                  pretrained: Optional[MultitaskVAE] = None,
                  scratch_cfg: TrainConfig = PRETRAIN_CONFIG,
                  finetune_cfg: TrainConfig = FINETUNE_CONFIG,
                  arch: ArchMeta = ArchMeta(), val: Optional[Corpus] = None,
                  metrics: Optional[MetricsLog] = None) -> MultitaskVAE:
    if spec.requires_pretrain and pretrained is None:
        raise TrainingError(f"{spec.name.value} needs a pretrained checkpoint")
    if spec.finetune_policy is not None and finetune_corpus is None:
        raise TrainingError(f"{spec.name.value} needs an on-surface fine-tuning corpus")
    if spec.name is VariantName.SIMPLE_VAE:
        return train_from_scratch(finetune_corpus, scratch_cfg, arch, val=val, metrics=metrics)
    if spec.name is VariantName.PRETRAINED_VAE:
        return pretrained
    if spec.name is VariantName.A2V_VAE:
        return full_finetune(pretrained, finetune_corpus, finetune_cfg, val=val, metrics=metrics)
    return finetune(pretrained, finetune_corpus, finetune_cfg, val=val, metrics=metrics)
