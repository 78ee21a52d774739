"""Multitask VAE with a dilated-TCN activity head and a low-rank latent adapter.

Layout of a forward pass on a (B, F, T) batch of canonical spectrograms::

    encoder  -> mu, sigma          (B, d, T/4)
    adapter  -> mu', sigma'        optional, identity at init
    z = mu' + sigma' * eps         reparameterization
    decoder(z)    -> reconstruction (B, F, T)
    tcn(mu')      -> logits         (B, n_classes)

Parameters are addressed by group (``encoder``, ``decoder``, ``tcn_stack``,
``tcn_head``, ``adapter``), which is what the freeze policies act on.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PARAM_GROUPS = ("encoder", "decoder", "tcn_stack", "tcn_head", "adapter")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ArchMeta:
    F: int = 128
    T: int = 256
    d: int = 32
    encoder_channels: tuple[int, int, int] = (16, 32, 64)
    tcn_channels: tuple[int, int, int] = (64, 64, 64)
    tcn_kernel: int = 3
    tcn_dilations: tuple[int, int, int] = (1, 2, 4)
    adapter_rank: Optional[int] = None
    adapter_kernel: int = 3
    n_classes: int = 4

    def __post_init__(self):
        if self.F % 8 or self.T % 4:
            raise ModelError(f"F must be a multiple of 8 and T of 4, got ({self.F}, {self.T})")
        if len(self.tcn_channels) != len(self.tcn_dilations):
            raise ModelError("one TCN channel width per dilation")
        for name in ("encoder_channels", "tcn_channels", "tcn_dilations"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def T_latent(self) -> int:
        return self.T // 4

    @property
    def rank(self) -> int:
        return self.adapter_rank if self.adapter_rank is not None else max(1, self.d // 8)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchMeta":
        return cls(**d)


class LatentSequence(NamedTuple):
    mu: torch.Tensor
    sigma: torch.Tensor


class ForwardOutput(NamedTuple):
    latent: LatentSequence
    z: torch.Tensor
    reconstruction: torch.Tensor
    logits: torch.Tensor


class Encoder(nn.Module):
    """Strided 2-D convs: frequency /8 then collapsed by the heads, time /4."""

    def __init__(self, arch: ArchMeta):
        super().__init__()
        c1, c2, c3 = arch.encoder_channels
        self.conv1 = nn.Conv2d(1, c1, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(c2, c3, 3, stride=(2, 1), padding=1)
        self.mu_head = nn.Conv2d(c3, arch.d, kernel_size=(arch.F // 8, 1))
        self.logvar_head = nn.Conv2d(c3, arch.d, kernel_size=(arch.F // 8, 1))

    def forward(self, x: torch.Tensor) -> LatentSequence:
        h = x.unsqueeze(1)
        h = F.gelu(self.conv1(h))
        h = F.gelu(self.conv2(h))
        h = F.gelu(self.conv3(h))
        mu = self.mu_head(h).squeeze(2)
        logvar = self.logvar_head(h).squeeze(2)
        return LatentSequence(mu, torch.exp(0.5 * logvar))


class Decoder(nn.Module):
    def __init__(self, arch: ArchMeta):
        super().__init__()
        c1, c2, c3 = arch.encoder_channels
        self.expand = nn.ConvTranspose2d(arch.d, c3, kernel_size=(arch.F // 8, 1))
        self.up1 = nn.ConvTranspose2d(c3, c2, kernel_size=(4, 3), stride=(2, 1), padding=1)
        self.up2 = nn.ConvTranspose2d(c2, c1, kernel_size=4, stride=2, padding=1)
        self.up3 = nn.ConvTranspose2d(c1, 1, kernel_size=4, stride=2, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.expand(z.unsqueeze(2)))
        h = F.gelu(self.up1(h))
        h = F.gelu(self.up2(h))
        return self.up3(h).squeeze(1)


class CausalConv1d(nn.Conv1d):
    def __init__(self, c_in, c_out, kernel, dilation):
        super().__init__(c_in, c_out, kernel, dilation=dilation)
        self.left_pad = (kernel - 1) * dilation

    def forward(self, x):
        return super().forward(F.pad(x, (self.left_pad, 0)))


class TemporalBlock(nn.Module):
    def __init__(self, c_in, c_out, kernel, dilation):
        super().__init__()
        self.conv1 = CausalConv1d(c_in, c_out, kernel, dilation)
        self.conv2 = CausalConv1d(c_out, c_out, kernel, dilation)
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x):
        h = self.conv2(F.gelu(self.conv1(x)))
        res = x if self.skip is None else self.skip(x)
        return F.gelu(h + res)


class TCNStack(nn.Module):
    def __init__(self, arch: ArchMeta):
        super().__init__()
        widths = (arch.d, *arch.tcn_channels)
        self.blocks = nn.Sequential(*[
            TemporalBlock(widths[i], widths[i + 1], arch.tcn_kernel, dil)
            for i, dil in enumerate(arch.tcn_dilations)
        ])

    def forward(self, mu):
        return self.blocks(mu).mean(dim=-1)


class _Bottleneck(nn.Module):
    def __init__(self, d, r, kernel):
        super().__init__()
        self.down = nn.Conv1d(d, r, kernel, padding=kernel // 2)
        self.up = nn.Conv1d(r, d, kernel, padding=kernel // 2)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x):
        return self.up(F.gelu(self.down(x)))


class LatentAdapter(nn.Module):
    """Residual d -> r -> d conv bottleneck on mu, and on log sigma.

    The second conv of each branch starts at zero, so a new adapter is the
    identity map. sigma is rescaled multiplicatively to stay positive.
    """

    def __init__(self, arch: ArchMeta):
        super().__init__()
        self.mu_branch = _Bottleneck(arch.d, arch.rank, arch.adapter_kernel)
        self.sigma_branch = _Bottleneck(arch.d, arch.rank, arch.adapter_kernel)

    def forward(self, latent: LatentSequence) -> LatentSequence:
        mu, sigma = latent
        return LatentSequence(
            mu + self.mu_branch(mu),
            sigma * torch.exp(self.sigma_branch(torch.log(sigma))),
        )


def reparameterize(latent: LatentSequence, eps: torch.Tensor) -> torch.Tensor:
    if eps.shape != latent.mu.shape:
        raise ModelError(f"eps shape {tuple(eps.shape)} != latent shape {tuple(latent.mu.shape)}")
    return latent.mu + latent.sigma * eps


class MultitaskVAE(nn.Module):
    def __init__(self, arch: ArchMeta = ArchMeta()):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.decoder = Decoder(arch)
        self.tcn_stack = TCNStack(arch)
        self.tcn_head = nn.Linear(arch.tcn_channels[-1], arch.n_classes)
        self.adapter: Optional[LatentAdapter] = None
        self.freeze_mask: dict[str, bool] = {}
        self.provenance: dict = {}
        self.set_freeze_mask({})

    # -- parameter groups -------------------------------------------------
    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(g for g in PARAM_GROUPS if getattr(self, g) is not None)

    def group_parameters(self, group: str) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if n.split(".", 1)[0] == group]

    def set_freeze_mask(self, frozen: dict[str, bool]) -> None:
        """``frozen[group] = True`` freezes the group; absent groups train."""
        unknown = set(frozen) - set(self.groups)
        if unknown:
            raise ModelError(f"freeze mask names unknown parameter groups: {sorted(unknown)}")
        self.freeze_mask = {g: bool(frozen.get(g, False)) for g in self.groups}
        for g, is_frozen in self.freeze_mask.items():
            for _, p in self.group_parameters(g):
                p.requires_grad_(not is_frozen)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for g in self.groups if not self.freeze_mask[g] for _, p in self.group_parameters(g)]

    def add_adapter(self) -> LatentAdapter:
        p = next(self.parameters())
        self.adapter = LatentAdapter(self.arch).to(dtype=p.dtype)
        self.set_freeze_mask({g: v for g, v in self.freeze_mask.items()})
        return self.adapter

    def count_parameters(self, group: Optional[str] = None) -> int:
        groups = [group] if group else self.groups
        return sum(p.numel() for g in groups for _, p in self.group_parameters(g))

    # -- operations ---------------------------------------------------------
    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x.unsqueeze(0)
        want = (self.arch.F, self.arch.T)
        if tuple(x.shape[-2:]) != want:
            raise ModelError(f"expected spectrogram shape {want}, got {tuple(x.shape[-2:])}")
        return x

    def _check_latent(self, t: torch.Tensor, what: str) -> torch.Tensor:
        if t.dim() == 2:
            t = t.unsqueeze(0)
        want = (self.arch.d, self.arch.T_latent)
        if tuple(t.shape[-2:]) != want:
            raise ModelError(f"expected {what} shape {want}, got {tuple(t.shape[-2:])}")
        return t

    def encode(self, x: torch.Tensor) -> LatentSequence:
        return self.encoder(self._check_input(x))

    def adapt(self, latent: LatentSequence) -> LatentSequence:
        if self.adapter is None:
            raise ModelError("model has no adapter")
        return self.adapter(latent)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(self._check_latent(z, "z"))

    def classify(self, mu: torch.Tensor) -> torch.Tensor:
        return self.tcn_head(self.tcn_stack(self._check_latent(mu, "mu")))

    def latent(self, x: torch.Tensor, use_adapter: bool = False) -> LatentSequence:
        latent = self.encode(x)
        if use_adapter:
            latent = self.adapt(latent)
        return latent

    def forward(self, x: torch.Tensor, eps: Optional[torch.Tensor] = None, use_adapter: bool = False,
                generator: Optional[torch.Generator] = None) -> ForwardOutput:
        latent = self.latent(x, use_adapter)
        if eps is None:
            eps = torch.randn(latent.mu.shape, generator=generator, dtype=latent.mu.dtype)
        z = reparameterize(latent, eps)
        return ForwardOutput(latent, z, self.decode(z), self.classify(latent.mu))

    @torch.no_grad()
    def predict_logits(self, x: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
        """Deterministic class logits; never touches the noise path."""
        use_adapter = self.adapter is not None
        out = [self.classify(self.latent(x[i : i + batch_size], use_adapter).mu)
               for i in range(0, len(x), batch_size)]
        return torch.cat(out) if out else torch.zeros(0, self.arch.n_classes)


def build_model(arch: ArchMeta = ArchMeta(), seed: Optional[int] = None, dtype=torch.float32) -> MultitaskVAE:
    """Construct a model; ``seed`` makes initialization independent of global RNG state."""
    if seed is None:
        return MultitaskVAE(arch).to(dtype)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MultitaskVAE(arch).to(dtype)


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_FORMAT = "rarr-checkpoint/1"


def state_arrays(model: MultitaskVAE) -> dict[str, np.ndarray]:
    return {n: p.detach().cpu().to(torch.float32).numpy().copy() for n, p in model.named_parameters()}


def model_digest(model: MultitaskVAE) -> str:
    h = hashlib.sha256(json.dumps(model.arch.to_dict(), sort_keys=True).encode())
    for name, arr in sorted(state_arrays(model).items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_checkpoint(model: MultitaskVAE, path: str | Path, rng_label: str = "",
                    corpus_digest: str = "") -> str:
    """Write an ``.npz`` checkpoint and return the model digest."""
    arrays = state_arrays(model)
    digest = model_digest(model)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "arch": model.arch.to_dict(),
        "has_adapter": model.adapter is not None,
        "freeze_mask": model.freeze_mask,
        "rng_label": rng_label,
        "corpus_digest": corpus_digest,
        "provenance": model.provenance,
        "digest": digest,
        "params": sorted(arrays),
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)),
                 **{f"param/{k}": v for k, v in arrays.items()})
    return digest


def load_checkpoint(path: str | Path) -> MultitaskVAE:
    path = Path(path)
    if not path.is_file():
        raise ModelError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ModelError(f"{path}: not a checkpoint ({meta.get('format')!r})")
        arrays = {k: z[f"param/{k}"] for k in meta["params"]}
    model = MultitaskVAE(ArchMeta.from_dict(meta["arch"]))
    if meta["has_adapter"]:
        model.add_adapter()
    state = model.state_dict()
    if set(state) != set(arrays):
        raise ModelError(f"{path}: parameter names do not match the architecture")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.set_freeze_mask(meta["freeze_mask"])
    model.provenance = dict(meta.get("provenance") or {})
    model.provenance.setdefault("corpus_digest", meta.get("corpus_digest", ""))
    model.provenance.setdefault("rng_label", meta.get("rng_label", ""))
    if model_digest(model) != meta["digest"]:
        raise ModelError(f"{path}: digest mismatch, checkpoint is corrupt")
    return model
