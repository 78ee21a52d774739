"""End-to-end acceptance checks A1-A12.

Each test records a one-line verdict through the ``criterion`` fixture; the
lines are printed in the "acceptance criteria" section of the pytest summary.
The benchmark criteria (A6, A8, A9, A11) share one five-seed ``rarr bench`` run.
"""

import json
import time

import numpy as np
import pytest
import torch

from oracles import brute_force_offsets, central_difference, direct_dft, hann_periodic, mc_kl_gaussian
from rarr.cli import main
from rarr.dataset import (
    LABELS,
    Corpus,
    LabeledClip,
    Modality,
    SynthConfig,
    corpus_features,
    split,
    synth_generate,
)
from rarr.model import ArchMeta, LatentSequence, build_model, load_checkpoint, reparameterize, state_arrays
from rarr.signal_core import Waveform, stft, window
from rarr.training import LossWeights, kl_gaussian, multitask_loss, overfit_clip

N_SEEDS = 5


def differing_groups(a, b):
    sa, sb = state_arrays(a), state_arrays(b)
    out = set()
    for g in a.groups:
        for name, _ in a.group_parameters(g):
            if name not in sb or not np.array_equal(sa[name], sb[name]):
                out.add(g)
    return out


# -- exact property suites -------------------------------------------------------


def test_a1_windowing(criterion):
    g = np.random.default_rng(2024)
    t0, bad = time.time(), []
    for _ in range(200):
        rate = int(g.integers(1, 50))
        win = int(g.integers(1, 40))
        hop = int(g.integers(1, win + 1))
        n = int(g.integers(0, 60 * rate + 1))
        got = window(Waveform(np.arange(n, dtype=np.float64), rate), win, hop)
        expected = brute_force_offsets(n, win * rate, hop * rate)
        offsets = [int(w.samples[0]) for w in got]
        if len(got) != len(expected) or offsets != expected:
            bad.append((n, rate, win, hop))
    dt = time.time() - t0
    assert criterion("A1", not bad and dt < 5, f"200 cases, {len(bad)} mismatches, {dt:.2f}s"), bad[:3]


def test_a2_stft(criterion):
    rate, n_fft = 1024.0, 128
    argmax_ok = True
    for k in (2, 7, 40, 62):
        t = np.arange(int(2 * rate)) / rate
        s = stft(Waveform(np.sin(2 * np.pi * k * rate / n_fft * t), rate), n_fft, 32)
        argmax_ok &= bool(np.all(np.argmax(s.values, axis=0) == k))
    x = np.random.default_rng(3).standard_normal(256 * 4)
    mag = stft(Waveform(x, 1000.0), 256, 256).values[:, 1]
    frame = x[256:512] * hann_periodic(256)
    ref = np.abs(direct_dft(frame))[:129]
    energy = (mag[0] ** 2 + mag[-1] ** 2 + 2 * np.sum(mag[1:-1] ** 2)) / 256
    rel_dft = float(np.max(np.abs(mag - ref) / np.maximum(ref, 1e-12)))
    rel_parseval = abs(energy - np.sum(frame**2)) / np.sum(frame**2)
    ok = argmax_ok and rel_dft < 1e-6 and rel_parseval < 1e-6
    assert criterion("A2", ok, f"argmax ok={argmax_ok}, DFT rel err {rel_dft:.1e}, Parseval rel err {rel_parseval:.1e}")


def test_a3_reparameterization_moments(criterion):
    n = 1_000_000
    lat = LatentSequence(torch.full((1, 1, n), 1.0, dtype=torch.float64), torch.full((1, 1, n), 2.0, dtype=torch.float64))
    eps = torch.randn((1, 1, n), generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    z = reparameterize(lat, eps)
    m, s = z.mean().item(), z.std().item()
    ok = abs(m - 1.0) <= 0.01 and abs(s - 2.0) <= 0.01
    assert criterion("A3", ok, f"mean {m:.4f}, std {s:.4f} over 1e6 draws")


def test_a4_kl(criterion):
    lat = LatentSequence(torch.tensor([[[0.5]]], dtype=torch.float64), torch.tensor([[[0.8]]], dtype=torch.float64))
    closed = kl_gaussian(lat).item()
    mc = mc_kl_gaussian(0.5, 0.8, 1_000_000)
    zero = kl_gaussian(LatentSequence(torch.zeros(2, 3, 4), torch.ones(2, 3, 4))).item()
    ok = abs(closed - mc) < 1e-2 and zero == 0.0
    assert criterion("A4", ok, f"closed {closed:.5f} vs MC {mc:.5f}; KL(0,1) = {zero}")


def test_a5_gradient_check(criterion):
    arch = ArchMeta(F=8, T=8, d=2, encoder_channels=(2, 3, 2), tcn_channels=(3, 2), tcn_dilations=(1, 2),
                    adapter_rank=1)
    assert arch.T_latent == 2
    model = build_model(arch, seed=0, dtype=torch.float64)
    model.add_adapter()
    model.to(torch.float64)
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():  # leave the identity init so adapter gradients are informative
        for p in model.adapter.parameters():
            p.copy_(0.5 * torch.randn(p.shape, generator=g, dtype=torch.float64))
    x = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 2, 3])
    eps = torch.randn(3, 2, 2, generator=g, dtype=torch.float64)
    w = LossWeights(beta_kl=0.1, kl_warmup_epochs=2)

    def loss():
        return multitask_loss(model(x, eps=eps, use_adapter=True), x, y, w, epoch=1)[0]

    errors = {}
    for group in model.groups:
        params = [p for _, p in model.group_parameters(group)]
        model.zero_grad(set_to_none=True)
        loss().backward()
        analytic = torch.cat([p.grad.flatten() for p in params])
        numeric = torch.cat([d.flatten() for d in central_difference(loss, params)])
        errors[group] = ((analytic - numeric).norm() / max(analytic.norm(), numeric.norm(), 1e-12)).item()
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    assert criterion("A5", worst < 1e-3 and len(errors) == 5, f"relative error per group: {detail}")


def test_a7_overfit_single_clip(criterion):
    near, _ = synth_generate(SynthConfig(n_sources_near=1, n_participants=1, source_duration_s=30))
    x, label = corpus_features(near)[0], int(near.labels[0])
    t0 = time.time()
    res = overfit_clip(build_model(seed=0), x, label, steps=200)
    dt = time.time() - t0
    ok = res["mse"] < 0.05 and res["predicted"] == label and dt < 120
    assert criterion("A7", ok, f"MSE {res['mse']:.4f} after 200 steps, predicted {res['predicted']} "
                               f"(label {label}), {dt:.0f}s")


def test_a10_eps_invariance(criterion):
    model = build_model(seed=7)
    model.add_adapter()
    with torch.no_grad():
        for p in model.adapter.parameters():
            p.add_(0.1 * torch.randn_like(p))
    x = torch.randn(100, 128, 256, generator=torch.Generator().manual_seed(0))
    t0 = time.time()
    with torch.no_grad():
        ref = model(x, use_adapter=True, generator=torch.Generator().manual_seed(100)).logits
        same = all(
            torch.equal(model(x, use_adapter=True, generator=torch.Generator().manual_seed(101 + k)).logits, ref)
            for k in range(9)
        )
    dt = time.time() - t0
    assert criterion("A10", same and dt < 30, f"100 inputs x 10 eps draws bit-identical={same}, {dt:.1f}s")


def test_a12_split_leakage(criterion):
    t0, leaks = time.time(), []
    w = Waveform(np.zeros(4, dtype=np.float32), 512)
    for seed in range(100):
        g = np.random.default_rng(seed)
        clips = []
        for lab in LABELS:
            for s in range(int(g.integers(2, 9))):
                for k in range(int(g.integers(1, 5))):
                    clips.append(LabeledClip(w, lab, Modality.ON_SURFACE_VIBRATION, f"{lab.value}-{s}", "p1", 15.0 * k))
        corpus = Corpus(tuple(clips), Modality.ON_SURFACE_VIBRATION)
        tr, va = split(corpus, float(g.uniform(0.2, 0.8)), seed)
        a = {c.source_id for c in tr.clips}
        b = {c.source_id for c in va.clips}
        if a & b or len(tr) + len(va) != len(corpus):
            leaks.append(seed)
    dt = time.time() - t0
    assert criterion("A12", not leaks and dt < 10, f"100 seeds, {len(leaks)} leaking splits, {dt:.2f}s"), leaks


# -- synthetic benchmark ---------------------------------------------------------------


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    t0 = time.time()
    code = main(["bench", "--n-seeds", str(N_SEEDS), "--out", str(out)])
    return out, code, time.time() - t0


@pytest.mark.slow
def test_a8_benchmark_ordering(bench, criterion):
    out, code, dt = bench
    summary = json.loads((out / "summary.json").read_text())
    acc = summary["mean_unseen_accuracy"]
    rarr = acc["RARR"]
    ok = (code == 0 and summary["n_seeds"] == N_SEEDS and dt < 1800
          and rarr >= acc["A2V_VAE"] + 0.05
          and rarr >= acc["SimpleVAE"] + 0.05
          and rarr >= acc["PretrainedVAE"])
    detail = ", ".join(f"{k} {v:.3f}" for k, v in acc.items()) + f" over {N_SEEDS} seeds, {dt / 60:.1f} min"
    assert criterion("A8", ok, detail)


@pytest.mark.slow
def test_a6_pretrain_accuracy(bench, criterion):
    out, code, _ = bench
    records = [json.loads(line) for line in (out / "seed_0" / "metrics.jsonl").read_text().splitlines()]
    val = [r for r in records if r["phase"] == "pretrain" and r["split"] == "val" and r["epoch"] <= 50]
    best = max(val, key=lambda r: r["accuracy"])
    ok = code == 0 and best["accuracy"] >= 0.85
    assert criterion("A6", ok, f"best validation accuracy {best['accuracy']:.3f} at epoch {best['epoch']} "
                               f"(seed 0, {len(val) - 1} epochs run)")


@pytest.mark.slow
def test_a9_freeze_soundness(bench, criterion):
    out, code, _ = bench
    seen = []
    for s in range(N_SEEDS):
        ckpt = out / f"seed_{s}" / "checkpoints"
        pre, rarr = load_checkpoint(ckpt / "pretrained.npz"), load_checkpoint(ckpt / "RARR.npz")
        seen.append(differing_groups(rarr, pre))
    ok = code == 0 and all(d <= {"adapter", "tcn_head"} and "adapter" in d for d in seen)
    assert criterion("A9", ok, "differing groups per seed: " + "; ".join(",".join(sorted(d)) for d in seen))


@pytest.mark.slow
def test_a11_benchmark_determinism(bench, tmp_path, criterion):
    out, code, _ = bench
    assert main(["bench", "--n-seeds", "1", "--out", str(tmp_path)]) == 0
    first = (out / "seed_0" / "table.txt").read_bytes()
    again = (tmp_path / "seed_0" / "table.txt").read_bytes()
    assert criterion("A11", code == 0 and first == again, f"seed 0 table byte-identical={first == again}")
