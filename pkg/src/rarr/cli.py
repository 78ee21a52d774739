"""Command-line entry point: ``rarr <command> [options]``.

Outputs (all under ``--out``):

  curate    corpus.npz
  synth     near_surface.npz, on_surface.npz, synth_config.json
  pretrain  pretrained.npz, metrics_pretrain.jsonl
  finetune  <variant>.npz, metrics_<variant>.jsonl
  eval      reports.jsonl, table.txt, table.png
  bench     seed_<s>/{checkpoints/*.npz, metrics.jsonl, reports.jsonl,
            table.txt, table.png} and summary.json

Settings resolve as command-line flag, then ``--config`` file, then the
built-in default. The config file is a flat YAML mapping such as::

    seed: 3
    pretrain.epochs: 40
    finetune.learning_rate: 0.001
    synth.variance_scale: 0.05
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from . import rng
from .dataset import (
    Corpus,
    DatasetError,
    Modality,
    SynthConfig,
    balance,
    corpus_features,
    front_end_for,
    ingest,
    load_corpus,
    load_manifest,
    nearest_neighbor_accuracy,
    save_corpus,
    split,
    synth_generate,
)
from .evaluation import EvaluationError, compare, evaluate, format_table, render, write_reports
from .model import ModelError, load_checkpoint, save_checkpoint
from .training import (
    FINETUNE_CONFIG,
    PRETRAIN_CONFIG,
    VARIANTS,
    LossWeights,
    MetricsLog,
    TrainConfig,
    TrainingError,
    VariantName,
    build_variant,
    pretrain,
)

log = logging.getLogger("rarr")


class ConfigError(ValueError):
    pass


# -- run configuration -------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Every knob a command can read, with its default.

    ``pretrain``, ``finetune`` and ``scratch`` hold the optimiser settings for
    the near-surface pretraining, the fine-tuning variants and the
    from-scratch baseline. Their seeds are always taken from ``seed``.
    """

    seed: int = 0
    out: str = "runs"
    synth: SynthConfig = field(default_factory=SynthConfig)
    pretrain: TrainConfig = PRETRAIN_CONFIG
    finetune: TrainConfig = FINETUNE_CONFIG
    scratch: TrainConfig = PRETRAIN_CONFIG
    train_fraction: float = 0.6
    finetune_participant: Optional[str] = None
    near_corpus: Optional[str] = None
    on_corpus: Optional[str] = None
    pretrained: Optional[str] = None
    window_s: float = 30.0
    window_hop_s: float = 15.0
    workers: int = 1

    def train_config(self, block: str) -> TrainConfig:
        return replace(getattr(self, block), seed=self.seed)

    def synth_config(self) -> SynthConfig:
        return replace(self.synth, seed=self.seed)

    def front_end(self, modality: Modality):
        return replace(front_end_for(modality), win_s=self.window_s, hop_s=self.window_hop_s)


_TRAIN_BLOCKS = ("pretrain", "finetune", "scratch")
_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name not in ("seed", "weights", "freeze_policy"))
_WEIGHT_KEYS = tuple(f.name for f in fields(LossWeights))
_SYNTH_KEYS = tuple(f.name for f in fields(SynthConfig) if f.name != "seed")
_TOP_KEYS = tuple(f.name for f in fields(RunConfig) if f.name not in (*_TRAIN_BLOCKS, "synth"))


def config_keys() -> list[str]:
    keys = list(_TOP_KEYS)
    for b in _TRAIN_BLOCKS:
        keys += [f"{b}.{k}" for k in (*_TRAIN_KEYS, *_WEIGHT_KEYS)]
    keys += [f"synth.{k}" for k in _SYNTH_KEYS]
    return keys


def _coerce(key: str, value: Any, default: Any) -> Any:
    if value is None:
        return None
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError("expected true/false")
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError("expected an integer")
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(float(v) for v in value)
        if isinstance(default, dict):
            return {str(k): tuple(float(x) for x in v) for k, v in dict(value).items()}
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and not key.endswith("label_freqs"):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Return ``cfg`` with dotted ``overrides`` applied; unknown keys are errors."""
    known = set(config_keys())
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    top, blocks = {}, {b: ({}, {}) for b in _TRAIN_BLOCKS}
    synth = {}
    for key, value in overrides.items():
        head, _, tail = key.partition(".")
        if head in blocks:
            base = getattr(cfg, head)
            if tail in _WEIGHT_KEYS:
                blocks[head][1][tail] = _coerce(key, value, getattr(base.weights, tail))
            else:
                blocks[head][0][tail] = _coerce(key, value, getattr(base, tail))
        elif head == "synth":
            synth[tail] = _coerce(key, value, getattr(cfg.synth, tail))
        else:
            default = getattr(RunConfig(), key)
            top[key] = value if default is None else _coerce(key, value, default)
    try:
        for b, (train_kw, weight_kw) in blocks.items():
            if train_kw or weight_kw:
                base = getattr(cfg, b)
                top[b] = replace(base, weights=replace(base.weights, **weight_kw), **train_kw)
        if synth:
            top["synth"] = replace(cfg.synth, **synth)
        out = replace(cfg, **top)
        out.synth_config().validate()
    except (TrainingError, DatasetError) as exc:
        raise ConfigError(str(exc)) from exc
    return out


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a key: value mapping")
    return _flatten(data)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = apply_overrides(cfg, load_config_file(args.config))
    flags = {k: getattr(args, k) for k in ("seed", "out") if getattr(args, k, None) is not None}
    return apply_overrides(cfg, flags)


# -- helpers -----------------------------------------------------------------


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_corpus(path: Optional[str], what: str) -> Corpus:
    if not path:
        raise ConfigError(f"no {what} corpus given")
    p = Path(path)
    if not p.is_file():
        raise DatasetError(f"{what} corpus not found: {p}")
    return load_corpus(p)


def _verify(paths: Sequence[Path]) -> None:
    for p in paths:
        if not p.is_file() or p.stat().st_size == 0:
            raise OSError(f"expected output was not written: {p}")
        if p.suffix == ".npz" and p.name not in ("near_surface.npz", "on_surface.npz", "corpus.npz"):
            load_checkpoint(p)


def _print_counts(c: Corpus) -> None:
    for label, n in sorted(c.class_counts.items(), key=lambda kv: kv[0].index):
        print(f"  {label.value:<22}{n}")


def _finetune_participant(cfg: RunConfig, on: Corpus) -> str:
    parts = on.participants
    if not parts:
        raise DatasetError("on-surface corpus has no participant ids")
    pid = cfg.finetune_participant or parts[0]
    if pid not in parts:
        raise DatasetError(f"participant {pid!r} not in corpus (have {', '.join(parts)})")
    return pid


def oracle_accuracy(near: Corpus, train_fraction: float, seed: int) -> float:
    tr, va = split(near, train_fraction, seed)
    return nearest_neighbor_accuracy(corpus_features(tr), tr.labels, corpus_features(va), va.labels)


# -- commands ----------------------------------------------------------------


def cmd_curate(args, cfg: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    modality = manifest.entries[0].modality if manifest.entries else Modality.NEAR_SURFACE_AUDIO
    if modality is Modality.NEAR_SURFACE_AUDIO:
        manifest.check_pretraining()
    corpus = ingest(manifest, cfg.front_end(modality), workers=cfg.workers)
    corpus = balance(corpus, cfg.seed)
    out = _out_dir(cfg) / "corpus.npz"
    digest = save_corpus(corpus, out)
    _verify([out])
    print(f"{len(corpus)} clips ({corpus.skipped} short source(s) skipped)")
    _print_counts(corpus)
    print(f"corpus sha256 {digest}")
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    near, on = synth_generate(cfg.synth_config())
    out = _out_dir(cfg)
    paths = [out / "near_surface.npz", out / "on_surface.npz", out / "synth_config.json"]
    d_near = save_corpus(near, paths[0])
    d_on = save_corpus(on, paths[1])
    paths[2].write_text(json.dumps(cfg.synth_config().to_dict(), sort_keys=True, indent=2) + "\n")
    _verify(paths)
    print(f"near-surface: {len(near)} clips, sha256 {d_near}")
    print(f"on-surface:   {len(on)} clips, participants {', '.join(on.participants)}, sha256 {d_on}")
    acc = oracle_accuracy(near, cfg.train_fraction, cfg.seed)
    print(f"oracle 1-NN accuracy on near-surface validation: {acc:.4f}")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    near = _load_corpus(args.near or cfg.near_corpus, "near-surface")
    near = balance(near, cfg.seed)
    out = _out_dir(cfg)
    with open(out / "metrics_pretrain.jsonl", "w") as fh:
        model = pretrain(near, cfg.train_config("pretrain"), train_fraction=cfg.train_fraction,
                         metrics=MetricsLog(fh))
    ckpt = out / "pretrained.npz"
    digest = save_checkpoint(model, ckpt, rng.stream_label(cfg.seed, "pretrain"), near.digest)
    _verify([ckpt, out / "metrics_pretrain.jsonl"])
    print(f"pretrained checkpoint {ckpt} (best epoch {model.provenance['best_epoch']}), sha256 {digest}")
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    on = _load_corpus(args.on or cfg.on_corpus, "on-surface")
    if args.participant:
        cfg = replace(cfg, finetune_participant=args.participant)
    pid = _finetune_participant(cfg, on)
    ft_corpus = on.for_participants([pid])
    spec = VARIANTS[VariantName(args.variant)]
    pretrained = None
    if spec.requires_pretrain:
        path = args.checkpoint or cfg.pretrained
        if not path:
            raise ConfigError(f"{spec.name.value} needs --checkpoint")
        pretrained = load_checkpoint(path)
    out = _out_dir(cfg)
    metrics_path = out / f"metrics_{spec.name.value}.jsonl"
    with open(metrics_path, "w") as fh:
        model = build_variant(spec, ft_corpus, pretrained=pretrained, scratch_cfg=cfg.train_config("scratch"),
                              finetune_cfg=cfg.train_config("finetune"), metrics=MetricsLog(fh))
    ckpt = out / f"{spec.name.value}.npz"
    digest = save_checkpoint(model, ckpt, rng.stream_label(cfg.seed, spec.name.value), ft_corpus.digest)
    _verify([ckpt, metrics_path])
    print(f"{spec.name.value} fine-tuned on {pid}: {ckpt}, sha256 {digest}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    on = _load_corpus(args.on or cfg.on_corpus, "on-surface")
    reports = []
    for path in args.checkpoint:
        model = load_checkpoint(path)
        name = model.provenance.get("variant") or Path(path).stem
        trained_on = [] if name == VariantName.PRETRAINED_VAE.value else list(args.participant or [])
        reports.append(evaluate(model, on, name, cfg.seed, trained_on))
    table = compare(reports)
    out = _out_dir(cfg)
    write_reports(reports, out / "reports.jsonl")
    txt, png = render(table, out / "table")
    _verify([out / "reports.jsonl", txt, png])
    sys.stdout.write(format_table(table))
    return 0


def run_benchmark_seed(cfg: RunConfig, out: Path, near: Optional[Corpus] = None,
                       on: Optional[Corpus] = None) -> dict:
    """One full protocol run: pretrain, four variants, evaluation, table."""
    t0 = time.time()
    if near is None or on is None:
        s_near, s_on = synth_generate(cfg.synth_config())
        near, on = near or s_near, on or s_on
    near = balance(near, cfg.seed)
    pid = _finetune_participant(cfg, on)
    ft_corpus = on.for_participants([pid])
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with open(out / "metrics.jsonl", "w") as fh:
        metrics = MetricsLog(fh)
        pre = pretrain(near, cfg.train_config("pretrain"), train_fraction=cfg.train_fraction, metrics=metrics)
        save_checkpoint(pre, ckpt_dir / "pretrained.npz", rng.stream_label(cfg.seed, "pretrain"), near.digest)
        written.append(ckpt_dir / "pretrained.npz")
        reports = []
        for name, spec in VARIANTS.items():
            model = build_variant(spec, ft_corpus, pretrained=pre, scratch_cfg=cfg.train_config("scratch"),
                                  finetune_cfg=cfg.train_config("finetune"), metrics=metrics)
            if model is not pre:
                path = ckpt_dir / f"{name.value}.npz"
                save_checkpoint(model, path, rng.stream_label(cfg.seed, name.value), ft_corpus.digest)
                written.append(path)
            trained_on = [pid] if spec.finetune_policy is not None else []
            reports.append(evaluate(model, on, name.value, cfg.seed, trained_on))
    table = compare(reports)
    write_reports(reports, out / "reports.jsonl")
    txt, png = render(table, out / "table")
    _verify([*written, out / "metrics.jsonl", out / "reports.jsonl", txt, png])
    log.info("seed %d done in %.1f s", cfg.seed, time.time() - t0)
    return {
        "seed": cfg.seed,
        "finetune_participant": pid,
        "corpus_digest": on.digest,
        "unseen_mean": {r.variant: r.unseen_mean for r in reports},
        "overall_mean": {r.variant: r.overall_mean for r in reports},
    }


def summarize(runs: list[dict]) -> dict:
    variants = list(runs[0]["unseen_mean"])
    avg = {v: float(np.mean([r["unseen_mean"][v] for r in runs])) for v in variants}
    rarr = avg.get(VariantName.RARR.value, float("nan"))
    margins = {v: rarr - a for v, a in avg.items() if v != VariantName.RARR.value}
    return {"n_seeds": len(runs), "runs": runs, "mean_unseen_accuracy": avg, "rarr_margin": margins}


def cmd_bench(args, cfg: RunConfig) -> int:
    if args.n_seeds < 1:
        raise ConfigError("--n-seeds must be >= 1")
    near = _load_corpus(args.near, "near-surface") if args.near else None
    on = _load_corpus(args.on, "on-surface") if args.on else None
    out = _out_dir(cfg)
    runs = []
    for s in range(cfg.seed, cfg.seed + args.n_seeds):
        seed_out = out / f"seed_{s}"
        seed_out.mkdir(parents=True, exist_ok=True)
        runs.append(run_benchmark_seed(replace(cfg, seed=s), seed_out, near, on))
        sys.stdout.write(f"seed {s}\n" + (seed_out / "table.txt").read_text())
    summary = summarize(runs)
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _verify([out / "summary.json"])
    print("mean unseen-participant accuracy over", len(runs), "seed(s):")
    for v, a in summary["mean_unseen_accuracy"].items():
        print(f"  {v:<16}{a:.4f}")
    return 0


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML key: value file")
    common.add_argument("--seed", type=int, help="global seed (default 0)")
    common.add_argument("--out", help="output directory (default ./runs)")

    p = argparse.ArgumentParser(prog="rarr", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("curate", parents=[common], help="manifest -> balanced corpus archive")
    c.add_argument("manifest")
    c.set_defaults(func=cmd_curate)

    c = sub.add_parser("synth", parents=[common], help="generate synthetic near- and on-surface corpora")
    c.set_defaults(func=cmd_synth)

    c = sub.add_parser("pretrain", parents=[common], help="pretrain on a near-surface corpus")
    c.add_argument("--near", help="near-surface corpus archive")
    c.set_defaults(func=cmd_pretrain)

    c = sub.add_parser("finetune", parents=[common], help="build one transfer variant")
    c.add_argument("--checkpoint", help="pretrained checkpoint")
    c.add_argument("--on", help="on-surface corpus archive")
    c.add_argument("--participant", help="fine-tuning participant (default: lowest id)")
    c.add_argument("--variant", default=VariantName.RARR.value,
                   choices=[v.value for v in VariantName if v is not VariantName.PRETRAINED_VAE])
    c.set_defaults(func=cmd_finetune)

    c = sub.add_parser("eval", parents=[common], help="per-participant accuracy of checkpoints")
    c.add_argument("--checkpoint", nargs="+", required=True)
    c.add_argument("--on", help="on-surface corpus archive")
    c.add_argument("--participant", nargs="*", help="participants the checkpoints were fine-tuned on")
    c.set_defaults(func=cmd_eval)

    c = sub.add_parser("bench", parents=[common], help="full four-variant benchmark")
    c.add_argument("--n-seeds", type=int, default=1)
    c.add_argument("--near", help="near-surface corpus archive (default: synthesize)")
    c.add_argument("--on", help="on-surface corpus archive (default: synthesize)")
    c.set_defaults(func=cmd_bench)
    return p


_HANDLED = (ConfigError, DatasetError, TrainingError, ModelError, EvaluationError, OSError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except _HANDLED as exc:
        print(f"rarr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
