"""Per-participant accuracy, cross-variant comparison and table/chart rendering."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .dataset import LABELS, Corpus, corpus_features
from .model import MultitaskVAE
from .training import VARIANT_ORDER, VariantName


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ParticipantScore:
    n_clips: int
    n_correct: int

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_clips if self.n_clips else 0.0


@dataclass(frozen=True)
class EvalReport:
    variant: str
    per_participant: dict[str, ParticipantScore]
    corpus_digest: str
    seed: int = 0
    training_participants: tuple[str, ...] = ()

    @property
    def accuracies(self) -> dict[str, float]:
        return {p: s.accuracy for p, s in self.per_participant.items()}

    @property
    def overall_mean(self) -> float:
        """Unweighted mean over participants (not pooled over clips)."""
        acc = list(self.accuracies.values())
        return float(np.mean(acc)) if acc else 0.0

    @property
    def std_error(self) -> float:
        acc = list(self.accuracies.values())
        if len(acc) < 2:
            return 0.0
        return float(np.std(acc, ddof=1) / math.sqrt(len(acc)))

    def mean_over(self, participants: Iterable[str]) -> float:
        acc = [self.accuracies[p] for p in participants]
        return float(np.mean(acc)) if acc else float("nan")

    @property
    def unseen_mean(self) -> float:
        return self.mean_over(p for p in self.per_participant if p not in self.training_participants)

    def to_record(self) -> dict:
        return {
            "variant": self.variant,
            "per_participant": {
                p: {"n_clips": s.n_clips, "n_correct": s.n_correct, "accuracy": s.accuracy}
                for p, s in self.per_participant.items()
            },
            "overall_mean": self.overall_mean,
            "std_error": self.std_error,
            "corpus_digest": self.corpus_digest,
            "seed": self.seed,
            "training_participants": list(self.training_participants),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "EvalReport":
        return cls(
            rec["variant"],
            {p: ParticipantScore(v["n_clips"], v["n_correct"]) for p, v in rec["per_participant"].items()},
            rec["corpus_digest"],
            rec.get("seed", 0),
            tuple(rec.get("training_participants", ())),
        )


def predict(model: MultitaskVAE, features: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Argmax class per clip; ties go to the lowest class index."""
    logits = model.predict_logits(torch.from_numpy(np.ascontiguousarray(features)), batch_size)
    return np.argmax(logits.numpy(), axis=1)


def evaluate(model: MultitaskVAE, test: Corpus, variant: str = "", seed: int = 0,
             training_participants: Sequence[str] = (), batch_size: int = 64) -> EvalReport:
    missing = sum(1 for c in test.clips if c.participant_id is None)
    if missing:
        raise EvaluationError(f"{missing} clip(s) have no participant_id")
    if model.arch.n_classes != len(LABELS):
        raise EvaluationError(
            f"model predicts {model.arch.n_classes} classes but the label set has {len(LABELS)}"
        )
    pred = predict(model, corpus_features(test), batch_size)
    truth = test.labels
    pids = np.array([c.participant_id for c in test.clips])
    per = {
        p: ParticipantScore(int((pids == p).sum()), int(((pred == truth) & (pids == p)).sum()))
        for p in sorted(set(pids))
    }
    name = variant or model.provenance.get("variant", "")
    return EvalReport(name, per, test.digest, seed, tuple(training_participants))


# -- comparison ---------------------------------------------------------------


def _variant_rank(name: str) -> tuple[int, str]:
    order = [v.value for v in VARIANT_ORDER]
    return (order.index(name), name) if name in order else (len(order), name)


@dataclass(frozen=True)
class ComparisonTable:
    participants: tuple[str, ...]
    variants: tuple[str, ...]
    cells: dict[tuple[str, str], float]
    means: dict[str, float]
    training: frozenset = field(default_factory=frozenset)
    corpus_digest: str = ""

    @property
    def n_rows(self) -> int:
        return len(self.participants) + 1


def compare(reports: Sequence[EvalReport]) -> ComparisonTable:
    if not reports:
        raise EvaluationError("no reports to compare")
    digest = reports[0].corpus_digest
    for r in reports:
        if r.corpus_digest != digest:
            raise EvaluationError(f"variant {r.variant!r} was evaluated on a different corpus")
    ordered = sorted(reports, key=lambda r: _variant_rank(r.variant))
    names = [r.variant for r in ordered]
    if len(set(names)) != len(names):
        raise EvaluationError(f"duplicate variants: {names}")
    participants = tuple(sorted({p for r in ordered for p in r.per_participant}))
    cells = {(p, r.variant): r.accuracies[p] for r in ordered for p in r.per_participant}
    training = frozenset((p, r.variant) for r in ordered for p in r.training_participants)
    return ComparisonTable(participants, tuple(names), cells,
                           {r.variant: r.overall_mean for r in ordered}, training, digest)


def format_table(table: ComparisonTable) -> str:
    width = max(14, *(len(v) + 2 for v in table.variants))
    head = "participant".ljust(14) + "".join(v.rjust(width) for v in table.variants)
    lines = [head, "-" * len(head)]
    for p in table.participants:
        row = p.ljust(14)
        for v in table.variants:
            if (p, v) in table.cells:
                mark = "*" if (p, v) in table.training else " "
                row += (f"{table.cells[(p, v)]:.4f}" + mark).rjust(width)
            else:
                row += "-".rjust(width)
        lines.append(row)
    lines.append("-" * len(head))
    lines.append("mean".ljust(14) + "".join((f"{table.means[v]:.4f} ").rjust(width) for v in table.variants))
    if table.training:
        lines.append("* participant used to train or fine-tune this variant")
    lines.append(f"corpus sha256 {table.corpus_digest}")
    return "\n".join(lines) + "\n"


def render(table: ComparisonTable, out_path: str | Path) -> tuple[Path, Path]:
    """Write ``<out_path>.txt`` (aligned table) and ``<out_path>.png`` (grouped bars)."""
    if not table.participants or not table.variants:
        raise EvaluationError("cannot render an empty table")
    out_path = Path(out_path)
    txt, png = out_path.with_suffix(".txt"), out_path.with_suffix(".png")
    try:
        txt.write_text(format_table(table))
    except OSError as exc:
        raise EvaluationError(f"cannot write {txt}: {exc}") from exc

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = list(table.participants) + ["mean"]
    x = np.arange(len(groups))
    n = len(table.variants)
    bar = 0.8 / n
    fig, ax = plt.subplots(figsize=(1.6 * len(groups) + 2, 3.2))
    shades = plt.cm.Purples(np.linspace(0.9, 0.35, n))
    for i, v in enumerate(table.variants):
        vals = [table.cells.get((p, v), np.nan) for p in table.participants] + [table.means[v]]
        ax.bar(x + (i - (n - 1) / 2) * bar, vals, bar, label=v, color=shades[i])
    ax.set_xticks(x)
    ax.set_xticklabels(groups)
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=7, ncol=n, loc="upper center", bbox_to_anchor=(0.5, 1.18), frameon=False)
    fig.tight_layout()
    fig.savefig(png, dpi=120)
    plt.close(fig)
    return txt, png


def write_reports(reports: Sequence[EvalReport], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")


def read_reports(path: str | Path) -> list[EvalReport]:
    return [EvalReport.from_record(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]
