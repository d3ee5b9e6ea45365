"""Decoding, WER scoring, the experiment matrix and report emission."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import grad as G
from .data import Corpus, Utterance, align_corpus, generate_corpus
from .model import DecoderConfig, EncoderConfig, EncoderOutputs, Seq2Seq
from .train import (
    ExperimentConfig,
    LossConfig,
    TrainResult,
    average_checkpoints,
    build_model,
    eval_batch,
    train,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- scoring


@dataclass
class ScoreReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return 100.0 * self.errors / self.ref_words

    def __add__(self, other: "ScoreReport") -> "ScoreReport":
        return ScoreReport(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_words + other.ref_words,
        )

    def as_dict(self) -> dict:
        return {"S": self.substitutions, "D": self.deletions, "I": self.insertions, "N": self.ref_words, "wer": self.wer}


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i in range(1, len(ref) + 1):
        cur = [i] + [0] * len(hyp)
        for j in range(1, len(hyp) + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ref[i - 1] != hyp[j - 1]))
        prev = cur
    return prev[-1]


def score_wer(reference: Sequence[str], hypothesis: Sequence[str]) -> ScoreReport:
    """Unit-cost alignment; backtrace ties prefer substitution, then insertion, then deletion."""
    ref, hyp = list(reference), list(hypothesis)
    if not ref:
        raise ValueError("reference must be non-empty")
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]))
    rep = ScoreReport(ref_words=n)
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            rep.substitutions += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            rep.insertions += 1
            j -= 1
        else:
            rep.deletions += 1
            i -= 1
    return rep


def score_corpus(pairs) -> ScoreReport:
    total = ScoreReport()
    for ref, hyp in pairs:
        total = total + score_wer(ref, hyp)
    return total


# ---------------------------------------------------------------- decoding


def _slice_enc(enc: EncoderOutputs, b: int) -> EncoderOutputs:
    n = int(enc.lengths[b])
    cut = lambda t: G.Tensor(t.value[b : b + 1, :n])  # noqa: E731
    return EncoderOutputs(
        [], cut(enc.enc), cut(enc.value), cut(enc.inv_fertility), cut(enc.ctx),
        np.array([n]), enc.mask[b : b + 1, :n],
    )


def decode_utterances(model: Seq2Seq, utts: list[Utterance], beam_size: int | None = None) -> list[list[int]]:
    if not utts:
        return []
    batch = eval_batch(utts)
    with G.no_grad():
        enc = model.encode(batch.features, batch.lengths)
    out = []
    for b in range(len(utts)):
        seq, _ = model.decode_beam(_slice_enc(enc, b), beam_size)
        out.append(seq)
    return out


def evaluate_split(model: Seq2Seq, corpus: Corpus, split: str, beam_size: int | None = None) -> tuple[ScoreReport, list[dict]]:
    utts = corpus.split(split)
    hyps = decode_utterances(model, utts, beam_size)
    rows, pairs = [], []
    for u, h in zip(utts, hyps):
        words = corpus.bpe.decode(h)
        pairs.append((u.words, words))
        rows.append({"id": u.id, "ref": " ".join(u.words), "hyp": " ".join(words)})
    return score_corpus(pairs), rows


# ---------------------------------------------------------------- matrix


SYSTEM_NAMES = {
    (False, "none"): "Baseline",
    (True, "none"): "Tri-CE",
    (False, "enc"): "BPE-CE",
    (False, "ctx"): "BPE-CE",
    (True, "enc"): "Tri-CE and BPE-CE",
    (True, "ctx"): "Tri-CE and BPE-CE",
}


def system_name(loss: LossConfig, alternating: bool = False) -> str:
    name = SYSTEM_NAMES[(loss.tri_ce, loss.bpe_ce)]
    return f"Alternating {name}" if alternating else name


@dataclass
class MatrixRow:
    row_id: str
    loss: LossConfig
    lr_mode: str = "lr1"
    alternation: bool = False

    @property
    def system(self) -> str:
        return system_name(self.loss, self.alternation)


@dataclass
class ExperimentMatrix:
    rows: list[MatrixRow]
    results: list[dict] = field(default_factory=list)
    logs: dict[str, list[dict]] = field(default_factory=dict)

    def summary(self) -> list[dict]:
        """Median dev/test WER over seeds for every (row, split)."""
        out = []
        for row in self.rows:
            rs = [r for r in self.results if r["row"] == row.row_id and r.get("error") is None]
            out.append(
                {
                    "row": row.row_id,
                    "system": row.system,
                    "loss": row.loss,
                    "lr_mode": row.lr_mode,
                    "alternation": row.alternation,
                    "dev_wer": float(np.median([r["dev_wer"] for r in rs])) if rs else None,
                    "test_wer": float(np.median([r["test_wer"] for r in rs])) if rs else None,
                    "seeds": len(rs),
                }
            )
        return out


def table2_rows(lr_modes: Sequence[str] = ("lr1", "lr2"), alternation: bool = True) -> list[MatrixRow]:
    """The eight loss compositions under each lr contour, plus the alternating rows (lr2)."""
    from .train import loss_rows

    rows = []
    for i, loss in enumerate(loss_rows(), start=1):
        for mode in lr_modes:
            rows.append(MatrixRow(f"row{i}-{mode}", loss, mode))
    if alternation:
        for i, loss in enumerate(loss_rows(), start=1):
            if loss.tri_ce and loss.bpe_ce != "none":
                rows.append(MatrixRow(f"row{i}-alt-lr2", loss, "lr2", True))
    return rows


def run_row(
    corpus: Corpus, base: ExperimentConfig, row: MatrixRow, seed: int, out_dir: Path | None = None
) -> tuple[dict, TrainResult | None]:
    sched = replace(
        base.schedule,
        lr_mode=row.lr_mode,
        alternation=row.alternation,
        hold_sub_epochs=None,
        alternation_period=None,
        alternation_span=None,
    )
    enc_cfg = EncoderConfig(input_dim=corpus.spec.feature_dim, **base.encoder)
    dec_cfg = DecoderConfig(vocab_size=len(corpus.bpe) + 1, **base.decoder)
    cfg = replace(base, seed=seed, loss=row.loss, schedule=sched)
    rec = {"row": row.row_id, "system": row.system, "seed": seed, "config_hash": cfg.hash()}
    try:
        model = build_model(corpus, row.loss, enc_cfg, dec_cfg, seed)
        log_path = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            log_path = out_dir / f"{row.row_id}.seed{seed}.metrics.jsonl"
        result = train(corpus, model, row.loss, sched, seed, base.augment, log_path=log_path)
        if result.checkpoints:
            model.load_state_dict(average_checkpoints([c for _, c in result.checkpoints]))
        dev, _ = evaluate_split(model, corpus, "dev")
        test, _ = evaluate_split(model, corpus, "test")
        rec.update(dev_wer=dev.wer, test_wer=test.wer, error=None)
        return rec, result
    except Exception as exc:  # a failing row must not sink the matrix
        log.exception("row %s seed %d failed", row.row_id, seed)
        rec.update(dev_wer=None, test_wer=None, error=f"{type(exc).__name__}: {exc}")
        return rec, None


def run_matrix(
    base: ExperimentConfig,
    rows: list[MatrixRow],
    seeds: Sequence[int],
    out_dir: str | Path | None = None,
    corpus: Corpus | None = None,
) -> ExperimentMatrix:
    """Train, average, decode and score every (row, seed); writes results and table when ``out_dir`` is set."""
    if corpus is None:
        corpus = generate_corpus(base.corpus, base.corpus_seed)
        align_corpus(corpus)
    out = Path(out_dir) if out_dir is not None else None
    matrix = ExperimentMatrix(rows)
    for row in rows:
        for seed in seeds:
            rec, result = run_row(corpus, base, row, seed, out)
            matrix.results.append(rec)
            if result is not None:
                matrix.logs[f"{row.row_id}.seed{seed}"] = result.log
    matrix.results.sort(key=lambda r: (r["row"], r["seed"]))
    if out is not None:
        write_results(matrix, out / "results.jsonl")
        (out / "table.txt").write_text(format_table(matrix))
    return matrix


def write_results(matrix: ExperimentMatrix, path) -> None:
    with open(path, "w") as f:
        for r in matrix.results:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_results(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------- reports

_HEADER = ["System", "Tri CE", "BPE CE", "BPE CTC", "lr", "dev", "test"]


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.1f}"


def format_table(matrix: ExperimentMatrix) -> str:
    """Column-aligned text table of median WERs, one line per matrix row."""
    lines = [_HEADER]
    for s in matrix.summary():
        loss = s["loss"]
        lines.append(
            [
                s["system"],
                "+" if loss.tri_ce else "-",
                loss.bpe_ce if loss.bpe_ce != "none" else "-",
                loss.bpe_ctc if loss.bpe_ctc != "none" else "-",
                s["lr_mode"],
                _fmt(s["dev_wer"]),
                _fmt(s["test_wer"]),
            ]
        )
    widths = [max(len(r[i]) for r in lines) for i in range(len(_HEADER))]
    text = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in lines]
    text.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(text) + "\n"


def loss_curve_rows(log: list[dict]) -> tuple[list[str], list[list]]:
    """Plot-ready rows: sub_epoch followed by one column per loss term seen in training."""
    terms = sorted({t for rec in log for t in rec["train"] if t != "total"})
    header = ["sub_epoch"] + terms
    rows = [[rec["sub_epoch"]] + [rec["train"].get(t) for t in terms] for rec in log]
    return header, rows


def emit_report(logs: dict[str, list[dict]], matrix: ExperimentMatrix, out_dir, plot: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "table.txt"]
    written[0].write_text(format_table(matrix))
    for key in sorted(logs):
        header, rows = loss_curve_rows(logs[key])
        path = out / f"{key}.curves.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(rows)
        written.append(path)
        if plot and rows:
            written.append(_plot(header, rows, out / f"{key}.curves.png", key))
    return written


def _plot(header, rows, path: Path, title: str) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    x = [r[0] for r in rows]
    for k, name in enumerate(header[1:], start=1):
        y = [np.nan if r[k] is None else r[k] for r in rows]
        ax.plot(x, y, label=name)
    ax.set_xlabel("sub-epoch")
    ax.set_ylabel("train loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
