"""Command-line entry point: ``weakalign <subcommand> [--config F] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .align import write_alignment_cache
from .data import align_corpus, generate_corpus, load_corpus, save_corpus
from .evaluate import (
    ExperimentMatrix,
    MatrixRow,
    emit_report,
    evaluate_split,
    format_table,
    read_results,
    run_matrix,
    score_corpus,
    table2_rows,
)
from .model import DecoderConfig, EncoderConfig, load_checkpoint, save_checkpoint
from .train import (
    ExperimentConfig,
    average_checkpoints,
    build_model,
    experiment_from_dict,
    load_experiment,
    loss_rows,
    train,
)

log = logging.getLogger("weakalign")


def _experiment(args) -> ExperimentConfig:
    exp = load_experiment(args.config) if args.config else experiment_from_dict({})
    if args.seed is not None:
        exp = replace(exp, seed=args.seed)
    return exp


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _corpus(args, exp: ExperimentConfig):
    if getattr(args, "corpus", None):
        return load_corpus(args.corpus)
    corpus = generate_corpus(exp.corpus, exp.corpus_seed)
    align_corpus(corpus)
    return corpus


def _configs(exp: ExperimentConfig, corpus):
    enc = EncoderConfig(input_dim=corpus.spec.feature_dim, **exp.encoder)
    dec = DecoderConfig(vocab_size=len(corpus.bpe) + 1, **exp.decoder)
    return enc, dec


def _row_loss(exp: ExperimentConfig, row: int | None):
    return loss_rows()[row - 1] if row else exp.loss


# ---------------------------------------------------------------- subcommands


def cmd_gen_corpus(args) -> int:
    exp = _experiment(args)
    seed = exp.corpus_seed if args.seed is None else args.seed
    corpus = generate_corpus(exp.corpus, seed)
    path = _out(args) / f"corpus.{args.format}"
    save_corpus(corpus, path, args.format)
    print(f"{len(corpus.utterances)} utterances, {len(corpus.bpe)} BPE units -> {path}")
    return 0


def cmd_align(args) -> int:
    corpus = load_corpus(args.corpus)
    stats = align_corpus(corpus)
    out = _out(args)
    save_corpus(corpus, out / "corpus.aligned.jsonl")
    write_alignment_cache(out / "phone.ali", {u.id: u.phone_alignment for u in corpus.utterances})
    write_alignment_cache(out / "bpe.ali", {u.id: u.bpe_alignment for u in corpus.utterances})
    print(f"aligned {len(corpus.utterances)} utterances; {stats['phone_mismatch']}/{stats['frames']} "
          "frames differ from the generation-time alignment")
    return 0


def cmd_train(args) -> int:
    exp = _experiment(args)
    corpus = _corpus(args, exp)
    loss = _row_loss(exp, args.row)
    sched = exp.schedule
    if args.alternation or args.lr_mode:
        sched = replace(
            sched,
            alternation=args.alternation or sched.alternation,
            lr_mode=args.lr_mode or sched.lr_mode,
            hold_sub_epochs=None,
            alternation_period=None,
            alternation_span=None,
        )
    enc, dec = _configs(exp, corpus)
    model = build_model(corpus, loss, enc, dec, exp.seed)
    out = _out(args)
    result = train(corpus, model, loss, sched, exp.seed, exp.augment, out / "checkpoints", out / "metrics.jsonl")
    if result.checkpoints:
        model.load_state_dict(average_checkpoints([c for _, c in result.checkpoints]))
    save_checkpoint(out / "model.ckpt", model.state_dict())
    (out / "events.log").write_text("".join(e + "\n" for e in result.events))
    print(f"{loss.describe()}: {len(result.log)} sub-epochs, averaged {len(result.checkpoints)} checkpoints "
          f"-> {out / 'model.ckpt'}")
    return 0


def cmd_decode(args) -> int:
    exp = _experiment(args)
    corpus = _corpus(args, exp)
    enc, dec = _configs(exp, corpus)
    model = build_model(corpus, _row_loss(exp, args.row), enc, dec, exp.seed)
    model.load_state_dict(load_checkpoint(args.model))
    report, rows = evaluate_split(model, corpus, args.split, args.beam)
    path = _out(args) / f"{args.split}.hyp.jsonl"
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    print(f"{args.split}: WER {report.wer:.2f}% ({len(rows)} utterances) -> {path}")
    return 0


def cmd_score(args) -> int:
    pairs = []
    with open(args.hyps) as f:
        for line in f:
            if line.strip():
                r = json.loads(line)
                pairs.append((r["ref"].split(), r["hyp"].split()))
    report = score_corpus(pairs)
    d = report.as_dict()
    print(f"N={d['N']} S={d['S']} D={d['D']} I={d['I']} WER={d['wer']:.2f}%")
    if args.out:
        (_out(args) / "score.json").write_text(json.dumps(d, sort_keys=True) + "\n")
    return 0


def _select_rows(spec: str) -> list[MatrixRow]:
    rows = table2_rows()
    if spec == "all":
        return rows
    wanted = [s.strip() for s in spec.split(",") if s.strip()]
    by_id = {r.row_id: r for r in rows}
    unknown = [w for w in wanted if w not in by_id]
    if unknown:
        raise SystemExit(f"unknown rows {unknown}; choose from {sorted(by_id)}")
    return [by_id[w] for w in wanted]


def cmd_matrix(args) -> int:
    exp = _experiment(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [exp.seed]
    out = _out(args)
    matrix = run_matrix(exp, _select_rows(args.rows), seeds, out, _corpus(args, exp) if args.corpus else None)
    print(format_table(matrix), end="")
    failed = [r for r in matrix.results if r.get("error")]
    return 1 if failed else 0


def cmd_report(args) -> int:
    src = Path(args.results)
    results = read_results(src / "results.jsonl")
    by_id = {r.row_id: r for r in table2_rows()}
    ids = sorted({r["row"] for r in results}, key=lambda i: list(by_id).index(i) if i in by_id else len(by_id))
    rows = [by_id.get(i) or MatrixRow(i, loss_rows()[0]) for i in ids]
    matrix = ExperimentMatrix(rows, results)
    logs = {}
    for p in sorted(src.glob("*.metrics.jsonl")):
        with open(p) as f:
            logs[p.name[: -len(".metrics.jsonl")]] = [json.loads(line) for line in f if line.strip()]
    written = emit_report(logs, matrix, _out(args), plot=not args.no_plot)
    print(format_table(matrix), end="")
    print(f"wrote {len(written)} files to {args.out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML experiment file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed (u64)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    p = argparse.ArgumentParser(prog="weakalign", description="Weak-alignment auxiliary losses for attention ASR.")
    p.add_argument("--config", default=None, help="YAML experiment file")
    p.add_argument("--seed", type=int, default=None, help="seed (u64)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-corpus", parents=[common], help="generate the synthetic corpus")
    s.add_argument("--format", choices=["jsonl", "npz"], default="jsonl")
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("align", parents=[common], help="forced-align a corpus and write alignment caches")
    s.add_argument("--corpus", required=True)
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("train", parents=[common], help="train one loss configuration")
    s.add_argument("--corpus", help="aligned corpus file (default: generate from config)")
    s.add_argument("--row", type=int, choices=range(1, 9), help="use one of the eight loss rows")
    s.add_argument("--alternation", action="store_true")
    s.add_argument("--lr-mode", choices=["lr1", "lr2"])
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("decode", parents=[common], help="beam-decode a split with a trained model")
    s.add_argument("--corpus")
    s.add_argument("--model", required=True)
    s.add_argument("--row", type=int, choices=range(1, 9))
    s.add_argument("--split", choices=["train", "dev", "test"], default="dev")
    s.add_argument("--beam", type=int)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("score", parents=[common], help="score a hypothesis file (jsonl with ref/hyp)")
    s.add_argument("hyps")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("matrix", parents=[common], help="train and score the experiment matrix")
    s.add_argument("--rows", default="all", help="comma-separated row ids or 'all'")
    s.add_argument("--seeds", help="comma-separated training seeds (default: --seed)")
    s.add_argument("--corpus")
    s.set_defaults(func=cmd_matrix)

    s = sub.add_parser("report", parents=[common], help="tables and loss-curve plots from a matrix run")
    s.add_argument("results", help="directory holding results.jsonl and *.metrics.jsonl")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
