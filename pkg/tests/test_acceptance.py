"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line."""

import itertools
import math
import time
from contextlib import contextmanager
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from weakalign import grad as G
from weakalign.align import ToyAcousticModel, viterbi_align
from weakalign.cli import main as cli_main
from weakalign.data import align_corpus, generate_corpus, normalize
from weakalign.evaluate import MatrixRow, run_matrix
from weakalign.losses import IGNORE, SmoothedCESpec, ctc_loss, frame_alignment_ce, smoothed_ce
from weakalign.train import (
    ConfigError,
    LossConfig,
    TrainSchedule,
    alternation_weights,
    average_checkpoints,
    build_model,
    compose_loss,
    load_experiment,
    loss_rows,
    lr_at,
    make_batch,
    train,
)
from conftest import ACCEPTANCE, tiny_corpus, tiny_model
from oracles import (
    central_difference,
    ctc_label_masses,
    exhaustive_segmentation,
    max_relative_error,
)

DESK = Path(__file__).resolve().parent.parent / "configs" / "desk.yaml"


@contextmanager
def criterion(n, title):
    info = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        ACCEPTANCE[n] = f"[{n}] FAIL  {title} ({time.perf_counter() - t0:.1f}s): {type(exc).__name__}: {exc}".split("\n")[0]
        raise
    detail = ", ".join(f"{k}={v}" for k, v in info.items())
    ACCEPTANCE[n] = f"[{n}] PASS  {title} ({time.perf_counter() - t0:.1f}s) {detail}".rstrip()


def log_normalize(x):
    return x - np.log(np.exp(x).sum(-1, keepdims=True))


@pytest.fixture(scope="module")
def desk():
    exp = load_experiment(DESK)
    corpus = generate_corpus(exp.corpus, exp.corpus_seed)
    align_corpus(corpus)
    return exp, corpus


# ---------------------------------------------------------------- 1


def test_1_ctc_oracle_equivalence():
    with criterion(1, "CTC equals brute-force path enumeration (T<=6, N<=3, V<=3, 50 distributions)") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst, checked, infeasible = 0.0, 0, 0
        for _ in range(50):
            for T in range(1, 7):
                for V in range(1, 4):
                    lp = log_normalize(rng.normal(size=(T, V + 1)))
                    mass = ctc_label_masses(lp)
                    targets = [list(t) for N in range(1, 4) for t in itertools.product(range(V), repeat=N)]
                    events = []
                    got = ctc_loss(
                        G.Tensor(np.repeat(lp[None], len(targets), axis=0)), targets, events=events, reduction="none"
                    ).value
                    for tg, g in zip(targets, got):
                        m = mass.get(tuple(tg), 0.0)
                        if m == 0.0:
                            assert g == 0.0
                            infeasible += 1
                            continue
                        worst = max(worst, abs(g + math.log(m)))
                        checked += 1
                    assert len(events) == sum(1 for t in targets if mass.get(tuple(t), 0.0) == 0.0)
        elapsed = time.perf_counter() - t0
        info.update(cases=checked, infeasible=infeasible, max_abs_err=f"{worst:.1e}", seconds=f"{elapsed:.1f}")
        assert worst < 1e-9
        assert elapsed < 10.0


# ---------------------------------------------------------------- 2


def _fd_all(build, params, rtol=1e-5):
    with G.Tape() as tape:
        loss = build()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        def f():
            with G.no_grad():
                return build().item()

        num = central_difference(f, p.value)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        worst = max(worst, max_relative_error(analytic, num))
    assert worst < rtol, worst
    return worst


def test_2_gradient_checks():
    with criterion(2, "analytic gradients match central differences within 1e-5 relative") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)
        errs = {}

        logits = G.parameter(rng.normal(size=(2, 6, 4)))
        tg = [[0, 1], [2, 2, 1]]
        errs["ctc"] = _fd_all(lambda: ctc_loss(G.log_softmax(logits, axis=-1), tg, [6, 5]), [logits])

        for eps in (0.0, 0.1, 0.5):
            x = G.parameter(rng.normal(size=(7, 5)))
            labels = rng.integers(0, 5, size=7)
            labels[2] = IGNORE
            errs[f"smoothed_ce@{eps}"] = _fd_all(
                lambda: smoothed_ce(G.log_softmax(x, axis=-1), labels, epsilon=eps), [x]
            )

        h = G.parameter(rng.normal(size=(2, 5, 3)))
        W = G.parameter(rng.normal(size=(3, 6)))
        b = G.parameter(rng.normal(size=6))
        fl = np.array([[0, 5, IGNORE, 2, 2], [1, 1, 3, 0, 0]])
        errs["frame_ce"] = _fd_all(lambda: frame_alignment_ce(h, fl, W, b, 0.5, [5, 4]), [h, W, b])

        corpus = tiny_corpus()
        row8 = loss_rows()[7]
        model = tiny_model(corpus, row8, hidden=3)
        utts = sorted(corpus.split("train"), key=lambda u: (u.num_frames, u.id))[:2]
        batch = make_batch(
            [(u.id, normalize(u.features), u.phone_alignment.labels, u.bpe_alignment.labels, u.bpe_ids) for u in utts]
        )
        errs["row8_composed"] = _fd_all(
            lambda: compose_loss(model, batch, row8)[0], list(model.params.values())
        )
        elapsed = time.perf_counter() - t0
        info.update({k: f"{v:.1e}" for k, v in errs.items()})
        info.update(params=model.num_parameters(), seconds=f"{elapsed:.1f}")
        assert elapsed < 60.0


# ---------------------------------------------------------------- 3


def test_3_smoothing_identities():
    with criterion(3, "label-smoothing identities") as info:
        rng = np.random.default_rng(3)
        lp = log_normalize(rng.normal(size=(9, 6)))
        tg = rng.integers(0, 6, size=9)
        got = smoothed_ce(G.Tensor(lp), tg, epsilon=0.0).item()
        nll = -lp[np.arange(9), tg]
        plain = float(np.sum(nll) / 9)
        assert got == plain

        worst_uniform = 0.0
        for V in (2, 3, 7, 31):
            for eps in (0.0, 0.1, 0.3, 0.5, 0.9):
                u = G.Tensor(np.full((4, V), -math.log(V)))
                v = smoothed_ce(u, rng.integers(0, V, size=4), epsilon=eps).item()
                worst_uniform = max(worst_uniform, abs(v - math.log(V)))
        assert worst_uniform <= 1e-12

        worst_q = 0.0
        for eps in (0.1, 0.5):
            V = 5
            z = G.parameter(np.zeros((1, V)))
            for _ in range(3000):
                with G.Tape() as tape:
                    loss = smoothed_ce(G.log_softmax(z, axis=-1), [1], epsilon=eps)
                tape.backward(loss)
                z.value = z.value - 2.0 * z.grad
            p = np.exp(log_normalize(z.value))[0]
            worst_q = max(worst_q, float(np.max(np.abs(p - SmoothedCESpec(eps, V).target_distribution(1)))))
        assert worst_q < 1e-4
        info.update(uniform_err=f"{worst_uniform:.1e}", converged_err=f"{worst_q:.1e}")


# ---------------------------------------------------------------- 4


def test_4_viterbi_oracle_equivalence():
    with criterion(4, "Viterbi equals exhaustive segmentation (T<=8, <=3 units, 100 settings)") as info:
        rng = np.random.default_rng(44)
        mismatches = cases = 0
        while cases < 100:
            U = int(rng.integers(1, 4))
            K = int(rng.integers(1, 4))
            T = int(rng.integers(1, 9))
            dur = rng.integers(1, 3, size=U + 1)
            units = [int(u) for u in rng.integers(0, U, size=K)]
            if T < sum(dur[u] for u in units):
                continue
            cases += 1
            gaps = sorted(set(rng.choice(K + 1, size=int(rng.integers(0, K + 2))).tolist()))
            means = rng.normal(size=(U + 1, 2))
            am = ToyAcousticModel(means, np.ones_like(means), dur)
            # half the settings use coarse integer scores so that ties actually occur
            ll = rng.integers(-2, 1, size=(T, U + 1)).astype(float) if cases % 2 else rng.normal(size=(T, U + 1))
            ref_score, ref = exhaustive_segmentation(ll, units, dur, U, dur[U], gaps)
            got = viterbi_align(None, units, am, silence_gaps=gaps, loglik=ll)
            ref = np.asarray(ref)
            expect = np.where(ref < 0, IGNORE, np.array(units + [0])[np.maximum(ref, 0)])
            segs = [(int(np.flatnonzero(ref == k)[0]), int(np.flatnonzero(ref == k)[-1]) + 1) for k in range(K)]
            mismatches += not (np.array_equal(got.labels, expect) and got.segments == segs)
        info.update(settings=cases, mismatches=mismatches)
        assert mismatches == 0


# ---------------------------------------------------------------- 5


def test_5_schedule_fidelity():
    with criterion(5, "alternation and learning-rate schedules at full scale") as info:
        alt = TrainSchedule(total_sub_epochs=200, lr_mode="lr2", alternation=True,
                            alternation_period=5, alternation_span=150, hold_sub_epochs=150)
        lr1 = TrainSchedule(total_sub_epochs=200, lr_mode="lr1")
        for i in range(1, 201):
            if i <= 150:
                expect = (1.0, 0.0) if ((i - 1) // 5) % 2 == 0 else (0.0, 1.0)
            else:
                expect = (1.0, 1.0)
            assert alternation_weights(i, alt) == expect, i
            if i <= 150:
                assert lr_at(i, alt) == 0.0008, i
            else:
                assert 0 < lr_at(i, alt) < lr_at(i - 1, alt), i
            if i <= 40:
                assert lr_at(i, lr1) == 0.0008, i
            else:
                assert 0 < lr_at(i, lr1) < lr_at(i - 1, lr1), i
        switches = sum(alternation_weights(i, alt) != alternation_weights(i + 1, alt) for i in range(1, 150))
        info.update(switches=switches, lr2_final=f"{lr_at(200, alt):.2e}", lr1_final=f"{lr_at(200, lr1):.2e}")
        assert switches == 29


# ---------------------------------------------------------------- 6


def test_6_structural_coverage(desk):
    with criterion(6, "all eight loss rows train one sub-epoch; CE+CTC on enc rejected") as info:
        exp, corpus = desk
        sched = TrainSchedule(total_sub_epochs=1, base_lr=exp.schedule.base_lr, dev_eval_utterances=8)
        losses = []
        for i, cfg in enumerate(loss_rows(), start=1):
            model = build_model(corpus, cfg, seed=0)
            res = train(corpus, model, cfg, sched, seed=0)
            assert len(res.log) == 1
            vals = res.log[0]["train"]
            assert set(vals) == set(cfg.active_terms()) | {"total"}
            assert all(np.isfinite(v) for v in vals.values())
            losses.append(round(vals["total"], 2))
        with pytest.raises(ConfigError):
            LossConfig(bpe_ce="enc", bpe_ctc="enc")
        info.update(rows=8, totals=losses)


# ---------------------------------------------------------------- 7


def test_7_checkpoint_averaging(desk):
    with criterion(7, "checkpoint averaging") as info:
        exp, corpus = desk
        shapes = {n: p.shape for n, p in build_model(corpus, loss_rows()[7]).params.items()}
        rng = np.random.default_rng(77)
        cks = [{n: rng.normal(size=s) for n, s in shapes.items()} for _ in range(4)]
        avg = average_checkpoints(cks)
        elements = 0
        for n, s in shapes.items():
            cols = zip(*(c[n].ravel().tolist() for c in cks))
            ref = np.array([float(sum(map(Fraction, col)) / 4) for col in cols]).reshape(s)
            assert np.array_equal(avg[n], ref), n
            elements += ref.size
        same = average_checkpoints([cks[0]] * 4)
        assert all(np.array_equal(same[n], cks[0][n]) for n in shapes)
        info.update(parameters=elements)


# ---------------------------------------------------------------- 8


def _block_means(xs, blocks=10):
    width = max(1, len(xs) // blocks)
    return [float(np.mean(xs[i : i + width])) for i in range(0, len(xs) - width + 1, width)]


@pytest.mark.slow
def test_8_directional_toy_experiment(desk, tmp_path):
    with criterion(8, "auxiliary alignment losses beat the CTC-only baseline (desk corpus, 3 seeds)") as info:
        t0 = time.perf_counter()
        exp, corpus = desk
        rows = loss_rows()
        matrix_rows = [
            MatrixRow("baseline-lr1", rows[0], "lr1"),
            MatrixRow("row8-lr1", rows[7], "lr1"),
            MatrixRow("row8-alt-lr2", rows[7], "lr2", True),
        ]
        matrix = run_matrix(exp, matrix_rows, [0, 1, 2], tmp_path, corpus)
        summary = {s["row"]: s for s in matrix.summary()}
        for r in matrix.results:
            assert r["error"] is None, r
        base = summary["baseline-lr1"]
        aux = summary["row8-lr1"]
        alt = summary["row8-alt-lr2"]
        envelopes = []
        for seed in (0, 1, 2):
            primary = [rec["train"]["primary"] for rec in matrix.logs[f"row8-alt-lr2.seed{seed}"]]
            assert all(np.isfinite(primary))
            env = _block_means(primary)
            envelopes.append([round(e, 2) for e in env])
            assert all(b <= a for a, b in zip(env, env[1:])), env
        elapsed = time.perf_counter() - t0
        info.update(
            baseline_test=base["test_wer"],
            aux_test=aux["test_wer"],
            alt_test=alt["test_wer"],
            baseline_dev=base["dev_wer"],
            aux_dev=aux["dev_wer"],
            minutes=f"{elapsed / 60:.1f}",
        )
        print("per-seed results:", matrix.results)
        print("alternating primary-loss block means:", envelopes)
        assert aux["test_wer"] <= base["test_wer"]
        assert elapsed < 30 * 60


# ---------------------------------------------------------------- 9


def test_9_end_to_end_determinism(tmp_path):
    with criterion(9, "two matrix runs give byte-identical results files") as info:
        cfg = tmp_path / "small.yaml"
        cfg.write_text(
            "corpus: {num_utterances: 40, num_merges: 4}\n"
            "encoder: {num_layers: 2, hidden_dim: 4, attention_dim: 3}\n"
            "decoder: {embed_dim: 3, state_dim: 4, beam_size: 2, max_output_length: 8}\n"
            "schedule: {total_sub_epochs: 2, frames_per_batch: 300, dev_eval_utterances: 4}\n"
        )
        outs = []
        for run in ("a", "b"):
            out = tmp_path / run
            assert cli_main(["matrix", "--config", str(cfg), "--seeds", "0,1", "--out", str(out)]) == 0
            outs.append(out)
        a = (outs[0] / "results.jsonl").read_bytes()
        b = (outs[1] / "results.jsonl").read_bytes()
        assert a == b
        assert (outs[0] / "table.txt").read_bytes() == (outs[1] / "table.txt").read_bytes()
        info.update(records=len(a.splitlines()), bytes=len(a))
