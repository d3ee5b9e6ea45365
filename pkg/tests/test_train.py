from fractions import Fraction

import numpy as np
import pytest

from weakalign import grad as G
from weakalign.data import normalize
from weakalign.train import (
    Adam,
    ConfigError,
    LossConfig,
    TrainSchedule,
    alternation_weights,
    average_checkpoints,
    bucket_batches,
    clip_global_norm,
    compose_loss,
    decoder_targets,
    experiment_from_dict,
    load_experiment,
    loss_rows,
    lr_at,
    make_batch,
    train,
)
from conftest import tiny_model
from oracles import central_difference, max_relative_error

ROW8 = LossConfig(tri_ce=True, bpe_ce="enc", bpe_ctc="ctx")


def batch_of(corpus, n=2, start=0):
    utts = corpus.split("train")[start : start + n]
    return make_batch(
        [(u.id, normalize(u.features), u.phone_alignment.labels, u.bpe_alignment.labels, u.bpe_ids) for u in utts]
    )


# ---------------------------------------------------------------- schedules


def test_full_scale_alternation_and_lr2():
    s = TrainSchedule(total_sub_epochs=200, lr_mode="lr2", alternation=True)
    assert (s.alternation_period, s.alternation_span, s.hold_sub_epochs) == (5, 150, 150)
    for i in range(1, 201):
        tri, bpe = alternation_weights(i, s)
        if i <= 150:
            block = (i - 1) // 5
            assert (tri, bpe) == ((1.0, 0.0) if block % 2 == 0 else (0.0, 1.0)), i
        else:
            assert (tri, bpe) == (1.0, 1.0)
        if i <= 150:
            assert lr_at(i, s) == 0.0008
        else:
            assert lr_at(i, s) < lr_at(i - 1, s)


def test_lr1_holds_for_forty():
    s = TrainSchedule(total_sub_epochs=200, lr_mode="lr1")
    assert [lr_at(i, s) for i in range(1, 41)] == [0.0008] * 40
    assert lr_at(41, s) == pytest.approx(0.0008 * 0.97)


def test_no_alternation_means_both_on():
    s = TrainSchedule(total_sub_epochs=10)
    assert {alternation_weights(i, s) for i in range(1, 11)} == {(1.0, 1.0)}


def test_schedule_scales_with_total():
    s = TrainSchedule(total_sub_epochs=40, lr_mode="lr2", alternation=True)
    assert (s.alternation_period, s.alternation_span, s.hold_sub_epochs) == (1, 30, 30)


def test_schedule_rejects_bad_values():
    with pytest.raises(ConfigError):
        TrainSchedule(lr_mode="fast")
    with pytest.raises(ConfigError):
        TrainSchedule(total_sub_epochs=10, hold_sub_epochs=20)
    with pytest.raises(ValueError):
        lr_at(0, TrainSchedule())
    with pytest.raises(ValueError):
        alternation_weights(11, TrainSchedule(total_sub_epochs=10))


# ---------------------------------------------------------------- loss configs


def test_eight_distinct_rows():
    rows = loss_rows()
    assert len(rows) == 8
    assert len({r.describe() for r in rows}) == 8
    assert rows[0].active_terms() == ["primary", "bpe_ctc"]
    assert rows[7].active_terms() == ["primary", "tri_ce", "bpe_ce", "bpe_ctc"]
    assert (rows[7].bpe_ce, rows[7].bpe_ctc) == ("enc", "ctx")


@pytest.mark.parametrize("where", ["enc", "ctx"])
def test_ce_and_ctc_on_same_output_rejected(where):
    with pytest.raises(ConfigError, match="converge"):
        LossConfig(bpe_ce=where, bpe_ctc=where)


def test_unknown_term_and_placement_rejected():
    with pytest.raises(ConfigError):
        LossConfig(weights={"bogus": 1.0})
    with pytest.raises(ConfigError):
        LossConfig(bpe_ctc="decoder")


def test_zero_weights_reduce_to_primary(corpus):
    zero = LossConfig(tri_ce=True, bpe_ce="enc", bpe_ctc="ctx", weights={"tri_ce": 0, "bpe_ce": 0, "bpe_ctc": 0})
    m = tiny_model(corpus, zero)
    b = batch_of(corpus)
    total, values = compose_loss(m, b, zero)
    assert total.item() == values["primary"]
    assert values["tri_ce"] is None and values["bpe_ctc"] is None


def test_total_is_weighted_sum(corpus):
    cfg = LossConfig(tri_ce=True, bpe_ce="enc", bpe_ctc="ctx", weights={"tri_ce": 0.3, "bpe_ctc": 2.0})
    m = tiny_model(corpus, cfg)
    _, v = compose_loss(m, batch_of(corpus), cfg)
    expected = v["primary"] + 0.3 * v["tri_ce"] + v["bpe_ce"] + 2.0 * v["bpe_ctc"]
    assert v["total"] == pytest.approx(expected, abs=1e-12)


def test_every_row_builds_a_distinct_graph(corpus):
    b = batch_of(corpus)
    shapes = set()
    for cfg in loss_rows():
        m = tiny_model(corpus, cfg)
        with G.Tape() as tape:
            total, values = compose_loss(m, b, cfg)
        tape.backward(total)
        touched = tuple(sorted((n, p.shape) for n, p in m.params.items() if p.grad is not None and np.any(p.grad != 0)))
        shapes.add((touched, tuple(sorted(k for k, v in values.items() if v is not None))))
        assert np.isfinite(total.item())
    assert len(shapes) == 8


def test_inactive_alternation_head_gets_no_gradient(corpus):
    m = tiny_model(corpus, ROW8)
    b = batch_of(corpus)
    for tri, bpe in [(1.0, 0.0), (0.0, 1.0)]:
        for p in m.params.values():
            p.grad = None
        with G.Tape() as tape:
            total, _ = compose_loss(m, b, ROW8, {"tri_ce": tri, "bpe_ce": bpe})
        tape.backward(total)
        off = "head.bpe_ce.W" if tri else "head.tri_ce.W"
        on = "head.tri_ce.W" if tri else "head.bpe_ce.W"
        assert m[off].grad is None or np.all(m[off].grad == 0)
        assert np.any(m[on].grad != 0)


def test_missing_alignment_is_an_error(corpus):
    m = tiny_model(corpus, ROW8)
    b = batch_of(corpus)
    b.phone_labels = None
    with pytest.raises(ValueError, match="alignment"):
        compose_loss(m, b, ROW8)


def test_composed_row8_gradient_spot_check(corpus):
    m = tiny_model(corpus, ROW8, hidden=3)
    b = batch_of(corpus, 2, start=3)
    with G.Tape() as tape:
        total, _ = compose_loss(m, b, ROW8)
    tape.backward(total)
    rng = np.random.default_rng(0)
    worst = 0.0
    for name, p in sorted(m.params.items()):
        flat = p.value.reshape(-1)
        for idx in rng.choice(flat.size, size=min(2, flat.size), replace=False):
            def f(i=idx):
                with G.no_grad():
                    return compose_loss(m, b, ROW8)[0].item()

            num = central_difference(f, flat[idx : idx + 1])
            g = 0.0 if p.grad is None else p.grad.reshape(-1)[idx]
            worst = max(worst, max_relative_error(np.array([g]), num))
    assert worst < 1e-5


# ---------------------------------------------------------------- batches


def test_decoder_targets_append_eos():
    toks, labels = decoder_targets([[3, 1], [2]], eos=9)
    assert toks.tolist() == [[3, 1, 9], [2, 9, 9]]
    assert labels.tolist() == [[3, 1, 9], [2, 9, -1]]


def test_buckets_respect_budget(corpus):
    utts = corpus.split("train")
    groups = bucket_batches(utts, 200)
    assert sorted(i for g in groups for i in g) == list(range(len(utts)))
    for g in groups:
        assert len(g) == 1 or max(utts[i].num_frames for i in g) * len(g) <= 200


def test_make_batch_rejects_length_mismatch():
    with pytest.raises(ValueError):
        make_batch([("u", np.zeros((3, 2)), np.zeros(3), np.zeros(2), [1])])


# ---------------------------------------------------------------- optimiser + averaging


def test_clip_scales_to_max_norm():
    g = {"a": np.array([3.0, 4.0]), "b": np.array([0.0])}
    assert clip_global_norm(g, 1.0) == 5.0
    assert np.allclose(g["a"], [0.6, 0.8])
    g = {"a": np.array([0.3, 0.4])}
    clip_global_norm(g, 1.0)
    assert np.array_equal(g["a"], [0.3, 0.4])


def test_adam_first_step_moves_by_lr():
    p = G.parameter([1.0, -1.0])
    opt = Adam({"p": p})
    opt.step({"p": np.array([0.5, -2.0])}, 0.1)
    assert np.allclose(p.value, [0.9, -0.9], atol=1e-6)


def exact_mean(values):
    return float(sum(Fraction(v) for v in values) / len(values))


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
def test_average_is_correctly_rounded_mean(k):
    rng = np.random.default_rng(k)
    cks = [{"w": rng.normal(size=(3, 2)) * 10.0 ** rng.integers(-3, 4, size=(3, 2)), "b": rng.normal(size=4)}
           for _ in range(k)]
    avg = average_checkpoints(cks)
    for n in ("w", "b"):
        ref = np.array([exact_mean(col) for col in zip(*(c[n].ravel() for c in cks))]).reshape(cks[0][n].shape)
        assert np.array_equal(avg[n], ref)
        assert avg[n].shape == cks[0][n].shape
    same = average_checkpoints([cks[0]] * k)
    assert all(np.array_equal(same[n], cks[0][n]) for n in cks[0])


def test_average_rejects_mismatch():
    with pytest.raises(ValueError):
        average_checkpoints([{"a": np.zeros(2)}, {"b": np.zeros(2)}])
    with pytest.raises(ValueError):
        average_checkpoints([{"a": np.zeros(2)}, {"a": np.zeros(3)}])
    with pytest.raises(ValueError):
        average_checkpoints([])


# ---------------------------------------------------------------- training loop


def quick_schedule(n, **kw):
    base = dict(total_sub_epochs=n, frames_per_batch=300, dev_eval_utterances=4, base_lr=0.01)
    base.update(kw)
    return TrainSchedule(**base)


def test_zero_sub_epochs_leaves_model_untouched(corpus):
    m = tiny_model(corpus, ROW8)
    before = m.state_dict()
    res = train(corpus, m, ROW8, quick_schedule(0))
    assert res.checkpoints == [] and res.log == []
    assert all(np.array_equal(before[n], m[n].value) for n in before)


def test_training_is_deterministic(corpus, tmp_path):
    states = []
    for run in range(2):
        m = tiny_model(corpus, ROW8)
        res = train(corpus, m, ROW8, quick_schedule(2), seed=3, log_path=tmp_path / f"log{run}.jsonl")
        states.append(m.state_dict())
    assert all(np.array_equal(states[0][n], states[1][n]) for n in states[0])
    assert (tmp_path / "log0.jsonl").read_bytes() == (tmp_path / "log1.jsonl").read_bytes()


def test_training_lowers_primary_loss(corpus):
    m = tiny_model(corpus, ROW8, hidden=6)
    res = train(corpus, m, ROW8, quick_schedule(8, augment=False), seed=0)
    first, last = res.log[0]["train"]["primary"], res.log[-1]["train"]["primary"]
    assert last < first
    assert len(res.checkpoints) == 4
    assert [s for s, _ in res.checkpoints] == [5, 6, 7, 8]


def test_alternation_logs_inactive_terms_as_absent(corpus):
    m = tiny_model(corpus, ROW8)
    s = quick_schedule(4, alternation=True, lr_mode="lr2", alternation_period=1, alternation_span=4)
    res = train(corpus, m, ROW8, s)
    assert "bpe_ce" not in res.log[0]["train"] and "tri_ce" in res.log[0]["train"]
    assert "tri_ce" not in res.log[1]["train"] and "bpe_ce" in res.log[1]["train"]


def test_alternation_needs_both_ce_terms(corpus):
    cfg = loss_rows()[1]
    with pytest.raises(ConfigError):
        train(corpus, tiny_model(corpus, cfg), cfg, quick_schedule(1, alternation=True))


def test_checkpoints_written_to_disk(corpus, tmp_path):
    m = tiny_model(corpus, ROW8)
    train(corpus, m, ROW8, quick_schedule(2), out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt.0001", "ckpt.0002"]


def test_experiment_file_round_trip(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text("seed: 4\nloss: {tri_ce: true, bpe_ce: enc, bpe_ctc: ctx}\nschedule: {total_sub_epochs: 8}\n")
    exp = load_experiment(path)
    assert exp.seed == 4 and exp.loss.bpe_ctc == "ctx" and exp.schedule.total_sub_epochs == 8
    assert exp.hash() == experiment_from_dict(exp.to_dict()).hash()
    assert exp.hash() != experiment_from_dict({}).hash()
