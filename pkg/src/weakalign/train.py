"""Loss composition, learning-rate and alternation schedules, training loop."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import numpy as np
import yaml

from . import grad as G
from .data import AugmentSpec, Corpus, CorpusSpec, Utterance, augment_utterance, normalize
from .losses import IGNORE, ctc_loss, frame_alignment_ce, linear_head, smoothed_ce
from .model import DecoderConfig, EncoderConfig, Seq2Seq, save_checkpoint

log = logging.getLogger(__name__)

PLACEMENTS = ("none", "enc", "ctx")
TERMS = ("primary", "tri_ce", "bpe_ce", "bpe_ctc")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossConfig:
    tri_ce: bool = False
    tri_layer: int | None = None
    bpe_ce: str = "none"
    bpe_ctc: str = "enc"
    weights: dict[str, float] = field(default_factory=dict)
    aux_epsilon: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("bpe_ce", "bpe_ctc"):
            if getattr(self, name) not in PLACEMENTS:
                raise ConfigError(f"{name} placement must be one of {PLACEMENTS}")
        if self.bpe_ce != "none" and self.bpe_ce == self.bpe_ctc:
            raise ConfigError(
                f"BPE-CE and BPE-CTC cannot share the {self.bpe_ce!r} output "
                "(this combination fails to converge)"
            )
        if not 0.0 <= self.aux_epsilon < 1.0:
            raise ConfigError("aux_epsilon must lie in [0, 1)")
        unknown = set(self.weights) - set(TERMS)
        if unknown:
            raise ConfigError(f"unknown loss terms {sorted(unknown)}")

    def active_terms(self) -> list[str]:
        terms = ["primary"]
        if self.tri_ce:
            terms.append("tri_ce")
        if self.bpe_ce != "none":
            terms.append("bpe_ce")
        if self.bpe_ctc != "none":
            terms.append("bpe_ctc")
        return terms

    def weight(self, term: str) -> float:
        return float(self.weights.get(term, 1.0))

    def describe(self) -> str:
        parts = ["Primary"]
        if self.tri_ce:
            parts.append("Tri-CE")
        if self.bpe_ce != "none":
            parts.append(f"BPE-CE-{self.bpe_ce}")
        if self.bpe_ctc != "none":
            parts.append(f"BPE-CTC-{self.bpe_ctc}")
        return " + ".join(parts)


def loss_rows() -> list[LossConfig]:
    """The eight auxiliary-loss architectures, in their canonical order."""
    return [
        LossConfig(bpe_ctc="enc"),
        LossConfig(tri_ce=True, bpe_ctc="enc"),
        LossConfig(bpe_ce="enc", bpe_ctc="none"),
        LossConfig(bpe_ce="ctx", bpe_ctc="enc"),
        LossConfig(bpe_ce="enc", bpe_ctc="ctx"),
        LossConfig(tri_ce=True, bpe_ce="enc", bpe_ctc="none"),
        LossConfig(tri_ce=True, bpe_ce="ctx", bpe_ctc="enc"),
        LossConfig(tri_ce=True, bpe_ce="enc", bpe_ctc="ctx"),
    ]


# ---------------------------------------------------------------- schedules

FULL_SCALE_TOTAL = 200


def _scaled(full_value: int, total: int) -> int:
    return max(1, int(round(full_value * total / FULL_SCALE_TOTAL)))


@dataclass
class TrainSchedule:
    total_sub_epochs: int = 40
    epoch_split: int = 4
    frames_per_batch: int = 1000
    lr_mode: str = "lr1"
    base_lr: float = 0.0008
    hold_sub_epochs: int | None = None
    decay: float = 0.97
    alternation: bool = False
    alternation_period: int | None = None
    alternation_span: int | None = None
    averaging_window: int = 4
    grad_clip: float = 5.0
    augment: bool = True
    dev_eval_utterances: int = 64

    def __post_init__(self):
        if self.lr_mode not in ("lr1", "lr2"):
            raise ConfigError("lr_mode must be 'lr1' or 'lr2'")
        total = self.total_sub_epochs
        if self.hold_sub_epochs is None:
            self.hold_sub_epochs = _scaled(40 if self.lr_mode == "lr1" else 150, total)
        if self.alternation_period is None:
            self.alternation_period = _scaled(5, total)
        if self.alternation_span is None:
            self.alternation_span = _scaled(150, total)
        if total > 0 and self.hold_sub_epochs > total:
            raise ConfigError("hold_sub_epochs exceeds total_sub_epochs")
        if self.averaging_window < 1:
            raise ConfigError("averaging_window must be >= 1")


def alternation_weights(sub_epoch: int, schedule: TrainSchedule) -> tuple[float, float]:
    """(Tri-CE weight, BPE-CE weight) for a 1-based sub-epoch index.

    Inside the alternation span the two losses take turns, Tri-CE first, each
    held for ``alternation_period`` sub-epochs; afterwards both stay on.
    """
    if not 1 <= sub_epoch <= max(schedule.total_sub_epochs, 1):
        raise ValueError(f"sub-epoch {sub_epoch} outside 1..{schedule.total_sub_epochs}")
    if not schedule.alternation or sub_epoch > schedule.alternation_span:
        return (1.0, 1.0)
    phase = ((sub_epoch - 1) // schedule.alternation_period) % 2
    return (1.0, 0.0) if phase == 0 else (0.0, 1.0)


def lr_at(sub_epoch: int, schedule: TrainSchedule) -> float:
    if sub_epoch < 1:
        raise ValueError("sub-epoch indices start at 1")
    if sub_epoch <= schedule.hold_sub_epochs:
        return schedule.base_lr
    return schedule.base_lr * schedule.decay ** (sub_epoch - schedule.hold_sub_epochs)


# ---------------------------------------------------------------- model + batches


def build_model(
    corpus: Corpus,
    loss: LossConfig,
    enc_cfg: EncoderConfig | None = None,
    dec_cfg: DecoderConfig | None = None,
    seed: int = 0,
) -> Seq2Seq:
    enc_cfg = enc_cfg or EncoderConfig(input_dim=corpus.spec.feature_dim)
    V = len(corpus.bpe)
    if dec_cfg is None:
        dec_cfg = DecoderConfig(vocab_size=V + 1)
    elif dec_cfg.vocab_size != V + 1:
        raise ConfigError(f"decoder vocab must be BPE size + 1 = {V + 1}")
    D2, A = 2 * enc_cfg.hidden_dim, enc_cfg.attention_dim
    dim = {"enc": D2, "ctx": A}
    heads = {}
    if loss.tri_ce:
        heads["tri_ce"] = (D2, corpus.am.num_units)
    if loss.bpe_ce != "none":
        heads["bpe_ce"] = (dim[loss.bpe_ce], V)
    if loss.bpe_ctc != "none":
        heads["bpe_ctc"] = (dim[loss.bpe_ctc], V + 1)
    return Seq2Seq(enc_cfg, dec_cfg, heads, seed)


@dataclass
class Batch:
    ids: list[str]
    features: np.ndarray  # [B, T, F]
    lengths: np.ndarray
    phone_labels: np.ndarray | None  # [B, T], IGNORE where silent or padded
    bpe_labels: np.ndarray | None
    targets: list[list[int]]  # BPE ids without EOS


def make_batch(items: list[tuple[str, np.ndarray, np.ndarray, np.ndarray, list[int]]]) -> Batch:
    B = len(items)
    T = max(f.shape[0] for _, f, _, _, _ in items)
    F = items[0][1].shape[1]
    feats = np.zeros((B, T, F))
    phone = np.full((B, T), IGNORE, dtype=np.int64)
    bpe = np.full((B, T), IGNORE, dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    for b, (_, f, p, q, _) in enumerate(items):
        n = f.shape[0]
        if len(p) != n or len(q) != n:
            raise ValueError(f"alignment length mismatch for {items[b][0]}")
        feats[b, :n] = f
        phone[b, :n] = p
        bpe[b, :n] = q
        lengths[b] = n
    return Batch([i[0] for i in items], feats, lengths, phone, bpe, [list(i[4]) for i in items])


def eval_batch(utts: list[Utterance]) -> Batch:
    return make_batch(
        [
            (u.id, normalize(u.features), u.phone_alignment.labels, u.bpe_alignment.labels, u.bpe_ids)
            for u in utts
        ]
    )


def bucket_batches(utts: list[Utterance], frames_per_batch: int) -> list[list[int]]:
    """Length-sorted groups whose padded frame count stays within the budget."""
    order = sorted(range(len(utts)), key=lambda i: (utts[i].num_frames, utts[i].id))
    batches, cur, longest = [], [], 0
    for i in order:
        n = utts[i].num_frames
        if cur and max(longest, n) * (len(cur) + 1) > frames_per_batch:
            batches.append(cur)
            cur, longest = [], 0
        cur.append(i)
        longest = max(longest, n)
    if cur:
        batches.append(cur)
    return batches


def decoder_targets(targets: list[list[int]], eos: int) -> tuple[np.ndarray, np.ndarray]:
    """(teacher-forcing tokens, loss labels) padded to the longest target + EOS."""
    N = max(len(t) for t in targets) + 1
    toks = np.full((len(targets), N), eos, dtype=np.int64)
    labels = np.full((len(targets), N), IGNORE, dtype=np.int64)
    for b, t in enumerate(targets):
        toks[b, : len(t)] = t
        labels[b, : len(t)] = t
        labels[b, len(t)] = eos
    return toks, labels


# ---------------------------------------------------------------- loss


def compose_loss(
    model: Seq2Seq,
    batch: Batch,
    config: LossConfig,
    active: dict[str, float] | None = None,
    rng: np.random.Generator | None = None,
    events: list | None = None,
) -> tuple[G.Tensor, dict[str, float]]:
    """Total loss = primary + sum of weighted active auxiliary terms.

    ``active`` multiplies the configured weights (the alternation schedule);
    a term whose effective weight is 0 is not evaluated at all, so its head
    receives no gradient.
    """
    active = active or {}
    enc = model.encode(batch.features, batch.lengths, rng)
    toks, labels = decoder_targets(batch.targets, model.dec_cfg.eos)
    lp = model.decode_teacher_forced(enc, toks)
    primary = smoothed_ce(lp, labels, epsilon=model.dec_cfg.primary_label_smoothing)
    total = primary
    values = {"primary": primary.item()}
    for term in config.active_terms()[1:]:
        w = config.weight(term) * active.get(term, 1.0)
        if w == 0.0:
            values[term] = None
            continue
        W, b = model[f"head.{term}.W"], model[f"head.{term}.b"]
        if term == "tri_ce":
            layer = config.tri_layer or model.enc_cfg.mid_tap_layer
            if batch.phone_labels is None:
                raise ValueError("Tri-CE is active but the batch has no phoneme alignment")
            val = frame_alignment_ce(enc.tap(layer), batch.phone_labels, W, b, config.aux_epsilon, batch.lengths)
        elif term == "bpe_ce":
            if batch.bpe_labels is None:
                raise ValueError("BPE-CE is active but the batch has no BPE alignment")
            src = enc.enc if config.bpe_ce == "enc" else enc.ctx
            val = frame_alignment_ce(src, batch.bpe_labels, W, b, config.aux_epsilon, batch.lengths)
        else:
            src = enc.enc if config.bpe_ctc == "enc" else enc.ctx
            per_seq = ctc_loss(linear_head(src, W, b), batch.targets, batch.lengths, events, reduction="none")
            norm = 1.0 / np.array([len(t) for t in batch.targets], dtype=np.float64)
            val = G.scale(G.sum(G.mul(per_seq, G.Tensor(norm))), 1.0 / len(batch.targets))
        values[term] = val.item()
        total = G.add(total, G.scale(val, w) if w != 1.0 else val)
    values["total"] = total.item()
    return total, values


# ---------------------------------------------------------------- optimiser


class Adam:
    def __init__(self, params: dict[str, G.Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.value) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for n, p in self.params.items():
            g = grads[n]
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            p.value = p.value - lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for n in grads:
            grads[n] = grads[n] * s
    return norm


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoints: list[tuple[int, dict[str, np.ndarray]]]
    log: list[dict]
    events: list[str]


def token_error_rate(refs: Iterable[list[int]], hyps: Iterable[list[int]]) -> float:
    from .evaluate import edit_distance

    errs = n = 0
    for r, h in zip(refs, hyps):
        errs += edit_distance(r, h)
        n += len(r)
    return 100.0 * errs / max(n, 1)


def train(
    corpus: Corpus,
    model: Seq2Seq,
    config: LossConfig,
    schedule: TrainSchedule,
    seed: int = 0,
    augment: AugmentSpec | None = None,
    out_dir: str | Path | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Sub-epoch training loop; keeps the last ``averaging_window`` checkpoints in memory."""
    config.validate()
    if schedule.alternation and not (config.tri_ce and config.bpe_ce != "none"):
        raise ConfigError("alternation needs both Tri-CE and BPE-CE")
    augment = augment or AugmentSpec()
    train_utts = corpus.split("train")
    dev_utts = corpus.split("dev")[: schedule.dev_eval_utterances]
    batches = bucket_batches(train_utts, schedule.frames_per_batch)
    opt = Adam(model.params)
    ckpts: list[tuple[int, dict[str, np.ndarray]]] = []
    records: list[dict] = []
    events: list[str] = []
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    logf = open(log_path, "w") if log_path else None
    try:
        order: list[int] = []
        for sub in range(1, schedule.total_sub_epochs + 1):
            epoch, part = divmod(sub - 1, schedule.epoch_split)
            if part == 0:
                order = list(np.random.default_rng([seed, epoch]).permutation(len(batches)))
            chunk = np.array_split(np.array(order, dtype=np.int64), schedule.epoch_split)[part]
            tri_w, bpe_w = alternation_weights(sub, schedule)
            active = {"tri_ce": tri_w, "bpe_ce": bpe_w}
            lr = lr_at(sub, schedule)
            sums: dict[str, list[float]] = {}
            for bi in chunk:
                rng = np.random.default_rng([seed, sub, int(bi)])
                items = []
                for ui in batches[bi]:
                    u = train_utts[ui]
                    if schedule.augment:
                        f, p, q = augment_utterance(u, corpus, augment, rng)
                    else:
                        f, p, q = normalize(u.features), u.phone_alignment.labels, u.bpe_alignment.labels
                    items.append((u.id, f, p, q, u.bpe_ids))
                batch = make_batch(items)
                drop_rng = rng if model.enc_cfg.dropout_rate > 0 else None
                with G.Tape() as tape:
                    total, values = compose_loss(model, batch, config, active, drop_rng, events)
                for term, v in values.items():
                    if v is not None and not np.isfinite(v):
                        raise TrainingDiverged(f"non-finite {term} loss in sub-epoch {sub}, batch {bi}")
                for p in model.params.values():
                    p.grad = None
                tape.backward(total)
                grads = {
                    n: (p.grad if p.grad is not None else np.zeros_like(p.value))
                    for n, p in model.params.items()
                }
                clip_global_norm(grads, schedule.grad_clip)
                opt.step(grads, lr)
                for term, v in values.items():
                    if v is not None:
                        sums.setdefault(term, []).append(v)
            state = model.state_dict()
            ckpts.append((sub, state))
            ckpts = ckpts[-schedule.averaging_window :]
            if out_dir is not None:
                save_checkpoint(Path(out_dir) / f"ckpt.{sub:04d}", state)
            rec = {
                "sub_epoch": sub,
                "lr": lr,
                "active_weights": {"tri_ce": tri_w, "bpe_ce": bpe_w},
                "train": {t: float(np.mean(v)) for t, v in sorted(sums.items())},
                "dev_ter": dev_token_error(model, dev_utts) if dev_utts else None,
            }
            records.append(rec)
            log.info("sub-epoch %d lr %.6f %s", sub, lr, rec["train"])
            if logf:
                logf.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if logf:
            logf.close()
    return TrainResult(ckpts, records, events)


def dev_token_error(model: Seq2Seq, utts: list[Utterance]) -> float:
    batch = eval_batch(utts)
    with G.no_grad():
        enc = model.encode(batch.features, batch.lengths)
        hyps = model.decode_greedy(enc)
    return token_error_rate(batch.targets, hyps)


def average_checkpoints(checkpoints: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Elementwise arithmetic mean; every checkpoint must carry the same names and shapes."""
    if not checkpoints:
        raise ValueError("nothing to average")
    names = set(checkpoints[0])
    for c in checkpoints[1:]:
        if set(c) != names:
            raise ValueError(f"parameter name sets differ: {sorted(names ^ set(c))}")
        for n in names:
            if c[n].shape != checkpoints[0][n].shape:
                raise ValueError(f"{n}: shape mismatch {c[n].shape} vs {checkpoints[0][n].shape}")
    k = len(checkpoints)
    return {n: _rounded_mean([c[n] for c in checkpoints], k) for n in sorted(names)}


def _rounded_mean(arrays: list[np.ndarray], k: int) -> np.ndarray:
    """Correctly rounded elementwise mean, so equal inputs average to themselves."""
    columns = zip(*(np.asarray(a, dtype=np.float64).ravel().tolist() for a in arrays))
    if k & (k - 1) == 0:
        # dividing a correctly rounded sum by a power of two is exact
        flat = [math.fsum(col) / k for col in columns]
    else:
        flat = [float(sum(map(Fraction, col)) / k) for col in columns]
    return np.array(flat, dtype=np.float64).reshape(np.shape(arrays[0]))


# ---------------------------------------------------------------- experiment config


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus_seed: int = 0
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    encoder: dict = field(default_factory=dict)
    decoder: dict = field(default_factory=dict)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def experiment_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d or {})
    return ExperimentConfig(
        seed=int(d.get("seed", 0)),
        corpus_seed=int(d.get("corpus_seed", 0)),
        corpus=CorpusSpec(**d.get("corpus", {})),
        encoder=dict(d.get("encoder", {})),
        decoder=dict(d.get("decoder", {})),
        loss=LossConfig(**d.get("loss", {})),
        schedule=TrainSchedule(**d.get("schedule", {})),
        augment=AugmentSpec(**d.get("augment", {})),
    )


def load_experiment(path) -> ExperimentConfig:
    """YAML or JSON experiment file; one file fully determines a run."""
    with open(path) as f:
        return experiment_from_dict(yaml.safe_load(f))
