"""Desk-scale attention encoder-decoder.

Encoder: stacked bidirectional recurrent layers with a single update gate per
cell, exposing every layer's output.  The final layer (``enc``) is projected
to ``ctx`` (attention keys), ``value`` (attention values) and
``inv_fertility`` (per-frame scalar feeding the accumulated-attention
feedback).  Decoder: recurrent state, additive attention over ``ctx`` with
fertility feedback, linear readout.  Auxiliary loss heads are stored with the
model but never touched by :meth:`Seq2Seq.encode` or the decoder, and every
parameter is initialised from its own name-derived seed, so adding or
removing a head leaves all other parameters bit-identical.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import grad as G
from .grad import NEG_INF, Tensor


@dataclass
class EncoderConfig:
    input_dim: int = 8
    num_layers: int = 4
    hidden_dim: int = 32
    mid_tap_layer: int | None = None
    dropout_rate: float = 0.0
    attention_dim: int = 32

    def __post_init__(self):
        if self.mid_tap_layer is None:
            self.mid_tap_layer = math.ceil(self.num_layers / 2) + 1
        self.mid_tap_layer = min(self.mid_tap_layer, self.num_layers)
        if not 1 <= self.mid_tap_layer <= self.num_layers:
            raise ValueError(f"mid_tap_layer {self.mid_tap_layer} outside 1..{self.num_layers}")


@dataclass
class DecoderConfig:
    vocab_size: int = 32  # BPE inventory + end-of-sequence
    embed_dim: int = 16
    state_dim: int = 32
    beam_size: int = 12
    primary_label_smoothing: float = 0.1
    max_output_length: int = 30

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if not 0.0 <= self.primary_label_smoothing < 1.0:
            raise ValueError("primary_label_smoothing must lie in [0, 1)")

    @property
    def eos(self) -> int:
        return self.vocab_size - 1


@dataclass
class EncoderOutputs:
    layer_outputs: list[Tensor]
    enc: Tensor
    value: Tensor
    inv_fertility: Tensor
    ctx: Tensor
    lengths: np.ndarray
    mask: np.ndarray = field(repr=False)

    def tap(self, layer: int) -> Tensor:
        """Output of 1-based encoder layer ``layer``."""
        return self.layer_outputs[layer - 1]


def _init(name: str, shape, fan_in: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Seq2Seq:
    def __init__(
        self,
        enc_cfg: EncoderConfig,
        dec_cfg: DecoderConfig,
        heads: dict[str, tuple[int, int]] | None = None,
        seed: int = 0,
    ):
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.head_dims = dict(heads or {})
        self.params: dict[str, Tensor] = {}
        H, A = enc_cfg.hidden_dim, enc_cfg.attention_dim
        D2 = 2 * H
        din = enc_cfg.input_dim
        for i in range(enc_cfg.num_layers):
            self._add(f"enc.{i}.W", (2, din, 2 * H), din, seed)
            self._add(f"enc.{i}.U", (2, H, 2 * H), H, seed)
            self._add(f"enc.{i}.b", (2, 1, 2 * H), H, seed, zero=True)
            din = D2
        self._add("proj.ctx.W", (D2, A), D2, seed)
        self._add("proj.ctx.b", (A,), D2, seed, zero=True)
        self._add("proj.value.W", (D2, D2), D2, seed)
        self._add("proj.fert.W", (D2, 1), D2, seed)
        self._add("proj.fert.b", (1,), D2, seed, zero=True)
        V, E, S = dec_cfg.vocab_size, dec_cfg.embed_dim, dec_cfg.state_dim
        self._add("dec.embed", (V, E), 1, seed)
        self._add("dec.W", (E + D2, 2 * S), E + D2, seed)
        self._add("dec.U", (S, 2 * S), S, seed)
        self._add("dec.b", (2 * S,), S, seed, zero=True)
        self._add("att.Ws", (S, A), S, seed)
        self._add("att.fb", (1, A), 1, seed)
        self._add("att.v", (A, 1), A, seed)
        self._add("out.W", (S + D2 + E, V), S + D2 + E, seed)
        self._add("out.b", (V,), 1, seed, zero=True)
        for name, (din_h, dout) in sorted(self.head_dims.items()):
            self._add(f"head.{name}.W", (din_h, dout), din_h, seed)
            self._add(f"head.{name}.b", (dout,), din_h, seed, zero=True)

    def _add(self, name, shape, fan_in, seed, zero=False):
        value = np.zeros(shape) if zero else _init(name, shape, fan_in, seed)
        self.params[name] = G.parameter(value, name)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def core_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("head.")]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
        for n, p in self.params.items():
            if state[n].shape != p.shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.value = np.array(state[n], dtype=np.float64)

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    # ------------------------------------------------------------ encoder

    def encode(self, features, lengths=None, rng: np.random.Generator | None = None) -> EncoderOutputs:
        """Run the encoder on ``[T, F]`` or padded ``[B, T, F]`` features.

        Frames at or beyond each sequence's length are zero in every output.
        ``rng`` enables dropout (training only).
        """
        x = features if isinstance(features, Tensor) else Tensor(features)
        if x.ndim == 2:
            x = G.reshape(x, (1,) + x.shape)
        B, T, F = x.shape
        if T < 1 or B < 1:
            raise ValueError("encode needs at least one frame")
        if F != self.enc_cfg.input_dim:
            raise G.ShapeError(f"feature dim {F} != encoder input_dim {self.enc_cfg.input_dim}")
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths, dtype=np.int64)
        if lengths.min() < 1:
            raise ValueError("every sequence needs at least one frame")
        mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
        t = np.arange(T)[None, :]
        rev = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)

        H = self.enc_cfg.hidden_dim
        outputs = []
        h_in = x
        for i in range(self.enc_cfg.num_layers):
            h_in = self._bidir_layer(i, h_in, rev, mask, H)
            h_in = G.dropout(h_in, self.enc_cfg.dropout_rate, rng)
            outputs.append(h_in)
        enc = outputs[-1]
        m3 = lambda d: np.broadcast_to(mask[:, :, None], (B, T, d))  # noqa: E731
        A = self.enc_cfg.attention_dim
        ctx = G.add(G.matmul(enc, self["proj.ctx.W"]), G.expand(self["proj.ctx.b"], (B, T, A)))
        ctx = G.mul(ctx, Tensor(m3(A)))
        value = G.matmul(enc, self["proj.value.W"])
        fert = G.add(G.matmul(enc, self["proj.fert.W"]), G.expand(self["proj.fert.b"], (B, T, 1)))
        fert = G.mul(G.reshape(G.sigmoid(fert), (B, T)), Tensor(mask))
        return EncoderOutputs(outputs, enc, value, fert, ctx, lengths, mask)

    def _bidir_layer(self, i: int, x: Tensor, rev: np.ndarray, mask: np.ndarray, H: int) -> Tensor:
        B, T, D = x.shape
        idx = np.broadcast_to(rev[:, :, None], (B, T, D))
        both = G.stack([x, G.take_along(x, idx, axis=1)], axis=0)
        xw = G.matmul(G.reshape(both, (2, B * T, D)), self[f"enc.{i}.W"])
        xw = G.add(xw, G.expand(self[f"enc.{i}.b"], (2, B * T, 2 * H)))
        xw = G.reshape(xw, (2, B, T, 2 * H))
        U = self[f"enc.{i}.U"]
        h = Tensor(np.zeros((2, B, H)))
        states = []
        for t in range(T):
            pre = G.add(xw[:, :, t], G.matmul(h, U))
            z = G.sigmoid(pre[..., :H])
            cand = G.tanh(pre[..., H:])
            h = G.add(h, G.mul(z, G.sub(cand, h)))
            states.append(h)
        hs = G.stack(states, axis=2)  # [2, B, T, H]
        fw = hs[0]
        bw = G.take_along(hs[1], np.broadcast_to(rev[:, :, None], (B, T, H)), axis=1)
        out = G.concat([fw, bw], axis=-1)
        return G.mul(out, Tensor(np.broadcast_to(mask[:, :, None], (B, T, 2 * H))))

    # ------------------------------------------------------------ decoder

    def initial_state(self, batch: int, frames: int):
        S = self.dec_cfg.state_dim
        D2 = 2 * self.enc_cfg.hidden_dim
        return (
            Tensor(np.zeros((batch, S))),
            Tensor(np.zeros((batch, D2))),
            Tensor(np.zeros((batch, frames))),
        )

    def decoder_step(self, enc: EncoderOutputs, state, prev_tokens):
        """One decoder step; returns (log_probs [B, V], new_state, attention [B, T])."""
        s_prev, c_prev, accum = state
        B, T = enc.mask.shape
        A = self.enc_cfg.attention_dim
        S = self.dec_cfg.state_dim
        emb = G.take(self["dec.embed"], np.asarray(prev_tokens, dtype=np.int64), axis=0)
        pre = G.add(
            G.add(G.matmul(G.concat([emb, c_prev], axis=-1), self["dec.W"]), G.matmul(s_prev, self["dec.U"])),
            G.expand(self["dec.b"], (B, 2 * S)),
        )
        z = G.sigmoid(pre[:, :S])
        cand = G.tanh(pre[:, S:])
        s = G.add(s_prev, G.mul(z, G.sub(cand, s_prev)))

        q = G.expand(G.reshape(G.matmul(s, self["att.Ws"]), (B, 1, A)), (B, T, A))
        fb = G.matmul(G.reshape(accum, (B, T, 1)), self["att.fb"])
        energy = G.matmul(G.tanh(G.add(G.add(enc.ctx, q), fb)), self["att.v"])
        energy = G.add(G.reshape(energy, (B, T)), Tensor(np.where(enc.mask > 0, 0.0, NEG_INF)))
        att = G.softmax(energy, axis=1)
        c = G.reshape(G.matmul(G.reshape(att, (B, 1, T)), enc.value), (B, enc.value.shape[-1]))
        accum = G.add(accum, G.scale(G.mul(att, enc.inv_fertility), 0.5))

        logits = G.matmul(G.concat([s, c, emb], axis=-1), self["out.W"])
        logits = G.add(logits, G.expand(self["out.b"], logits.shape))
        return G.log_softmax(logits, axis=-1), (s, c, accum), att

    def decode_teacher_forced(self, enc: EncoderOutputs, targets, return_attention: bool = False):
        """Per-step log-probabilities ``[B, N, V]`` under gold-prefix conditioning.

        ``targets`` is ``[B, N]`` (padded, typically ending in EOS) or a single
        sequence giving ``[N, V]``.
        """
        tg = np.asarray(targets, dtype=np.int64)
        single = tg.ndim == 1
        if single:
            tg = tg[None]
        B, N = tg.shape
        if N == 0:
            raise ValueError("targets must be non-empty")
        V = self.dec_cfg.vocab_size
        if tg.min() < 0 or tg.max() >= V:
            raise ValueError(f"token ids must lie in [0, {V})")
        if B != enc.mask.shape[0]:
            raise G.ShapeError(f"batch of targets {B} != encoder batch {enc.mask.shape[0]}")
        state = self.initial_state(B, enc.mask.shape[1])
        prev = np.full(B, self.dec_cfg.eos)
        steps, atts = [], []
        for n in range(N):
            lp, state, att = self.decoder_step(enc, state, prev)
            steps.append(lp)
            atts.append(att.value)
            prev = tg[:, n]
        out = G.stack(steps, axis=1)
        if single:
            out = out[0]
        if return_attention:
            return out, np.stack(atts, axis=1)
        return out

    def decode_beam(self, enc: EncoderOutputs, beam_size: int | None = None, max_len: int | None = None):
        """Beam search on a single-utterance encoding; returns (tokens without EOS, score)."""
        beam_size = beam_size or self.dec_cfg.beam_size
        max_len = max_len or self.dec_cfg.max_output_length
        if enc.mask.shape[0] != 1:
            raise ValueError("decode_beam works on one utterance at a time")
        with G.no_grad():
            T = enc.mask.shape[1]

            def step(states, prev):
                k = len(prev)
                sub = _expand_enc(enc, k)
                st = tuple(Tensor(a) for a in states)
                lp, (s, c, acc), _ = self.decoder_step(sub, st, prev)
                return lp.value, (s.value, c.value, acc.value)

            init = tuple(a.value for a in self.initial_state(1, T))
            seq, score = beam_search(step, init, beam_size, self.dec_cfg.eos, max_len)
        if seq and seq[-1] == self.dec_cfg.eos:
            seq = seq[:-1]
        return seq, score

    def decode_greedy(self, enc: EncoderOutputs, max_len: int | None = None) -> list[list[int]]:
        """Batched stepwise argmax decoding (lowest id on ties)."""
        max_len = max_len or self.dec_cfg.max_output_length
        B, T = enc.mask.shape
        eos = self.dec_cfg.eos
        with G.no_grad():
            state = self.initial_state(B, T)
            prev = np.full(B, eos)
            done = np.zeros(B, dtype=bool)
            out: list[list[int]] = [[] for _ in range(B)]
            for _ in range(max_len):
                lp, state, _ = self.decoder_step(enc, state, prev)
                prev = np.argmax(lp.value, axis=-1)
                for b in range(B):
                    if not done[b]:
                        if prev[b] == eos:
                            done[b] = True
                        else:
                            out[b].append(int(prev[b]))
                if done.all():
                    break
        return out


def _expand_enc(enc: EncoderOutputs, k: int) -> EncoderOutputs:
    rep = lambda t: Tensor(np.repeat(t.value, k, axis=0))  # noqa: E731
    return EncoderOutputs(
        [], rep(enc.enc), rep(enc.value), rep(enc.inv_fertility), rep(enc.ctx),
        np.repeat(enc.lengths, k), np.repeat(enc.mask, k, axis=0),
    )


def beam_search(
    step: Callable,
    init_state: Sequence[np.ndarray],
    beam_size: int,
    eos: int,
    max_len: int,
) -> tuple[list[int], float]:
    """Generic beam search over a step function.

    ``step(states, prev_tokens) -> (log_probs [K, V], new_states)`` where every
    state array has the hypothesis axis first.  Hypotheses end at ``eos`` or are
    force-completed at ``max_len`` tokens.  The best complete hypothesis by
    accumulated log-probability wins; equal scores go to the lexicographically
    smaller token sequence.
    """
    live_seqs: list[list[int]] = [[]]
    live_scores = np.zeros(1)
    states = tuple(np.asarray(s) for s in init_state)
    prev = np.array([eos])
    finished: list[tuple[float, list[int]]] = []
    for _ in range(max_len):
        lp, new_states = step(states, prev)
        V = lp.shape[1]
        cand = live_scores[:, None] + lp
        order = sorted(
            ((float(cand[h, v]), h, v) for h in range(len(live_seqs)) for v in range(V)),
            key=lambda x: (-x[0], live_seqs[x[1]] + [x[2]]),
        )[:beam_size]
        keep_h, keep_v, keep_s = [], [], []
        for score, h, v in order:
            seq = live_seqs[h] + [v]
            if v == eos:
                finished.append((score, seq))
            else:
                keep_h.append(h)
                keep_v.append(v)
                keep_s.append(score)
        if not keep_h:
            live_seqs = []
            break
        live_seqs = [live_seqs[h] + [v] for h, v in zip(keep_h, keep_v)]
        live_scores = np.array(keep_s)
        states = tuple(np.asarray(s)[keep_h] for s in new_states)
        prev = np.array(keep_v)
        if finished:
            best_done = max(f[0] for f in finished)
            if best_done > live_scores.max():
                live_seqs = []
                break
    for seq, score in zip(live_seqs, live_scores):
        finished.append((float(score), seq))
    best = min(finished, key=lambda f: (-f[0], f[1]))
    return best[1], best[0]


# ---------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"WACKPT01"


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    """Flat list of named little-endian float64 arrays with shape headers."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    return out
