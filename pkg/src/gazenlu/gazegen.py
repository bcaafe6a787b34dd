"""Scanpath generator: dual encoders, cross-attention, saccade decoder.

A bidirectional GRU encodes the word sequence; a unidirectional GRU
encodes the fixation history; single-head scaled dot-product attention
aligns the two; a linear head scores saccade offset classes
{-(L_max-1) .. +(L_max-1)} plus STOP (last class). Reading starts at a
virtual position -1, so the first decision is an entry saccade and STOP
is invalid until at least one word has been fixated.

Sampling comes in three forms: hard autoregressive (categorical),
straight-through Gumbel (hard forward, relaxed backward), and a soft
convolution that transports a whole position distribution per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import (
    Embedding,
    GRUCell,
    Linear,
    Module,
    NEG_INF,
    RngState,
    Tensor,
    add,
    concat,
    cross_entropy,
    matmul,
    mul,
    no_grad,
    reshape,
    select_steps,
    softmax,
    stack,
    take_rows,
    transpose,
)
from .textenc import TextEncoderOutput

STRAIGHT_THROUGH = "straight_through"
SOFT_CONVOLUTION = "soft_convolution"
# a soft path ends once the expected probability of having stopped
# crosses this mass
SOFT_STOP_MASS = 0.5


@dataclass(frozen=True)
class GumbelConfig:
    temperature: float = 0.5
    mode: str = STRAIGHT_THROUGH
    hard_eval: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.mode not in (STRAIGHT_THROUGH, SOFT_CONVOLUTION):
            raise ValueError(f"unknown gumbel mode {self.mode!r}")


@dataclass
class SaccadeStep:
    logits: Tensor              # (n_classes,)
    valid_mask: np.ndarray      # (n_classes,) bool

    def probs(self) -> np.ndarray:
        z = self.logits.data + np.where(self.valid_mask, 0.0, NEG_INF)
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()


@dataclass
class Scanpath:
    sentence_id: object
    fixations: list[int]
    stopped: bool = True
    soft_weights: Tensor | None = None

    @property
    def n_fix(self) -> int:
        return len(self.fixations)


@dataclass(frozen=True)
class GeneratorConfig:
    d_word: int
    d_hidden: int = 128
    l_max: int = 32

    def __post_init__(self):
        if self.d_hidden % 2:
            raise ValueError("d_hidden must be even (split across directions)")
        if self.l_max < 2:
            raise ValueError("l_max must be >= 2")

    @property
    def n_classes(self) -> int:
        return 2 * self.l_max

    @property
    def stop_class(self) -> int:
        return 2 * self.l_max - 1

    def offset_to_class(self, offset: int) -> int:
        return offset + self.l_max - 1

    def class_to_offset(self, cls: int) -> int:
        return cls - (self.l_max - 1)


@dataclass
class SampledBatch:
    """One sampled path per batch row, step-major, for the training loop."""

    rows: list[Tensor]          # per step, (B, W) position weights
    row_mask: np.ndarray        # (B, S) 1 where row b fixates at step s
    fixations: list[list[int]]
    stopped: np.ndarray         # (B,) bool


def default_max_fixations(n_words: int) -> int:
    return min(2 * n_words, 64)


class ScanpathGenerator(Module):
    def __init__(self, cfg: GeneratorConfig, rng: RngState):
        super().__init__()
        self.cfg = cfg
        d, h, L = cfg.d_word, cfg.d_hidden, cfg.l_max
        self.word_pos = Embedding(L, d, rng.substream("word_pos"))
        self.word_proj = Linear(d, h, rng.substream("word_proj"))
        self.gru_fwd = GRUCell(d, h // 2, rng.substream("gru_fwd"))
        self.gru_bwd = GRUCell(d, h // 2, rng.substream("gru_bwd"))
        self.fix_pos = Embedding(L, h, rng.substream("fix_pos"))
        self.hist_proj = Linear(2 * h, h, rng.substream("hist_proj"))
        self.gru_hist = GRUCell(2 * h, h, rng.substream("gru_hist"))
        self.start = Tensor(
            (rng.substream("start").normal((h,)) * 0.02).astype(np.float32),
            requires_grad=True,
        )
        self.head = Linear(2 * h, cfg.n_classes, rng.substream("head"))

    # -- word encoder ----------------------------------------------------

    def _check_width(self, n_words: int):
        if n_words < 1:
            raise ValueError("sentence must contain at least one word")
        if n_words > self.cfg.l_max - 1:
            raise ValueError(
                f"{n_words} words exceeds generator span l_max-1={self.cfg.l_max - 1}"
            )

    def encode_words_batch(self, words: Tensor, counts: np.ndarray) -> Tensor:
        """(B, W, d_word) pooled word vectors to (B, W, h) word states."""
        B, W, _ = words.shape
        self._check_width(int(counts.max(initial=1)))
        x = add(words, self.word_pos(np.arange(W)))
        half = self.cfg.d_hidden // 2
        dt = words.dtype

        def masked(step_active: np.ndarray, new: Tensor, old: Tensor) -> Tensor:
            m = step_active.astype(dt).reshape(B, 1)
            return add(mul(new, Tensor(m)), mul(old, Tensor(1.0 - m)))

        hf = Tensor(np.zeros((B, half), dtype=dt))
        fwd = []
        for t in range(W):
            hf = masked(t < counts, self.gru_fwd(x[:, t, :], hf), hf)
            fwd.append(hf)
        hb = Tensor(np.zeros((B, half), dtype=dt))
        bwd = [None] * W
        for t in range(W - 1, -1, -1):
            hb = masked(t < counts, self.gru_bwd(x[:, t, :], hb), hb)
            bwd[t] = hb
        gru_out = concat([stack(fwd, axis=1), stack(bwd, axis=1)], axis=2)
        return add(self.word_proj(x), gru_out)

    def encode_words(self, out: TextEncoderOutput) -> Tensor:
        """(W, h) word states for a single sentence."""
        W = out.word_embeddings.shape[0]
        batched = self.encode_words_batch(
            reshape(out.word_embeddings, (1, W, -1)), np.array([W])
        )
        return batched[0]

    # -- history encoder -------------------------------------------------

    def start_state(self, batch: int, dtype=np.float32) -> Tensor:
        return add(Tensor(np.zeros((batch, self.cfg.d_hidden), dtype=dtype)), self.start)

    def history_step(self, word_row: Tensor, pos_emb: Tensor, h_prev: Tensor):
        """One recurrence step; returns (residual output, new hidden)."""
        inp = concat([word_row, pos_emb], axis=1)
        h_new = self.gru_hist(inp, h_prev)
        return add(self.hist_proj(inp), h_new), h_new

    def encode_history(self, prefix, word_states: Tensor) -> Tensor:
        """Decoder state after the given fixation prefix; (h,) vector."""
        W, h = word_states.shape
        for i, f in enumerate(prefix):
            if not 0 <= f < W:
                raise ValueError(f"fixation {f} at step {i} out of range for {W} words")
        state = self.start_state(1, word_states.dtype)
        hid = Tensor(np.zeros((1, h), dtype=word_states.dtype))
        for f in prefix:
            row = word_states[f:f + 1, :]
            pe = self.fix_pos(np.array([f]))
            state, hid = self.history_step(row, pe, hid)
        return state[0]

    # -- decoder ---------------------------------------------------------

    def valid_mask(self, pos: int, n_words: int) -> np.ndarray:
        cfg = self.cfg
        offs = np.arange(cfg.n_classes - 1) - (cfg.l_max - 1)
        landing = pos + offs
        mask = np.concatenate([(landing >= 0) & (landing < n_words), [pos >= 0]])
        return mask

    def _additive_masks(self, positions: np.ndarray, counts: np.ndarray) -> np.ndarray:
        B = positions.shape[0]
        out = np.empty((B, self.cfg.n_classes), dtype=np.float32)
        for b in range(B):
            out[b] = np.where(self.valid_mask(int(positions[b]), int(counts[b])), 0.0, NEG_INF)
        return out

    def decode_logits_batch(self, state: Tensor, word_states: Tensor,
                            counts: np.ndarray) -> Tensor:
        """Cross-attention readout; (B, h) x (B, W, h) -> (B, n_classes)."""
        B, W, h = word_states.shape
        q = reshape(state, (B, 1, h))
        scores = mul(matmul(q, transpose(word_states, (0, 2, 1))), 1.0 / math.sqrt(h))
        pad = (np.arange(W)[None, :] >= counts[:, None])
        key_mask = (pad * NEG_INF).astype(np.float32).reshape(B, 1, W)
        attn = softmax(scores, mask=key_mask)
        ctx = reshape(matmul(attn, word_states), (B, h))
        return self.head(concat([ctx, state], axis=1))

    def decode_step(self, decoder_state: Tensor, word_states: Tensor,
                    current_pos: int) -> SaccadeStep:
        W, h = word_states.shape
        if not (current_pos == -1 or 0 <= current_pos < W):
            raise ValueError(f"current_pos {current_pos} invalid for {W} words")
        logits = self.decode_logits_batch(
            reshape(decoder_state, (1, h)), reshape(word_states, (1, W, h)), np.array([W])
        )
        return SaccadeStep(logits[0], self.valid_mask(current_pos, W))

    # -- teacher forcing -------------------------------------------------

    def nll_batch(self, word_states: Tensor, counts: np.ndarray,
                  paths: list[list[int]]):
        """Pooled mean step NLL over all (F_b + 1) decisions in the batch.

        Returns (loss tensor, total step count). Gold offsets outside the
        class range raise, naming the step.
        """
        B, W, h = word_states.shape
        cfg = self.cfg
        targets: list[list[int]] = []
        for b, path in enumerate(paths):
            if not path:
                raise ValueError(f"path {b} is empty")
            tgt = []
            prev = -1
            for i, f in enumerate(path):
                if not 0 <= f < counts[b]:
                    raise ValueError(
                        f"path {b} step {i}: fixation {f} out of range for {counts[b]} words"
                    )
                off = f - prev
                if abs(off) > cfg.l_max - 1:
                    raise ValueError(
                        f"path {b} step {i}: offset {off} outside class range "
                        f"+-{cfg.l_max - 1}"
                    )
                tgt.append(cfg.offset_to_class(off))
                prev = f
            tgt.append(cfg.stop_class)
            targets.append(tgt)

        max_steps = max(len(t) for t in targets)
        state = self.start_state(B, word_states.dtype)
        hid = Tensor(np.zeros((B, h), dtype=word_states.dtype))
        positions = np.full(B, -1, dtype=np.int64)
        total = None
        n_terms = 0
        for t in range(max_steps):
            active = np.array([b for b in range(B) if t < len(targets[b])])
            logits = self.decode_logits_batch(state, word_states, counts)
            masks = self._additive_masks(positions, counts)
            masked = add(logits, Tensor(masks))
            sub = take_rows(masked, active) if len(active) < B else masked
            step_t = np.array([targets[b][t] for b in active])
            term = mul(cross_entropy(sub, step_t), float(len(active)))
            total = term if total is None else add(total, term)
            n_terms += len(active)
            feeders = np.array([b for b in range(B) if t < len(paths[b])])
            if len(feeders) == 0:
                continue
            feed = np.zeros(B, dtype=np.int64)
            feed[feeders] = [paths[b][t] for b in feeders]
            rows = select_steps(word_states, feed)
            pe = self.fix_pos(feed)
            out, hn = self.history_step(rows, pe, hid)
            m = np.zeros((B, 1), dtype=word_states.dtype)
            m[feeders] = 1.0
            mt = Tensor(m)
            keep = Tensor(1.0 - m)
            state = add(mul(out, mt), mul(state, keep))
            hid = add(mul(hn, mt), mul(hid, keep))
            positions[feeders] = feed[feeders]
        return mul(total, 1.0 / n_terms), n_terms

    def nll_teacher_forced(self, out: TextEncoderOutput, gold: Scanpath) -> Tensor:
        """Mean per-decision cross-entropy for one gold path, STOP included."""
        word_states = self.encode_words(out)
        W = word_states.shape[0]
        loss, _ = self.nll_batch(
            reshape(word_states, (1, W, -1)), np.array([W]), [list(gold.fixations)]
        )
        return loss

    # -- sampling --------------------------------------------------------

    def sample_hard(self, word_states: Tensor, sentence_id, rng: RngState,
                    max_fixations: int | None = None) -> Scanpath:
        W = word_states.shape[0]
        if max_fixations is None:
            max_fixations = default_max_fixations(W)
        if max_fixations < 1:
            raise ValueError("max_fixations must be >= 1")
        cfg = self.cfg
        with no_grad():
            fixations: list[int] = []
            stopped = False
            pos = -1
            state = self.start_state(1, word_states.dtype)
            hid = Tensor(np.zeros((1, cfg.d_hidden), dtype=word_states.dtype))
            ws3 = reshape(word_states, (1, W, cfg.d_hidden))
            counts = np.array([W])
            while len(fixations) < max_fixations:
                logits = self.decode_logits_batch(state, ws3, counts)
                step = SaccadeStep(logits[0], self.valid_mask(pos, W))
                cls = int(rng.categorical(step.probs()))
                if cls == cfg.stop_class:
                    stopped = True
                    break
                pos = pos + cfg.class_to_offset(cls)
                fixations.append(pos)
                rows = select_steps(ws3, np.array([pos]))
                state, hid = self.history_step(rows, self.fix_pos(np.array([pos])), hid)
        return Scanpath(sentence_id, fixations, stopped)

    def sample_gumbel_batch(
        self,
        word_states: Tensor,
        counts: np.ndarray,
        rngs: list[RngState],
        cfg: GumbelConfig,
        max_fixations,
        surrogate: bool = False,
    ) -> SampledBatch:
        """Straight-through sampling for a batch, one path per row.

        ``max_fixations`` is a scalar cap or one per row; a row's draws
        and path depend only on its own cap and noise stream, never on
        which other rows share the batch. ``surrogate=True`` keeps the
        relaxed rows as the forward values (positions still advance by
        the hard offsets); the analytic gradient of the straight-through
        rows is exactly the gradient of this surrogate forward, which is
        what finite differences can see.
        """
        if cfg.mode != STRAIGHT_THROUGH:
            raise ValueError("batched sampling implements straight_through only")
        B, W, h = word_states.shape
        gc = self.cfg
        C = gc.n_classes
        dt = word_states.dtype
        inv_tau = 1.0 / cfg.temperature
        caps = np.broadcast_to(
            np.asarray(max_fixations, dtype=np.int64), (B,)
        )
        if (caps < 1).any():
            raise ValueError("max_fixations must be >= 1")
        state = self.start_state(B, dt)
        hid = Tensor(np.zeros((B, h), dtype=dt))
        positions = np.full(B, -1, dtype=np.int64)
        alive = np.ones(B, dtype=bool)
        stopped = np.zeros(B, dtype=bool)
        n_fix = np.zeros(B, dtype=np.int64)
        fixations: list[list[int]] = [[] for _ in range(B)]
        rows: list[Tensor] = []
        row_mask: list[np.ndarray] = []
        offs = np.arange(C - 1) - (gc.l_max - 1)
        for _ in range(int(caps.max())):
            if not alive.any():
                break
            logits = self.decode_logits_batch(state, word_states, counts)
            masks = self._additive_masks(positions, counts)
            g = np.zeros((B, C), dtype=dt)
            for b in np.flatnonzero(alive):
                g[b] = rngs[b].gumbel((C,)).astype(dt)
            y = softmax(mul(add(logits, Tensor(g)), inv_tau), mask=masks)
            hard = y.data.argmax(axis=1)
            chose_stop = alive & (hard == gc.stop_class)
            cont = alive & ~chose_stop
            stopped |= chose_stop
            n_fix[cont] += 1
            alive = cont & (n_fix < caps)
            if not cont.any():
                break
            new_pos = positions.copy()
            new_pos[cont] = positions[cont] + (hard[cont] - (gc.l_max - 1))
            # class -> word scatter for the current source positions
            scatter = np.zeros((B, C, W), dtype=dt)
            for b in np.flatnonzero(cont):
                landing = positions[b] + offs
                ok = (landing >= 0) & (landing < counts[b])
                scatter[b, np.flatnonzero(ok), landing[ok]] = 1.0
            y_words = reshape(matmul(reshape(y, (B, 1, C)), Tensor(scatter)), (B, W))
            if surrogate:
                row = y_words
            else:
                onehot = np.zeros((B, W), dtype=dt)
                onehot[cont, new_pos[cont]] = 1.0
                row = add(y_words, Tensor(onehot - y_words.data))
            rows.append(row)
            row_mask.append(cont.astype(np.float32))
            for b in np.flatnonzero(cont):
                fixations[b].append(int(new_pos[b]))
            word_row = reshape(matmul(reshape(row, (B, 1, W)), word_states), (B, h))
            pe = self.fix_pos(np.maximum(new_pos, 0))
            out, hn = self.history_step(word_row, pe, hid)
            m = Tensor(cont.astype(dt).reshape(B, 1))
            keep = Tensor((~cont).astype(dt).reshape(B, 1))
            state = add(mul(out, m), mul(state, keep))
            hid = add(mul(hn, m), mul(hid, keep))
            positions = new_pos
        mask_arr = (
            np.stack(row_mask, axis=1) if row_mask else np.zeros((B, 0), dtype=np.float32)
        )
        return SampledBatch(rows, mask_arr, fixations, stopped)

    def _sample_soft_conv(self, word_states: Tensor, sentence_id, rng: RngState,
                          cfg: GumbelConfig, max_fixations: int) -> Scanpath:
        W, h = word_states.shape
        gc = self.cfg
        C = gc.n_classes
        dt = word_states.dtype
        inv_tau = 1.0 / cfg.temperature
        ws3 = reshape(word_states, (1, W, h))
        counts = np.array([W])
        offs = np.arange(C - 1) - (gc.l_max - 1)

        # spread[i, j] mass of moving i -> j for offset class c, landing
        # clamped to the nearest boundary word
        kernel = np.zeros((W * W, C), dtype=dt)
        for i in range(W):
            landing = np.clip(i + offs, 0, W - 1)
            for c, j in enumerate(landing):
                kernel[i * W + j, c] += 1.0

        # offsets impossible from every source position stay masked
        some_valid = np.zeros(C, dtype=bool)
        for i in range(W):
            some_valid |= np.concatenate([(i + offs >= 0) & (i + offs < W), [False]])
        off_mask = np.where(some_valid, 0.0, NEG_INF).astype(np.float32)

        state = self.start_state(1, dt)
        hid = Tensor(np.zeros((1, h), dtype=dt))
        fixations: list[int] = []
        soft_rows: list[Tensor] = []
        stop_mass = 0.0
        stopped = False
        a = None            # (1, W) position distribution
        for step in range(max_fixations):
            logits = self.decode_logits_batch(state, ws3, counts)
            g = Tensor(rng.gumbel((1, C)).astype(dt))
            z = mul(add(logits, g), inv_tau)
            if a is None:
                entry_mask = np.where(self.valid_mask(-1, W), 0.0, NEG_INF).astype(
                    np.float32
                )
                y = softmax(z, mask=entry_mask)
                scatter = np.zeros((C, W), dtype=dt)
                landing = -1 + offs
                ok = (landing >= 0) & (landing < W)
                scatter[np.flatnonzero(ok), landing[ok]] = 1.0
                a = matmul(y, Tensor(scatter))
            else:
                with_stop = off_mask.copy()
                with_stop[gc.stop_class] = 0.0  # STOP valid after entry
                p = softmax(z, mask=with_stop.reshape(1, C))
                p_stop = float(p.data[0, gc.stop_class])
                q = softmax(z, mask=off_mask.reshape(1, C))
                spread = reshape(matmul(Tensor(kernel), transpose(q, (1, 0))), (W, W))
                a = matmul(a, spread)
                stop_mass = stop_mass + (1.0 - stop_mass) * p_stop
            fixations.append(int(a.data[0].argmax()))
            soft_rows.append(a[0])
            if stop_mass >= SOFT_STOP_MASS:
                stopped = True
                break
            word_row = matmul(a, word_states)
            pe = matmul(a, self.fix_pos.w[0:W, :])
            state, hid = self.history_step(word_row, pe, hid)
        return Scanpath(sentence_id, fixations, stopped, soft_weights=stack(soft_rows))

    def sample_gumbel(self, word_states: Tensor, sentence_id, rng: RngState,
                      cfg: GumbelConfig, max_fixations: int | None = None,
                      surrogate: bool = False) -> Scanpath:
        """Differentiable sampling for one sentence; rows in soft_weights."""
        W = word_states.shape[0]
        if max_fixations is None:
            max_fixations = default_max_fixations(W)
        if cfg.mode == SOFT_CONVOLUTION:
            return self._sample_soft_conv(word_states, sentence_id, rng, cfg,
                                          max_fixations)
        batch = self.sample_gumbel_batch(
            reshape(word_states, (1, W, -1)), np.array([W]), [rng], cfg,
            max_fixations, surrogate=surrogate,
        )
        steps = [t[0] for t, m in zip(batch.rows, batch.row_mask.T) if m[0] > 0]
        return Scanpath(
            sentence_id,
            batch.fixations[0],
            bool(batch.stopped[0]),
            soft_weights=stack(steps) if steps else None,
        )
