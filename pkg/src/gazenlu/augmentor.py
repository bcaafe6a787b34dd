"""Gaze-augmented classifier: fixation-ordered embeddings into a GRU.

Token embeddings are rearranged in the order words are fixated. A hard
scanpath gathers each fixated word's token rows left to right; a
relaxed scanpath contributes one row per step, its position weights
applied to the word-pooled embedding matrix. A GRU whose initial state
comes from the [CLS] vector reads the rearranged rows; the last step's
output feeds the task head. Predictions across several sampled
scanpaths combine by averaging pre-softmax outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    GRUCell,
    Linear,
    Module,
    RngState,
    Tensor,
    add,
    concat,
    cross_entropy,
    dropout,
    matmul,
    mse_loss,
    mul,
    no_grad,
    reshape,
    stack,
    take_rows,
)
from .gazegen import (
    GeneratorConfig,
    GumbelConfig,
    SOFT_CONVOLUTION,
    SampledBatch,
    Scanpath,
    ScanpathGenerator,
    default_max_fixations,
)
from .textenc import Batch, EncodedText, TextEncoder, TextEncoderConfig, TextEncoderOutput

GAZE = "gaze"
TEXT_ONLY = "text_only"
CLASSIFICATION = "classification"
REGRESSION = "regression"


@dataclass
class ReorderedSequence:
    embeddings: Tensor                       # (F', d)
    source_map: list[tuple[int, int, int]]   # (step, word, token); token -1 = pooled


def average_logits(per_path: list[np.ndarray]) -> np.ndarray:
    """Mean of pre-softmax outputs across paths.

    Computed as first + mean(out_i - first): n identical paths average to
    the single-path output bit-exactly.
    """
    if not per_path:
        raise ValueError("no outputs to average")
    first = per_path[0]
    acc = np.zeros_like(first)
    for out in per_path[1:]:
        acc += out - first
    return first + acc / len(per_path)


def reorder(tokens: TextEncoderOutput, enc: EncodedText, sp: Scanpath) -> ReorderedSequence:
    """Fixation-ordered rows; hard paths expand to token spans."""
    W = enc.n_words
    for i, f in enumerate(sp.fixations):
        if not 0 <= f < W:
            raise ValueError(f"fixation {f} at step {i} out of range for {W} words")
    if sp.soft_weights is None:
        idx: list[int] = []
        source: list[tuple[int, int, int]] = []
        for step, f in enumerate(sp.fixations):
            s, e = enc.word_spans[f]
            for t in range(s, e):
                idx.append(t)
                source.append((step, f, t))
        emb = take_rows(tokens.token_embeddings, np.array(idx, dtype=np.int64))
        return ReorderedSequence(emb, source)
    emb = matmul(sp.soft_weights, tokens.word_embeddings)
    source = [(step, int(f), -1) for step, f in enumerate(sp.fixations)]
    return ReorderedSequence(emb, source)


class ScanpathEncoder(Module):
    """Single-direction GRU over reordered rows, h0 from [CLS]."""

    def __init__(self, d_in: int, d_hidden: int, rng: RngState, p_drop: float = 0.1):
        super().__init__()
        self.d_hidden = d_hidden
        self.gru = GRUCell(d_in, d_hidden, rng.substream("gru"))
        if d_in != d_hidden:
            self.cls_proj = Linear(d_in, d_hidden, rng.substream("cls_proj"))
        else:
            object.__setattr__(self, "cls_proj", None)
        self.p_drop = p_drop

    def init_state(self, cls: Tensor) -> Tensor:
        return self.cls_proj(cls) if self.cls_proj is not None else cls

    def run_steps(self, steps: list[Tensor], step_mask: np.ndarray, cls: Tensor,
                  rng: RngState | None = None) -> Tensor:
        """steps[t] is (B, d); mask freezes rows past their last fixation."""
        if not steps:
            raise ValueError("scanpath encoder needs at least one step")
        h = self.init_state(cls)
        dt = h.dtype
        train = self.training and rng is not None
        for t, x in enumerate(steps):
            if train:
                x = dropout(x, self.p_drop, rng.substream("drop", t), True)
            hn = self.gru(x, h)
            m = step_mask[:, t].astype(dt).reshape(-1, 1)
            h = add(mul(hn, Tensor(m)), mul(h, Tensor(1.0 - m)))
        return h


def scanpath_encode(encoder: ScanpathEncoder, seq: ReorderedSequence, cls: Tensor,
                    rng: RngState | None = None) -> Tensor:
    """Final feature for one reordered sequence; (h,) vector."""
    F = seq.embeddings.shape[0]
    if F < 1:
        raise ValueError("empty reordered sequence")
    d = seq.embeddings.shape[1]
    steps = [reshape(seq.embeddings[t], (1, d)) for t in range(F)]
    out = encoder.run_steps(
        steps, np.ones((1, F), dtype=np.float32), reshape(cls, (1, d)), rng
    )
    return out[0]


class TaskHead(Module):
    def __init__(self, kind: str, d_hidden: int, n_classes: int, rng: RngState):
        super().__init__()
        if kind not in (CLASSIFICATION, REGRESSION):
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.n_out = n_classes if kind == CLASSIFICATION else 1
        self.lin = Linear(d_hidden, self.n_out, rng.substream("lin"))

    def __call__(self, feature: Tensor) -> Tensor:
        return self.lin(feature)


@dataclass
class ModelConfig:
    text: TextEncoderConfig
    gen_hidden: int = 128
    l_max: int = 32
    scan_hidden: int | None = None          # defaults to text.d_model
    task_kind: str = CLASSIFICATION
    n_classes: int = 2
    share_text_encoder: bool = False
    model_kind: str = GAZE
    gumbel: GumbelConfig = field(default_factory=GumbelConfig)
    scan_dropout: float = 0.1

    @property
    def d_scan(self) -> int:
        return self.scan_hidden if self.scan_hidden is not None else self.text.d_model


class JointModel(Module):
    """Text encoder + scanpath generator + scanpath encoder + task head.

    ``model_kind="text_only"`` drops the generator and reads the content
    tokens in their original order, as the no-gaze baseline.
    """

    def __init__(self, cfg: ModelConfig, rng: RngState):
        super().__init__()
        self.cfg = cfg
        self.cls_encoder = TextEncoder(cfg.text, rng.substream("cls_enc"))
        if cfg.model_kind == GAZE:
            if cfg.share_text_encoder:
                object.__setattr__(self, "gen_encoder", self.cls_encoder)
            else:
                self.gen_encoder = TextEncoder(cfg.text, rng.substream("gen_enc"))
            self.generator = ScanpathGenerator(
                GeneratorConfig(cfg.text.d_model, cfg.gen_hidden, cfg.l_max),
                rng.substream("generator"),
            )
        elif cfg.model_kind != TEXT_ONLY:
            raise ValueError(f"unknown model kind {cfg.model_kind!r}")
        self.scan = ScanpathEncoder(
            cfg.text.d_model, cfg.d_scan, rng.substream("scan"), cfg.scan_dropout
        )
        self.head = TaskHead(cfg.task_kind, cfg.d_scan, cfg.n_classes, rng.substream("head"))

    # -- generator checkpoint unit --------------------------------------

    def generator_prefixes(self) -> tuple[str, ...]:
        if self.cfg.model_kind != GAZE:
            return ()
        if self.cfg.share_text_encoder:
            return ("generator.",)
        return ("generator.", "gen_encoder.")

    def generator_state(self) -> dict[str, np.ndarray]:
        pref = self.generator_prefixes()
        return {
            name: p.data.copy()
            for name, p in self.named_parameters()
            if name.startswith(pref)
        }

    def load_generator_state(self, state: dict[str, np.ndarray]) -> None:
        own = {
            name: p
            for name, p in self.named_parameters()
            if name.startswith(self.generator_prefixes())
        }
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"generator state mismatch, missing={missing}, unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def freeze_generator(self, flag: bool = True) -> None:
        pref = self.generator_prefixes()
        for name, p in self.named_parameters():
            if name.startswith(pref):
                p.requires_grad = not flag

    # -- sampling glue ---------------------------------------------------

    def _generator_words(self, batch: Batch, rng: RngState | None):
        if self.cfg.share_text_encoder:
            return None  # caller reuses classifier words
        _, _, words = self.gen_encoder.forward_batch(batch, rng)
        return words

    def _sample(self, batch: Batch, gen_words: Tensor, pair_rngs: list[RngState],
                surrogate: bool = False) -> SampledBatch:
        counts = batch.word_counts
        ws = self.generator.encode_words_batch(gen_words, counts)
        # per-sentence caps: a row's path length never depends on how long
        # the other sentences in its batch happen to be
        caps = np.array([default_max_fixations(int(c)) for c in counts])
        if self.cfg.gumbel.mode == SOFT_CONVOLUTION:
            return self._sample_soft(ws, counts, pair_rngs, caps)
        return self.generator.sample_gumbel_batch(
            ws, counts, pair_rngs, self.cfg.gumbel, caps, surrogate=surrogate
        )

    def _sample_soft(self, ws: Tensor, counts: np.ndarray, pair_rngs, caps):
        B, Wmax, _ = ws.shape
        paths = []
        for b in range(B):
            w = int(counts[b])
            paths.append(
                self.generator.sample_gumbel(
                    ws[b, :w, :], b, pair_rngs[b], self.cfg.gumbel, int(caps[b])
                )
            )
        S = max(p.n_fix for p in paths)
        rows: list[Tensor] = []
        mask = np.zeros((B, S), dtype=np.float32)
        zero = Tensor(np.zeros(Wmax, dtype=ws.dtype))
        for t in range(S):
            per_b = []
            for b, p in enumerate(paths):
                if t < p.n_fix:
                    mask[b, t] = 1.0
                    row = p.soft_weights[t]
                    w = int(counts[b])
                    if w < Wmax:
                        row = concat([row, Tensor(np.zeros(Wmax - w, dtype=ws.dtype))])
                    per_b.append(row)
                else:
                    per_b.append(zero)
            rows.append(stack(per_b))
        return SampledBatch(rows, mask,
                            [p.fixations for p in paths],
                            np.array([p.stopped for p in paths]))

    # -- training loss ---------------------------------------------------

    def loss_pairs(self, batch: Batch, labels: np.ndarray,
                   pair_rngs: list[RngState], drop_rng: RngState | None):
        """Mean loss over (instance, scanpath) pairs; batch rows are pairs."""
        B = batch.size
        rng = drop_rng if self.training else None
        tokens, cls, words = self.cls_encoder.forward_batch(
            batch, rng.substream("cls_enc") if rng else None
        )
        if self.cfg.model_kind == TEXT_ONLY:
            steps, mask = self._content_steps(batch, tokens)
        else:
            gen_rng = rng.substream("gen_enc") if rng else None
            gen_words = words if self.cfg.share_text_encoder else None
            if gen_words is None:
                gen_words = self._generator_words(batch, gen_rng)
            sampled = self._sample(batch, gen_words, pair_rngs)
            steps = [
                reshape(matmul(reshape(r, (B, 1, -1)), words), (B, -1))
                for r in sampled.rows
            ]
            mask = sampled.row_mask
        feature = self.scan.run_steps(
            steps, mask, cls, rng.substream("scan") if rng else None
        )
        out = self.head(feature)
        if self.head.kind == CLASSIFICATION:
            loss = cross_entropy(out, labels.astype(np.int64))
        else:
            loss = mse_loss(out, labels.astype(out.dtype).reshape(B, 1))
        return loss

    def _content_steps(self, batch: Batch, tokens: Tensor):
        """Original-order content tokens as GRU steps, for the baseline."""
        B, T, d = tokens.shape
        lengths = (batch.span_ends - batch.span_starts)
        lengths[batch.pool.sum(axis=2) == 0] = 0
        total = lengths.sum(axis=1)
        L = int(total.max(initial=1))
        scat = np.zeros((B, L, T), dtype=np.float32)
        mask = np.zeros((B, L), dtype=np.float32)
        for b in range(B):
            r = 0
            for w in range(batch.word_counts[b]):
                for t in range(batch.span_starts[b, w], batch.span_ends[b, w]):
                    scat[b, r, t] = 1.0
                    mask[b, r] = 1.0
                    r += 1
        content = matmul(Tensor(scat.astype(tokens.dtype)), tokens)
        steps = [content[:, t, :] for t in range(L)]
        return steps, mask

    # -- prediction ------------------------------------------------------

    def predict_batch(self, batch: Batch, sentence_ids, n_scanpaths: int,
                      rng: RngState) -> np.ndarray:
        """Averaged pre-softmax outputs, (B, n_out); eval mode, no graph."""
        if n_scanpaths < 1:
            raise ValueError("n_scanpaths must be >= 1")
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                B = batch.size
                tokens, cls, words = self.cls_encoder.forward_batch(batch)
                if self.cfg.model_kind == TEXT_ONLY:
                    steps, mask = self._content_steps(batch, tokens)
                    out = self.head(self.scan.run_steps(steps, mask, cls))
                    return out.data.copy()
                gen_words = (
                    words if self.cfg.share_text_encoder
                    else self._generator_words(batch, None)
                )
                outs: list[np.ndarray] = []
                for p in range(n_scanpaths):
                    pair_rngs = [
                        rng.substream(sid, p) for sid in sentence_ids
                    ]
                    if self.cfg.gumbel.hard_eval:
                        out = self._predict_hard(batch, tokens, cls, gen_words, pair_rngs)
                    else:
                        sampled = self._sample(batch, gen_words, pair_rngs)
                        steps = [
                            reshape(matmul(reshape(r, (B, 1, -1)), words), (B, -1))
                            for r in sampled.rows
                        ]
                        out = self.head(
                            self.scan.run_steps(steps, sampled.row_mask, cls)
                        ).data.copy()
                    outs.append(out)
                return average_logits(outs)
        finally:
            self.train(was_training)

    def _predict_hard(self, batch: Batch, tokens: Tensor, cls: Tensor,
                      gen_words: Tensor, pair_rngs) -> np.ndarray:
        B = batch.size
        counts = batch.word_counts
        ws = self.generator.encode_words_batch(gen_words, counts)
        outs = np.zeros((B, self.head.n_out), dtype=np.float32)
        for b in range(B):
            w = int(counts[b])
            sp = self.generator.sample_hard(ws[b, :w, :], b, pair_rngs[b])
            enc = EncodedText(
                token_ids=list(batch.token_ids[b]),
                word_spans=[
                    (int(batch.span_starts[b, i]), int(batch.span_ends[b, i]))
                    for i in range(w)
                ],
                segment_ids=list(batch.segment_ids[b]),
                attention_mask=list(batch.attention_mask[b].astype(int)),
            )
            seq = reorder(TextEncoderOutput(tokens[b], cls[b], None), enc, sp)
            feat = scanpath_encode(self.scan, seq, cls[b])
            outs[b] = self.head(reshape(feat, (1, -1))).data[0]
        return outs

    def predict(self, enc: EncodedText, sentence_id, n_scanpaths: int,
                rng: RngState) -> np.ndarray:
        from .textenc import collate

        batch = collate([enc])
        return self.predict_batch(batch, [sentence_id], n_scanpaths, rng)[0]
