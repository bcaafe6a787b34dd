"""Scanpath generator: masks, teacher forcing, and the three samplers."""

import numpy as np
import pytest

from gazenlu.diffcore import RngState, Tensor, grad_check, mul, reshape, tsum
from gazenlu.gazegen import (GeneratorConfig, GumbelConfig, ScanpathGenerator,
                             SOFT_CONVOLUTION, STRAIGHT_THROUGH, Scanpath,
                             default_max_fixations)

CFG = GeneratorConfig(d_word=10, d_hidden=12, l_max=6)


@pytest.fixture(scope="module")
def gen():
    return ScanpathGenerator(CFG, RngState(7, 0))


@pytest.fixture(scope="module")
def words3(gen):
    data = RngState(8, 0).normal((1, 3, CFG.d_word)).astype(np.float32)
    return gen.encode_words_batch(Tensor(data), np.array([3]))


# -- config arithmetic ---------------------------------------------------


def test_offset_class_round_trip():
    for off in range(-(CFG.l_max - 1), CFG.l_max):
        assert CFG.class_to_offset(CFG.offset_to_class(off)) == off
    assert CFG.n_classes == 2 * CFG.l_max
    assert CFG.stop_class == CFG.n_classes - 1


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(d_word=4, d_hidden=7, l_max=4)  # odd hidden
    with pytest.raises(ValueError):
        GeneratorConfig(d_word=4, d_hidden=8, l_max=1)


def test_gumbel_config_validation():
    with pytest.raises(ValueError):
        GumbelConfig(temperature=0.0)
    with pytest.raises(ValueError):
        GumbelConfig(mode="annealed")
    GumbelConfig(mode=SOFT_CONVOLUTION)  # accepted


def test_default_max_fixations():
    assert default_max_fixations(5) == 10
    assert default_max_fixations(40) == 64


# -- validity masks ------------------------------------------------------


def test_entry_mask_allows_only_forward_landings(gen):
    mask = gen.valid_mask(-1, 3)
    true_classes = set(np.flatnonzero(mask))
    expected = {CFG.offset_to_class(o) for o in (1, 2, 3)}
    assert true_classes == expected
    assert not mask[CFG.stop_class]  # cannot stop before any fixation


def test_interior_mask_bounds_landings_and_allows_stop(gen):
    mask = gen.valid_mask(1, 3)
    true_classes = set(np.flatnonzero(mask))
    expected = {CFG.offset_to_class(o) for o in (-1, 0, 1)} | {CFG.stop_class}
    assert true_classes == expected


def test_single_word_mask(gen):
    mask = gen.valid_mask(0, 1)
    assert set(np.flatnonzero(mask)) == {CFG.offset_to_class(0), CFG.stop_class}


def test_step_probs_zero_on_invalid_and_normalized(gen, words3):
    state = gen.encode_history([], words3[0])
    step = gen.decode_step(state, words3[0], -1)
    p = step.probs()
    assert p[CFG.stop_class] == 0.0
    assert abs(p.sum() - 1.0) < 1e-6
    assert (p[~step.valid_mask] == 0.0).all()


def test_decode_step_rejects_bad_position(gen, words3):
    state = gen.encode_history([], words3[0])
    with pytest.raises(ValueError):
        gen.decode_step(state, words3[0], 5)


def test_encode_history_rejects_out_of_range_fixation(gen, words3):
    with pytest.raises(ValueError):
        gen.encode_history([0, 3], words3[0])


def test_word_encoder_rejects_overlong_sentence(gen):
    data = np.zeros((1, CFG.l_max, CFG.d_word), dtype=np.float32)
    with pytest.raises(ValueError):
        gen.encode_words_batch(Tensor(data), np.array([CFG.l_max]))


# -- teacher forcing -----------------------------------------------------


def test_nll_matches_stepwise_oracle(gen, words3):
    """Batched loss equals the mean of per-decision -log p computed by
    replaying each prefix through the sequential decode path."""
    ws = words3[0]
    path = [0, 1]
    prefixes = [[], [0], [0, 1]]
    positions = [-1, 0, 1]
    golds = [CFG.offset_to_class(1), CFG.offset_to_class(1), CFG.stop_class]
    total = 0.0
    for pre, pos, gold in zip(prefixes, positions, golds):
        state = gen.encode_history(pre, ws)
        p = gen.decode_step(state, ws, pos).probs()
        total += -np.log(p[gold])
    manual = total / 3
    loss, n = gen.nll_batch(words3, np.array([3]), [path])
    assert n == 3
    assert abs(float(loss.data) - manual) < 1e-5


def test_nll_pools_decisions_across_rows(gen):
    data = RngState(9, 0).normal((1, 3, CFG.d_word)).astype(np.float32)
    single = gen.encode_words_batch(Tensor(data), np.array([3]))
    two = Tensor(np.concatenate([single.data, single.data], axis=0))
    counts = np.array([3, 3])
    l1, n1 = gen.nll_batch(single, np.array([3]), [[0, 1]])
    l2, n2 = gen.nll_batch(single, np.array([3]), [[2]])
    pooled, n = gen.nll_batch(two, counts, [[0, 1], [2]])
    assert (n1, n2, n) == (3, 2, 5)
    expected = (3 * float(l1.data) + 2 * float(l2.data)) / 5
    assert abs(float(pooled.data) - expected) < 1e-5


def test_nll_rejects_bad_paths(gen, words3):
    with pytest.raises(ValueError):
        gen.nll_batch(words3, np.array([3]), [[]])
    with pytest.raises(ValueError):
        gen.nll_batch(words3, np.array([3]), [[0, 3]])


def test_nll_rejects_offset_beyond_span(gen):
    wide = Tensor(np.zeros((1, 8, CFG.d_hidden), dtype=np.float32))
    with pytest.raises(ValueError, match="outside class range"):
        gen.nll_batch(wide, np.array([8]), [[0, 7]])


def test_nll_backward_reaches_word_encoder(gen):
    data = Tensor(
        RngState(10, 0).normal((1, 3, CFG.d_word)).astype(np.float32),
        requires_grad=True,
    )
    ws = gen.encode_words_batch(data, np.array([3]))
    loss, _ = gen.nll_batch(ws, np.array([3]), [[0, 1, 2]])
    loss.backward()
    assert data.grad is not None and np.abs(data.grad).max() > 0
    assert gen.gru_fwd.w_ih.grad is not None


# -- hard sampling -------------------------------------------------------


def test_sample_hard_deterministic_and_bounded(gen, words3):
    ws = words3[0]
    a = gen.sample_hard(ws, "s", RngState(5, 0).substream("path"))
    b = gen.sample_hard(ws, "s", RngState(5, 0).substream("path"))
    assert a.fixations == b.fixations and a.stopped == b.stopped
    assert all(0 <= f < 3 for f in a.fixations)
    assert a.n_fix >= 1  # the entry step cannot choose STOP


def test_sample_hard_cap_and_stop_flag(gen, words3):
    ws = words3[0]
    for k in range(30):
        sp = gen.sample_hard(ws, k, RngState(60, 0).substream("p", k),
                             max_fixations=4)
        assert sp.n_fix <= 4
        if not sp.stopped:
            assert sp.n_fix == 4
    with pytest.raises(ValueError):
        gen.sample_hard(ws, 0, RngState(0, 0), max_fixations=0)


def test_sampled_offsets_respect_span(gen, words3):
    ws = words3[0]
    for k in range(20):
        sp = gen.sample_hard(ws, k, RngState(61, 0).substream("p", k))
        prev = -1
        for f in sp.fixations:
            assert abs(f - prev) <= CFG.l_max - 1
            prev = f


# -- straight-through sampling -------------------------------------------


def test_straight_through_rows_are_one_hot_at_fixation(gen, words3):
    ws = words3[0]
    cfg = GumbelConfig(temperature=0.5)
    sp = gen.sample_gumbel(ws, "s", RngState(12, 0).substream("g"), cfg)
    assert sp.soft_weights is not None
    rows = sp.soft_weights.data
    assert rows.shape == (sp.n_fix, 3)
    for i, f in enumerate(sp.fixations):
        assert rows[i, f] == 1.0
        assert abs(rows[i].sum() - 1.0) < 1e-6
        assert rows[i].argmax() == f


def test_straight_through_gradients_reach_generator(gen, words3):
    ws = gen.encode_words_batch(
        Tensor(RngState(8, 0).normal((1, 3, CFG.d_word)).astype(np.float32)),
        np.array([3]),
    )
    cfg = GumbelConfig(temperature=0.5)
    batch = gen.sample_gumbel_batch(ws, np.array([3]),
                                    [RngState(13, 0).substream("g")], cfg,
                                    max_fixations=4)
    readout = RngState(14, 0).normal((3,)).astype(np.float32)
    loss = None
    for row in batch.rows:
        term = tsum(mul(row, Tensor(readout[None, :])))
        loss = term if loss is None else loss + term
    loss.backward()
    assert gen.head.w.grad is not None and np.abs(gen.head.w.grad).max() > 0
    assert gen.gru_hist.w_ih.grad is not None


def test_batch_rows_match_solo_sampling(gen):
    """The path drawn for an instance depends only on its own noise
    stream, not on which other rows share the batch."""
    r = RngState(15, 0)
    d1 = r.substream("a").normal((3, CFG.d_word)).astype(np.float32)
    d2 = r.substream("b").normal((3, CFG.d_word)).astype(np.float32)
    both = gen.encode_words_batch(
        Tensor(np.stack([d1, d2])), np.array([3, 3]))
    cfg = GumbelConfig(temperature=0.5)

    def rngs():
        return [RngState(16, 0).substream("g", i) for i in range(2)]

    batch = gen.sample_gumbel_batch(both, np.array([3, 3]), rngs(), cfg, 6)
    for i, data in enumerate([d1, d2]):
        ws = gen.encode_words_batch(Tensor(data[None]), np.array([3]))
        solo = gen.sample_gumbel(ws[0], i, rngs()[i], cfg, max_fixations=6)
        assert solo.fixations == batch.fixations[i]


def test_straight_through_temperature_keeps_hard_forward(gen, words3):
    ws = words3[0]
    hot = gen.sample_gumbel(ws, "s", RngState(17, 0).substream("g"),
                            GumbelConfig(temperature=5.0))
    cold = gen.sample_gumbel(ws, "s", RngState(17, 0).substream("g"),
                             GumbelConfig(temperature=0.05))
    # hard forward choices follow logits+noise argmax, independent of tau
    assert hot.fixations == cold.fixations


# -- soft convolution ----------------------------------------------------


def test_soft_rows_stay_normalized(gen, words3):
    ws = words3[0]
    cfg = GumbelConfig(temperature=0.7, mode=SOFT_CONVOLUTION)
    sp = gen.sample_gumbel(ws, "s", RngState(18, 0).substream("g"), cfg,
                           max_fixations=6)
    rows = sp.soft_weights.data
    assert rows.shape[1] == 3
    assert np.abs(rows.sum(axis=1) - 1.0).max() < 1e-5
    assert all(0 <= f < 3 for f in sp.fixations)


def test_soft_single_word_collapses_to_delta(gen):
    data = RngState(19, 0).normal((1, 1, CFG.d_word)).astype(np.float32)
    ws = gen.encode_words_batch(Tensor(data), np.array([1]))[0]
    cfg = GumbelConfig(temperature=0.7, mode=SOFT_CONVOLUTION)
    sp = gen.sample_gumbel(ws, "s", RngState(20, 0).substream("g"), cfg,
                           max_fixations=5)
    rows = sp.soft_weights.data
    assert np.abs(rows - 1.0).max() < 1e-6  # every step is the delta on word 0
    assert sp.fixations == [0] * sp.n_fix


def test_soft_gradients_reach_generator(gen, words3):
    ws = words3[0]
    cfg = GumbelConfig(temperature=0.7, mode=SOFT_CONVOLUTION)
    sp = gen.sample_gumbel(ws, "s", RngState(21, 0).substream("g"), cfg,
                           max_fixations=4)
    readout = RngState(22, 0).normal(sp.soft_weights.shape).astype(np.float32)
    loss = tsum(mul(sp.soft_weights, Tensor(readout)))
    loss.backward()
    assert gen.head.w.grad is not None and np.abs(gen.head.w.grad).max() > 0


# -- relaxed-path gradient fidelity --------------------------------------


def test_surrogate_path_gradcheck():
    """Finite differences on the relaxed forward agree with backprop
    through a sampled path (tiny float64 model, fixed noise)."""
    cfg = GeneratorConfig(d_word=5, d_hidden=6, l_max=4)
    gen = ScanpathGenerator(cfg, RngState(30, 0))
    for _, t in gen.named_parameters():
        t.data = t.data.astype(np.float64)
    base = RngState(31, 0).normal((1, 2, cfg.d_word))
    readout = RngState(32, 0).normal((3, 2))
    gcfg = GumbelConfig(temperature=1.0)

    def build():
        ws = gen.encode_words_batch(Tensor(base), np.array([2]))
        sp = gen.sample_gumbel(ws[0], "s", RngState(33, 0).substream("g"),
                               gcfg, max_fixations=3, surrogate=True)
        r = readout[: sp.n_fix]
        return tsum(mul(sp.soft_weights, Tensor(r)))

    params = dict(gen.named_parameters())
    report = grad_check(build, params, h=1e-5, tol=1e-4, sample=3,
                        rng=RngState(34, 0))
    assert report.ok, report.failures
