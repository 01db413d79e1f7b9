import numpy as np
import pytest
from hypothesis import given, strategies as st

from pseudoasr.ctc import ctc_greedy, ctc_loss
from pseudoasr.decoding import (beam_search, corpus_wer, ctc_initial_state, ctc_prefix_extend, decode_batch,
                                edit_distance, greedy_batch, prefix_beam_search, wer)
from pseudoasr.model import ASRModel, ModelConfig

from oracles import exhaustive_prefix_search, levenshtein, random_grid

FULL_BEAM = 400  # larger than every prefix set reachable with T <= 5, V <= 3


def fake_decoder(V, seed):
    """Bigram-style decoder: next-symbol log-probs depend on the last token only."""
    rng = np.random.default_rng(seed)
    table = rng.standard_normal((V + 1, V + 2)) * 1.5
    table -= np.log(np.exp(table).sum(1, keepdims=True))

    def next_token(prefixes):
        return np.stack([table[p[-1] if p else V] for p in prefixes])

    return next_token


def small_grids(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        T, V1 = int(rng.integers(1, 6)), int(rng.integers(2, 5))
        yield random_grid(rng, T, V1, peaky=float(rng.uniform(0, 3)))


def test_full_beam_matches_exhaustive_oracle():
    for g in small_grids(150, 0):
        best, y = exhaustive_prefix_search(g)
        h = prefix_beam_search(g, FULL_BEAM, g.shape[1] - 1)[0]
        assert h.tokens == y
        assert abs(h.score - best) <= 1e-9


def test_prefix_score_is_ctc_probability():
    g = random_grid(np.random.default_rng(5), 5, 4)
    for h in prefix_beam_search(g, FULL_BEAM, 3, nbest=20):
        if h.tokens:
            assert h.ctc_score == pytest.approx(-ctc_loss(g, list(h.tokens)).item(), abs=1e-9)


def test_full_beam_with_decoder_matches_exhaustive_oracle():
    for i, g in enumerate(small_grids(60, 1)):
        V = g.shape[1] - 1
        nt = fake_decoder(V, i)
        best, y = exhaustive_prefix_search(g, nt, V + 1, lambda_ctc=0.4, lambda_aed=0.6)
        h = prefix_beam_search(g, FULL_BEAM, V, nt, eos=V + 1, lambda_ctc=0.4, lambda_aed=0.6)[0]
        assert h.tokens == y
        assert abs(h.score - best) <= 1e-9


@given(st.integers(1, 30), st.integers(2, 6), st.integers(0, 10_000), st.floats(0, 4))
def test_viterbi_beam_one_is_greedy(T, V1, seed, peaky):
    g = random_grid(np.random.default_rng(seed), T, V1, peaky)
    h = prefix_beam_search(g, 1, V1 - 1, scoring="viterbi")[0]
    assert list(h.tokens) == ctc_greedy(g)
    assert h.ctc_score == pytest.approx(g.max(1).sum(), abs=1e-9)


def test_sum_scoring_can_prefer_non_greedy_labeling():
    # greedy path is all blank, but "a" collects more total path probability
    g = np.log(np.array([[0.4, 0.6], [0.4, 0.6]]))
    assert ctc_greedy(g) == []
    assert prefix_beam_search(g, 2, 1)[0].tokens == (0,)
    assert prefix_beam_search(g, 2, 1, scoring="viterbi")[0].tokens == ()


def test_prefix_extend_probabilities_sum_to_one():
    g = random_grid(np.random.default_rng(2), 4, 3)
    state = ctc_initial_state()
    for t in range(4):
        state = ctc_prefix_extend(state, g[t], 2)
    total = np.logaddexp.reduce([np.logaddexp(*v) for v in state.values()])
    assert total == pytest.approx(0.0, abs=1e-12)


def test_length_reward_and_nbest():
    g = random_grid(np.random.default_rng(3), 5, 3)
    short = prefix_beam_search(g, 8, 2, length_reward=-50.0)[0]
    long = prefix_beam_search(g, 8, 2, length_reward=50.0)[0]
    assert len(short.tokens) == 0 and len(long.tokens) >= 3
    hs = prefix_beam_search(g, 8, 2, nbest=5)
    assert len(hs) == 5 and len({h.tokens for h in hs}) == 5
    assert all(a.score >= b.score for a, b in zip(hs, hs[1:]))


def test_argument_errors():
    g = random_grid(np.random.default_rng(0), 3, 3)
    with pytest.raises(ValueError):
        prefix_beam_search(g, 0, 2)
    with pytest.raises(ValueError):
        prefix_beam_search(g, 2, 2, scoring="best")
    with pytest.raises(ValueError):
        prefix_beam_search(g, 2, 2, fake_decoder(2, 0), lambda_aed=0.5)


def test_wer_matches_recursive_dp():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = rng.integers(0, 4, size=int(rng.integers(0, 9))).tolist()
        b = rng.integers(0, 4, size=int(rng.integers(1, 9))).tolist()
        assert edit_distance(a, b) == levenshtein(a, b)
        assert wer(a, b) == levenshtein(a, b) / len(b)


def test_wer_edge_cases():
    assert wer(["a", "b"], ["a", "b"]) == 0.0
    assert wer([], ["a", "b"]) == 1.0
    assert wer(["a", "x", "b", "c"], ["a", "b"]) == 1.0
    with pytest.raises(ValueError):
        wer(["a"], [])
    assert corpus_wer([(["a"], ["a", "b"]), (["c"], ["d"])]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        corpus_wer([])


@pytest.fixture(scope="module")
def model():
    return ASRModel(ModelConfig(feat_dim=3, model_dim=8, speech_layers=1, text_level_layers=1, decoder_layers=1,
                                heads=2, ff_dim=16, vocab_size=4, conv_kernel=3, max_rel_pos=4))


def test_model_beam_one_is_greedy(model):
    rng = np.random.default_rng(0)
    feats = [rng.standard_normal((int(rng.integers(6, 60)), 3)) for _ in range(6)]
    greedy = greedy_batch(model, feats)
    for f, g in zip(feats, greedy):
        h = beam_search(model, f, beam=1, lambda_aed=0.0, scoring="viterbi")[0]
        assert list(h.tokens) == g


def test_batched_decoding_matches_single(model):
    rng = np.random.default_rng(1)
    feats = [rng.standard_normal((n, 3)) for n in (40, 13, 25)]
    batched = decode_batch(model, feats, beam=3)
    for f, hs in zip(feats, batched):
        h = beam_search(model, f, beam=3)[0]
        assert hs[0].tokens == h.tokens
        assert hs[0].score == pytest.approx(h.score, abs=1e-9)
    with pytest.raises(ValueError):
        beam_search(model, feats[0], ctc_head="middle")
