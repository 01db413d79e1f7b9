import math

import numpy as np
import pytest

from pseudoasr.model import ASRModel, ModelConfig, decoder_io
from pseudoasr.numcore import Tensor, no_grad
from pseudoasr.pseudo import PseudoSpeechConfig

TINY = dict(feat_dim=3, model_dim=8, speech_layers=1, text_level_layers=1, decoder_layers=1, heads=2, ff_dim=16,
            vocab_size=5, conv_kernel=3, max_rel_pos=4)


def tiny(**kw):
    return ASRModel(ModelConfig(**{**TINY, **kw}))


def feats(T, seed=0):
    return np.random.default_rng(seed).standard_normal((T, 3))


@pytest.mark.parametrize("T", range(1, 20))
def test_frontend_length(T):
    assert tiny().conv_frontend(feats(T)).shape == (math.ceil(T / 6), 8)


@pytest.mark.parametrize("kw", [{}, {"downsampling": True, "tau": 0.0}, {"self_conditioning": True},
                                {"text_level_type": "transformerpp"}])
def test_batch_matches_single(kw):
    m = tiny(**kw)
    f1, f2 = feats(17, 1), feats(8, 2)
    with no_grad():
        both = m.forward_batch(feats=[f1, f2], labels=[[1, 2], [3]])
        one = m.forward_batch(feats=[f1], labels=[[1, 2]])
        two = m.forward_batch(feats=[f2], labels=[[3]])
    np.testing.assert_allclose(both.final_grid(0), one.final_grid(0), atol=1e-10)
    np.testing.assert_allclose(both.final_grid(1), two.final_grid(0), atol=1e-10)
    np.testing.assert_allclose(both.decoder_logp.data[1, :2], two.decoder_logp.data[0], atol=1e-10)


def test_self_conditioning_starts_as_identity():
    a, b = tiny(), tiny(self_conditioning=True)
    with no_grad():
        np.testing.assert_array_equal(a.forward_full(feats(12)).final_logp.data,
                                      b.forward_full(feats(12)).final_logp.data)


def test_tau_one_disables_merging():
    a, b = tiny(), tiny(downsampling=True, tau=1.0)
    with no_grad():
        out = b.forward_full(feats(30))
        np.testing.assert_array_equal(a.forward_full(feats(30)).final_logp.data, out.final_logp.data)
    assert out.merge_plans[0].segments == 5


def test_compression_shortens_and_falls_back_when_infeasible():
    m = tiny(downsampling=True, tau=0.0)
    with no_grad():
        out = m.forward_full(feats(60))
    plan = out.merge_plans[0]
    assert out.text_lengths == [plan.segments] and plan.segments <= 10
    labels = [0, 1, 2, 3, 4, 0, 1, 2, 3, 4]
    if plan.segments < len(labels):
        with no_grad():
            out = m.forward_full(feats(60), labels=labels)
        assert out.text_lengths == [10] and out.extras["compress_fallbacks"] == 1


def test_decode_step_matches_teacher_forcing():
    m = tiny()
    with no_grad():
        out = m.forward_full(feats(14), labels=[2, 0, 3])
        th = out.text_hidden.data[0]
        for i, prefix in enumerate([[], [2], [2, 0], [2, 0, 3]]):
            np.testing.assert_allclose(m.decode_step(th, prefix), out.decoder_logp.data[0, i], atol=1e-10)


def test_decoder_is_causal():
    m = tiny()
    with no_grad():
        a = m.forward_full(feats(14), labels=[2, 0, 3]).decoder_logp.data[0]
        b = m.forward_full(feats(14), labels=[2, 0, 1]).decoder_logp.data[0]
    np.testing.assert_allclose(a[:3], b[:3], atol=1e-12)
    assert not np.allclose(a[3], b[3])


def test_decoder_io():
    inp, tgt, lens = decoder_io([[1, 2], [3]], bos=5, eos=6)
    assert inp.tolist() == [[5, 1, 2], [5, 3, 6]]
    assert tgt.tolist() == [[1, 2, 6], [3, 6, 6]]
    assert lens == [3, 2]


def test_output_sizes():
    m = tiny()
    with no_grad():
        out = m.forward_full(feats(12), labels=[1])
    assert out.final_logp.shape == (1, 2, 6)
    assert out.ictc_logp.shape == (1, 2, 6)
    assert out.decoder_logp.shape == (1, 2, 7)
    np.testing.assert_allclose(np.exp(out.final_logp.data).sum(-1), 1.0)


def test_mode_validation():
    m = tiny()
    with pytest.raises(ValueError):
        m.forward_full(feats(6), mode="pseudo")
    with pytest.raises(ValueError):
        m.forward_full(pseudo=np.zeros((3, 8)), mode="speech")
    with pytest.raises(ValueError):
        m.forward_full(feats(6), mode="text")
    with pytest.raises(ValueError):
        m.forward_batch()
    out = m.forward_full(pseudo=np.zeros((3, 8)), mode="pseudo")
    assert out.final_logp.shape == (1, 3, 6)


def test_text_level_encode_self_conditioning_needs_probs():
    m = tiny(self_conditioning=True)
    h = Tensor(np.zeros((4, 8)))
    with pytest.raises(ValueError):
        m.text_level_encode(h)
    th, logp = m.text_level_encode(h, np.full((4, 6), 1 / 6))
    assert logp.shape == (4, 6)
    m.text_level_encode(h, mode="pseudo")


@pytest.mark.parametrize("self_conditioning", [False, True])
def test_parameter_groups_partition(self_conditioning):
    cfg = ModelConfig(**{**TINY, "self_conditioning": self_conditioning})
    m = ASRModel(cfg, PseudoSpeechConfig(duration_model="trained"))
    groups = [m.group_parameters(g) for g in ("pseudo", "duration", "text_level", "speech", "decoder")]
    ids = [id(p) for g in groups for p in g]
    assert len(ids) == len(set(ids))
    assert set(ids) == {id(p) for p in m.parameters()}
    with pytest.raises(KeyError):
        m.group_parameters("everything")


def test_save_load_round_trip(tmp_path):
    m = ASRModel(ModelConfig(**{**TINY, "downsampling": True}), PseudoSpeechConfig())
    m.save(tmp_path / "m.ckpt", {"note": "x"})
    m2 = ASRModel.load(tmp_path / "m.ckpt")
    assert m2.config == m.config and m2.pseudo_config == m.pseudo_config
    with no_grad():
        np.testing.assert_array_equal(m.forward_full(feats(20)).final_logp.data,
                                      m2.forward_full(feats(20)).final_logp.data)


def test_pure_ctc_has_no_decoder():
    m = tiny(decoder_layers=0)
    out = m.forward_full(feats(12), labels=[1])
    assert out.decoder_logp is None
    with pytest.raises(RuntimeError):
        m.decode_step(out.text_hidden.data[0], [])


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(text_level_type="lstm")
    with pytest.raises(ValueError):
        ModelConfig(tau=1.5)
    with pytest.raises(ValueError):
        ModelConfig(model_dim=10, heads=4)
