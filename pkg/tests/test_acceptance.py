"""Acceptance suite: one test per criterion, each recorded as a PASS/FAIL line in the terminal summary.

The toy-reproduction criteria (8, 9) train on the reference configuration in
``configs/reference.cfg``; their runs are shared and take most of the time.
"""

import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from pseudoasr.cli import main
from pseudoasr.compress import compress, merge_mask, merge_plan, merged_index
from pseudoasr.config import RunConfig, TrainConfig, load_config
from pseudoasr.ctc import (ctc_forced_align, ctc_greedy, ctc_loss, ctc_loss_batch, durations_from_alignment,
                           path_log_prob)
from pseudoasr.data import ToyCorpusConfig, gen_corpus
from pseudoasr.decoding import edit_distance, prefix_beam_search
from pseudoasr.model import ModelConfig
from pseudoasr.numcore import Parameter, Tensor, grad_check, no_grad
from pseudoasr.pseudo import DurationAssignment, PseudoSpeechConfig, modality_matching_loss_batch
from pseudoasr.training import RatioScheduler, build_model, decoder_ce, make_rng, paired_step, text_only_step, train

from oracles import (brute_instances, ctc_brute_align, ctc_brute_loss, exhaustive_prefix_search, hand_trace_index,
                     levenshtein, random_grid)

REFERENCE = Path(__file__).resolve().parents[1] / "configs" / "reference.cfg"


@contextmanager
def judged(verdict, number):
    """Collects ``state["checks"]`` (name -> bool) and ``state["detail"]``; records and asserts on exit."""
    state = {"checks": {}, "detail": ""}
    try:
        yield state
    except Exception as exc:
        verdict(number, False, f"error: {exc!r}")
        raise
    failed = [k for k, v in state["checks"].items() if not v]
    detail = state["detail"] + (f" | failed: {', '.join(failed)}" if failed else "")
    verdict(number, not failed, detail.strip(" |"))
    assert not failed, detail


# -- 1 ------------------------------------------------------------------------------

def test_criterion_01_ctc_oracle(verdict):
    with judged(verdict, 1) as st:
        t0 = time.perf_counter()
        worst_loss = worst_path = 0.0
        paths_equal = True
        count = 0
        for T, V, labels, grid in brute_instances(5, 3, 3):
            worst_loss = max(worst_loss, abs(ctc_loss(grid, labels).item() - ctc_brute_loss(grid, labels)))
            path, score = ctc_brute_align(grid, labels)
            got = ctc_forced_align(grid, labels)
            paths_equal &= got == path
            worst_path = max(worst_path, abs(path_log_prob(grid, got) - score))
            count += 1
        elapsed = time.perf_counter() - t0
        st["checks"] = {"loss": worst_loss <= 1e-9, "alignment": paths_equal and worst_path <= 1e-9,
                        "runtime": elapsed < 10}
        st["detail"] = (f"{count} instances, max |dloss| {worst_loss:.1e}, max |dpath| {worst_path:.1e}, "
                        f"{elapsed:.1f}s")


# -- 2 ------------------------------------------------------------------------------

def test_criterion_02_gradient_suite(verdict):
    with judged(verdict, 2) as st:
        t0 = time.perf_counter()
        data = ToyCorpusConfig(vocab_size=4, successors=2, feat_dim=2, num_paired=2, num_text_only=2, num_dev=1,
                               num_test=1, min_len=2, max_len=3, frame_range=(6, 12))
        model_cfg = ModelConfig(feat_dim=2, model_dim=4, speech_layers=1, text_level_layers=1, decoder_layers=1,
                                heads=1, ff_dim=4, vocab_size=4, conv_kernel=3, max_rel_pos=2,
                                self_conditioning=True)
        cfg = RunConfig(data=data, model=model_cfg,
                        pseudo=PseudoSpeechConfig(duration_model="trained", text_encoder_layers=1),
                        train=TrainConfig(regime="pseudo_modality_matching", text_ratio=1.0))
        model = build_model(cfg)
        rng = np.random.default_rng(0)
        for p in model.self_cond.parameters() + model.pseudo.duration_parameters():
            p.data[...] = 0.3 * rng.standard_normal(p.data.shape)
        utts = gen_corpus(data)["train_paired"]
        feats, labels = [u.features for u in utts], [u.tokens for u in utts]

        def forward(with_decoder=True):
            return model.forward_batch(feats=feats, labels=labels if with_decoder else None)

        def forced():
            with no_grad():
                out = forward()
            res = []
            for b, lab in enumerate(labels):
                ld, bd = durations_from_alignment(ctc_forced_align(out.ictc_grid(b), lab), lab, model.config.blank)
                res.append(DurationAssignment(ld, bd))
            return res, out.speech_hidden.data, out.speech_lengths

        align, target, lengths = forced()
        pseudo = model.pseudo

        def mm():
            pb = pseudo.encode(labels, np.random.default_rng(0), forced=align, augment=False, mask=False)
            return modality_matching_loss_batch(pb.frames, Tensor(target), lengths).mean()

        def dur():
            slots, counts = pseudo.slot_encodings(labels)
            return pseudo.duration_loss(slots, counts, align).mean()

        def ctc_sum(out, head):
            if head == "final":
                return ctc_loss_batch(out.final_logp, out.text_lengths, labels).sum()
            return ctc_loss_batch(out.ictc_logp, out.speech_lengths, labels).sum()

        speech, text = model.group_parameters("speech"), model.group_parameters("text_level")
        losses = {
            "ce": (lambda: decoder_ce(forward()), speech + text + model.group_parameters("decoder")),
            "ctc_final": (lambda: ctc_sum(forward(False), "final"), speech + text),
            "ctc_intermediate": (lambda: ctc_sum(forward(False), "intermediate"), speech),
            "duration": (dur, model.group_parameters("duration")),
            "modality_matching": (mm, model.group_parameters("pseudo")),
        }
        errors = {name: grad_check(f, params) for name, (f, params) in losses.items()}
        elapsed = time.perf_counter() - t0
        st["checks"] = {name: err <= 1e-4 for name, err in errors.items()}
        st["checks"]["runtime"] = elapsed < 60
        st["detail"] = ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f", {elapsed:.1f}s"


# -- 3 ------------------------------------------------------------------------------

def test_criterion_03_compression_contract(verdict):
    with judged(verdict, 3) as st:
        t0 = time.perf_counter()
        rng = np.random.default_rng(3)
        index_ok = length_ok = True
        for _ in range(1000):
            mask = rng.random(int(rng.integers(1, 40))) < 0.5
            idx = merged_index(mask)
            index_ok &= idx.tolist() == hand_trace_index(mask)
            h = Tensor(rng.standard_normal((len(mask), 3)))
            length_ok &= compress(h, idx).shape[0] == len(mask) - int(mask[1:].sum())
        mono_ok = True
        for _ in range(1000):
            g = random_grid(rng, int(rng.integers(1, 30)), 5, peaky=float(rng.uniform(0, 4)))
            t1, t2 = sorted(rng.uniform(0, 1, size=2))
            mono_ok &= merge_mask(g, t1).sum() >= merge_mask(g, t2).sum()
            plan = merge_plan(g, t1)
            length_ok &= compress(Tensor(np.zeros((g.shape[0], 2))), plan.index).shape[0] == plan.segments
        elapsed = time.perf_counter() - t0
        st["checks"] = {"merged index": index_ok, "length": length_ok, "tau monotone": mono_ok,
                        "runtime": elapsed < 10}
        st["detail"] = f"1000 masks, 1000 grids, {elapsed:.1f}s"


# -- 4 ------------------------------------------------------------------------------

def test_criterion_04_modality_matching_lengths(verdict):
    with judged(verdict, 4) as st:
        data = ToyCorpusConfig(num_paired=200, num_text_only=1, num_dev=1, num_test=1)
        cfg = RunConfig(data=data, model=ModelConfig(model_dim=32, ff_dim=64, speech_layers=2, text_level_layers=2),
                        train=TrainConfig(regime="pseudo_modality_matching", text_ratio=3.75))
        model = build_model(cfg)
        utts = gen_corpus(data)["train_paired"]
        matched = 0
        for i in range(0, len(utts), 25):
            chunk = utts[i:i + 25]
            labels = [u.tokens for u in chunk]
            with no_grad():
                out = model.forward_batch(feats=[u.features for u in chunk], labels=labels)
                forced = []
                for b, lab in enumerate(labels):
                    ld, bd = durations_from_alignment(ctc_forced_align(out.ictc_grid(b), lab), lab, model.config.blank)
                    forced.append(DurationAssignment(ld, bd))
                pb = model.pseudo.encode(labels, np.random.default_rng(0), forced=forced, augment=False, mask=False)
            matched += sum(a == b for a, b in zip(pb.lengths, out.speech_lengths))
        x = Tensor(np.random.default_rng(0).standard_normal((3, 7, 32)))
        zero = modality_matching_loss_batch(x, Tensor(x.data.copy()), [7, 5, 2]).data
        st["checks"] = {"lengths": matched == len(utts), "zero loss": bool(np.all(zero == 0.0))}
        st["detail"] = f"{matched}/{len(utts)} utterances length-matched, identical-input loss {zero.max():.1e}"


# -- 5 ------------------------------------------------------------------------------

def test_criterion_05_gradient_flow_matrix(verdict):
    with judged(verdict, 5) as st:
        t0 = time.perf_counter()
        data = ToyCorpusConfig(vocab_size=6, successors=2, feat_dim=4, num_paired=4, num_text_only=4, num_dev=1,
                               num_test=1, min_len=2, max_len=4, frame_range=(6, 12))
        corpus = gen_corpus(data)
        model_cfg = ModelConfig(feat_dim=4, model_dim=8, speech_layers=1, text_level_layers=1, decoder_layers=1,
                                heads=2, ff_dim=16, vocab_size=6, conv_kernel=3, max_rel_pos=4)

        def grads(regime, step):
            cfg = RunConfig(data=data, model=model_cfg, pseudo=PseudoSpeechConfig(duration_model="trained"),
                            train=TrainConfig(regime=regime, text_ratio=1.0))
            model = build_model(cfg)
            model.zero_grad()
            if step == "paired":
                paired_step(model, corpus["train_paired"], cfg.train, np.random.default_rng(0))
            else:
                text_only_step(model, [u.tokens for u in corpus["train_text"]], cfg.train, np.random.default_rng(0))
            return {g: sum(float(np.abs(p.grad).sum()) for p in model.group_parameters(g) if p.grad is not None)
                    for g in ("pseudo", "duration", "text_level")}

        mm_text, mm_paired = grads("pseudo_modality_matching", "text"), grads("pseudo_modality_matching", "paired")
        dir_text, dir_paired = grads("pseudo_direct", "text"), grads("pseudo_direct", "paired")
        cells = {
            "mm/text/pseudo == 0": mm_text["pseudo"] == 0.0,
            "mm/text/text_level > 0": mm_text["text_level"] > 0,
            "mm/paired/pseudo > 0": mm_paired["pseudo"] > 0,
            "direct/paired/pseudo == 0": dir_paired["pseudo"] == 0.0,
            "direct/paired/duration > 0": dir_paired["duration"] > 0,
            "direct/text/pseudo > 0": dir_text["pseudo"] > 0,
        }
        elapsed = time.perf_counter() - t0
        st["checks"] = dict(cells, runtime=elapsed < 30)
        st["detail"] = f"{sum(cells.values())}/6 cells as specified, {elapsed:.1f}s"


# -- 6 ------------------------------------------------------------------------------

def test_criterion_06_ratio_and_accumulation(verdict):
    with judged(verdict, 6) as st:
        corpus = gen_corpus(ToyCorpusConfig(num_paired=200, num_text_only=16000, num_dev=1, num_test=1))
        pl = [len(u.tokens) for u in corpus["train_paired"]]
        tl = [len(u.tokens) for u in corpus["train_text"]]
        worst = {}
        for ratio in (1.0, 1.5, 3.75):
            sched = RatioScheduler(pl, tl, 64, ratio, make_rng(0, 0))
            plans = [sched.next() for _ in range(1000)]
            dev = 0.0
            for start in range(0, 801, 50):
                window = plans[start:start + 200]
                got = sum(p.text_tokens for p in window) / sum(p.paired_tokens for p in window)
                dev = max(dev, abs(got - ratio) / ratio)
            worst[ratio] = dev
        rng = np.random.default_rng(6)
        w = Parameter(rng.standard_normal((5, 3)))
        xs = [rng.standard_normal((n, 5)) for n in (7, 11)]
        cs = [rng.standard_normal((n, 3)) for n in (7, 11)]
        for x, c in zip(xs, cs):
            (Tensor(x) @ w * Tensor(c)).sum().backward()
        lin = float(np.abs(w.grad - sum(x.T @ c for x, c in zip(xs, cs))).max())
        st["checks"] = {f"ratio {r}": d <= 0.05 for r, d in worst.items()}
        st["checks"]["linearity"] = lin <= 1e-12
        st["detail"] = (", ".join(f"ratio {r}: max window dev {100 * d:.2f}%" for r, d in worst.items())
                        + f", linearity {lin:.1e}")


# -- 7 ------------------------------------------------------------------------------

def test_criterion_07_decoding(verdict):
    with judged(verdict, 7) as st:
        rng = np.random.default_rng(7)
        worst = 0.0
        same = True
        n_grids = 0
        for T in range(1, 6):
            for V1 in range(2, 5):
                for _ in range(8):
                    g = random_grid(rng, T, V1, peaky=float(rng.uniform(0, 3)))
                    best, y = exhaustive_prefix_search(g)
                    h = prefix_beam_search(g, 400, V1 - 1, lambda_aed=0.0)[0]
                    same &= h.tokens == y
                    worst = max(worst, abs(h.score - best))
                    n_grids += 1
        greedy_ok = True
        for _ in range(500):
            g = random_grid(rng, int(rng.integers(1, 40)), int(rng.integers(2, 8)), peaky=float(rng.uniform(0, 4)))
            h = prefix_beam_search(g, 1, g.shape[1] - 1, scoring="viterbi")[0]
            greedy_ok &= list(h.tokens) == ctc_greedy(g)
        wer_ok = True
        for _ in range(1000):
            a = rng.integers(0, 5, size=int(rng.integers(0, 10))).tolist()
            b = rng.integers(0, 5, size=int(rng.integers(1, 10))).tolist()
            wer_ok &= edit_distance(a, b) == levenshtein(a, b)
        st["checks"] = {"exhaustive oracle": same and worst <= 1e-9, "beam 1 = greedy": greedy_ok,
                        "WER DP": wer_ok}
        st["detail"] = (f"{n_grids} grids max dscore {worst:.1e}; 500 grids beam-1 (best-path scoring) vs greedy; "
                        f"1000 WER pairs")


# -- 8, 9: shared reference runs -------------------------------------------------------

ARMS = {
    "paired_only": ["train.regime=paired_only", "train.text_ratio=0"],
    "pseudo_direct": ["train.regime=pseudo_direct", "train.text_ratio=1.0"],
    "toy_tts": ["train.regime=toy_tts", "train.text_ratio=1.0"],
    "downsampling": ["train.regime=paired_only", "train.text_ratio=0", "model.downsampling=true"],
}


class ReferenceRuns:
    def __init__(self, root: Path):
        self.root = root
        self.corpus = None
        self.results: dict[str, tuple[float, float]] = {}

    def __call__(self, arm: str) -> tuple[float, float]:
        """(dev WER, wall seconds) of one reference arm, trained on first use."""
        if arm not in self.results:
            t0 = time.perf_counter()
            cfg = load_config(REFERENCE, ARMS[arm])
            if self.corpus is None:
                self.corpus = gen_corpus(cfg.data).public()
            res = train(cfg, self.corpus, self.root / arm)
            self.results[arm] = (res.dev_wer, time.perf_counter() - t0)
        return self.results[arm]


@pytest.fixture(scope="module")
def reference(tmp_path_factory):
    return ReferenceRuns(tmp_path_factory.mktemp("reference"))


def test_criterion_08_toy_text_utilization(verdict, reference):
    with judged(verdict, 8) as st:
        (p, tp), (s, ts), (t, tt) = reference("paired_only"), reference("pseudo_direct"), reference("toy_tts")
        total = tp + ts + tt
        st["checks"] = {"tts <= pseudo": t <= s, "pseudo < paired": s < p, "gain >= 1pt": p - s >= 0.01,
                        "runtime": total <= 1800}
        st["detail"] = (f"dev WER paired_only {100 * p:.2f}%, pseudo_direct {100 * s:.2f}%, toy_tts {100 * t:.2f}%; "
                        f"{total / 60:.1f} min")


def test_criterion_09_downsampling(verdict, reference):
    with judged(verdict, 9) as st:
        (off, _), (on, t_on) = reference("paired_only"), reference("downsampling")
        st["checks"] = {"within 2pt": abs(on - off) <= 0.02}
        st["detail"] = f"dev WER downsampling off {100 * off:.2f}%, on {100 * on:.2f}%"


# -- 10 -----------------------------------------------------------------------------

def test_criterion_10_determinism(verdict, tmp_path):
    with judged(verdict, 10) as st:
        args = ["train", "--config", str(REFERENCE), "--set", "train.regime=pseudo_modality_matching",
                "--set", "train.text_ratio=3.75", "--set", "train.steps=12", "--set", "train.eval_every=6",
                "--set", "data.num_text_only=2000"]
        codes = [main(args + ["--out", str(tmp_path / run)]) for run in "ab"]
        same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
                for name in ("metrics.jsonl", "model.ckpt")}
        steps = sum(json.loads(line)["type"] == "step" for line in (tmp_path / "a" / "metrics.jsonl").open())
        st["checks"] = {"exit codes": codes == [0, 0], **{f"identical {k}": v for k, v in same.items()}}
        st["detail"] = f"two 12-step runs ({steps} step records), metrics and checkpoint byte-identical"
