"""Command-line entry point: ``pseudoasr <subcommand> ...``.

Machine-readable results go to stdout (or ``--out``) as JSON lines; human
summaries go to stderr. Exit codes: 0 success, 1 usage, 2 config/schema,
3 runtime (non-finite loss, bad files, infeasible alignments).

Every ablation axis is a config key, so a grid needs no code edits:

>>> from pseudoasr.config import load_config
>>> cfg = load_config(None, [f"{key}={value}" for key, value in ABLATION_AXES.values()])
>>> (cfg.model.downsampling, cfg.train.regime, cfg.pseudo.duration_model)
(True, 'pseudo_modality_matching', 'trained')
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, RunConfig, load_config

# axis -> (config key, an example non-default value)
ABLATION_AXES = {
    "training regime": ("train.regime", "pseudo_modality_matching"),
    "text ratio": ("train.text_ratio", "3.75"),
    "speech layers": ("model.speech_layers", "8"),
    "text-level layers": ("model.text_level_layers", "8"),
    "text-level encoder type": ("model.text_level_type", "transformerpp"),
    "CTC compression": ("model.downsampling", "true"),
    "compression threshold": ("model.tau", "0.95"),
    "self-conditioning": ("model.self_conditioning", "true"),
    "decoder (0 = pure CTC)": ("model.decoder_layers", "0"),
    "pseudo input variant": ("pseudo.input_variant", "text_encoder_transposed_conv"),
    "duration model": ("pseudo.duration_model", "trained"),
    "upsampled encoder": ("pseudo.upsample_encoder", "small_transformer"),
    "output masking": ("pseudo.mask_prob", "0.1"),
    "text augmentation": ("pseudo.augment_prob", "0.0"),
    "maximum blank duration": ("pseudo.max_blank_dur", "2"),
    "maximum label duration": ("pseudo.max_label_dur", "2"),
    "CTC weight in decoding": ("decode.lambda_ctc", "0.3"),
    "decoder weight in decoding": ("decode.lambda_aed", "0.7"),
    "CTC head used in decoding": ("decode.ctc_head", "speech"),
    "beam size": ("decode.beam", "8"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(records, out: str | None) -> None:
    fh = open(out, "w") if out else sys.stdout
    try:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if out:
            fh.close()


def _config(args, seed_keys: Sequence[str] = ()) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides += [f"{k}={args.seed}" for k in seed_keys]
    return load_config(args.config, overrides)


def _corpus(args, cfg: RunConfig):
    from .data import gen_corpus, load_manifest

    if args.data:
        return load_manifest(args.data)
    return gen_corpus(cfg.data).public()


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .data import gen_corpus, save_manifest

    cfg = _config(args, ["data.seed"])
    corpus = gen_corpus(cfg.data)
    path = save_manifest(corpus.public(), args.out)
    recs = [{"split": s, "utterances": len(u), "tokens": sum(len(x.tokens) for x in u)}
            for s, u in corpus.splits.items()]
    _emit(recs, None)
    _err(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    from .training import train

    cfg = _config(args, ["train.seed", "model.seed"])
    corpus = _corpus(args, cfg)
    if cfg.model.vocab_size != corpus.config.vocab_size or cfg.model.feat_dim != corpus.config.feat_dim:
        raise ConfigError("model.vocab_size / model.feat_dim must match the corpus")

    def progress(rep):
        if rep.step % 50 == 0:
            _err(f"step {rep.step} loss {rep.total:.4f} lr {rep.lr:.2e}")

    res = train(cfg, corpus, args.out, progress=progress)
    _emit([{"checkpoint": str(res.checkpoint), "metrics": str(res.metrics), "steps": res.steps,
            "dev_wer": res.dev_wer}], None)
    _err(f"dev WER {res.dev_wer:.4f}")
    return 0


def _load_model(path):
    from .model import ASRModel

    return ASRModel.load(path)


def cmd_decode(args) -> int:
    from .data import load_manifest
    from .decoding import corpus_wer, decode_batch, greedy_batch, wer

    cfg = _config(args)
    d = cfg.decode
    beam = args.beam if args.beam is not None else d.beam
    lam_ctc = args.lambda_ctc if args.lambda_ctc is not None else d.lambda_ctc
    lam_aed = args.lambda_aed if args.lambda_aed is not None else d.lambda_aed
    head = args.ctc_head or d.ctc_head
    scoring = args.ctc_scoring or d.ctc_scoring
    reward = args.length_reward if args.length_reward is not None else d.length_reward
    model = _load_model(args.checkpoint)
    corpus = load_manifest(args.data)
    utts = corpus[args.split]
    recs, pairs = [], []
    words = corpus.words
    for i in range(0, len(utts), args.batch_size):
        chunk = utts[i:i + args.batch_size]
        feats = [u.features for u in chunk]
        if args.greedy:
            hyps = [[h] for h in greedy_batch(model, feats, head)]
        else:
            found = decode_batch(model, feats, beam, lam_ctc, lam_aed, head, reward, args.nbest, scoring)
            hyps = [[list(h.tokens) for h in hs] for hs in found]
        for u, hs in zip(chunk, hyps):
            rec = {"id": u.id, "hyp": words(hs[0]), "ref": words(u.tokens), "wer": wer(hs[0], u.tokens)}
            if args.nbest > 1:
                rec["nbest"] = [words(h) for h in hs]
            recs.append(rec)
            pairs.append((hs[0], u.tokens))
    _emit(recs, args.out)
    _err(f"{args.split}: WER {corpus_wer(pairs):.4f} over {len(utts)} utterances")
    return 0


def cmd_align(args) -> int:
    from .ctc import ctc_forced_align, durations_from_alignment, path_log_prob
    from .data import load_manifest
    from .numcore import no_grad

    model = _load_model(args.checkpoint)
    utts = load_manifest(args.data)[args.split]
    recs = []
    for i in range(0, len(utts), args.batch_size):
        chunk = utts[i:i + args.batch_size]
        with no_grad():
            out = model.forward_batch(feats=[u.features for u in chunk])
        for b, u in enumerate(chunk):
            grid = out.ictc_grid(b) if args.head == "intermediate" else out.final_grid(b)
            path = ctc_forced_align(grid, u.tokens)
            ld, bd = durations_from_alignment(path, u.tokens, model.config.blank)
            recs.append({"id": u.id, "path": path, "label_durs": ld, "blank_durs": bd,
                         "log_prob": path_log_prob(grid, path)})
    _emit(recs, args.out)
    return 0


def cmd_inspect_compress(args) -> int:
    from .compress import merge_plan
    from .data import load_manifest
    from .numcore import no_grad

    model = _load_model(args.checkpoint)
    tau = model.config.tau if args.tau is None else args.tau
    utts = load_manifest(args.data)[args.split]
    recs, frames, segs = [], 0, 0
    for i in range(0, len(utts), args.batch_size):
        chunk = utts[i:i + args.batch_size]
        with no_grad():
            h, lengths, ictc = model.speech_encode_batch([u.features for u in chunk])
        for b, u in enumerate(chunk):
            plan = merge_plan(ictc.data[b, :lengths[b]], tau)
            recs.append({"id": u.id, "frames": lengths[b], "segments": plan.segments, "labels": len(u.tokens),
                         "mask": plan.mask.astype(int).tolist(), "index": plan.index.tolist()})
            frames += lengths[b]
            segs += plan.segments
    _emit(recs, args.out)
    _err(f"tau {tau}: {frames} frames -> {segs} segments ({segs / max(frames, 1):.3f})")
    return 0


def ablation_cells(regimes: Sequence[str], ratios: Sequence[float], splits: Sequence[tuple[int, int]]):
    """Grid cells, dropping regime/ratio pairs the config rejects (text regimes need a ratio > 0)."""
    cells = []
    for reg in regimes:
        for r in ratios:
            if (reg == "paired_only") != (r == 0):
                continue
            for s, t in splits:
                cells.append((reg, r, s, t))
    return cells


def cmd_ablate(args) -> int:
    from .training import train

    base = _config(args, ["train.seed", "model.seed"])
    corpus = _corpus(args, base)
    splits = [tuple(int(v) for v in s.split("/")) for s in args.splits.split(",")]
    ratios = [float(r) for r in args.ratios.split(",")]
    regimes = args.regimes.split(",")
    out = Path(args.out)
    rows = []
    for reg, r, s, t in ablation_cells(regimes, ratios, splits):
        name = f"{reg}_r{r:g}_s{s}-{t}"
        overrides = list(args.set or []) + [f"train.regime={reg}", f"train.text_ratio={r}",
                                            f"model.speech_layers={s}", f"model.text_level_layers={t}"]
        if args.seed is not None:
            overrides += [f"train.seed={args.seed}", f"model.seed={args.seed}"]
        cfg = load_config(args.config, overrides)
        _err(f"cell {name}")
        res = train(cfg, corpus, out / name)
        row = {"cell": name, "regime": reg, "text_ratio": r, "speech_layers": s, "text_level_layers": t,
               "dev_wer": res.dev_wer}
        rows.append(row)
        _emit([row], None)
        sys.stdout.flush()
    _err(f"{'regime':<26}{'ratio':>6}{'split':>7}{'dev WER':>9}")
    for row in rows:
        _err(f"{row['regime']:<26}{row['text_ratio']:>6g}{row['speech_layers']:>4}/{row['text_level_layers']:<2}"
             f"{100 * row['dev_wer']:>9.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pseudoasr", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="INI config file")
            sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        sp.add_argument("--seed", type=int, help="overrides every seed the subcommand uses")

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", help="corpus directory (default: generate from [data])")
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="decode a split with a checkpoint")
    common(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="test")
    d.add_argument("--beam", type=int)
    d.add_argument("--lambda-ctc", type=float)
    d.add_argument("--lambda-aed", type=float)
    d.add_argument("--ctc-head", choices=["final", "speech"])
    d.add_argument("--ctc-scoring", choices=["sum", "viterbi"])
    d.add_argument("--length-reward", type=float)
    d.add_argument("--nbest", type=int, default=1)
    d.add_argument("--greedy", action="store_true", help="best-path CTC decoding, no search")
    d.add_argument("--batch-size", type=int, default=32)
    d.add_argument("--out", help="output JSONL (default stdout)")
    d.set_defaults(func=cmd_decode)

    a = sub.add_parser("align", help="forced alignments and durations")
    common(a, config=False)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="train_paired")
    a.add_argument("--head", choices=["intermediate", "final"], default="intermediate")
    a.add_argument("--batch-size", type=int, default=32)
    a.add_argument("--out")
    a.set_defaults(func=cmd_align)

    c = sub.add_parser("inspect-compress", help="merge masks and segment counts")
    common(c, config=False)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--split", default="dev")
    c.add_argument("--tau", type=float)
    c.add_argument("--batch-size", type=int, default=32)
    c.add_argument("--out")
    c.set_defaults(func=cmd_inspect_compress)

    b = sub.add_parser("ablate", help="run the toy ablation grid")
    common(b)
    b.add_argument("--data")
    b.add_argument("--out", required=True)
    b.add_argument("--regimes", default="paired_only,pseudo_direct,pseudo_modality_matching,toy_tts")
    b.add_argument("--ratios", default="0,1.0,1.5,3.75")
    b.add_argument("--splits", default="4/12,8/8", help="speech/text-level layer splits")
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    from .ctc import AlignmentMismatchError, CTCInfeasibleError
    from .data import ManifestError
    from .numcore import CheckpointError
    from .training import TrainingDiverged

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _err(f"usage error: {exc}")
        return 1
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return 2
    except (TrainingDiverged, ManifestError, CheckpointError, CTCInfeasibleError, AlignmentMismatchError,
            FileNotFoundError) as exc:
        _err(f"runtime error: {exc}")
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
