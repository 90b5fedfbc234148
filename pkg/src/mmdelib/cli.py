"""Command-line entry point: ``mmdelib <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .decode import beam_search, derangement, strip_eos, write_permutation
from .evaluation import corpus_bleu, corpus_wer, significance
from .features import read_feature_array
from .pipeline.checkpoint import load_model
from .pipeline.config import read_config
from .pipeline.experiment import SETUPS, ExperimentSpec, TextSide, prepare_data, save_run, train
from .pipeline.matrix import run_matrix
from .pipeline.noise import noise_transcripts
from .pipeline.synthetic import ALL_TAGS, make_synthetic_task
from .subword import SubwordModel, apply_bpe, learn_bpe, tokenize
from .transformer import FAMILIES

BEGIN, END = "=== BEGIN RESULTS ===", "=== END RESULTS ==="


def _lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def _tokens(path) -> list[list[str]]:
    return [tokenize(s) for s in _lines(path)]


def _write(path, sents) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(" ".join(s) + "\n" for s in sents), encoding="utf-8")


def _emit(lines) -> None:
    print(BEGIN)
    for line in lines:
        print(line)
    print(END)


def _need(args, name):
    value = getattr(args, name)
    if value is None:
        raise SystemExit(f"{args.command}: --{name.replace('_', '-')} is required")
    return value


def cmd_synth(args) -> int:
    tags = tuple(t for t in ALL_TAGS if t.lower() in {x.strip().lower() for x in args.features.split(",")})
    task = make_synthetic_task(args.n_sentences, n_categories=args.n_categories, seed=args.seed, tags=tags)
    out = Path(_need(args, "out"))
    task.write(out)
    _emit([f"{name} {len(split.src)}" for name, split in task.splits.items()])
    return 0


def cmd_noise(args) -> int:
    clean = _tokens(args.input)
    noisy = noise_transcripts(clean, args.wer, args.seed)
    _write(_need(args, "out"), noisy)
    _emit([f"target_wer {args.wer:.4f}", f"measured_wer {corpus_wer(noisy, clean):.4f}"])
    return 0


def cmd_bpe_learn(args) -> int:
    model = learn_bpe(_tokens(args.input), args.merges)
    model.save(_need(args, "out"))
    _emit([f"merges {len(model.merges)}"])
    return 0


def cmd_bpe_apply(args) -> int:
    model = SubwordModel.load(args.model)
    _write(_need(args, "out"), [apply_bpe(model, s) for s in _tokens(args.input)])
    return 0


def _spec(args, family: str, setup: str) -> ExperimentSpec:
    fields, tcfg, _ = read_config(_need(args, "config"))
    return ExperimentSpec(family, setup, Path(args.data), fields, tcfg, args.seed)


def cmd_train(args) -> int:
    spec = _spec(args, args.family, args.setup)
    prepared = prepare_data(spec.data_dir, spec.train, spec.seed)
    system = train(spec, prepared, {}, args.max_epochs)
    ckpt = save_run(system, prepared, _need(args, "out"))
    best = max(h["valid_bleu"] for h in system.history)
    _emit([f"checkpoint {ckpt}", f"epochs {len(system.history)}", f"best_valid_bleu {best:.2f}"])
    return 0


def _load_run(run_dir):
    run = Path(run_dir)
    return load_model(run / "model.ckpt"), TextSide.load(run, "src"), TextSide.load(run, "tgt")


def _translate(model, src_side, tgt_side, sources, visual, beam):
    out = []
    for i, toks in enumerate(sources):
        vis = None if visual is None else visual[i]
        hyp = beam_search(model, src_side.encode(toks), vis, beam=beam)[0]
        out.append(tgt_side.decode(strip_eos(hyp.tokens)))
    return out


def _features_for(model, path, n):
    tag = model.cfg.feature_tag
    if tag is None:
        return None
    if path is None:
        raise SystemExit(f"model uses {tag} features: pass --features")
    return read_feature_array(path, tag, expected=n)[1]


def cmd_translate(args) -> int:
    model, src_side, tgt_side = _load_run(args.run)
    sources = _tokens(args.input)
    visual = _features_for(model, args.features, len(sources))
    hyps = _translate(model, src_side, tgt_side, sources, visual, args.beam)
    _write(_need(args, "out"), hyps)
    return 0


def cmd_evaluate(args) -> int:
    report = corpus_bleu(_tokens(args.hyp), _tokens(args.ref), smooth=args.smooth)
    _emit(report.lines() + [report.summary()])
    return 0


def cmd_incongruent(args) -> int:
    model, src_side, tgt_side = _load_run(args.run)
    sources = _tokens(args.input)
    visual = _features_for(model, args.features, len(sources))
    if visual is None:
        raise SystemExit("incongruent decoding needs a multimodal model")
    out = Path(_need(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    perm = derangement(len(sources), args.seed)
    write_permutation(out / "permutation.txt", perm, args.seed)
    congruent = _translate(model, src_side, tgt_side, sources, visual, args.beam)
    incongruent = _translate(model, src_side, tgt_side, sources, visual[perm], args.beam)
    _write(out / "congruent.txt", congruent)
    _write(out / "incongruent.txt", incongruent)
    lines = [f"sentences {len(sources)}"]
    if args.ref:
        refs = _tokens(args.ref)
        c, i = corpus_bleu(congruent, refs).bleu, corpus_bleu(incongruent, refs).bleu
        p = significance(incongruent, congruent, refs, args.iterations, seed=args.seed)
        lines += [f"congruent_bleu {c:.2f}", f"incongruent_bleu {i:.2f}", f"delta {i - c:+.2f}", f"p_value {p:.4f}"]
    _emit(lines)
    return 0


def cmd_significance(args) -> int:
    p = significance(_tokens(args.a), _tokens(args.b), _tokens(args.ref), args.iterations,
                     seed=args.seed, method=args.method)
    _emit([f"p_value {p:.4f}"])
    return 0


def cmd_matrix(args) -> int:
    fields, tcfg, experiment = read_config(_need(args, "config"))
    families = (args.families or experiment.get("families", ",".join(FAMILIES))).split(",")
    setups = (args.setups or experiment.get("setups", ",".join(SETUPS))).split(",")
    data = Path(args.data) if args.data else None
    out = Path(_need(args, "out"))
    if data is None:
        # No corpus given: synthesize one as configured.
        data = out / "data"
        tags = tuple(t for t in ALL_TAGS
                     if t.lower() in experiment.get("features", "avgpool,actionscores,convmap").lower().split(","))
        make_synthetic_task(int(experiment.get("n_sentences", 2000)), seed=args.seed, tags=tags,
                            n_categories=int(experiment.get("n_categories", 8))).write(data)
    specs = [ExperimentSpec(f.strip(), s.strip(), data, fields, tcfg, args.seed) for f in families for s in setups]
    report = run_matrix(specs, out, beam=args.beam, iterations=args.iterations, max_epochs=args.max_epochs,
                        figures=not args.no_figures)
    print(report.congruent_grid())
    print()
    print(report.delta_grid())
    _emit(report.machine_lines())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (.ini)")
    common.add_argument("--seed", type=int, default=1)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mmdelib", description="Multimodal transformer and deliberation MT toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic multimodal task")
    p.add_argument("--n-sentences", type=int, default=2000)
    p.add_argument("--n-categories", type=int, default=8)
    p.add_argument("--features", default="avgpool,actionscores,convmap",
                   help="comma-separated subset of avgpool, actionscores, convmap")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("noise", parents=[common], help="corrupt transcripts to a target WER")
    p.add_argument("--input", required=True)
    p.add_argument("--wer", type=float, default=0.19)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("bpe-learn", parents=[common], help="learn BPE merges from a corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--merges", type=int, default=500)
    p.set_defaults(func=cmd_bpe_learn)

    p = sub.add_parser("bpe-apply", parents=[common], help="segment a corpus with learned merges")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_bpe_apply)

    p = sub.add_parser("train", parents=[common], help="train one system")
    p.add_argument("--data", required=True, help="corpus directory ({split}.src/.tgt and feature files)")
    p.add_argument("--family", choices=FAMILIES, default="Trans")
    p.add_argument("--setup", choices=SETUPS, default="Baseline")
    p.add_argument("--max-epochs", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("translate", cmd_translate, "translate a source file with a trained run"),
                              ("incongruent", cmd_incongruent, "decode with deranged visual features")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--run", required=True, help="directory written by `train`")
        p.add_argument("--input", required=True)
        p.add_argument("--features")
        p.add_argument("--beam", type=int, default=10)
        if name == "incongruent":
            p.add_argument("--ref")
            p.add_argument("--iterations", type=int, default=10000)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", parents=[common], help="corpus BLEU of a hypothesis file")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--smooth", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("significance", parents=[common], help="paired significance test between two systems")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--iterations", type=int, default=10000)
    p.add_argument("--method", choices=("approximate", "bootstrap"), default="approximate")
    p.set_defaults(func=cmd_significance)

    p = sub.add_parser("matrix", parents=[common], help="run the 15-system experiment matrix and report")
    p.add_argument("--data", help="corpus directory (synthesized under --out when omitted)")
    p.add_argument("--families")
    p.add_argument("--setups")
    p.add_argument("--beam", type=int)
    p.add_argument("--iterations", type=int, default=10000)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_matrix)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
