"""``clmdetour`` command-line entry point."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis as an
from . import needle as nd
from .data import generate_corpus, pack_array, write_corpus, write_vocab
from .experiments import ExperimentError, ExperimentSpec, Lab, run_experiment, emit_report
from .model import load_checkpoint, save_checkpoint


def _seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds expects comma-separated integers, got {text!r}")


def _load_spec(args, kind: str | None = None) -> ExperimentSpec:
    if args.spec:
        spec = ExperimentSpec.load(args.spec)
    else:
        spec = ExperimentSpec(kind or "detour_vs_baseline")
    if getattr(args, "seeds", None):
        spec = dataclasses.replace(spec, seeds=args.seeds)
    return spec


def cmd_gen_data(args) -> int:
    spec = _load_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lab = Lab(spec, out)
    for name, dom, seed in (("general", lab.general, spec.base.data_seed), ("domain", lab.domain, spec.seeds[0])):
        docs = generate_corpus(dom, args.docs, np.random.SeedSequence([seed, 0]))
        write_corpus(out / f"{name}.txt", docs)
        print(f"{name}: {len(docs)} docs, {len(pack_array(docs, spec.data.window))} windows")
    write_vocab(out / "vocab.tsv", lab.domain)
    return 0


def cmd_train(args) -> int:
    spec = _load_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lab = Lab(spec, out)
    for s in spec.seeds:
        run = lab.train(f"{args.pipeline}/s{s}", args.pipeline, s, s)
        path = out / f"{args.pipeline}_s{s}.ckpt"
        h = save_checkpoint(path, run.final, {"run": run.name})
        print(f"{run.name}: {run.tokens} tokens, {run.steps} steps -> {path} ({h})")
    return 0


def _text_sets(args):
    spec = _load_spec(args)
    return Lab(spec, Path(args.out).parent if args.out else Path(".")).cka_texts()


def cmd_analyze_cka(args) -> int:
    a, _ = load_checkpoint(args.a)
    b, _ = load_checkpoint(args.b)
    prof = an.divergence_profile(a, b, _text_sets(args))
    _emit(an.divergence_table(prof), args.out)
    return 0


def cmd_analyze_ratio(args) -> int:
    clm, _ = load_checkpoint(args.clm)
    s1, _ = load_checkpoint(args.mlm_s1)
    s2, _ = load_checkpoint(args.mlm_s2)
    texts = _text_sets(args)
    num = an.divergence_profile(clm, s1, texts)
    ratio = an.ratio_from_profiles(num, an.divergence_profile(s2, s1, texts))
    _emit(an.divergence_table(num, ratio), args.out)
    return 0


def cmd_transplant(args) -> int:
    target, _ = load_checkpoint(args.target)
    source, _ = load_checkpoint(args.source)
    comps = tuple(c for c in args.components.split(",") if c)
    hybrid = an.transplant(target, source, an.TransplantSpec(args.lo, args.hi, comps, args.source, args.target))
    h = save_checkpoint(args.out, hybrid, {"transplant": f"{args.lo}-{args.hi}:{'+'.join(comps)}"})
    print(f"{args.out} ({h})")
    return 0


def cmd_probe(args) -> int:
    spec = _load_spec(args)
    model, _ = load_checkpoint(args.ckpt)
    lab = Lab(spec, Path(args.out).parent if args.out else Path("."))
    rows = ["task,macro_f1,accuracy"]
    for task, r in lab.probe_scores(model).items():
        rows.append(f"{task},{r.mean_f1:.6g},{r.mean_accuracy:.6g}")
    _emit("\n".join(rows) + "\n", args.out)
    return 0


def cmd_needle_gen(args) -> int:
    spec = _load_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lab = Lab(spec, out)
    ns = spec.needle
    corpus = generate_corpus(lab.domain, ns.corpus_docs, np.random.SeedSequence([spec.analysis.heldout_seed, 3]))
    templates = nd.default_fact_templates(lab.domain, ns.n_templates, seed=ns.seed)
    splits = nd.generate_needle_dataset(ns.dataset_config(), templates, corpus, ns.seed)
    for name in ("train", "val", "test"):
        nd.write_needle_examples(out / f"{name}.tsv", getattr(splits, name))
    print(f"train {len(splits.train)}, val {len(splits.val)}, test {len(splits.test)}")
    return 0


def cmd_needle_eval(args) -> int:
    spec = _load_spec(args)
    model, _ = load_checkpoint(args.ckpt)
    data = Path(args.data)
    train, val, test = (nd.read_needle_examples(data / f"{n}.tsv") for n in ("train", "val", "test"))
    probe = nd.train_needle_probe(model, train, val, spec.needle.probe_config())
    rep = nd.evaluate_needle(probe, model, test, spec.needle.lengths, spec.needle.positions)
    _emit(rep.to_csv(), args.out)
    return 0


def cmd_experiment(args) -> int:
    spec = _load_spec(args)
    out = args.out or spec.out_dir
    if out is None:
        raise ExperimentError("no output directory: pass --out or set out_dir in the spec")
    result = run_experiment(spec, out, resume=args.resume, cache_dir=args.cache)
    print((Path(out) / "summary.md").read_text())
    if result.failures:
        for f in result.failures:
            print(f"FAILED: {f}", file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    print(emit_report(args.out), end="")
    return 0


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        print(text, end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clmdetour", description="Desk-scale CLM-detour laboratory")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, out_required=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--spec", help="experiment YAML file")
        sp.add_argument("--out", required=out_required, help="output path")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "write general/domain corpora and the vocab table", True)
    sp.add_argument("--docs", type=int, default=1000)
    sp = add("train", cmd_train, "train the base model and one pipeline per seed", True)
    sp.add_argument("--pipeline", choices=("detour", "baseline"), default="detour")
    sp.add_argument("--seeds", type=_seeds)
    sp = add("analyze-cka", cmd_analyze_cka, "layerwise divergence between two checkpoints")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp = add("analyze-ratio", cmd_analyze_ratio, "seed-noise-normalised divergence ratio")
    sp.add_argument("--clm", required=True)
    sp.add_argument("--mlm-s1", required=True)
    sp.add_argument("--mlm-s2", required=True)
    sp = add("transplant", cmd_transplant, "copy block components from source into target", True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--source", required=True)
    sp.add_argument("--lo", type=int, required=True)
    sp.add_argument("--hi", type=int, required=True)
    sp.add_argument("--components", default="attention,mlp,layer_norms")
    sp = add("probe", cmd_probe, "linear-probe scores for a checkpoint")
    sp.add_argument("--ckpt", required=True)
    add("needle-gen", cmd_needle_gen, "write needle train/val/test files", True)
    sp = add("needle-eval", cmd_needle_eval, "train a needle probe and print the accuracy grid")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp = add("experiment", cmd_experiment, "run a full experiment spec")
    sp.add_argument("--seeds", type=_seeds)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--cache", help="shared phase cache directory")
    add("report", cmd_report, "regenerate summary.md from an experiment directory", True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.fn(args)
    except (ExperimentError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
