"""Experiment specs, the phase cache, suite runners, manifests and reports."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import analysis as an
from . import needle as nd
from .data import (DomainSpec, SyntheticStream, apply_mlm_masking, default_domain_spec, generate_corpus,
                   make_clm_batch, probe_labels)
from .model import (MaskMode, ModelConfig, TransformerModel, extend_vocab_with_mask, extract_all_layers,
                    extract_representations, git_blob_hash, init_model, layer_of, load_checkpoint, loss_and_grads,
                    save_checkpoint)
from .trainer import (FreezeSpec, MetricsRecord, Objective, OptimizerState, PhaseConfig, Schedule, read_metrics,
                      train_phase, write_metrics)

log = logging.getLogger("clmdetour")

KINDS = ("detour_vs_baseline", "decay_sweep", "freeze_suite", "transplant_suite", "needle_suite",
         "reverse_direction")

# ---------------------------------------------------------------------------
# spec
# ---------------------------------------------------------------------------


def _build(cls, raw: dict | None):
    raw = dict(raw or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for f in dataclasses.fields(cls):
        if f.name in raw and isinstance(raw[f.name], list):
            raw[f.name] = tuple(raw[f.name])
    return cls(**raw)


@dataclass(frozen=True)
class DataSection:
    domain_shift: float = 0.5
    window: int = 256
    grammar_seed: int = 0
    doc_min: int = 24
    doc_max: int = 160
    repeat_rate: float = 0.0

    def domain(self, vocab_size: int) -> DomainSpec:
        return default_domain_spec(self.domain_shift, vocab_size=vocab_size, grammar_seed=self.grammar_seed,
                                   doc_length=(self.doc_min, self.doc_max), repeat_rate=self.repeat_rate)


@dataclass(frozen=True)
class BaseSection:
    tokens: int = 1_024_000
    mask_rate: float = 0.15
    seed: int = 0
    data_seed: int = 1000
    warmup_fraction: float = 0.02


@dataclass(frozen=True)
class PipelineSection:
    phase1_tokens: int = 2_048_000
    decay_ratio: float = 0.1
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.02
    floor_fraction: float = 0.1
    phase1_mask_rate: float = 0.30
    decay_mask_rate: float = 0.15
    grad_clip: float | None = None
    metrics_every: int = 10


@dataclass(frozen=True)
class OptimizerSection:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 1e-5
    bias_correction: bool = True


@dataclass(frozen=True)
class AnalysisSection:
    cka_seeds: tuple[int, ...] = (42, 43, 44)
    cka_texts: int = 128
    probe_docs: int = 600
    probe_seeds: tuple[int, ...] = (0, 1, 2)
    probe_tasks: tuple[str, ...] = ("specialty", "first_template", "domain_heavy")
    bootstrap_resamples: int = 10000
    bootstrap_seed: int = 0
    heldout_seed: int = 2024
    eval_windows: int = 64


@dataclass(frozen=True)
class NeedleSection:
    enabled: bool = True
    lengths: tuple[int, ...] = (32, 64, 128, 192, 256)
    positions: tuple[str, ...] = ("start", "middle", "end")
    pairs_per_cell: int = 100
    seed: int = 7
    n_templates: int = 8
    corpus_docs: int = 400
    probe: dict = field(default_factory=dict, hash=False)

    def dataset_config(self) -> nd.NeedleDatasetConfig:
        return nd.NeedleDatasetConfig(self.lengths, self.positions, self.pairs_per_cell)

    def probe_config(self) -> nd.NeedleProbeConfig:
        return _build(nd.NeedleProbeConfig, self.probe)


@dataclass(frozen=True)
class FreezeItem:
    name: str
    lo: int
    hi: int
    phase: str  # "phase1" or "decay"


@dataclass(frozen=True)
class TransplantItem:
    name: str
    lo: int
    hi: int
    components: tuple[str, ...] = ("attention", "mlp", "layer_norms")


DEFAULT_FREEZES = (FreezeItem("low_freeze_clm", 0, 2, "phase1"), FreezeItem("low_freeze_decay", 0, 2, "decay"),
                   FreezeItem("mid_freeze_clm", 3, 5, "phase1"))
DEFAULT_TRANSPLANTS = (TransplantItem("low_all", 0, 2), TransplantItem("mid_all", 3, 5),
                       TransplantItem("late_all", 6, 7), TransplantItem("all_mlp", 0, 7, ("mlp",)),
                       TransplantItem("all_attention", 0, 7, ("attention",)))


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    seeds: tuple[int, ...] = (0, 1, 2)
    seed_noise_seed: int | None = 17
    model: ModelConfig = ModelConfig()
    data: DataSection = DataSection()
    base: BaseSection = BaseSection()
    pipeline: PipelineSection = PipelineSection()
    optimizer: OptimizerSection = OptimizerSection()
    analysis: AnalysisSection = AnalysisSection()
    needle: NeedleSection = NeedleSection()
    decay_ratios: tuple[float, ...] = (0.025, 0.1, 0.2, 0.3, 0.5)
    freezes: tuple[FreezeItem, ...] = DEFAULT_FREEZES
    transplants: tuple[TransplantItem, ...] = DEFAULT_TRANSPLANTS
    out_dir: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        all_seeds = list(self.seeds) + ([self.seed_noise_seed] if self.seed_noise_seed is not None else [])
        if len(set(all_seeds)) != len(all_seeds):
            raise ValueError(f"seeds must be distinct, got {all_seeds}")
        for f in (self.freezes if self.kind == "freeze_suite" else ()):
            if f.phase not in ("phase1", "decay"):
                raise ValueError(f"freeze {f.name!r}: phase must be 'phase1' or 'decay'")
            FreezeSpec(f.lo, f.hi).validate(self.model.n_layers)
        for t in (self.transplants if self.kind == "transplant_suite" else ()):
            an.TransplantSpec(t.lo, t.hi, t.components)
            if t.hi >= self.model.n_layers:
                raise ValueError(f"transplant {t.name!r} exceeds the model depth")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentSpec":
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        if "kind" not in raw:
            raise ValueError("experiment spec needs a 'kind'")
        kw: dict[str, Any] = {"kind": raw["kind"]}
        sections = {"model": ModelConfig, "data": DataSection, "base": BaseSection, "pipeline": PipelineSection,
                    "optimizer": OptimizerSection, "analysis": AnalysisSection, "needle": NeedleSection}
        for name, sec in sections.items():
            if name in raw:
                kw[name] = _build(sec, raw[name])
        for name in ("seeds", "decay_ratios"):
            if name in raw:
                kw[name] = tuple(raw[name])
        if "freezes" in raw:
            kw["freezes"] = tuple(_build(FreezeItem, f) for f in raw["freezes"])
        if "transplants" in raw:
            kw["transplants"] = tuple(_build(TransplantItem, t) for t in raw["transplants"])
        for name in ("seed_noise_seed", "out_dir"):
            if name in raw:
                kw[name] = raw[name]
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentSpec":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def spec_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir", None)
        return hashlib.sha1(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @property
    def reverse(self) -> bool:
        return self.kind == "reverse_direction"


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if hasattr(x, "value") and isinstance(getattr(x, "value"), str):
        return x.value
    return x


# ---------------------------------------------------------------------------
# phase cache
# ---------------------------------------------------------------------------


@dataclass
class PhaseState:
    key: str
    model: TransformerModel
    opt: OptimizerState | None
    metrics: list[MetricsRecord]
    checkpoint_hash: str
    start_opt: OptimizerState | None = None
    start_model: TransformerModel | None = None


def save_optimizer(path: Path, opt: OptimizerState) -> None:
    arrays = {f"m/{k}": a for k, a in opt.m.items()} | {f"v/{k}": a for k, a in opt.v.items()}
    hyper = {k: getattr(opt, k) for k in ("step", "beta1", "beta2", "eps", "weight_decay", "bias_correction")}
    with open(path, "wb") as fh:
        np.savez(fh, __hyper__=np.array(json.dumps(hyper)), **arrays)


def load_optimizer(path: Path) -> OptimizerState:
    with np.load(path) as z:
        hyper = json.loads(str(z["__hyper__"]))
        m = {k[2:]: z[k].copy() for k in z.files if k.startswith("m/")}
        v = {k[2:]: z[k].copy() for k in z.files if k.startswith("v/")}
    return OptimizerState(m, v, **hyper)


class PhaseCache:
    """Content-addressed store of trained phases.

    A phase's key hashes its parent's key, its own configuration and the
    seeds that drive it, so two pipelines sharing a prefix share the trained
    prefix.  A phase directory is only trusted once its ``done`` marker exists.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.trained = 0
        self.reused = 0

    @staticmethod
    def phase_key(parent: str, description: dict) -> str:
        blob = json.dumps({"parent": parent, **_plain(description)}, sort_keys=True)
        return hashlib.sha1(blob.encode()).hexdigest()[:20]

    def _dir(self, key: str) -> Path:
        return self.root / key

    def load(self, key: str) -> PhaseState | None:
        d = self._dir(key)
        if not (d / "done").exists():
            return None
        model, meta = load_checkpoint(d / "model.ckpt")
        opt = load_optimizer(d / "opt.npz")
        return PhaseState(key, model, opt, read_metrics(d / "metrics.jsonl"), file_hash(d / "model.ckpt"))

    def run(self, parent: PhaseState, phase: PhaseConfig, description: dict, stream_factory, run_seed: int,
            phase_index: int, metrics_every: int) -> PhaseState:
        key = self.phase_key(parent.key, description)
        hit = self.load(key)
        if hit is not None:
            self.reused += 1
            hit.start_opt, hit.start_model = parent.opt, parent.model
            return hit
        d = self._dir(key)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        model = parent.model.copy()
        opt = parent.opt.copy()
        if phase.objective is Objective.MLM and model.config.mask_token_id is None:
            before = model.config.vocab_size
            model = extend_vocab_with_mask(model, seed=run_seed)
            opt.extend_rows("tok_emb", model.config.vocab_size - before)
            opt.extend_rows("head_bias", model.config.vocab_size - before)
        start_opt, start_model = opt.copy(), model.copy()
        t0 = time.perf_counter()
        model, opt, recs = train_phase(model, opt, phase, stream_factory(), run_seed, phase_index=phase_index,
                                       metrics_every=metrics_every)
        log.info("trained phase %s (%s, %d tokens) in %.1fs", key, phase.objective.value, phase.token_budget,
                 time.perf_counter() - t0)
        h = save_checkpoint(d / "model.ckpt", model, {"key": key, "phase": phase_index,
                                                       "objective": phase.objective.value})
        save_optimizer(d / "opt.npz", opt)
        write_metrics(d / "metrics.jsonl", recs)
        (d / "description.json").write_text(json.dumps(_plain(description), sort_keys=True, indent=1))
        (d / "done").write_text(h + "\n")
        self.trained += 1
        return PhaseState(key, model, opt, recs, h, start_opt, start_model)


def file_hash(path: Path) -> str:
    return git_blob_hash(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    name: str
    objective: str
    run_seed: int
    data_seed: int
    phases: list[PhaseState]

    @property
    def final(self) -> TransformerModel:
        return self.phases[-1].model

    @property
    def tokens(self) -> int:
        return sum(p.metrics[-1].tokens for p in self.phases)

    @property
    def steps(self) -> int:
        return sum(p.metrics[-1].step for p in self.phases)


class Lab:
    """Shared context for one experiment: spec, data, cache and evaluation sets."""

    def __init__(self, spec: ExperimentSpec, out_dir: Path, cache_dir: Path | None = None):
        self.spec = spec
        self.out = out_dir
        self.cache = PhaseCache(cache_dir or out_dir / "cache")
        vocab = spec.model.vocab_size
        self.domain = spec.data.domain(vocab)
        self.general = self.domain.with_shift(0.0)
        self._base: PhaseState | None = None
        self._runs: dict[str, RunRecord] = {}
        self._probe_docs = None
        self._cka_texts = None

    # -- training ------------------------------------------------------------

    def _hyper(self) -> dict:
        return dataclasses.asdict(self.spec.optimizer)

    def base(self) -> PhaseState:
        if self._base is not None:
            return self._base
        s = self.spec
        reverse = s.reverse
        cfg = s.model
        if reverse:
            cfg = dataclasses.replace(cfg, vocab_size=cfg.vocab_size - 1, has_mask_token=False)
        model = init_model(cfg, s.base.seed)
        root = PhaseState(f"init-{hashlib.sha1(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:12]}"
                          f"-{s.base.seed}", model, OptimizerState.zeros_like(model, **self._hyper()), [], "")
        obj = Objective.CLM if reverse else Objective.MLM
        T = s.base.tokens
        phase = PhaseConfig(obj, T, Schedule.warmup_then_constant(self._warmup(T, s.base.warmup_fraction)),
                            mask_rate=s.base.mask_rate, peak_lr=s.pipeline.peak_lr, batch_size=s.pipeline.batch_size,
                            grad_clip=s.pipeline.grad_clip)
        desc = {"role": "base", "phase": _phase_desc(phase), "data_seed": s.base.data_seed, "run_seed": s.base.seed,
                "grammar": dataclasses.asdict(s.data) | {"domain_shift": 0.0}, "optimizer": self._hyper()}
        factory = lambda: SyntheticStream(self.general, s.base.data_seed, s.data.window, key=0)
        self._base = self.cache.run(root, phase, desc, factory, s.base.seed, 0, s.pipeline.metrics_every)
        return self._base

    def _warmup(self, tokens: int, fraction: float) -> int:
        w = self.spec.data.window
        return int(round(fraction * tokens / w)) * w

    def phase_configs(self, objective: str, decay_ratio: float | None = None,
                      freeze: FreezeItem | None = None) -> list[PhaseConfig]:
        """Phase 1 + decay for the detour (``clm``) or the baseline (``mlm``).

        In the reverse direction the roles of the objectives swap.
        """
        p = self.spec.pipeline
        w = self.spec.data.window
        T1 = p.phase1_tokens
        ratio = p.decay_ratio if decay_ratio is None else decay_ratio
        T2 = int(round(ratio * T1 / w)) * w
        if T2 <= 0 or T1 % w:
            raise ValueError("phase budgets must be positive whole numbers of windows")
        if objective not in ("detour", "baseline"):
            raise ValueError(f"objective must be 'detour' or 'baseline', got {objective!r}")
        if self.spec.reverse:
            o1 = Objective.MLM if objective == "detour" else Objective.CLM
            o2 = Objective.CLM
        else:
            o1 = Objective.CLM if objective == "detour" else Objective.MLM
            o2 = Objective.MLM
        fz1 = FreezeSpec(freeze.lo, freeze.hi, 0) if freeze and freeze.phase == "phase1" else None
        fz2 = FreezeSpec(freeze.lo, freeze.hi, 1) if freeze and freeze.phase == "decay" else None
        ph1 = PhaseConfig(o1, T1, Schedule.warmup_then_constant(self._warmup(T1, p.warmup_fraction)),
                          mask_rate=p.phase1_mask_rate, freeze=fz1, peak_lr=p.peak_lr, batch_size=p.batch_size,
                          grad_clip=p.grad_clip)
        ph2 = PhaseConfig(o2, T2, Schedule.sqrt_decay(p.floor_fraction), mask_rate=p.decay_mask_rate, freeze=fz2,
                          peak_lr=p.peak_lr, batch_size=p.batch_size, grad_clip=p.grad_clip)
        return [ph1, ph2]

    def train(self, name: str, objective: str, run_seed: int, data_seed: int, *,
              decay_ratio: float | None = None, freeze: FreezeItem | None = None,
              phases: int = 2) -> RunRecord:
        if name in self._runs:
            return self._runs[name]
        s = self.spec
        state = self.base()
        # the continued-pretraining optimizer starts fresh; the base optimizer is not inherited
        state = dataclasses.replace(state, opt=OptimizerState.zeros_like(state.model, **self._hyper()))
        done = []
        for i, ph in enumerate(self.phase_configs(objective, decay_ratio, freeze)[:phases]):
            desc = {"role": "continued", "index": i + 1, "phase": _phase_desc(ph), "data_seed": data_seed,
                    "run_seed": run_seed, "grammar": dataclasses.asdict(s.data), "optimizer": self._hyper(),
                    "fresh_optimizer": i == 0}
            factory = (lambda i=i: SyntheticStream(self.domain, data_seed, s.data.window, key=i + 1))
            state = self.cache.run(state, ph, desc, factory, run_seed, i + 1, s.pipeline.metrics_every)
            done.append(state)
        rec = RunRecord(name, objective, run_seed, data_seed, done)
        self._runs[name] = rec
        return rec

    @property
    def runs(self) -> dict[str, RunRecord]:
        return dict(self._runs)

    # -- evaluation data -------------------------------------------------------

    def probe_docs(self):
        if self._probe_docs is None:
            a = self.spec.analysis
            self._probe_docs = generate_corpus(self.domain, a.probe_docs, np.random.SeedSequence([a.heldout_seed, 1]))
        return self._probe_docs

    def cka_texts(self) -> list[list[np.ndarray]]:
        if self._cka_texts is None:
            a = self.spec.analysis
            L = self.spec.model.max_seq_len
            self._cka_texts = [[d.tokens[:L] for d in generate_corpus(self.domain, a.cka_texts,
                                                                      np.random.SeedSequence([a.heldout_seed, 2, s]))]
                               for s in a.cka_seeds]
        return self._cka_texts

    def mask_mode(self) -> MaskMode:
        return MaskMode.CAUSAL if self.spec.reverse else MaskMode.BIDIRECTIONAL

    def rep_sets(self, model: TransformerModel, model_id: str) -> list[an.RepresentationSet]:
        layers = list(range(model.config.n_layers))
        out = []
        for i, texts in enumerate(self.cka_texts()):
            reps = extract_all_layers(model, texts, layers, mask_mode=self.mask_mode())
            out.append(an.RepresentationSet(reps, model_id, str(self.spec.analysis.cka_seeds[i])))
        return out

    def probe_scores(self, model: TransformerModel) -> dict[str, an.ProbeResult]:
        a = self.spec.analysis
        docs = self.probe_docs()
        L = self.spec.model.max_seq_len
        X = extract_representations(model, [d.tokens[:L] for d in docs], model.config.n_layers - 1,
                                    mask_mode=self.mask_mode())
        return {t: an.linear_probe(X, probe_labels(docs, t, self.domain), a.probe_seeds, task=t)
                for t in a.probe_tasks}

    def heldout_loss(self, model: TransformerModel, objective: Objective) -> float:
        a = self.spec.analysis
        windows = SyntheticStream(self.domain, a.heldout_seed, self.spec.data.window, key=99).take(a.eval_windows)
        total = 0.0
        for i in range(0, len(windows), 16):
            w = windows[i:i + 16]
            if objective is Objective.MLM:
                b = apply_mlm_masking(w, 0.15, np.random.default_rng([a.heldout_seed, i]),
                                      model.config.mask_token_id)
                loss, _ = loss_and_grads(model, b.input_ids, b.target_ids, b.supervision_mask,
                                         MaskMode.BIDIRECTIONAL)
            else:
                b = make_clm_batch(w)
                loss, _ = loss_and_grads(model, b.input_ids, b.target_ids, b.supervision_mask, MaskMode.CAUSAL)
            total += loss * len(w)
        return total / len(windows)


def _phase_desc(ph: PhaseConfig) -> dict:
    d = dataclasses.asdict(ph)
    d["objective"] = ph.objective.value
    d["mask_mode"] = ph.mask_mode.value
    if ph.objective is Objective.CLM:
        d.pop("mask_rate")
        d.pop("corruption")
    return _plain(d)


# ---------------------------------------------------------------------------
# experiment runner
# ---------------------------------------------------------------------------


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentResult:
    out_dir: Path
    manifest: dict
    results: dict
    failures: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)] + [",".join(_fmt(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _prepare_out(out: Path, resume: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not resume:
            state = "complete" if (out / "manifest.json").exists() else "partial"
            raise ExperimentError(f"{out} already holds {state} outputs; pass --resume to reuse them")
        for stale in ("tables", "summary.md", "manifest.json", "results.json"):
            p = out / stale
            if p.is_dir():
                shutil.rmtree(p)
            elif p.exists():
                p.unlink()
    out.mkdir(parents=True, exist_ok=True)


def run_experiment(spec: ExperimentSpec, out_dir: str | Path | None = None, *, resume: bool = False,
                   cache_dir: str | Path | None = None) -> ExperimentResult:
    """Run every training job the spec implies, then its analyses; write tables, manifest and summary."""
    out = Path(out_dir or spec.out_dir or "runs")
    _prepare_out(out, resume)
    (out / "spec.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=True))
    t0 = time.perf_counter()
    lab = Lab(spec, out, Path(cache_dir) if cache_dir else None)
    runner = {"detour_vs_baseline": _detour_vs_baseline, "reverse_direction": _detour_vs_baseline,
              "decay_sweep": _decay_sweep, "freeze_suite": _freeze_suite,
              "transplant_suite": _transplant_suite, "needle_suite": _needle_suite}[spec.kind]
    results, failures = runner(lab)
    failures += _matched_compute(lab)
    base = lab.base()
    manifest = {
        "kind": spec.kind,
        "spec_hash": spec.spec_hash(),
        "base": {"key": base.key, "checkpoint": base.checkpoint_hash},
        "runs": [{"name": r.name, "objective": r.objective, "run_seed": r.run_seed, "data_seed": r.data_seed,
                  "tokens": r.tokens, "steps": r.steps,
                  "checkpoints": [{"key": p.key, "hash": p.checkpoint_hash} for p in r.phases]}
                 for r in lab.runs.values()],
        "phases_trained": lab.cache.trained,
        "phases_reused": lab.cache.reused,
        "wall_clock_s": round(time.perf_counter() - t0, 3),
        "failures": failures,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (out / "results.json").write_text(json.dumps(_plain(results), indent=1, sort_keys=True) + "\n")
    emit_report(out)
    return ExperimentResult(out, manifest, results, failures)


def _matched_compute(lab: Lab) -> list[str]:
    """Paired detour/baseline runs must consume identical tokens and steps."""
    fails = []
    runs = lab.runs
    for name, r in runs.items():
        if name.startswith("detour/"):
            twin = runs.get("baseline/" + name.split("/", 1)[1])
            if twin is not None and (twin.tokens, twin.steps) != (r.tokens, r.steps):
                fails.append(f"compute mismatch: {name} {r.tokens}/{r.steps} vs {twin.name} {twin.tokens}/{twin.steps}")
    return fails


def _train_pairs(lab: Lab) -> tuple[dict[int, RunRecord], dict[int, RunRecord]]:
    det, base = {}, {}
    for s in lab.spec.seeds:
        det[s] = lab.train(f"detour/s{s}", "detour", s, s)
        base[s] = lab.train(f"baseline/s{s}", "baseline", s, s)
    return det, base


def _probe_grid(scores: dict[int, dict[str, an.ProbeResult]], tasks: Sequence[str]) -> np.ndarray:
    """(tasks, model seeds x probe seeds) macro-F1 grid."""
    return np.array([[f for s in sorted(scores) for f in scores[s][t].f1] for t in tasks])


def _probe_rows(label: str, scores: dict[int, dict[str, an.ProbeResult]]) -> list[list]:
    return [[label, s, t, r.mean_f1, r.mean_accuracy] for s in sorted(scores) for t, r in scores[s].items()]


def _needle_eval(lab: Lab, models: dict[str, TransformerModel], tag: str) -> dict:
    nsec = lab.spec.needle
    corpus = generate_corpus(lab.domain, nsec.corpus_docs, np.random.SeedSequence([lab.spec.analysis.heldout_seed, 3]))
    templates = nd.default_fact_templates(lab.domain, nsec.n_templates, seed=nsec.seed)
    splits = nd.generate_needle_dataset(nsec.dataset_config(), templates, corpus, nsec.seed)
    pcfg = nsec.probe_config()
    out = {}
    for name, model in models.items():
        probe = nd.train_needle_probe(model, splits.train, splits.val, pcfg)
        rep = nd.evaluate_needle(probe, model, splits.test, nsec.lengths, nsec.positions)
        safe = name.replace("/", "_")
        (lab.out / "tables").mkdir(parents=True, exist_ok=True)
        (lab.out / "tables" / f"needle_{tag}_{safe}.csv").write_text(rep.to_csv())
        out[name] = {"overall": rep.overall, "grid": {f"{L}/{p}": rep.accuracy(L, p) for L in rep.lengths
                                                     for p in rep.positions}}
    return out


def _detour_vs_baseline(lab: Lab) -> tuple[dict, list[str]]:
    spec = lab.spec
    a = spec.analysis
    det, base = _train_pairs(lab)
    s1 = spec.seeds[0]
    failures: list[str] = []
    results: dict[str, Any] = {}
    # layerwise divergence, averaged over text-sampling seeds, per training seed
    per_seed = {}
    for s in spec.seeds:
        per_seed[s] = an.divergence_from_sets(lab.rep_sets(det[s].final, f"detour/s{s}"),
                                              lab.rep_sets(base[s].final, f"baseline/s{s}"))
    layers = per_seed[s1].layers
    across = an.DivergenceProfile(layers, np.array([per_seed[s].mean for s in spec.seeds]))
    rows = [[s, l, per_seed[s].mean[j], per_seed[s].ci95[j]] for s in spec.seeds for j, l in enumerate(layers)]
    _write_csv(lab.out / "tables" / "divergence_per_seed.csv", ["seed", "layer", "d_mean", "d_ci95"], rows)
    ratio = None
    if spec.seed_noise_seed is not None:
        noise = lab.train(f"noise/s{s1}-r{spec.seed_noise_seed}", "baseline", spec.seed_noise_seed, s1)
        ref = lab.rep_sets(base[s1].final, f"baseline/s{s1}")
        num = an.divergence_from_sets(lab.rep_sets(det[s1].final, f"detour/s{s1}"), ref)
        den = an.divergence_from_sets(lab.rep_sets(noise.final, noise.name), ref)
        try:
            ratio = an.ratio_from_profiles(num, den)
        except an.DegenerateRatioError as exc:
            failures.append(str(exc))
        if ratio is not None:
            _write_csv(lab.out / "tables" / "ratio.csv", ["layer", "r", "numerator", "denominator"],
                       [[l, ratio.ratio[j], ratio.numerator[j], ratio.denominator[j]] for j, l in enumerate(layers)])
            q = max(1, len(layers) // 4)
            results["ratio"] = {"layers": layers, "r": ratio.ratio.tolist(),
                                "lowest_quarter_mean_r": float(np.mean(ratio.ratio[:q]))}
        results["seed_noise"] = {"layers": layers, "d": den.mean.tolist()}
    (lab.out / "tables").mkdir(parents=True, exist_ok=True)
    (lab.out / "tables" / "divergence.csv").write_text(an.divergence_table(across, ratio))
    results["divergence"] = {"layers": layers, "d_mean": across.mean.tolist(), "d_ci95": across.ci95.tolist()}
    if not np.all(np.isfinite(across.mean)):
        failures.append("non-finite divergence profile")
    # probes
    tasks = a.probe_tasks
    pd = {s: lab.probe_scores(det[s].final) for s in spec.seeds}
    pb = {s: lab.probe_scores(base[s].final) for s in spec.seeds}
    _write_csv(lab.out / "tables" / "probes.csv", ["model", "seed", "task", "macro_f1", "accuracy"],
               _probe_rows("detour", pd) + _probe_rows("baseline", pb))
    gd, gb = _probe_grid(pd, tasks), _probe_grid(pb, tasks)
    boot = an.paired_bootstrap(gd, gb, a.bootstrap_resamples, a.bootstrap_seed)
    _write_csv(lab.out / "tables" / "bootstrap.csv", ["comparison", "mean_diff", "p_value", "n_resamples"],
               [["detour-baseline", boot.mean_diff, boot.p_value, boot.n_resamples]])
    wins = [float(np.mean([pd[s][t].mean_f1 for t in tasks])) >= float(np.mean([pb[s][t].mean_f1 for t in tasks]))
            for s in spec.seeds]
    results["probes"] = {"detour": {str(s): {t: pd[s][t].mean_f1 for t in tasks} for s in spec.seeds},
                         "baseline": {str(s): {t: pb[s][t].mean_f1 for t in tasks} for s in spec.seeds},
                         "bootstrap_p": boot.p_value, "mean_diff": boot.mean_diff,
                         "detour_wins": int(sum(wins))}
    # held-out losses
    final_obj = Objective.CLM if spec.reverse else Objective.MLM
    results["heldout_loss"] = {r.name: lab.heldout_loss(r.final, final_obj) for r in lab.runs.values()}
    # needle
    if spec.needle.enabled:
        models = {f"detour/s{s}": det[s].final for s in spec.seeds} | {f"baseline/s{s}": base[s].final
                                                                       for s in spec.seeds}
        nres = _needle_eval(lab, models, "grid")
        results["needle"] = nres
        _write_csv(lab.out / "tables" / "needle_overall.csv", ["model", "overall"],
                   [[k, v["overall"]] for k, v in nres.items()])
        nd_mean = float(np.mean([nres[f"detour/s{s}"]["overall"] for s in spec.seeds]))
        nb_mean = float(np.mean([nres[f"baseline/s{s}"]["overall"] for s in spec.seeds]))
    else:
        nd_mean = nb_mean = float("nan")
    results["soft"] = {
        "lowest_quarter_ratio_gt_1": bool(ratio is not None and results["ratio"]["lowest_quarter_mean_r"] > 1),
        "probe_majority": bool(sum(wins) * 2 > len(wins)),
        "needle_detour_ge_baseline": bool(nd_mean >= nb_mean),
        "needle_detour": nd_mean, "needle_baseline": nb_mean,
    }
    return results, failures


def _decay_sweep(lab: Lab) -> tuple[dict, list[str]]:
    spec = lab.spec
    rows = []
    results: dict[str, Any] = {"ratios": list(spec.decay_ratios)}
    for obj, label in (("detour", "clm"), ("baseline", "mlm")):
        for ratio in spec.decay_ratios:
            f1s, losses = [], []
            for s in spec.seeds:
                r = lab.train(f"{obj}/s{s}/decay{ratio}", obj, s, s, decay_ratio=ratio)
                sc = lab.probe_scores(r.final)
                f1s.append(float(np.mean([v.mean_f1 for v in sc.values()])))
                losses.append(lab.heldout_loss(r.final, Objective.MLM))
            tokens = lab.phase_configs(obj, ratio)[1].token_budget
            rows.append([ratio, label, tokens, float(np.mean(f1s)), float(np.mean(losses))])
            results[f"{label}/{ratio}"] = {"probe_f1": float(np.mean(f1s)), "heldout_mlm_loss": float(np.mean(losses))}
    _write_csv(lab.out / "tables" / "decay_sweep.csv",
               ["decay_ratio", "phase1_objective", "decay_tokens", "probe_f1", "heldout_mlm_loss"], rows)
    return results, []


def _frozen_check(state: PhaseState, lo: int, hi: int) -> tuple[bool, bool]:
    """(frozen blocks bit-identical incl. moments, some unfrozen block changed)."""
    frozen_ok = True
    moved = False
    for name, p in state.model.params.items():
        layer = layer_of(name)
        before = state.start_model.params[name]
        if layer is not None and lo <= layer <= hi:
            same = np.array_equal(p, before) and np.array_equal(state.opt.m[name], state.start_opt.m[name]) \
                and np.array_equal(state.opt.v[name], state.start_opt.v[name])
            frozen_ok &= bool(same)
        elif layer is not None and not np.array_equal(p, before):
            moved = True
    return frozen_ok, moved


def _freeze_suite(lab: Lab) -> tuple[dict, list[str]]:
    spec = lab.spec
    a = spec.analysis
    failures: list[str] = []
    results: dict[str, Any] = {}
    rows = []
    ref = {s: lab.train(f"detour/s{s}", "detour", s, s) for s in spec.seeds}
    mlm = {s: lab.train(f"baseline/s{s}", "baseline", s, s) for s in spec.seeds}
    ref_scores = {s: lab.probe_scores(ref[s].final) for s in spec.seeds}
    mlm_scores = {s: lab.probe_scores(mlm[s].final) for s in spec.seeds}
    for s in spec.seeds:
        rows.append(["detour", s, "", float(np.mean([v.mean_f1 for v in ref_scores[s].values()])), "", ""])
        rows.append(["baseline", s, "", float(np.mean([v.mean_f1 for v in mlm_scores[s].values()])), "", ""])
    for fz in spec.freezes:
        scores = {}
        for s in spec.seeds:
            run = lab.train(f"{fz.name}/s{s}", "detour", s, s, freeze=fz)
            # a run is reloaded from cache without its start state; the parent phase supplies it
            idx = 0 if fz.phase == "phase1" else 1
            st = run.phases[idx]
            if st.start_model is None:
                failures.append(f"{fz.name}/s{s}: start state unavailable")
                continue
            frozen_ok, moved = _frozen_check(st, fz.lo, fz.hi)
            if not frozen_ok:
                failures.append(f"{fz.name}/s{s}: frozen blocks {fz.lo}-{fz.hi} changed")
            if not moved:
                failures.append(f"{fz.name}/s{s}: unfrozen blocks did not change")
            scores[s] = lab.probe_scores(run.final)
            rows.append([fz.name, s, f"{fz.lo}-{fz.hi}@{fz.phase}",
                         float(np.mean([v.mean_f1 for v in scores[s].values()])), frozen_ok, moved])
        if scores:
            boot = an.paired_bootstrap(_probe_grid(scores, a.probe_tasks), _probe_grid(ref_scores, a.probe_tasks),
                                       a.bootstrap_resamples, a.bootstrap_seed)
            results[fz.name] = {"p_vs_detour": boot.p_value, "mean_diff": boot.mean_diff}
    _write_csv(lab.out / "tables" / "freeze.csv",
               ["run", "seed", "frozen", "probe_f1", "frozen_identical", "unfrozen_changed"], rows)
    return results, failures


def _transplant_suite(lab: Lab) -> tuple[dict, list[str]]:
    spec = lab.spec
    det, base = _train_pairs(lab)
    rows = []
    results = {}
    for s in spec.seeds:
        ref = float(np.mean([v.mean_f1 for v in lab.probe_scores(base[s].final).values()]))
        donor = float(np.mean([v.mean_f1 for v in lab.probe_scores(det[s].final).values()]))
        rows.append([s, "baseline", "", "", "", ref, 0.0])
        rows.append([s, "detour", "", "", "", donor, donor - ref])
        for t in spec.transplants:
            hybrid = an.transplant(base[s].final, det[s].final, an.TransplantSpec(t.lo, t.hi, t.components,
                                                                                  f"detour/s{s}", f"baseline/s{s}"))
            f1 = float(np.mean([v.mean_f1 for v in lab.probe_scores(hybrid).values()]))
            rows.append([s, t.name, t.lo, t.hi, "+".join(t.components), f1, f1 - ref])
            results[f"{t.name}/s{s}"] = f1 - ref
    _write_csv(lab.out / "tables" / "transplant.csv",
               ["seed", "hybrid", "lo", "hi", "components", "probe_f1", "delta_vs_baseline"], rows)
    return results, []


def _needle_suite(lab: Lab) -> tuple[dict, list[str]]:
    det, base = _train_pairs(lab)
    models = {f"detour/s{s}": det[s].final for s in lab.spec.seeds} | {f"baseline/s{s}": base[s].final
                                                                      for s in lab.spec.seeds}
    res = _needle_eval(lab, models, "grid")
    _write_csv(lab.out / "tables" / "needle_overall.csv", ["model", "overall"], [[k, v["overall"]] for k, v in res.items()])
    return {"needle": res}, []


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

_TABLE_TITLES = [
    ("divergence.csv", "Layerwise divergence (detour vs baseline)"),
    ("divergence_per_seed.csv", "Divergence per training seed"),
    ("ratio.csv", "Seed-noise-normalised ratio"),
    ("probes.csv", "Linear probes"),
    ("bootstrap.csv", "Paired bootstrap"),
    ("needle_overall.csv", "Needle retrieval, overall"),
    ("decay_sweep.csv", "Decay-ratio sweep"),
    ("freeze.csv", "Freeze interventions"),
    ("transplant.csv", "Transplants"),
]

_REQUIRED = {
    "detour_vs_baseline": ["divergence.csv", "probes.csv", "bootstrap.csv"],
    "reverse_direction": ["divergence.csv", "probes.csv", "bootstrap.csv"],
    "decay_sweep": ["decay_sweep.csv"],
    "freeze_suite": ["freeze.csv"],
    "transplant_suite": ["transplant.csv"],
    "needle_suite": ["needle_overall.csv"],
}


def emit_report(out_dir: str | Path) -> str:
    """Assemble ``summary.md`` from the artifacts in ``out_dir`` (deterministic)."""
    out = Path(out_dir)
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        raise ExperimentError(f"missing inputs in {out}: manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if not manifest.get("runs"):
        raise ExperimentError(f"{out}: manifest lists no completed runs")
    tables = out / "tables"
    missing = [n for n in _REQUIRED[manifest["kind"]] if not (tables / n).exists()]
    if missing:
        raise ExperimentError(f"missing inputs in {out}: " + ", ".join(f"tables/{m}" for m in missing))
    lines = [f"# {manifest['kind']}", "", f"spec hash: `{manifest['spec_hash']}`", "", "## Runs", "",
             "| run | objective | run seed | data seed | tokens | steps |", "|---|---|---|---|---|---|"]
    for r in manifest["runs"]:
        lines.append(f"| {r['name']} | {r['objective']} | {r['run_seed']} | {r['data_seed']} | {r['tokens']} "
                     f"| {r['steps']} |")
    for fname, title in _TABLE_TITLES:
        p = tables / fname
        if p.exists():
            lines += ["", f"## {title}", "", "```", p.read_text().rstrip("\n"), "```"]
    grids = sorted(tables.glob("needle_grid_*.csv")) if tables.exists() else []
    for p in grids:
        lines += ["", f"## Needle grid: {p.stem[len('needle_grid_'):]}", "", "```", p.read_text().rstrip("\n"), "```"]
    if manifest.get("failures"):
        lines += ["", "## Failures", ""] + [f"- {f}" for f in manifest["failures"]]
    text = "\n".join(lines) + "\n"
    (out / "summary.md").write_text(text)
    return text
