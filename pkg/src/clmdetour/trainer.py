"""Objectives, AdamW, learning-rate schedules, layer freezing and multi-phase runs."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .data import CausalBatch, MaskedBatch, apply_mlm_masking, make_clm_batch
from .model import MaskMode, TransformerModel, extend_vocab_with_mask, layer_of, loss_and_grads, save_checkpoint


class Objective(str, enum.Enum):
    CLM = "clm"
    MLM = "mlm"

    @classmethod
    def coerce(cls, value) -> "Objective":
        return value if isinstance(value, cls) else cls(str(value).lower())


_OBJECTIVE_MODE = {Objective.CLM: MaskMode.CAUSAL, Objective.MLM: MaskMode.BIDIRECTIONAL}


@dataclass(frozen=True)
class Schedule:
    kind: str  # "warmup_then_constant" | "sqrt_decay"
    warmup_tokens: int = 0
    floor_fraction: float = 0.1

    def __post_init__(self):
        if self.kind not in ("warmup_then_constant", "sqrt_decay"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.warmup_tokens < 0:
            raise ValueError("warmup_tokens must be >= 0")
        if not 0.0 <= self.floor_fraction <= 1.0:
            raise ValueError("floor_fraction must lie in [0, 1]")

    @classmethod
    def warmup_then_constant(cls, warmup_tokens: int) -> "Schedule":
        return cls("warmup_then_constant", warmup_tokens=warmup_tokens)

    @classmethod
    def sqrt_decay(cls, floor_fraction: float = 0.1) -> "Schedule":
        return cls("sqrt_decay", floor_fraction=floor_fraction)


def lr_at(schedule: Schedule, t: float, T: float, peak: float) -> float:
    """Learning rate after ``t`` of the phase's ``T`` tokens."""
    if T <= 0:
        raise ValueError("T must be positive")
    if t < 0 or t > T:
        raise ValueError(f"t={t} outside [0, T={T}]")
    if schedule.kind == "warmup_then_constant":
        w = schedule.warmup_tokens
        return peak if w == 0 or t >= w else peak * t / w
    floor = schedule.floor_fraction * peak
    return floor + (peak - floor) * (1.0 - math.sqrt(t / T))


@dataclass(frozen=True)
class FreezeSpec:
    """Inclusive transformer-block range ``[lo, hi]``; ``hi == lo - 1`` is the empty range."""

    lo: int
    hi: int
    phase: int | None = None

    def __post_init__(self):
        if self.lo < 0 or self.hi < self.lo - 1:
            raise ValueError(f"invalid freeze range [{self.lo}, {self.hi}]")

    @property
    def layers(self) -> range:
        return range(self.lo, self.hi + 1)

    def param_names(self, names: Iterable[str]) -> list[str]:
        return [n for n in names if (layer := layer_of(n)) is not None and layer in self.layers]

    def validate(self, n_layers: int) -> None:
        if self.hi >= n_layers:
            raise ValueError(f"freeze range [{self.lo}, {self.hi}] exceeds a {n_layers}-layer model")


def apply_freeze(grads: nx.GradStore, spec: FreezeSpec | None, n_layers: int | None = None) -> nx.GradStore:
    """Copy of ``grads`` with every gradient of blocks ``spec.lo..spec.hi`` set to zero.

    Embeddings, head bias and the final norm are never affected.
    """
    if spec is None:
        return dict(grads)
    if n_layers is None:
        layers = [layer_of(n) for n in grads]
        n_layers = max((l for l in layers if l is not None), default=-1) + 1
    spec.validate(n_layers)
    out = dict(grads)
    for name in spec.param_names(grads):
        out[name] = np.zeros_like(grads[name])
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 1e-5
    bias_correction: bool = True

    @classmethod
    def zeros_like(cls, model: TransformerModel, **hyper) -> "OptimizerState":
        m = {k: np.zeros_like(p) for k, p in model.params.items()}
        v = {k: np.zeros_like(p) for k, p in model.params.items()}
        return cls(m, v, **hyper)

    def copy(self) -> "OptimizerState":
        return dataclasses.replace(self, m={k: a.copy() for k, a in self.m.items()},
                                   v={k: a.copy() for k, a in self.v.items()})

    def extend_rows(self, name: str, n_rows: int) -> None:
        """Append zero moment rows (used when the vocabulary grows)."""
        for store in (self.m, self.v):
            a = store[name]
            store[name] = np.concatenate([a, np.zeros((n_rows,) + a.shape[1:], dtype=a.dtype)])


def adamw_step(model: TransformerModel, grads: Mapping[str, np.ndarray], opt: OptimizerState, lr: float,
               skip: Iterable[str] = ()) -> tuple[TransformerModel, OptimizerState]:
    """One in-place decoupled AdamW update.

    Parameters named in ``skip`` are left entirely alone: no moment update and
    no weight decay.
    """
    skip = set(skip)
    for name, g in grads.items():
        if name in skip:
            continue
        if not np.isfinite(g).all():
            bad = int(g.size - np.count_nonzero(np.isfinite(g)))
            raise nx.NonFiniteError(
                f"adamw_step: gradient of {name!r} has {bad} non-finite entries at step {opt.step + 1}")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    if opt.bias_correction:
        c1 = 1.0 - b1 ** opt.step
        c2 = 1.0 - b2 ** opt.step
    else:
        c1 = c2 = 1.0
    for name, p in model.params.items():
        if name in skip or name not in grads:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m, v = opt.m[name], opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if opt.weight_decay:
            p *= p.dtype.type(1.0 - lr * opt.weight_decay)
        denom = np.sqrt(v / c2)
        denom += opt.eps
        p -= (lr / c1) * m / denom
    return model, opt


def clip_grad_norm(grads: nx.GradStore, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def clm_loss(model: TransformerModel, batch: CausalBatch, mask_mode: MaskMode | str = MaskMode.CAUSAL, *,
             training: bool = False, rng: np.random.Generator | None = None) -> tuple[float, nx.GradStore]:
    """Next-token loss; only valid under the causal mask."""
    if MaskMode.coerce(mask_mode) is not MaskMode.CAUSAL:
        raise ValueError("clm_loss requires the causal mask (bidirectional attention sees the targets)")
    return loss_and_grads(model, batch.input_ids, batch.target_ids, batch.supervision_mask, MaskMode.CAUSAL,
                          training=training, rng=rng)


def mlm_loss(model: TransformerModel, batch: MaskedBatch, mask_mode: MaskMode | str = MaskMode.BIDIRECTIONAL, *,
             training: bool = False, rng: np.random.Generator | None = None) -> tuple[float, nx.GradStore]:
    """Masked-token loss over supervised positions only."""
    if MaskMode.coerce(mask_mode) is not MaskMode.BIDIRECTIONAL:
        raise ValueError("mlm_loss requires the bidirectional mask")
    if not np.any(batch.supervision_mask):
        raise ValueError("mlm_loss: empty supervision set (no position was masked)")
    return loss_and_grads(model, batch.input_ids, batch.target_ids, batch.supervision_mask,
                          MaskMode.BIDIRECTIONAL, training=training, rng=rng)


# ---------------------------------------------------------------------------
# phases
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseConfig:
    objective: Objective
    token_budget: int
    schedule: Schedule
    mask_mode: MaskMode | None = None
    mask_rate: float = 0.15
    freeze: FreezeSpec | None = None
    peak_lr: float = 2e-4
    batch_size: int = 16
    corruption: str = "replace"
    grad_clip: float | None = None
    name: str = ""

    def __post_init__(self):
        obj = Objective.coerce(self.objective)
        object.__setattr__(self, "objective", obj)
        expected = _OBJECTIVE_MODE[obj]
        mode = expected if self.mask_mode is None else MaskMode.coerce(self.mask_mode)
        if mode is not expected:
            raise ValueError(f"{obj.value} phases must use the {expected.value} mask, got {mode.value}")
        object.__setattr__(self, "mask_mode", mode)
        if self.token_budget <= 0:
            raise ValueError("token_budget must be positive")
        if obj is Objective.MLM and not 0.0 < self.mask_rate <= 1.0:
            raise ValueError("MLM mask_rate must lie in (0, 1]")
        if self.batch_size < 1 or self.peak_lr <= 0:
            raise ValueError("batch_size and peak_lr must be positive")

    def with_budget(self, tokens: int) -> "PhaseConfig":
        return dataclasses.replace(self, token_budget=tokens)


@dataclass(frozen=True)
class PipelineConfig:
    """Ordered phases.  With ``decay_ratio`` set, the last phase's budget is
    ``round(decay_ratio * first phase budget)`` (overriding its own)."""

    phases: tuple[PhaseConfig, ...]
    decay_ratio: float | None = None

    def __post_init__(self):
        if not self.phases:
            raise ValueError("a pipeline needs at least one phase")
        object.__setattr__(self, "phases", tuple(self.phases))
        if self.decay_ratio is not None:
            if len(self.phases) < 2 or self.decay_ratio <= 0:
                raise ValueError("decay_ratio needs >= 2 phases and a positive value")
            last = self.phases[-1].with_budget(int(round(self.decay_ratio * self.phases[0].token_budget)))
            object.__setattr__(self, "phases", self.phases[:-1] + (last,))
        for i, ph in enumerate(self.phases):
            if ph.freeze is not None and ph.freeze.phase is not None and ph.freeze.phase != i:
                raise ValueError(f"phase {i} carries a freeze spec addressed to phase {ph.freeze.phase}")

    @property
    def budgets(self) -> list[int]:
        return [p.token_budget for p in self.phases]


@dataclass
class MetricsRecord:
    phase: int
    step: int
    tokens: int
    loss: float
    lr: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def write_metrics(path: str | Path, records: Iterable[MetricsRecord]) -> None:
    """Append records as one JSON object per line."""
    with open(path, "a") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    with open(path) as fh:
        return [MetricsRecord(**json.loads(line)) for line in fh if line.strip()]


def phase_rng(run_seed: int, phase_index: int) -> np.random.Generator:
    """Masking/dropout randomness; independent of the data order."""
    return np.random.default_rng([int(run_seed), int(phase_index), 0x6D61736B])


def train_phase(model: TransformerModel, opt: OptimizerState, phase: PhaseConfig, stream, run_seed: int, *,
                phase_index: int = 0, metrics_every: int = 10,
                on_step: Callable[[int, float], None] | None = None
                ) -> tuple[TransformerModel, OptimizerState, list[MetricsRecord]]:
    """Train on exactly ``phase.token_budget`` tokens drawn from ``stream``.

    The budget must be a whole number of windows; the last batch may be
    smaller than ``phase.batch_size``.  Parameters and moments of frozen
    blocks are not touched.
    """
    window = stream.window
    T = phase.token_budget
    if T % window:
        raise ValueError(f"token budget {T} is not a multiple of the window length {window}")
    n_windows = T // window
    n_layers = model.config.n_layers
    frozen: list[str] = []
    if phase.freeze is not None:
        phase.freeze.validate(n_layers)
        frozen = phase.freeze.param_names(model.params)
    mask_id = model.config.mask_token_id
    if phase.objective is Objective.MLM and mask_id is None:
        raise ValueError("MLM phase on a model without a mask token")
    rng = phase_rng(run_seed, phase_index)
    records: list[MetricsRecord] = []
    t0 = time.perf_counter()
    seen = 0
    step = 0
    while seen < n_windows:
        nb = min(phase.batch_size, n_windows - seen)
        windows = stream.take(nb)
        lr = lr_at(phase.schedule, seen * window, T, phase.peak_lr)
        if phase.objective is Objective.CLM:
            loss, grads = clm_loss(model, make_clm_batch(windows), training=True, rng=rng)
        else:
            batch = apply_mlm_masking(windows, phase.mask_rate, rng, mask_id, corruption=phase.corruption,
                                      vocab_size=model.config.vocab_size)
            loss, grads = mlm_loss(model, batch, training=True, rng=rng)
        if phase.freeze is not None:
            grads = apply_freeze(grads, phase.freeze, n_layers)
        if phase.grad_clip is not None:
            clip_grad_norm({k: g for k, g in grads.items() if k not in frozen}, phase.grad_clip)
        adamw_step(model, grads, opt, lr, skip=frozen)
        seen += nb
        step += 1
        if on_step is not None:
            on_step(step, loss)
        if step % metrics_every == 0 or seen == n_windows or step == 1:
            records.append(MetricsRecord(phase_index, step, seen * window, float(loss), float(lr),
                                         time.perf_counter() - t0))
    return model, opt, records


@dataclass
class PhaseResult:
    index: int
    model: TransformerModel
    start_moments: dict[str, tuple[np.ndarray, np.ndarray]]
    metrics: list[MetricsRecord]
    checkpoint_hash: str | None = None


@dataclass
class PipelineResult:
    model: TransformerModel
    opt: OptimizerState
    phases: list[PhaseResult] = field(default_factory=list)

    @property
    def metrics(self) -> list[MetricsRecord]:
        return [r for p in self.phases for r in p.metrics]


def run_pipeline(init_model: TransformerModel, pipeline: PipelineConfig, run_seed: int,
                 stream_for: Callable[[int], object], *, opt: OptimizerState | None = None,
                 optimizer_hyper: Mapping | None = None, out_dir: str | Path | None = None,
                 metrics_every: int = 10, phase_offset: int = 0, vocab_seed: int = 0,
                 keep_start_moments: Sequence[str] = ()) -> PipelineResult:
    """Run phases back to back, carrying the optimizer state and resetting the schedule.

    ``stream_for(i)`` supplies the window stream for phase ``phase_offset + i``;
    keying it on the data seed alone keeps data order identical across run
    seeds.  An MLM phase reached by a model without a mask token extends the
    vocabulary first; the new embedding row starts with zero moments.
    ``keep_start_moments`` names parameters whose moments are snapshotted at
    each phase start (for carry-over checks).
    """
    model = init_model.copy()
    if opt is None:
        opt = OptimizerState.zeros_like(model, **dict(optimizer_hyper or {}))
    else:
        opt = opt.copy()
    result = PipelineResult(model, opt)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for i, phase in enumerate(pipeline.phases):
        idx = phase_offset + i
        if phase.objective is Objective.MLM and model.config.mask_token_id is None:
            before = model.config.vocab_size
            model = extend_vocab_with_mask(model, seed=vocab_seed)
            grown = model.config.vocab_size - before
            opt.extend_rows("tok_emb", grown)
            opt.extend_rows("head_bias", grown)
        starts = {k: (opt.m[k].copy(), opt.v[k].copy()) for k in keep_start_moments}
        model, opt, recs = train_phase(model, opt, phase, stream_for(i), run_seed, phase_index=idx,
                                       metrics_every=metrics_every)
        pr = PhaseResult(idx, model.copy(), starts, recs)
        if out_dir is not None:
            pr.checkpoint_hash = save_checkpoint(out_dir / f"phase{idx}.ckpt", model,
                                                 {"phase": idx, "objective": phase.objective.value,
                                                  "tokens": phase.token_budget, "run_seed": run_seed})
            write_metrics(out_dir / "metrics.jsonl", recs)
        result.phases.append(pr)
    result.model, result.opt = model, opt
    return result
