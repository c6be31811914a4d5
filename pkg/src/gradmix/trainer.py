"""Training strategies, model selection, and evaluation.

Five strategies around one shared loop:

  zero_shot            source training only, evaluated everywhere
  ord_fs / ord_fs_dev  source training, then per-language fine-tuning on
                       that language's shots (dev variant selects per-language
                       best epochs; plain variant takes the last checkpoint)
  mix_ft               source training, then one fine-tune on all targets'
                       shots concatenated
  naive_mix_train      one-step training on source data pooled with every
                       target's shots
  gradient_mix_train   naive_mix_train plus stochastic gradient surgery

One-step strategies select their checkpoint on the source dev set only;
target dev data exists in the benchmark but is consumed solely by the
ord_fs_dev policy (and analysis curves), since realistically-sized target
dev sets would be smaller than the training shots themselves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import analysis
from .corpora import (
    LanguageCorpus,
    MixedDataset,
    OracleBank,
    ShotBank,
    batch_iter,
    build_mixed_dataset,
    build_oracle_bank,
    build_shot_bank,
    shots_dataset,
)
from .models import (
    ModelSpec,
    ModelState,
    init_params,
    loss_and_grad,
    predict,
    sgd_step,
)
from .numcore import ContractViolation, RngStreams
from .surgery import SurgeryPolicy, TraceEntry, sgs_step

STRATEGIES = (
    "zero_shot",
    "ord_fs",
    "ord_fs_dev",
    "mix_ft",
    "naive_mix_train",
    "gradient_mix_train",
)
ONE_STEP = ("naive_mix_train", "gradient_mix_train")
TWO_STEP = ("ord_fs", "ord_fs_dev", "mix_ft")
SELECTIONS = ("source_dev", "target_dev", "last_checkpoint")

# Reference experiment defaults; the shipped desk-scale configs override lr
# because these models are a few dozen parameters, not a pretrained encoder.
DEFAULT_EPOCHS = 10
DEFAULT_BATCH_SIZE = 32
DEFAULT_LR = 2e-5

StepHook = Callable[[int, ModelState], None]


def _default_selection(strategy: str) -> str:
    if strategy in ("zero_shot",) + ONE_STEP:
        return "source_dev"
    if strategy == "ord_fs_dev":
        return "target_dev"
    return "last_checkpoint"


@dataclass(frozen=True)
class TrainPlan:
    strategy: str
    seed: int
    k: int = 0
    alpha: float = 1.0
    source_epochs: int = DEFAULT_EPOCHS
    adapt_epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    adapt_batch_size: Optional[int] = None  # None -> k
    lr: float = DEFAULT_LR
    language_subset: Optional[Tuple[str, ...]] = None
    selection: Optional[str] = None  # None -> strategy default
    shot_mode: str = "k_shot"
    unrealistic_target_dev: bool = False
    lazy_surgery: bool = False

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ContractViolation(f"unknown strategy {self.strategy!r}")
        if self.strategy == "zero_shot" and self.k != 0:
            raise ContractViolation("zero_shot requires k = 0")
        if self.strategy != "zero_shot" and self.k < 1:
            raise ContractViolation(f"{self.strategy} requires k >= 1")
        if self.selection is None:
            object.__setattr__(self, "selection", _default_selection(self.strategy))
        if self.selection not in SELECTIONS:
            raise ContractViolation(f"unknown selection {self.selection!r}")
        if self.strategy in TWO_STEP and self.selection == "source_dev":
            raise ContractViolation(
                "two-step strategies cannot select the adapted model on the source dev set"
            )
        if self.strategy == "ord_fs_dev" and self.selection != "target_dev":
            raise ContractViolation("ord_fs_dev is defined by target_dev selection")
        if (
            self.strategy in ("zero_shot",) + ONE_STEP
            and self.selection == "target_dev"
            and not self.unrealistic_target_dev
        ):
            raise ContractViolation(
                "one-step strategies use the source dev set; pass "
                "unrealistic_target_dev=True to override"
            )
        if self.language_subset is not None:
            object.__setattr__(self, "language_subset", tuple(self.language_subset))
        for name in ("source_epochs", "adapt_epochs"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractViolation("alpha must be in [0, 1]")

    def effective_adapt_batch(self) -> int:
        return self.adapt_batch_size if self.adapt_batch_size is not None else max(self.k, 1)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "k": self.k,
            "alpha": self.alpha,
            "source_epochs": self.source_epochs,
            "adapt_epochs": self.adapt_epochs,
            "batch_size": self.batch_size,
            "adapt_batch_size": self.adapt_batch_size,
            "lr": self.lr,
            "language_subset": list(self.language_subset) if self.language_subset else None,
            "selection": self.selection,
            "shot_mode": self.shot_mode,
            "unrealistic_target_dev": self.unrealistic_target_dev,
            "lazy_surgery": self.lazy_surgery,
        }


@dataclass(frozen=True)
class Task:
    """One benchmark: a model family plus one source and >= 1 target corpora."""

    spec: ModelSpec
    source: LanguageCorpus
    targets: Tuple[LanguageCorpus, ...]

    @staticmethod
    def from_corpora(spec: ModelSpec, corpora: Sequence[LanguageCorpus]) -> "Task":
        sources = [c for c in corpora if c.role == "source"]
        if len(sources) != 1:
            raise ContractViolation(f"need exactly one source corpus, got {len(sources)}")
        ids = [c.lang_id for c in corpora]
        if len(set(ids)) != len(ids):
            raise ContractViolation("language ids must be unique")
        targets = tuple(c for c in corpora if c.role == "target")
        return Task(spec=spec, source=sources[0], targets=targets)

    def subset(self, lang_ids: Optional[Sequence[str]]) -> Tuple[LanguageCorpus, ...]:
        if lang_ids is None:
            return self.targets
        keep = set(lang_ids)
        unknown = keep - {c.lang_id for c in self.targets}
        if unknown:
            raise ContractViolation(f"unknown target languages: {sorted(unknown)}")
        return tuple(c for c in self.targets if c.lang_id in keep)


@dataclass
class RunResult:
    """Everything a strategy run produced, before serialization."""

    record: dict
    checkpoints: Dict[str, List[ModelState]]  # model key -> post-epoch states
    inits: Dict[str, ModelState]  # model key -> pre-training state
    trace: Optional[List[TraceEntry]]

    def model_at(self, model_key: str, epoch: int) -> ModelState:
        if epoch == 0:
            return self.inits[model_key]
        return self.checkpoints[model_key][epoch - 1]

    def selected_model(self, lang_id: str) -> ModelState:
        key = self.record["model_key_of"][lang_id]
        return self.model_at(key, self.record["selected_epochs"][lang_id])


# --- core loop ---------------------------------------------------------------


def _train_loop(
    state0: ModelState,
    md: MixedDataset,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: RngStreams,
    scope: str,
    oracle: Optional[OracleBank] = None,
    policy: Optional[SurgeryPolicy] = None,
    step_hook: Optional[StepHook] = None,
) -> Tuple[List[ModelState], Optional[List[TraceEntry]]]:
    """Fixed-epoch SGD over per-epoch reshuffles of the pool, checkpointing
    at each epoch end. With an oracle and policy, every step runs the
    stochastic surgery decision between backprop and the update."""
    state = state0
    checkpoints: List[ModelState] = []
    trace: Optional[List[TraceEntry]] = [] if policy is not None else None
    step = 0
    for epoch in range(1, epochs + 1):
        for batch in batch_iter(md, batch_size, epoch, rng, scope=scope):
            grad = loss_and_grad(state, batch).grad
            if policy is not None:
                assert oracle is not None
                grad, entry = sgs_step(grad, oracle, state, policy, rng, step=step)
                trace.append(entry)
            state = sgd_step(state, grad, lr)
            step += 1
            if step_hook is not None:
                step_hook(step, state)
        checkpoints.append(state)
    return checkpoints, trace


# --- spec operations ----------------------------------------------------------


def run_source_training(
    plan: TrainPlan,
    source: LanguageCorpus,
    rng: Optional[RngStreams] = None,
    state0: Optional[ModelState] = None,
    spec: Optional[ModelSpec] = None,
    step_hook: Optional[StepHook] = None,
) -> Tuple[ModelState, List[ModelState]]:
    """Fine-tune on the source language alone; returns (initial state,
    one checkpoint per epoch)."""
    if rng is None:
        rng = RngStreams(plan.seed)
    if state0 is None:
        if spec is None:
            raise ContractViolation("need a ModelSpec when no initial state is given")
        state0 = init_params(spec, rng)
    md = build_mixed_dataset(source, [], None)
    ckpts, _ = _train_loop(
        state0, md, plan.source_epochs, plan.batch_size, plan.lr, rng, scope="pool",
        step_hook=step_hook,
    )
    return state0, ckpts


def run_target_adapting(
    source_model: ModelState,
    shots: ShotBank,
    plan: TrainPlan,
    targets: Sequence[LanguageCorpus],
    rng: Optional[RngStreams] = None,
) -> Dict[str, List[ModelState]]:
    """Fine-tune the source-trained model on target shots.

    ord_fs(+dev): one adapted model per language, trained on its own shots.
    mix_ft: a single model trained on all targets' shots concatenated.
    """
    if not shots.lang_ids:
        raise ContractViolation("target adapting requires a non-empty shot bank")
    if rng is None:
        rng = RngStreams(plan.seed)
    batch = plan.effective_adapt_batch()
    out: Dict[str, List[ModelState]] = {}
    if plan.strategy in ("ord_fs", "ord_fs_dev"):
        for corpus in targets:
            md = shots_dataset(targets, shots, only=[corpus.lang_id])
            ckpts, _ = _train_loop(
                source_model, md, plan.adapt_epochs, batch, plan.lr, rng,
                scope=f"adapt:{corpus.lang_id}",
            )
            out[corpus.lang_id] = ckpts
    elif plan.strategy == "mix_ft":
        md = shots_dataset(targets, shots)
        ckpts, _ = _train_loop(
            source_model, md, plan.adapt_epochs, batch, plan.lr, rng, scope="adapt:all"
        )
        out["adapted"] = ckpts
    else:
        raise ContractViolation(f"{plan.strategy} has no target-adapting phase")
    return out


def run_mixed_training(
    plan: TrainPlan,
    source: LanguageCorpus,
    targets: Sequence[LanguageCorpus],
    shots: Optional[ShotBank],
    rng: Optional[RngStreams] = None,
    state0: Optional[ModelState] = None,
    spec: Optional[ModelSpec] = None,
    step_hook: Optional[StepHook] = None,
) -> Tuple[ModelState, List[ModelState], Optional[List[TraceEntry]]]:
    """One-step training on the pooled source + shots dataset; the gradient
    strategy adds the per-step stochastic surgery decision."""
    if plan.strategy not in ONE_STEP:
        raise ContractViolation(f"{plan.strategy} is not a one-step strategy")
    if rng is None:
        rng = RngStreams(plan.seed)
    if state0 is None:
        if spec is None:
            raise ContractViolation("need a ModelSpec when no initial state is given")
        state0 = init_params(spec, rng)
    oracle = policy = None
    if plan.strategy == "gradient_mix_train":
        if not targets or shots is None or not shots.lang_ids:
            raise ContractViolation("gradient_mix_train requires at least one target language")
        oracle = build_oracle_bank(shots, targets)
        policy = SurgeryPolicy(alpha=plan.alpha, lazy=plan.lazy_surgery)
    md = build_mixed_dataset(source, targets, shots)
    ckpts, trace = _train_loop(
        state0, md, plan.source_epochs, plan.batch_size, plan.lr, rng, scope="pool",
        oracle=oracle, policy=policy, step_hook=step_hook,
    )
    return state0, ckpts, trace


def evaluate(model: ModelState, corpus: LanguageCorpus, split: str) -> float:
    """Accuracy for classification; token-level micro-F1 (excluding the
    outside label) for tagging. Pure: identical inputs, identical value."""
    examples = corpus.split(split)
    if not examples:
        raise ContractViolation(f"split {split!r} of {corpus.lang_id} is empty")
    if corpus.task == "classification":
        correct = 0
        for x, y in examples:
            if predict(model, x) == int(y):
                correct += 1
        return correct / len(examples)
    preds = [predict(model, x) for x, _ in examples]
    gold = [np.asarray(y) for _, y in examples]
    return analysis.micro_f1(preds, gold, outside_label=corpus.outside_label)


def _argmax_earliest(curve: Sequence[float]) -> int:
    """1-based index of the max, earliest epoch on ties."""
    best_epoch = 1
    best = curve[0]
    for i, v in enumerate(curve[1:], start=2):
        if v > best:
            best = v
            best_epoch = i
    return best_epoch


def select_model(
    curves: Dict[str, List[float]],
    policy: str,
    epochs: int,
    source_lang: Optional[str] = None,
) -> Dict[str, int]:
    """Map each language to its selected epoch (0 = the pre-training state).

    source_dev: argmax of the source language's dev curve, shared by all.
    target_dev: per-language argmax of that language's own dev curve.
    last_checkpoint: the final epoch for everyone. Ties break earliest.
    """
    langs = list(curves.keys())
    for lang, curve in curves.items():
        if len(curve) != epochs:
            raise ContractViolation(
                f"dev curve for {lang} has {len(curve)} entries, expected {epochs}"
            )
    if policy == "last_checkpoint":
        return {lang: epochs for lang in langs}
    if policy == "source_dev":
        if source_lang is None or source_lang not in curves:
            raise ContractViolation("source_dev selection needs the source dev curve")
        epoch = _argmax_earliest(curves[source_lang]) if epochs > 0 else 0
        return {lang: epoch for lang in langs}
    if policy == "target_dev":
        return {
            lang: (_argmax_earliest(curve) if epochs > 0 else 0)
            for lang, curve in curves.items()
        }
    raise ContractViolation(f"unknown selection policy {policy!r}")


# --- full strategy runs ---------------------------------------------------------


def _dev_curves(
    models: List[ModelState], corpora: Sequence[LanguageCorpus]
) -> Dict[str, List[float]]:
    return {
        c.lang_id: [evaluate(m, c, "dev") for m in models] for c in corpora if len(c.dev) > 0
    }


def run_strategy(plan: TrainPlan, task: Task, step_hook: Optional[StepHook] = None) -> RunResult:
    """Execute one (strategy, k, seed) cell and assemble its run record."""
    rng = RngStreams(plan.seed)
    targets = task.subset(plan.language_subset)
    source = task.source
    all_langs = [source.lang_id] + [c.lang_id for c in targets]

    shots: Optional[ShotBank] = None
    if plan.strategy != "zero_shot":
        shots = build_shot_bank(targets, plan.k, plan.shot_mode, rng)

    record: dict = {
        "format_version": 1,
        "strategy": plan.strategy,
        "k": plan.k,
        "seed": plan.seed,
        "plan": plan.to_dict(),
        "source_lang": source.lang_id,
        "languages": all_langs,
        "shot_indices": {lang: list(shots.indices(lang)) for lang in shots.lang_ids}
        if shots
        else {},
    }
    checkpoints: Dict[str, List[ModelState]] = {}
    inits: Dict[str, ModelState] = {}
    trace: Optional[List[TraceEntry]] = None

    if plan.strategy == "zero_shot":
        state0, ckpts = run_source_training(
            plan, source, rng=rng, spec=task.spec, step_hook=step_hook
        )
        checkpoints["model"] = ckpts
        inits["model"] = state0
        epochs = plan.source_epochs
        curves = _dev_curves(ckpts, [source] + list(targets))
        selected = select_model(curves, plan.selection, epochs, source_lang=source.lang_id)
        model_key_of = {lang: "model" for lang in all_langs}
        record["pool_size"] = len(source.train)

    elif plan.strategy in ONE_STEP:
        state0, ckpts, trace = run_mixed_training(
            plan, source, targets, shots, rng=rng, spec=task.spec, step_hook=step_hook
        )
        checkpoints["model"] = ckpts
        inits["model"] = state0
        epochs = plan.source_epochs
        curves = _dev_curves(ckpts, [source] + list(targets))
        selected = select_model(curves, plan.selection, epochs, source_lang=source.lang_id)
        model_key_of = {lang: "model" for lang in all_langs}
        record["pool_size"] = len(source.train) + sum(
            shots.size(lang) for lang in shots.lang_ids
        )

    else:  # two-step strategies
        state0, src_ckpts = run_source_training(plan, source, rng=rng, spec=task.spec)
        checkpoints["source"] = src_ckpts
        inits["source"] = state0
        src_curve = [evaluate(m, source, "dev") for m in src_ckpts]
        src_epoch = _argmax_earliest(src_curve) if plan.source_epochs > 0 else 0
        source_model = state0 if src_epoch == 0 else src_ckpts[src_epoch - 1]
        record["source_selected_epoch"] = src_epoch
        record["source_dev_curve"] = src_curve

        if plan.selection == "target_dev":
            for c in targets:
                if len(c.dev) == 0:
                    raise ContractViolation(
                        f"target_dev selection requested but {c.lang_id} has no dev split"
                    )
        adapted = run_target_adapting(source_model, shots, plan, targets, rng=rng)
        epochs = plan.adapt_epochs
        curves = {}
        model_key_of = {}
        if plan.strategy == "mix_ft":
            ckpts = adapted["adapted"]
            checkpoints["adapted"] = ckpts
            inits["adapted"] = source_model
            for c in targets:
                curves[c.lang_id] = [evaluate(m, c, "dev") for m in ckpts]
                model_key_of[c.lang_id] = "adapted"
        else:
            for c in targets:
                ckpts = adapted[c.lang_id]
                checkpoints[c.lang_id] = ckpts
                inits[c.lang_id] = source_model
                curves[c.lang_id] = [evaluate(m, c, "dev") for m in ckpts]
                model_key_of[c.lang_id] = c.lang_id
        selected = select_model(curves, plan.selection, epochs)
        model_key_of[source.lang_id] = "source"
        selected[source.lang_id] = src_epoch
        record["pool_size"] = sum(shots.size(lang) for lang in shots.lang_ids)

    record["epochs"] = epochs
    record["dev_curves"] = curves
    record["selected_epochs"] = selected
    record["model_key_of"] = model_key_of

    result = RunResult(record=record, checkpoints=checkpoints, inits=inits, trace=trace)
    test_metrics = {}
    for c in [source] + list(targets):
        if len(c.test) == 0:
            continue
        test_metrics[c.lang_id] = evaluate(result.selected_model(c.lang_id), c, "test")
    record["test_metrics"] = test_metrics
    target_vals = [test_metrics[c.lang_id] for c in targets if c.lang_id in test_metrics]
    record["macro_target_test"] = (
        sum(target_vals) / len(target_vals) if target_vals else None
    )
    if trace is not None:
        record["surgery_stats"] = {
            "steps": len(trace),
            "conflicted": sum(1 for t in trace if t.conflicted),
            "applied": sum(1 for t in trace if t.applied),
        }
    return result
