"""Synthetic multi-language corpora, TSV ingestion, and shot sampling.

A "language" here is a labeled distribution over a shared feature space.
Synthetic languages are class-conditional Gaussians whose class means are a
rotated and translated copy of the source means: languages sharing a script
tag share the rotation and differ only by translation, and distance from
the source is the rotation angle. That gives a controllable desk-scale
analog of cross-language distribution shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .models import Batch
from .numcore import ContractViolation, RngStreams

TASKS = ("classification", "token_tags")
ROLES = ("source", "target")
SPLITS = ("train", "dev", "test")

Example = Tuple[np.ndarray, Union[int, np.ndarray]]


def _freeze_example(x: np.ndarray, y) -> Example:
    x = np.asarray(x, dtype=np.float64)
    x.setflags(write=False)
    if isinstance(y, np.ndarray):
        y = np.asarray(y, dtype=np.int64)
        y.setflags(write=False)
        return (x, y)
    return (x, int(y))


@dataclass(frozen=True)
class LanguageCorpus:
    lang_id: str
    script_tag: str
    role: str
    task: str
    num_classes: int
    input_dim: int
    train: Tuple[Example, ...] = ()
    dev: Tuple[Example, ...] = ()
    test: Tuple[Example, ...] = ()
    outside_label: int = 0  # token task: excluded from micro-F1

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ContractViolation(f"unknown role {self.role!r}")
        if self.task not in TASKS:
            raise ContractViolation(f"unknown task {self.task!r}")
        # corpora are immutable after construction
        for name in SPLITS:
            frozen = tuple(_freeze_example(x, y) for x, y in getattr(self, name))
            object.__setattr__(self, name, frozen)

    def split(self, name: str) -> Tuple[Example, ...]:
        if name not in SPLITS:
            raise ContractViolation(f"unknown split {name!r}")
        return getattr(self, name)

    def class_counts(self, split: str = "train") -> np.ndarray:
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for _, y in self.split(split):
            counts[int(y)] += 1
        return counts


# --- shot sampling ----------------------------------------------------------

SHOT_MODES = ("k_shot", "n_way_k_shot")


@dataclass(frozen=True)
class ShotBank:
    """Per-language selection of training indices; the same bank feeds every
    strategy for a given seed."""

    k: int
    mode: str
    per_lang: Tuple[Tuple[str, Tuple[int, ...]], ...]

    def __post_init__(self) -> None:
        if self.mode not in SHOT_MODES:
            raise ContractViolation(f"unknown shot mode {self.mode!r}")

    @property
    def lang_ids(self) -> Tuple[str, ...]:
        return tuple(lang for lang, _ in self.per_lang)

    def indices(self, lang_id: str) -> Tuple[int, ...]:
        for lang, idx in self.per_lang:
            if lang == lang_id:
                return idx
        raise ContractViolation(f"no shots for language {lang_id!r}")

    def size(self, lang_id: str) -> int:
        return len(self.indices(lang_id))


def sample_k_shots(corpus: LanguageCorpus, k: int, rng: RngStreams) -> Tuple[int, ...]:
    """k distinct train indices, deterministic per (master seed, lang_id)."""
    n = len(corpus.train)
    if k < 1:
        raise ContractViolation("k must be positive")
    if k > n:
        raise ContractViolation(f"k={k} exceeds train size {n} for {corpus.lang_id}")
    gen = rng.derived("shot_sample", corpus.lang_id)
    picked = gen.choice(n, size=k, replace=False)
    return tuple(int(i) for i in picked)


def sample_n_way_k_shot(corpus: LanguageCorpus, k: int, rng: RngStreams) -> Tuple[int, ...]:
    """k train indices per class (N*k total), deterministic per (seed, lang_id)."""
    if corpus.task != "classification":
        raise ContractViolation("n-way k-shot sampling applies to classification tasks")
    if k < 1:
        raise ContractViolation("k must be positive")
    by_class: List[List[int]] = [[] for _ in range(corpus.num_classes)]
    for i, (_, y) in enumerate(corpus.train):
        by_class[int(y)].append(i)
    gen = rng.derived("shot_sample", corpus.lang_id)
    picked: List[int] = []
    for c, pool in enumerate(by_class):
        if len(pool) < k:
            raise ContractViolation(f"class {c}: {len(pool)} < {k}")
        sel = gen.choice(len(pool), size=k, replace=False)
        picked.extend(pool[int(j)] for j in sel)
    return tuple(picked)


def build_shot_bank(
    targets: Sequence[LanguageCorpus], k: int, mode: str, rng: RngStreams
) -> ShotBank:
    if mode not in SHOT_MODES:
        raise ContractViolation(f"unknown shot mode {mode!r}")
    sampler = sample_k_shots if mode == "k_shot" else sample_n_way_k_shot
    per_lang = tuple((c.lang_id, sampler(c, k, rng)) for c in targets)
    return ShotBank(k=k, mode=mode, per_lang=per_lang)


@dataclass(frozen=True)
class OracleBank:
    """Per-language views of exactly the shot examples, nothing external.

    The conflict check during surgery computes each language's gradient on
    these views, which alias the ShotBank selection index-for-index.
    """

    shots: ShotBank
    _examples: Tuple[Tuple[str, Tuple[Example, ...]], ...]

    @property
    def lang_ids(self) -> Tuple[str, ...]:
        return tuple(lang for lang, _ in self._examples)

    def examples(self, lang_id: str) -> Tuple[Example, ...]:
        for lang, exs in self._examples:
            if lang == lang_id:
                return exs
        raise ContractViolation(f"no oracle data for language {lang_id!r}")

    def indices(self, lang_id: str) -> Tuple[int, ...]:
        return self.shots.indices(lang_id)

    def __len__(self) -> int:
        return len(self._examples)


def build_oracle_bank(shots: ShotBank, targets: Sequence[LanguageCorpus]) -> OracleBank:
    by_id = {c.lang_id: c for c in targets}
    rows = []
    for lang, idx in shots.per_lang:
        corpus = by_id[lang]
        rows.append((lang, tuple(corpus.train[i] for i in idx)))
    return OracleBank(shots=shots, _examples=tuple(rows))


# --- mixed dataset & batching -----------------------------------------------


@dataclass(frozen=True)
class MixedDataset:
    """Ordered pool of (lang, example) pairs; position in the pool is the
    canonical example key used for order-invariant loss accumulation."""

    examples: Tuple[Example, ...]
    lang_of: Tuple[str, ...]
    source_size: int

    def __len__(self) -> int:
        return len(self.examples)


def build_mixed_dataset(
    source: Optional[LanguageCorpus],
    targets: Sequence[LanguageCorpus],
    shots: Optional[ShotBank],
) -> MixedDataset:
    """Full source train split followed by every target's shots, in target
    order. With zero targets this degenerates to the source-only pool."""
    examples: List[Example] = []
    langs: List[str] = []
    source_size = 0
    if source is not None:
        examples.extend(source.train)
        langs.extend([source.lang_id] * len(source.train))
        source_size = len(source.train)
    if targets and shots is not None:
        by_id = {c.lang_id: c for c in targets}
        for lang, idx in shots.per_lang:
            if lang not in by_id:
                continue
            corpus = by_id[lang]
            for i in idx:
                examples.append(corpus.train[i])
                langs.append(lang)
    if not examples:
        raise ContractViolation("mixed dataset pool is empty")
    return MixedDataset(examples=tuple(examples), lang_of=tuple(langs), source_size=source_size)


def shots_dataset(targets: Sequence[LanguageCorpus], shots: ShotBank,
                  only: Optional[Sequence[str]] = None) -> MixedDataset:
    """Pool of shot examples only (the target-adapting training set)."""
    keep = set(only) if only is not None else None
    selected = [c for c in targets if keep is None or c.lang_id in keep]
    examples: List[Example] = []
    langs: List[str] = []
    by_id = {c.lang_id: c for c in selected}
    for lang, idx in shots.per_lang:
        if lang not in by_id:
            continue
        corpus = by_id[lang]
        for i in idx:
            examples.append(corpus.train[i])
            langs.append(lang)
    if not examples:
        raise ContractViolation("shot pool is empty")
    return MixedDataset(examples=tuple(examples), lang_of=tuple(langs), source_size=0)


def batch_iter(
    md: MixedDataset, batch_size: int, epoch: int, rng: RngStreams, scope: str = "pool"
) -> List[Batch]:
    """One epoch's batches: a fresh uniform shuffle of the pool, chunked.

    The permutation comes from a generator derived from (seed, shuffle,
    scope, epoch), so the batch sequence for a given epoch does not depend
    on how many other scopes or epochs have been drawn. The short final
    batch is kept; dropping it would lose shots from tiny pools.
    """
    if batch_size < 1:
        raise ContractViolation("batch_size must be >= 1")
    n = len(md)
    perm = rng.derived("shuffle", f"{scope}:{epoch}").permutation(n)
    batches: List[Batch] = []
    for start in range(0, n, batch_size):
        chunk = perm[start : start + batch_size]
        batches.append(
            Batch(
                xs=tuple(md.examples[i][0] for i in chunk),
                ys=tuple(md.examples[i][1] for i in chunk),
                keys=tuple(int(i) for i in chunk),
            )
        )
    return batches


# --- synthetic generation ----------------------------------------------------


@dataclass(frozen=True)
class LanguageProfile:
    lang_id: str
    script_tag: str
    role: str
    angle_deg: float
    translation: Tuple[float, ...]
    train_size: int
    dev_size: int
    test_size: int


@dataclass(frozen=True)
class SyntheticProfile:
    languages: Tuple[LanguageProfile, ...]
    num_classes: int = 3
    input_dim: int = 2
    mean_radius: float = 2.0
    noise_sd: float = 1.0
    seed: int = 0


def _class_means(profile: SyntheticProfile, lang: LanguageProfile) -> np.ndarray:
    """Source means sit on a circle in the first two feature dims; each
    language rotates them by its angle and adds its translation."""
    C, D = profile.num_classes, profile.input_dim
    base = np.zeros((C, D))
    for c in range(C):
        phi = 2.0 * math.pi * c / C
        base[c, 0] = profile.mean_radius * math.cos(phi)
        base[c, 1] = profile.mean_radius * math.sin(phi)
    a = math.radians(lang.angle_deg)
    rot = np.eye(D)
    rot[0, 0] = math.cos(a)
    rot[0, 1] = -math.sin(a)
    rot[1, 0] = math.sin(a)
    rot[1, 1] = math.cos(a)
    t = np.zeros(D)
    t[: len(lang.translation)] = lang.translation
    return base @ rot.T + t


def _balanced_labels(n: int, num_classes: int, gen: np.random.Generator) -> np.ndarray:
    """Near-equal class counts in shuffled order (exact balance keeps the
    n-way sampler's per-class precondition easy to satisfy)."""
    reps = [c for c in range(num_classes) for _ in range((n + num_classes - 1) // num_classes)]
    labels = np.array(reps[:n], dtype=np.int64)
    gen.shuffle(labels)
    return labels


def gen_synthetic_family(
    profile: SyntheticProfile,
) -> Tuple[List[LanguageCorpus], Dict]:
    """Deterministic corpora for every language in the profile, plus a
    manifest that fully reproduces them."""
    langs = profile.languages
    if len(langs) < 2:
        raise ContractViolation("need at least two languages (one source, one target)")
    ids = [l.lang_id for l in langs]
    if len(set(ids)) != len(ids):
        raise ContractViolation("language ids must be unique")
    if sum(1 for l in langs if l.role == "source") != 1:
        raise ContractViolation("exactly one language must have role 'source'")
    by_script: Dict[str, float] = {}
    for l in langs:
        if l.train_size < 0 or l.dev_size < 0 or l.test_size < 0:
            raise ContractViolation(f"negative split size for {l.lang_id}")
        if l.script_tag in by_script and by_script[l.script_tag] != l.angle_deg:
            raise ContractViolation(
                f"languages sharing script {l.script_tag!r} must share the rotation angle"
            )
        by_script[l.script_tag] = l.angle_deg
    if profile.input_dim < 2:
        raise ContractViolation("input_dim must be >= 2 (rotation plane)")

    rng = RngStreams(profile.seed)
    corpora: List[LanguageCorpus] = []
    manifest_langs = []
    for lang in langs:
        means = _class_means(profile, lang)
        gen = rng.derived("synth_data", lang.lang_id)
        splits = {}
        for split_name, size in (
            ("train", lang.train_size),
            ("dev", lang.dev_size),
            ("test", lang.test_size),
        ):
            labels = _balanced_labels(size, profile.num_classes, gen)
            exs = []
            for y in labels.tolist():
                x = means[y] + profile.noise_sd * gen.standard_normal(profile.input_dim)
                exs.append(_freeze_example(x, y))
            splits[split_name] = tuple(exs)
        corpora.append(
            LanguageCorpus(
                lang_id=lang.lang_id,
                script_tag=lang.script_tag,
                role=lang.role,
                task="classification",
                num_classes=profile.num_classes,
                input_dim=profile.input_dim,
                train=splits["train"],
                dev=splits["dev"],
                test=splits["test"],
            )
        )
        manifest_langs.append(
            {
                "lang_id": lang.lang_id,
                "script_tag": lang.script_tag,
                "role": lang.role,
                "angle_deg": lang.angle_deg,
                "translation": list(lang.translation),
                "sizes": {"train": lang.train_size, "dev": lang.dev_size, "test": lang.test_size},
                "class_means": [[repr(float(v)) for v in row] for row in means.tolist()],
            }
        )
    manifest = {
        "kind": "synthetic-benchmark",
        "n_langs": len(langs),
        "num_classes": profile.num_classes,
        "input_dim": profile.input_dim,
        "mean_radius": profile.mean_radius,
        "noise_sd": profile.noise_sd,
        "seed": profile.seed,
        "languages": manifest_langs,
    }
    return corpora, manifest


def profile_from_manifest(manifest: Dict) -> SyntheticProfile:
    langs = tuple(
        LanguageProfile(
            lang_id=l["lang_id"],
            script_tag=l["script_tag"],
            role=l["role"],
            angle_deg=float(l["angle_deg"]),
            translation=tuple(float(v) for v in l["translation"]),
            train_size=int(l["sizes"]["train"]),
            dev_size=int(l["sizes"]["dev"]),
            test_size=int(l["sizes"]["test"]),
        )
        for l in manifest["languages"]
    )
    return SyntheticProfile(
        languages=langs,
        num_classes=int(manifest["num_classes"]),
        input_dim=int(manifest["input_dim"]),
        mean_radius=float(manifest["mean_radius"]),
        noise_sd=float(manifest["noise_sd"]),
        seed=int(manifest["seed"]),
    )


# --- shipped default benchmark ------------------------------------------------
#
# 1 source + 6 targets. The three "near" languages share a script rotated
# 12 degrees from the source and sit almost on top of it; the three
# "distant" ones share a script rotated further and live along the
# extrapolation of a source decision boundary at increasing distance, so a
# source-trained model still classifies them far above chance while
# per-language fine-tuning has to traverse a long way from its
# initialization. Calibrated so zero-shot accuracy on the distant subset
# lands 10-30 points below source accuracy.

DEFAULT_BENCHMARK_SEED = 7021
DISTANT_ANGLE_THRESHOLD = 20.0
_FAR_RAY_DEG = 60.0  # direction of a source class boundary


def _ray(deg: float, dist: float) -> Tuple[float, float]:
    return (dist * math.cos(math.radians(deg)), dist * math.sin(math.radians(deg)))


def default_profile() -> SyntheticProfile:
    def lp(lang_id, script, role, angle, trans, train):
        return LanguageProfile(
            lang_id=lang_id,
            script_tag=script,
            role=role,
            angle_deg=angle,
            translation=trans,
            train_size=train,
            dev_size=100,
            test_size=100,
        )

    return SyntheticProfile(
        languages=(
            lp("src", "scr-src", "source", 0.0, (0.0, 0.0), 500),
            lp("near-a", "scr-near", "target", 12.0, (0.25, 0.0), 100),
            lp("near-b", "scr-near", "target", 12.0, (0.0, 0.25), 100),
            lp("near-c", "scr-near", "target", 12.0, (-0.175, 0.175), 100),
            lp("far-a", "scr-far", "target", 22.0, _ray(_FAR_RAY_DEG, 4.8), 100),
            lp("far-b", "scr-far", "target", 22.0, _ray(_FAR_RAY_DEG, 6.0), 100),
            lp("far-c", "scr-far", "target", 22.0, _ray(_FAR_RAY_DEG, 7.2), 100),
        ),
        num_classes=3,
        input_dim=2,
        mean_radius=2.0,
        noise_sd=1.25,
        seed=DEFAULT_BENCHMARK_SEED,
    )


def default_benchmark() -> Tuple[List[LanguageCorpus], Dict]:
    return gen_synthetic_family(default_profile())


def distant_lang_ids(manifest: Dict) -> Tuple[str, ...]:
    return tuple(
        l["lang_id"]
        for l in manifest["languages"]
        if l["role"] == "target" and float(l["angle_deg"]) > DISTANT_ANGLE_THRESHOLD
    )


# --- TSV ingestion -------------------------------------------------------------


def ingest_tsv(
    path: Union[str, Path],
    schema: str,
    lang_id: str,
    script_tag: str = "",
    role: str = "target",
    split: str = "train",
    num_classes: Optional[int] = None,
) -> LanguageCorpus:
    """Parse a UTF-8 TSV file into a corpus with all examples in `split`.

    classification: one row per example, "f1<TAB>...<TAB>fD<TAB>label".
    token_tags: one token per line with the same shape; a blank line ends a
    sequence. CRLF is accepted identically to LF.
    """
    if schema not in TASKS:
        raise ContractViolation(f"unknown schema {schema!r}")
    text = Path(path).read_text(encoding="utf-8").replace("\r\n", "\n").replace("\r", "\n")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    width: Optional[int] = None
    max_label = -1

    def parse_row(line: str, lineno: int) -> Tuple[np.ndarray, int]:
        nonlocal width, max_label
        parts = line.split("\t")
        if width is None:
            if len(parts) < 2:
                raise ContractViolation(f"line {lineno}: need at least one feature and a label")
            width = len(parts)
        if len(parts) != width:
            raise ContractViolation(
                f"line {lineno}: expected {width} fields, got {len(parts)}"
            )
        try:
            feats = np.array([float(p) for p in parts[:-1]], dtype=np.float64)
        except ValueError as exc:
            raise ContractViolation(f"line {lineno}: bad feature value ({exc})") from None
        raw = parts[-1]
        try:
            label = int(raw)
        except ValueError:
            raise ContractViolation(f"line {lineno}: unknown label {raw!r}") from None
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise ContractViolation(f"line {lineno}: unknown label {raw!r}")
        max_label = max(max_label, label)
        return feats, label

    examples: List[Example] = []
    if schema == "classification":
        for lineno, line in enumerate(lines, 1):
            if line == "":
                continue
            feats, label = parse_row(line, lineno)
            examples.append(_freeze_example(feats, label))
    else:
        cur_feats: List[np.ndarray] = []
        cur_tags: List[int] = []

        def flush():
            if cur_feats:
                examples.append(
                    _freeze_example(np.stack(cur_feats), np.array(cur_tags, dtype=np.int64))
                )
                cur_feats.clear()
                cur_tags.clear()

        for lineno, line in enumerate(lines, 1):
            if line == "":
                flush()
                continue
            feats, label = parse_row(line, lineno)
            cur_feats.append(feats)
            cur_tags.append(label)
        flush()

    input_dim = (width - 1) if width is not None else 0
    inferred = num_classes if num_classes is not None else max(max_label + 1, 2)
    kwargs = {split: tuple(examples)}
    return LanguageCorpus(
        lang_id=lang_id,
        script_tag=script_tag,
        role=role,
        task=schema,
        num_classes=inferred,
        input_dim=input_dim,
        **kwargs,
    )


def merge_splits(*corpora: LanguageCorpus) -> LanguageCorpus:
    """Combine same-language corpora that each carry one split."""
    base = corpora[0]
    train: Tuple[Example, ...] = ()
    dev: Tuple[Example, ...] = ()
    test: Tuple[Example, ...] = ()
    for c in corpora:
        if c.lang_id != base.lang_id or c.task != base.task:
            raise ContractViolation("merge_splits needs corpora of one language and task")
        train += c.train
        dev += c.dev
        test += c.test
    return LanguageCorpus(
        lang_id=base.lang_id,
        script_tag=base.script_tag,
        role=base.role,
        task=base.task,
        num_classes=max(c.num_classes for c in corpora),
        input_dim=base.input_dim,
        train=train,
        dev=dev,
        test=test,
        outside_label=base.outside_label,
    )
