"""Reproducible experiment runner.

One JSON config describes the benchmark, the model, the (strategy x K x
seed) grid, and the plan defaults; `run` executes every cell and writes a
deterministic artifact tree; `export` re-emits the aggregate table and the
gradient-similarity CSVs from an existing tree. Canonical artifacts carry
no timestamps, so rerunning a config reproduces every file byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import analysis, corpora, trainer
from .corpora import (
    build_shot_bank,
    gen_synthetic_family,
    ingest_tsv,
    merge_splits,
    profile_from_manifest,
)
from .models import ModelSpec, save_checkpoint
from .numcore import ContractViolation, RngStreams
from .trainer import Task, TrainPlan, run_strategy

# Strategies whose run produces one final model covering every language;
# only these feed the gradient-similarity matrices.
SIM_MATRIX_KEYS = {"mix_ft": "adapted", "naive_mix_train": "model", "gradient_mix_train": "model"}

PLAN_FIELDS = (
    "alpha", "source_epochs", "adapt_epochs", "batch_size", "adapt_batch_size",
    "lr", "selection", "shot_mode", "unrealistic_target_dev", "lazy_surgery",
    "language_subset",
)


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: dict
    model: dict
    strategies: Tuple[str, ...]
    ks: Tuple[int, ...]
    seeds: Tuple[int, ...]
    plan: dict
    analysis_seed: int
    analysis_source_batches: int

    def canonical_dict(self) -> dict:
        return {
            "format_version": 1,
            "benchmark": self.benchmark,
            "model": self.model,
            "grid": {
                "strategies": list(self.strategies),
                "ks": list(self.ks),
                "seeds": list(self.seeds),
            },
            "plan": {k: self.plan.get(k) for k in PLAN_FIELDS if k in self.plan},
            "analysis": {
                "seed": self.analysis_seed,
                "source_batches": self.analysis_source_batches,
            },
        }


def default_config() -> ExperimentConfig:
    """The shipped experiment: every strategy, the standard K grid, 5 seeds,
    on the default synthetic benchmark."""
    return ExperimentConfig(
        benchmark={"kind": "default"},
        model={"family": "softmax_classifier", "hidden_dim": 64},
        strategies=(
            "zero_shot", "ord_fs", "ord_fs_dev", "mix_ft",
            "naive_mix_train", "gradient_mix_train",
        ),
        ks=(1, 5, 10),
        seeds=(1, 2, 3, 4, 5),
        plan={
            "alpha": 0.6,
            "source_epochs": 10,
            "adapt_epochs": 10,
            "batch_size": 32,
            "adapt_batch_size": None,
            "lr": 0.5,
            "shot_mode": "n_way_k_shot",
        },
        analysis_seed=0,
        analysis_source_batches=100,
    )


def parse_config(doc: dict) -> ExperimentConfig:
    try:
        grid = doc["grid"]
        strategies = tuple(grid["strategies"])
        ks = tuple(int(k) for k in grid["ks"])
        seeds = tuple(int(s) for s in grid["seeds"])
    except KeyError as exc:
        raise ContractViolation(f"config missing grid section/key: {exc}") from None
    if not strategies:
        raise ContractViolation("config needs at least one strategy")
    if not ks:
        raise ContractViolation("config needs at least one K")
    if not seeds:
        raise ContractViolation("config needs at least one seed")
    for s in strategies:
        if s not in trainer.STRATEGIES:
            raise ContractViolation(f"unknown strategy {s!r} in grid")
    ana = doc.get("analysis", {})
    return ExperimentConfig(
        benchmark=doc.get("benchmark", {"kind": "default"}),
        model=doc.get("model", {"family": "softmax_classifier", "hidden_dim": 64}),
        strategies=strategies,
        ks=ks,
        seeds=seeds,
        plan=dict(doc.get("plan", {})),
        analysis_seed=int(ana.get("seed", 0)),
        analysis_source_batches=int(ana.get("source_batches", 100)),
    )


def load_config(path: Path) -> ExperimentConfig:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ContractViolation(f"cannot read config {path}: {exc}") from None
    return parse_config(doc)


def build_benchmark(cfg: ExperimentConfig) -> Tuple[Task, Optional[dict]]:
    kind = cfg.benchmark.get("kind", "default")
    if kind == "default":
        corp, manifest = corpora.default_benchmark()
    elif kind == "synthetic":
        profile = profile_from_manifest(cfg.benchmark["profile"])
        corp, manifest = gen_synthetic_family(profile)
    elif kind == "tsv":
        corp = []
        manifest = None
        task_kind = cfg.benchmark.get("task", "classification")
        num_classes = cfg.benchmark.get("num_classes")
        for lang in cfg.benchmark["languages"]:
            parts = []
            for split, p in lang["splits"].items():
                parts.append(
                    ingest_tsv(
                        p, task_kind, lang_id=lang["lang_id"],
                        script_tag=lang.get("script_tag", ""),
                        role=lang["role"], split=split, num_classes=num_classes,
                    )
                )
            corp.append(merge_splits(*parts))
    else:
        raise ContractViolation(f"unknown benchmark kind {kind!r}")
    sample = corp[0]
    spec = ModelSpec(
        family=cfg.model.get("family", "softmax_classifier"),
        input_dim=sample.input_dim,
        hidden_dim=int(cfg.model.get("hidden_dim", 0)),
        num_classes=sample.num_classes,
    )
    return Task.from_corpora(spec, corp), manifest


def grid_cells(cfg: ExperimentConfig) -> List[Tuple[str, int, int]]:
    """zero_shot ignores K and runs once per seed; everything else spans the
    full K grid."""
    cells = []
    for strategy in cfg.strategies:
        ks = (0,) if strategy == "zero_shot" else cfg.ks
        for k in ks:
            for seed in cfg.seeds:
                cells.append((strategy, k, seed))
    return cells


def cell_name(strategy: str, k: int, seed: int) -> str:
    return f"{strategy}_k{k}_seed{seed}"


def make_plan(cfg: ExperimentConfig, strategy: str, k: int, seed: int) -> TrainPlan:
    kwargs = {f: cfg.plan[f] for f in PLAN_FIELDS if f in cfg.plan}
    if kwargs.get("language_subset") is not None:
        kwargs["language_subset"] = tuple(kwargs["language_subset"])
    return TrainPlan(strategy=strategy, k=k, seed=seed, **kwargs)


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def run_cell(cfg: ExperimentConfig, task: Task, strategy: str, k: int, seed: int,
             out: Path) -> dict:
    """Run one grid cell and write its artifact subtree; returns the record."""
    plan = make_plan(cfg, strategy, k, seed)
    result = run_strategy(plan, task)
    cell_dir = out / "runs" / cell_name(strategy, k, seed)
    cell_dir.mkdir(parents=True, exist_ok=True)

    ck_paths: Dict[str, List[str]] = {}
    for key, ckpts in result.checkpoints.items():
        ck_dir = cell_dir / "checkpoints" / key
        ck_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        chain = [result.inits[key]] + list(ckpts)
        for epoch, state in enumerate(chain):
            p = ck_dir / f"epoch_{epoch:04d}.json"
            save_checkpoint(state, p, epoch=epoch, strategy=strategy)
            paths.append(str(p.relative_to(cell_dir)))
        ck_paths[key] = paths
    result.record["checkpoints"] = ck_paths

    if result.trace is not None:
        trace_path = cell_dir / "surgery_trace.jsonl"
        with trace_path.open("w", encoding="utf-8") as fh:
            for entry in result.trace:
                fh.write(json.dumps(entry.to_json_dict()) + "\n")
        result.record["surgery_trace"] = "surgery_trace.jsonl"
    else:
        result.record["surgery_trace"] = None

    write_json(cell_dir / "record.json", result.record)
    return result.record


def _worker(config_doc: dict, cell: Tuple[str, int, int], out_str: str):
    cfg = parse_config(config_doc)
    task, _ = build_benchmark(cfg)
    strategy, k, seed = cell
    record = run_cell(cfg, task, strategy, k, seed, Path(out_str))
    return cell, record


def write_sim_matrices(cfg: ExperimentConfig, task: Task, records: Sequence[dict],
                       out: Path) -> List[Path]:
    """One similarity-matrix CSV per (strategy, k) group with a single final
    model per run: final checkpoints of the group's seeds, measured against
    one analysis shot bank."""
    agg_dir = out / "aggregate"
    agg_dir.mkdir(parents=True, exist_ok=True)
    written = []
    groups: Dict[Tuple[str, int], List[dict]] = {}
    for r in records:
        if r["strategy"] in SIM_MATRIX_KEYS and r["k"] > 0:
            groups.setdefault((r["strategy"], r["k"]), []).append(r)
    corp = [task.source] + list(task.targets)
    for (strategy, k), rs in sorted(groups.items()):
        rs = sorted(rs, key=lambda r: r["seed"])
        key = SIM_MATRIX_KEYS[strategy]
        finals = []
        for r in rs:
            cell_dir = out / "runs" / cell_name(strategy, k, r["seed"])
            from .models import load_checkpoint

            state, _, _ = load_checkpoint(cell_dir / r["checkpoints"][key][-1])
            finals.append(state)
        bank = build_shot_bank(
            task.targets, k, cfg.plan.get("shot_mode", "k_shot"),
            RngStreams(cfg.analysis_seed),
        )
        rng = np.random.default_rng(np.random.SeedSequence(cfg.analysis_seed))
        m = analysis.similarity_matrix(
            finals, corp, bank, rng,
            batch_size=cfg.plan.get("batch_size", 32),
            n_source_batches=cfg.analysis_source_batches,
        )
        path = agg_dir / f"simmatrix_{strategy}_k{k}.csv"
        analysis.write_sim_matrix_csv(m, path)
        written.append(path)
    return written


def format_table(report: dict, source_lang: str) -> str:
    """Text table: one block per K, strategy rows, 'NN.NN +- N.NN' cells in
    percent; the rightmost column macro-averages the targets only."""
    grid = report["grid"]
    ks = sorted({cell["k"] for cell in grid})
    lines = []
    for k in ks:
        cells = [c for c in grid if c["k"] == k]
        langs = [source_lang] + [l for l in cells[0]["target_langs"]]
        header = ["K=" + str(k)] + langs + ["target-avg"]
        widths = [max(20, len(header[0]))] + [15] * (len(header) - 1)
        lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
        for cell in cells:
            row = [cell["strategy"].ljust(widths[0])]
            for lang in langs:
                stats = cell["languages"].get(lang)
                cellstr = (
                    f"{100*stats['mean']:.2f} ± {100*stats['sd']:.2f}"
                    if stats
                    else "-"
                )
                row.append(cellstr.ljust(15))
            m = cell["macro"]
            row.append(
                f"{100*m['mean']:.2f} ± {100*m['sd']:.2f}"
                if m["mean"] is not None
                else "-"
            )
            lines.append("  ".join(row))
        lines.append("")
    return "\n".join(lines)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, failures: List[dict]) -> Path:
    entries = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            entries.append(
                {"path": str(p.relative_to(out)), "sha256": sha256_file(p)}
            )
    manifest = {"format_version": 1, "artifacts": entries, "failures": failures}
    write_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def run_experiment(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> int:
    """Execute the full grid; returns 0 iff every cell succeeded."""
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.canonical_dict())
    task, manifest = build_benchmark(cfg)
    if manifest is not None:
        write_json(out / "benchmark" / "manifest.json", manifest)

    cells = grid_cells(cfg)
    records: List[dict] = []
    failures: List[dict] = []
    if jobs > 1:
        doc = cfg.canonical_dict()
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(_worker, doc, cell, str(out)): cell for cell in cells
            }
            for fut, cell in futures.items():
                try:
                    _, record = fut.result()
                    records.append(record)
                except Exception as exc:
                    failures.append({"cell": cell_name(*cell), "error": str(exc)})
    else:
        for cell in cells:
            try:
                records.append(run_cell(cfg, task, *cell, out))
            except Exception as exc:
                failures.append({"cell": cell_name(*cell), "error": str(exc)})

    if records:
        records.sort(key=lambda r: (r["strategy"], r["k"], r["seed"]))
        report = analysis.aggregate_runs(records)
        write_json(out / "aggregate" / "report.json", report)
        table = format_table(report, records[0]["source_lang"])
        (out / "aggregate").mkdir(exist_ok=True)
        (out / "aggregate" / "table.txt").write_text(table, encoding="utf-8")
        try:
            write_sim_matrices(cfg, task, records, out)
        except Exception as exc:
            failures.append({"cell": "sim_matrices", "error": str(exc)})
    write_manifest(out, failures)
    for f in failures:
        print(f"FAILED {f['cell']}: {f['error']}", file=sys.stderr)
    return 0 if not failures else 1


def export_artifacts(out: Path, table: bool = True) -> int:
    """Rebuild the aggregate report, the text table, and the similarity CSVs
    from a completed run tree."""
    config_path = out / "config.json"
    if not config_path.exists():
        raise ContractViolation(f"no config.json under {out}; not a run tree")
    cfg = load_config(config_path)
    expected = grid_cells(cfg)
    records = []
    missing = []
    for cell in expected:
        rec_path = out / "runs" / cell_name(*cell) / "record.json"
        if rec_path.exists():
            records.append(json.loads(rec_path.read_text(encoding="utf-8")))
        else:
            missing.append(cell_name(*cell))
    if missing:
        raise ContractViolation(f"missing run records: {', '.join(missing)}")
    records.sort(key=lambda r: (r["strategy"], r["k"], r["seed"]))
    report = analysis.aggregate_runs(records)
    write_json(out / "aggregate" / "report.json", report)
    if table:
        text = format_table(report, records[0]["source_lang"])
        (out / "aggregate" / "table.txt").write_text(text, encoding="utf-8")
        print(text)
    task, _ = build_benchmark(cfg)
    write_sim_matrices(cfg, task, records, out)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="gradmix",
        description="run and export mixed-training few-shot experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute an experiment grid from a config")
    p_run.add_argument("--config", required=True, type=Path)
    p_run.add_argument("--out", required=True, type=Path)
    p_run.add_argument("--jobs", type=int, default=1)
    p_exp = sub.add_parser("export", help="re-emit tables and CSVs from a run tree")
    p_exp.add_argument("--out", required=True, type=Path)
    p_exp.add_argument("--table", action="store_true", default=True)
    args = parser.parse_args(argv)

    try:
        if args.command == "run":
            cfg = load_config(args.config)
            return run_experiment(cfg, args.out, jobs=args.jobs)
        if args.command == "export":
            return export_artifacts(args.out, table=args.table)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2
    return 2


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
