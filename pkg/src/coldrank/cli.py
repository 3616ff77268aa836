"""Command-line orchestration: generate, train, evaluate, diagnose, report.

Experiments are JSON files; see ``DEFAULT_EXPERIMENT`` for the key set.
Outputs land under ``output_dir/<subset>/<seed>/``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evalkit import EvalConfig, ablate_feature_delta, evaluate, feature_means
from .model import ModelConfig, count_params
from .objectives import TrainConfig
from .synthdata import Dataset, DatasetFormatError, GenerationError, GenSpec, generate, read_dataset, write_dataset
from .trainer import DivergenceError, read_diagnostics_csv, train, write_diagnostics_csv

log = logging.getLogger("coldrank")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
TECHNIQUES = ("residual", "scorereg", "mixup", "dropout")
BASELINE = "baseline"
REPORT_VERSION = 1

# every single technique, every pair, all three, plus the dropout baseline
DEFAULT_SUBSETS = {
    BASELINE: [],
    "residual": ["residual"],
    "scorereg": ["scorereg"],
    "mixup": ["mixup"],
    "residual+scorereg": ["residual", "scorereg"],
    "residual+mixup": ["residual", "mixup"],
    "scorereg+mixup": ["scorereg", "mixup"],
    "residual+scorereg+mixup": ["residual", "scorereg", "mixup"],
    "dropout": ["dropout"],
}

DEFAULT_GEN_SPEC: dict = {}  # the GenSpec defaults are the shipped benchmark

DEFAULT_EXPERIMENT = {
    "gen_spec": DEFAULT_GEN_SPEC,
    "model": {},
    "train": {"epochs": 18, "max_steps": 2000, "lambda_mmd": 2.0},
    "eval": {},
    "dropout_rate": 0.2,
    "subsets": DEFAULT_SUBSETS,
    "seeds": [0, 1, 2, 3, 4],
    "output_dir": "runs/default",
}

EXPERIMENT_KEYS = {"gen_spec", "dataset", "model", "train", "eval", "dropout_rate", "subsets", "seeds", "output_dir"}


class ConfigError(ValueError):
    """User-facing configuration problem (exit code 1)."""


@dataclass
class Experiment:
    gen_spec: GenSpec | None
    dataset: dict | None
    model: ModelConfig
    train: TrainConfig
    eval: EvalConfig
    dropout_rate: float
    subsets: dict[str, list[str]]
    seeds: list[int]
    output_dir: Path
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "Experiment":
        unknown = set(data) - EXPERIMENT_KEYS
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        if ("gen_spec" in data) == ("dataset" in data):
            raise ConfigError("give exactly one of 'gen_spec' or 'dataset'")
        try:
            gen_spec = GenSpec.from_dict(data["gen_spec"]) if "gen_spec" in data else None
            model = ModelConfig.from_dict(data.get("model", {}))
            train_cfg = TrainConfig.from_dict(data.get("train", {}))
            eval_cfg = EvalConfig.from_dict(data.get("eval", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        dataset = data.get("dataset")
        if dataset is not None and (not isinstance(dataset, dict) or set(dataset) != {"train", "eval"}):
            raise ConfigError("'dataset' must be an object with exactly the keys 'train' and 'eval'")
        subsets = data.get("subsets", DEFAULT_SUBSETS)
        if not isinstance(subsets, dict) or not subsets:
            raise ConfigError("'subsets' must be a non-empty object of name -> technique list")
        for name, techniques in subsets.items():
            if not isinstance(techniques, list):
                raise ConfigError(f"subset {name!r} must list its techniques")
            for t in techniques:
                if t not in TECHNIQUES:
                    raise ConfigError(f"unknown technique {t!r} in subset {name!r}; known: {list(TECHNIQUES)}")
            if "/" in name or name in ("", ".", ".."):
                raise ConfigError(f"invalid subset name {name!r}")
        seeds = data.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise ConfigError("'seeds' must be a non-empty list of non-negative integers")
        rate = data.get("dropout_rate", DEFAULT_EXPERIMENT["dropout_rate"])
        if not isinstance(rate, (int, float)) or not 0.0 <= rate <= 1.0:
            raise ConfigError("'dropout_rate' must lie in [0, 1]")
        out = Path(data.get("output_dir", DEFAULT_EXPERIMENT["output_dir"]))
        if base_dir is not None and not out.is_absolute():
            out = base_dir / out
        return cls(gen_spec, dataset, model, train_cfg, eval_cfg, float(rate), dict(subsets), list(seeds), out, dict(data))

    def resolved(self) -> dict:
        """Fully explicit form, written next to the outputs."""
        data = {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
            "dropout_rate": self.dropout_rate,
            "subsets": self.subsets,
            "seeds": self.seeds,
            "output_dir": str(self.output_dir),
        }
        if self.gen_spec is not None:
            data["gen_spec"] = self.gen_spec.to_dict()
        else:
            data["dataset"] = dict(self.dataset)
        return data

    def train_config(self, subset: str, seed: int) -> TrainConfig:
        techniques = set(self.subsets[subset])
        return self.train.replace(
            residual_enabled="residual" in techniques,
            scorereg_enabled="scorereg" in techniques,
            mixup_enabled="mixup" in techniques,
            feature_dropout_rate=self.dropout_rate if "dropout" in techniques else 0.0,
            seed=seed,
        )

    def model_config(self, subset: str) -> ModelConfig:
        return self.model.replace(residual_enabled="residual" in self.subsets[subset])

    def load_data(self) -> tuple[Dataset, Dataset]:
        if self.gen_spec is not None:
            data = generate(self.gen_spec)
            return data.train, data.eval
        return read_dataset(self.dataset["train"]), read_dataset(self.dataset["eval"])

    def run_dir(self, subset: str, seed: int) -> Path:
        return self.output_dir / subset / str(seed)


def load_experiment(path: str | Path | None) -> Experiment:
    if path is None:
        return Experiment.from_dict(DEFAULT_EXPERIMENT)
    path = Path(path)
    if path.is_dir():
        path = path / "experiment.json"
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"experiment file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: experiment must be a JSON object")
    return Experiment.from_dict(data)


def _select(exp: Experiment, seeds: str | None, subsets: list[str] | None) -> Experiment:
    if seeds:
        try:
            exp.seeds = [int(s) for s in seeds.split(",")]
        except ValueError:
            raise ConfigError(f"--seeds must be a comma-separated list of integers, got {seeds!r}") from None
    if subsets:
        missing = [s for s in subsets if s not in exp.subsets]
        if missing:
            raise ConfigError(f"unknown subset(s) {missing}; defined: {sorted(exp.subsets)}")
        exp.subsets = {s: exp.subsets[s] for s in subsets}
    return exp


def _workers(n_jobs: int) -> int:
    cap = os.environ.get("COLDSTART_THREADS")
    if cap is None:
        return 1
    try:
        value = int(cap)
    except ValueError:
        raise ConfigError(f"COLDSTART_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(value, n_jobs))


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------------------
# params on disk
# ---------------------------------------------------------------------------


def save_params(path: Path, params: dict) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, **{k: params[k] for k in sorted(params)})


def load_params(path: Path) -> dict:
    with np.load(path) as data:
        return {k: data[k].copy() for k in data.files}


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_one(job) -> str:
    exp, subset, seed = job
    train_data, _ = exp.load_data()
    tc = exp.train_config(subset, seed)
    mc = exp.model_config(subset)
    try:
        result = train(train_data, mc, tc)
    except DivergenceError as exc:
        raise DivergenceError(exc.step, f"subset {subset!r}, seed {seed}: {exc}") from None
    out = exp.run_dir(subset, seed)
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / "params.npz", result.final_params)
    write_diagnostics_csv(out / "diagnostics.csv", result.diagnostics)
    summary = {"subset": subset, "seed": seed, "steps": len(result.diagnostics), "grad_ratio_mean": result.grad_ratio_mean}
    (out / "run.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return str(out)


def run_training(exp: Experiment) -> list[str]:
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    (exp.output_dir / "experiment.json").write_text(json.dumps(exp.resolved(), sort_keys=True, indent=2) + "\n")
    jobs = [(exp, subset, seed) for subset in exp.subsets for seed in exp.seeds]
    return _map(_train_one, jobs, _workers(len(jobs)))


# ---------------------------------------------------------------------------
# per-run analyses
# ---------------------------------------------------------------------------


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.mean(vals)) if vals else None


def analyse_run(exp: Experiment, subset: str, seed: int, train_data: Dataset, eval_data: Dataset) -> dict | None:
    """Every metric of one trained run, recomputed from its stored params."""
    run = exp.run_dir(subset, seed)
    if not (run / "params.npz").exists():
        return None
    mc = exp.model_config(subset)
    params = load_params(run / "params.npz")
    diagnostics = read_diagnostics_csv(run / "diagnostics.csv") if (run / "diagnostics.csv").exists() else []
    ratios = [d["grad_norm_nonhist"] / d["grad_norm_hist"] for d in diagnostics if d["grad_norm_hist"] > 0]
    grad_ratio = float(np.mean(ratios)) if ratios else None
    report = evaluate(params, mc, eval_data, exp.eval, grad_ratio)
    means = feature_means(train_data)
    ablation = {g: ablate_feature_delta(params, mc, eval_data, g, means).tolist() for g in mc.group_names}
    # magnitude of the task-averaged drop, then averaged over the groups of a block
    hist_mag = [abs(float(np.mean(v))) for g, v in ablation.items() if g.startswith("hist")]
    nonhist_mag = [abs(float(np.mean(v))) for g, v in ablation.items() if g.startswith("nonhist")]
    return {
        "hits_all": report.hits_all,
        "hits_cold": report.hits_cold,
        "hits_all_mean": _mean(report.hits_all),
        "hits_cold_mean": _mean(report.hits_cold),
        "pr_auc_all": report.pr_auc_all,
        "pr_auc_cold": report.pr_auc_cold,
        "pr_auc_all_mean": _mean(report.pr_auc_all),
        "pr_auc_cold_mean": _mean(report.pr_auc_cold),
        "score_gap": report.score_gap,
        "score_gap_positive_mean": _mean(report.score_gap["positive"]),
        "score_gap_negative_mean": _mean(report.score_gap["negative"]),
        "grad_ratio_mean": grad_ratio,
        "effective_rank": report.effective_rank,
        "pca_spectrum": report.pca_spectrum,
        "ablation_delta": ablation,
        "ablation_hist_mean_abs": _mean(hist_mag),
        "ablation_nonhist_mean_abs": _mean(nonhist_mag),
        "mmd_skips": sum(int(d["mmd_skipped"]) for d in diagnostics),
        "steps": len(diagnostics),
    }


def _analyse_job(job):
    exp, subset, seed = job
    train_data, eval_data = exp.load_data()
    return analyse_run(exp, subset, seed, train_data, eval_data)


def analyse_all(exp: Experiment) -> dict[str, dict[int, dict | None]]:
    jobs = [(exp, subset, seed) for subset in exp.subsets for seed in exp.seeds]
    workers = _workers(len(jobs))
    if workers <= 1:
        train_data, eval_data = exp.load_data()
        results = [analyse_run(exp, s, seed, train_data, eval_data) for _, s, seed in jobs]
    else:
        results = _map(_analyse_job, jobs, workers)
    out: dict[str, dict[int, dict | None]] = {s: {} for s in exp.subsets}
    for (_, subset, seed), res in zip(jobs, results):
        out[subset][seed] = res
    return out


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

SUMMARY_METRICS = (
    "hits_cold_mean",
    "hits_all_mean",
    "pr_auc_all_mean",
    "pr_auc_cold_mean",
    "score_gap_positive_mean",
    "score_gap_negative_mean",
    "grad_ratio_mean",
    "effective_rank",
    "ablation_hist_mean_abs",
    "ablation_nonhist_mean_abs",
)
LIFT_METRICS = ("hits_cold_mean", "hits_all_mean", "pr_auc_all_mean", "pr_auc_cold_mean")


def _stats(values: list) -> dict:
    vals = [float(v) for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return {"mean": float(np.mean(vals)), "std": std, "n": len(vals)}


def build_report(exp: Experiment, runs: dict[str, dict[int, dict | None]]) -> dict:
    base_params = count_params(exp.model.replace(residual_enabled=False))["total"]
    subsets_out = {}
    for subset, per_seed in runs.items():
        present = {s: r for s, r in per_seed.items() if r is not None}
        total = count_params(exp.model_config(subset))["total"]
        subsets_out[subset] = {
            "techniques": sorted(exp.subsets[subset]),
            "missing_seeds": sorted(s for s, r in per_seed.items() if r is None),
            "params": {
                "total": total,
                "increase": total - base_params,
                "increase_pct": 100.0 * (total / base_params - 1.0),
            },
            "summary": {m: _stats([r[m] for r in present.values()]) for m in SUMMARY_METRICS},
            "per_seed": {str(s): r for s, r in sorted(present.items())},
        }
    base = subsets_out.get(BASELINE)
    for name, entry in subsets_out.items():
        lifts = {}
        for m in LIFT_METRICS:
            ref = None if base is None else base["summary"][m]["mean"]
            val = entry["summary"][m]["mean"]
            if ref is None or val is None:
                lifts[m] = {"delta": None, "lift_pct": None}
            else:
                lifts[m] = {"delta": val - ref, "lift_pct": None if ref == 0 else 100.0 * (val - ref) / ref}
        entry["vs_baseline"] = lifts
        if base is not None:
            # paired per-seed differences (same seed, same data)
            paired = {}
            for s, r in entry["per_seed"].items():
                b = base["per_seed"].get(s)
                if b is not None:
                    paired[s] = {m: (None if r[m] is None or b[m] is None else r[m] - b[m]) for m in LIFT_METRICS}
            entry["vs_baseline_per_seed"] = paired
    return {
        "version": REPORT_VERSION,
        "baseline": BASELINE if base is not None else None,
        "experiment": exp.resolved(),
        "subsets": subsets_out,
    }


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_plot_csvs(out_dir: Path, exp: Experiment, runs: dict) -> None:
    rows_pca, rows_gap, rows_abl, rows_grad = [], [], [], []
    for subset, per_seed in runs.items():
        for seed, r in sorted(per_seed.items()):
            if r is None:
                continue
            for i, v in enumerate(r["pca_spectrum"]):
                rows_pca.append([subset, seed, i + 1, v])
            for polarity, values in sorted(r["score_gap"].items()):
                for t, v in enumerate(values):
                    rows_gap.append([subset, seed, t, polarity, v])
            for group, deltas in r["ablation_delta"].items():
                for t, v in enumerate(deltas):
                    rows_abl.append([subset, seed, group, t, v])
            diag = exp.run_dir(subset, seed) / "diagnostics.csv"
            if diag.exists():
                for d in read_diagnostics_csv(diag):
                    ratio = d["grad_norm_nonhist"] / d["grad_norm_hist"] if d["grad_norm_hist"] > 0 else None
                    rows_grad.append([subset, seed, d["step"], ratio])
    tables = {
        "pca_spectrum.csv": (["subset", "seed", "component", "explained_variance_ratio"], rows_pca),
        "score_gaps.csv": (["subset", "seed", "task", "polarity", "gap"], rows_gap),
        "ablation_deltas.csv": (["subset", "seed", "group", "task", "delta_pr_auc"], rows_abl),
        "grad_ratio.csv": (["subset", "seed", "step", "grad_ratio"], rows_grad),
    }
    for name, (header, rows) in tables.items():
        with open(out_dir / name, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows([[_fmt(v) for v in row] for row in rows])


def write_report(exp: Experiment) -> dict:
    runs = analyse_all(exp)
    report = build_report(exp, runs)
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    (exp.output_dir / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    write_plot_csvs(exp.output_dir, exp, runs)
    return report


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    spec_data = {}
    if args.spec:
        try:
            spec_data = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"spec file not found: {args.spec}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.spec}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if "gen_spec" in spec_data:
            spec_data = spec_data["gen_spec"]
    else:
        spec_data = DEFAULT_GEN_SPEC
    try:
        spec = GenSpec.from_dict(spec_data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    data = generate(spec)
    out = Path(args.out or "data")
    out.mkdir(parents=True, exist_ok=True)
    for split in (data.train, data.eval):
        write_dataset(out / f"{split.meta['split']}.jsonl", split)
        print(
            f"{split.meta['split']}: {len(split)} instances, {len(split.group_rows())} queries, "
            f"{int(split.is_cold.sum())} cold, positives per task {split.labels.sum(axis=0).tolist()}"
        )
    return EXIT_OK


def _experiment(args) -> Experiment:
    exp = load_experiment(args.spec)
    if args.out:
        exp.output_dir = Path(args.out)
    return _select(exp, args.seeds, args.subset)


def cmd_train(args) -> int:
    exp = _experiment(args)
    for path in run_training(exp):
        print(path)
    return EXIT_OK


def _need_outputs(args) -> Experiment:
    # evaluate / diagnose / report read the experiment written by train
    if args.spec is None and args.out and (Path(args.out) / "experiment.json").exists():
        exp = load_experiment(Path(args.out))
        exp.output_dir = Path(args.out)
        return _select(exp, args.seeds, args.subset)
    return _experiment(args)


def cmd_evaluate(args) -> int:
    exp = _need_outputs(args)
    runs = analyse_all(exp)
    keys = ("hits_all", "hits_cold", "pr_auc_all", "pr_auc_cold", "score_gap", "grad_ratio_mean", "effective_rank", "pca_spectrum")
    for subset, per_seed in runs.items():
        for seed, r in per_seed.items():
            if r is None:
                print(f"{subset}/{seed}: missing")
                continue
            metrics = {k: r[k] for k in keys}
            (exp.run_dir(subset, seed) / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
            print(f"{subset}/{seed}: hits@{exp.eval.k} all={r['hits_all_mean']:.4f} cold={r['hits_cold_mean']:.4f}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    exp = _need_outputs(args)
    runs = analyse_all(exp)
    keys = ("grad_ratio_mean", "score_gap", "ablation_delta", "ablation_hist_mean_abs", "ablation_nonhist_mean_abs", "effective_rank", "pca_spectrum")
    for subset, per_seed in runs.items():
        for seed, r in per_seed.items():
            if r is None:
                print(f"{subset}/{seed}: missing")
                continue
            diag = {k: r[k] for k in keys}
            (exp.run_dir(subset, seed) / "diagnose.json").write_text(json.dumps(diag, sort_keys=True, indent=2) + "\n")
            print(
                f"{subset}/{seed}: grad_ratio={_fmt(r['grad_ratio_mean'])} rank={r['effective_rank']} "
                f"gap+={_fmt(r['score_gap_positive_mean'])}"
            )
    write_plot_csvs(exp.output_dir, exp, runs)
    return EXIT_OK


def cmd_report(args) -> int:
    exp = _need_outputs(args)
    report = write_report(exp)
    for name, entry in report["subsets"].items():
        s = entry["summary"]
        print(
            f"{name:28s} cold={_num(s['hits_cold_mean']['mean'])} all={_num(s['hits_all_mean']['mean'])} "
            f"gap+={_num(s['score_gap_positive_mean']['mean'])} rank={_num(s['effective_rank']['mean'])} "
            f"params=+{entry['params']['increase_pct']:.2f}%"
            + (f" missing={entry['missing_seeds']}" if entry["missing_seeds"] else "")
        )
    print(exp.output_dir / "report.json")
    return EXIT_OK


def _num(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coldrank", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "generate": (cmd_generate, "write train/eval JSON Lines datasets"),
        "train": (cmd_train, "train every technique subset x seed"),
        "evaluate": (cmd_evaluate, "ranking metrics for trained runs"),
        "diagnose": (cmd_diagnose, "gradient, gap, ablation and PCA analyses"),
        "report": (cmd_report, "consolidated report.json and plot CSVs"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--spec", help="generator spec (generate) or experiment JSON; default: built-in")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        if name != "generate":
            p.add_argument("--seeds", help="comma-separated seeds overriding the experiment's")
            p.add_argument("--subset", action="append", help="restrict to this subset (repeatable)")
        p.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GenerationError as exc:
        print(f"generation error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetFormatError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except DivergenceError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
