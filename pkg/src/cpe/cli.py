"""Command-line entry points: ``prepare``, ``train``, ``eval`` and ``report``.

An experiment is one YAML file::

    name: c10-consistent
    output_dir: runs/c10-consistent
    seeds: [0, 1, 2]
    dataset: {kind: cifar, root: data/, num_classes: 10}
    split: {num_classes: 10, n1: 1500, m1: 3000, gamma_l: 100, distribution_case: consistent}
    encoder: {kind: wrn, depth: 28, widen: 2}
    train: {total_steps: 250000, eval_interval: 5000}

Failures exit nonzero and print one JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .data import (
    Corpus,
    SplitSpec,
    build_split,
    gaussian_mixture,
    load_cifar,
    load_npz,
    read_manifest,
    write_manifest,
)
from .metrics import GROUP_NAMES, evaluation_records, format_mean_std, mean_std
from .model import build_model, load_checkpoint
from .trainer import LAST_CHECKPOINT, METRICS_LOG, TrainConfig, TrainData, fit, seed_everything

log = logging.getLogger("cpe")

SUMMARY = "summary.json"
CONFIG_SNAPSHOT = "config.json"
SPLIT_REF = "split.json"


class CLIError(Exception):
    """Expected failure with a message meant for the user."""


class MissingCorpusError(CLIError):
    pass


class EmptyRunDirError(CLIError):
    pass


@dataclass
class ExperimentConfig:
    split: dict
    dataset: dict = field(default_factory=lambda: {"kind": "gaussian"})
    encoder: dict = field(default_factory=lambda: {"kind": "mlp", "hidden": [64, 64]})
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    seeds: list = field(default_factory=lambda: [0])
    name: str = "experiment"

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        self.split_spec(self.seeds[0])  # validates

    def split_spec(self, seed: int) -> SplitSpec:
        return SplitSpec(**{**self.split, "seed": seed})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "split" not in d:
            raise ValueError("config needs a 'split' section")
        return cls(**d)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise CLIError(f"config file not found: {path}")
    return ExperimentConfig.from_dict(yaml.safe_load(path.read_text()) or {})


def load_corpus(dataset: dict) -> Corpus:
    kind = dataset.get("kind", "gaussian")
    params = {k: v for k, v in dataset.items() if k != "kind"}
    try:
        if kind == "gaussian":
            return gaussian_mixture(**params)
        if kind == "cifar":
            return load_cifar(params["root"], params.get("num_classes", 10))
        if kind == "npz":
            return load_npz(params["path"])
    except FileNotFoundError as exc:
        raise MissingCorpusError(str(exc)) from exc
    raise CLIError(f"unknown dataset kind {kind!r}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


def variant_name(single_expert: bool, cbn: bool) -> str:
    return {(False, True): "cpe", (False, False): "experts_only",
            (True, True): "cbn_only", (True, False): "fixmatch"}[(single_expert, cbn)]


# ---------------------------------------------------------------------------
# prepare


def manifest_path(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.output_dir) / "splits" / f"seed{seed}.json"


def cmd_prepare(cfg: ExperimentConfig, corpus: Corpus | None = None) -> list[dict]:
    corpus = corpus if corpus is not None else load_corpus(cfg.dataset)
    out = []
    for seed in cfg.seeds:
        split = build_split(corpus.y, cfg.split_spec(seed))
        path = write_manifest(split, manifest_path(cfg, seed))
        out.append({"seed": seed, "manifest": str(path), "sha256": _sha256(path)})
    return out


# ---------------------------------------------------------------------------
# train / eval


def _evaluator(corpus: Corpus, data: TrainData, split, rho: float, tags: dict):
    """Metrics callback; the only place hidden unlabeled labels are read."""

    def evaluate(model, step):
        recs = evaluation_records(
            model, corpus.x_test, corpus.y_test, data.x_unlabeled, split.diagnostics.read(),
            rho, data.x_labeled, data.y_labeled.numpy(),
        )
        return [{**tags, **r} for r in recs]

    return evaluate


def _final_summary(run_dir: Path) -> dict:
    recs = [json.loads(ln) for ln in (run_dir / METRICS_LOG).read_text().splitlines()]
    last = max(r["step"] for r in recs)
    final = [r for r in recs if r["step"] == last]
    out = {"step": last}
    for r in final:
        if r["metric"] == "top1":
            out["top1"] = r["value"]
        elif r["metric"] == "pseudo_f1" and r["group"] == "overall":
            out.setdefault("pseudo_f1", {})[str(r["expert"])] = r["value"]
        elif r["metric"] == "mask_rate":
            out.setdefault("mask_rate", {})[str(r["expert"])] = r["value"]
    return out


def run_dir_for(cfg: ExperimentConfig, variant: str, seed: int) -> Path:
    return Path(cfg.output_dir) / variant / f"seed{seed}"


def train_one(cfg: ExperimentConfig, seed: int, variant: str, corpus: Corpus) -> dict:
    train_cfg = replace(cfg.train, seed=seed)
    mpath = manifest_path(cfg, seed)
    if mpath.exists():
        split = read_manifest(mpath)
        if split.spec != cfg.split_spec(seed):
            raise CLIError(f"{mpath} was prepared from a different split spec")
    else:
        split = build_split(corpus.y, cfg.split_spec(seed))
        write_manifest(split, mpath)
    run_dir = run_dir_for(cfg, variant, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {**cfg.to_dict(), "train": train_cfg.to_dict(), "seeds": [seed], "variant": variant}
    (run_dir / CONFIG_SNAPSHOT).write_text(_dump(snapshot))
    (run_dir / SPLIT_REF).write_text(_dump({"manifest": str(mpath), "sha256": _sha256(mpath)}))

    seed_everything(seed)
    encoder = dict(cfg.encoder)
    if encoder.get("kind", "mlp") == "mlp":
        encoder.setdefault("in_dim", int(np.prod(corpus.x.shape[1:])))
    model = build_model(encoder, corpus.num_classes, train_cfg.num_experts)
    data = TrainData.from_split(corpus, split)
    tags = {"run": cfg.name, "case": split.spec.distribution_case, "variant": variant, "seed": seed}
    fit(model, data, train_cfg, run_dir=run_dir,
        evaluate=_evaluator(corpus, data, split, train_cfg.rho, tags))
    summary = {**tags, **_final_summary(run_dir)}
    (run_dir / SUMMARY).write_text(_dump(summary))
    return summary


def aggregate(summaries: list[dict]) -> dict:
    accs = [s["top1"] for s in summaries]
    m, sd = mean_std(accs)
    return {"seeds": [s["seed"] for s in summaries], "top1": accs, "mean": m, "std": sd,
            "formatted": format_mean_std(accs)}


def cmd_train(cfg: ExperimentConfig, single_expert: bool = False, no_cbn: bool = False,
              dry_run: bool = False, corpus: Corpus | None = None) -> dict:
    cfg.train = replace(cfg.train, single_expert=single_expert or cfg.train.single_expert,
                        cbn_enabled=cfg.train.cbn_enabled and not no_cbn)
    variant = variant_name(cfg.train.single_expert, cfg.train.cbn_enabled)
    if dry_run:
        return {"valid": True, "variant": variant, "config": cfg.to_dict()}
    corpus = corpus if corpus is not None else load_corpus(cfg.dataset)
    summaries = [train_one(cfg, s, variant, corpus) for s in cfg.seeds]
    agg = {"variant": variant, **aggregate(summaries)}
    (Path(cfg.output_dir) / variant / "aggregate.json").write_text(_dump(agg))
    return agg


def cmd_eval(run_dir: str | Path, corpus: Corpus | None = None) -> dict:
    """Re-evaluate the last checkpoint of a run and append the records."""
    run_dir = Path(run_dir)
    ckpt = run_dir / LAST_CHECKPOINT
    if not ckpt.exists():
        raise CLIError(f"no checkpoint at {ckpt}")
    snap = json.loads((run_dir / CONFIG_SNAPSHOT).read_text())
    split = read_manifest(json.loads((run_dir / SPLIT_REF).read_text())["manifest"])
    corpus = corpus if corpus is not None else load_corpus(snap["dataset"])
    model, payload = load_checkpoint(ckpt)
    data = TrainData.from_split(corpus, split)
    tags = {"run": snap["name"], "case": split.spec.distribution_case,
            "variant": snap["variant"], "seed": snap["seeds"][0]}
    step = payload["step"]
    recs = _evaluator(corpus, data, split, snap["train"]["rho"], tags)(model, step)
    metrics = run_dir / METRICS_LOG
    keep = [ln for ln in (metrics.read_text().splitlines() if metrics.exists() else [])
            if json.loads(ln)["step"] != step]
    metrics.write_text("".join(ln + "\n" for ln in keep + [json.dumps({"step": step, **r}) for r in recs]))
    summary = {**tags, **_final_summary(run_dir)}
    (run_dir / SUMMARY).write_text(_dump(summary))
    return summary


# ---------------------------------------------------------------------------
# report


def collect_metrics(paths) -> list[list[dict]]:
    """Final-step records of every metrics log found under ``paths``."""
    files = []
    for p in map(Path, paths):
        if p.is_file() and p.name == METRICS_LOG:
            files.append(p)
        elif p.is_dir():
            files += sorted(p.rglob(METRICS_LOG))
    runs = []
    for f in sorted(set(files)):
        recs = [json.loads(ln) for ln in f.read_text().splitlines() if ln.strip()]
        if recs:
            last = max(r["step"] for r in recs)
            runs.append([r for r in recs if r["step"] == last])
    if not runs:
        raise EmptyRunDirError(f"no metrics records under {', '.join(map(str, paths))}")
    return runs


def _key(rec) -> tuple:
    return (rec.get("run", ""), rec.get("case", ""), rec.get("variant", ""), rec.get("seed", 0))


def _csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def build_tables(runs: list[list[dict]]) -> dict:
    acc: dict[tuple, list] = {}
    f1: dict[tuple, list] = {}
    features, confusions = [], []
    for recs in runs:
        k = _key(recs[0])
        run_id = "/".join(map(str, k))
        for r in recs:
            if r["metric"] == "top1":
                acc.setdefault(k[:3], []).append((k[3], r["value"]))
            elif r["metric"] == "pseudo_f1":
                f1.setdefault((k[1], k[2], r["expert"], r["group"]), []).append(r["value"])
            elif r["metric"] == "feature_stats":
                v = r["value"]
                features.append({"run_id": run_id, "group": r["group"], "count": v["count"],
                                 "mean": v["mean"], "std": v["std"]})
            elif r["metric"] == "confusion":
                confusions.append({"run_id": run_id, "matrix": r["value"]})

    accuracy = []
    for (run, case, variant), vals in sorted(acc.items()):
        vals.sort()
        m, s = mean_std([v for _, v in vals])
        accuracy.append({"run": run, "case": case, "variant": variant,
                         "seeds": [sd for sd, _ in vals], "top1": [v for _, v in vals],
                         "mean": m, "std": s, "formatted": format_mean_std([v for _, v in vals])})
    group_f1 = []
    for (case, variant, expert, group), vals in sorted(f1.items(), key=lambda kv: tuple(map(str, kv[0]))):
        m, s = mean_std(vals)
        group_f1.append({"case": case, "variant": variant, "expert": expert, "group": group,
                         "mean": m, "std": s, "n": len(vals)})
    features.sort(key=lambda r: (r["run_id"], r["group"]))
    confusions.sort(key=lambda r: r["run_id"])
    return {"accuracy": accuracy, "group_f1": group_f1, "features": features,
            "confusion": confusions}


def _plots(tables: dict, out: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    meta = {"Software": None}
    rows = [r for r in tables["group_f1"] if r["group"] != "overall"]
    cases = sorted({r["case"] for r in rows})
    if rows:
        fig, axes = plt.subplots(1, len(cases), figsize=(4 * len(cases), 3), squeeze=False)
        for ax, case in zip(axes[0], cases):
            sub = [r for r in rows if r["case"] == case]
            experts = sorted({r["expert"] for r in sub})
            for i, e in enumerate(experts):
                vals = [next((r["mean"] for r in sub if r["expert"] == e and r["group"] == g), np.nan)
                        for g in GROUP_NAMES]
                ax.bar(np.arange(3) + 0.25 * i, vals, width=0.25, label=f"E{e + 1}")
            ax.set_xticks(np.arange(3) + 0.25, GROUP_NAMES)
            ax.set_ylim(0, 1)
            ax.set_title(case)
        axes[0][0].set_ylabel("pseudo-label F1")
        axes[0][-1].legend()
        fig.tight_layout()
        fig.savefig(out / "group_f1.png", metadata=meta)
        plt.close(fig)

    if tables["features"]:
        fig, ax = plt.subplots(figsize=(4, 4))
        for r in tables["features"]:
            ax.scatter(r["mean"][0], r["std"][0], s=12, label=r["group"])
        handles, labels = ax.get_legend_handles_labels()
        uniq = dict(zip(labels, handles))
        ax.legend(uniq.values(), uniq.keys(), fontsize=6)
        ax.set_xlabel("channel 0 mean")
        ax.set_ylabel("channel 0 std")
        fig.tight_layout()
        fig.savefig(out / "feature_stats.png", metadata=meta)
        plt.close(fig)

    for i, r in enumerate(tables["confusion"]):
        fig, ax = plt.subplots(figsize=(4, 4))
        cm = np.asarray(r["matrix"], dtype=float)
        ax.imshow(cm / np.maximum(cm.sum(axis=1, keepdims=True), 1), vmin=0, vmax=1)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(r["run_id"], fontsize=7)
        fig.tight_layout()
        fig.savefig(out / f"confusion_{i:03d}.png", metadata=meta)
        plt.close(fig)


def cmd_report(paths, out_dir: str | Path, plots: bool = True) -> dict:
    tables = build_tables(collect_metrics(paths))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in tables.items():
        (out / f"{name}.json").write_text(_dump(rows))
    (out / "accuracy.csv").write_text(
        _csv(tables["accuracy"], ["run", "case", "variant", "formatted", "mean", "std"]))
    (out / "group_f1.csv").write_text(
        _csv(tables["group_f1"], ["case", "variant", "expert", "group", "mean", "std", "n"]))
    if plots:
        _plots(tables, out)
    return {"out_dir": str(out), "runs": sum(len(r["top1"]) for r in tables["accuracy"]),
            "accuracy": {f"{r['case']}/{r['variant']}": r["formatted"] for r in tables["accuracy"]}}


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cpe", description="Long-tailed semi-supervised training with complementary experts.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("config", help="experiment YAML file")
        sp.add_argument("--seeds", type=int, help="use seeds 0..N-1 instead of the config's list")
        sp.add_argument("--output-dir", help="override output_dir")
        return sp

    with_config(sub.add_parser("prepare", help="write split manifests"))
    t = with_config(sub.add_parser("train", help="train every seed and aggregate"))
    t.add_argument("--no-cbn", action="store_true", help="disable the classwise BN branches")
    t.add_argument("--single-expert", action="store_true", help="train one head with tau=0")
    t.add_argument("--steps", type=int, help="override train.total_steps")
    t.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    e = sub.add_parser("eval", help="re-evaluate the last checkpoint of run directories")
    e.add_argument("run_dirs", nargs="+")
    r = sub.add_parser("report", help="tables and figures from metrics logs")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out", required=True, help="directory for tables and figures")
    r.add_argument("--no-plots", action="store_true")
    return p


def _configure(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seeds is not None:
        cfg.seeds = list(range(args.seeds))
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if getattr(args, "steps", None) is not None:
        cfg.train = replace(cfg.train, total_steps=args.steps)
    return cfg


def run(argv=None) -> dict | list:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(message)s")
    if args.command == "prepare":
        return cmd_prepare(_configure(args))
    if args.command == "train":
        return cmd_train(_configure(args), args.single_expert, args.no_cbn, args.dry_run)
    if args.command == "eval":
        return [cmd_eval(d) for d in args.run_dirs]
    return cmd_report(args.run_dirs, args.out, plots=not args.no_plots)


def main(argv=None) -> int:
    try:
        result = run(argv)
    except Exception as exc:  # every failure becomes one machine-readable line
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 2 if isinstance(exc, CLIError) else 1
    print(json.dumps(result, indent=1, sort_keys=True, ensure_ascii=False))
    return 0


if __name__ == "__main__":
    sys.exit(main())
