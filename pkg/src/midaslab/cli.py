"""Command-line front end: ``midaslab {gen,train,attr,effects,icl,plot,run-all}``.

Every command reads one JSON config (flat sections per module, all
optional) and writes into the output directory, which defaults to
``$MIDASLAB_OUT`` or ``./midaslab_out``. Each run appends its outputs and
their SHA-256 digests to ``manifest.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import effects as fx
from . import icl
from .attribution import DEFAULT_M_STEPS, VARIANTS, attribute, save_attributions, load_attribution_means
from .model import ModelConfig, MultimodalTransformer, accuracy, load_checkpoint, save_checkpoint
from .synth import GenConfig, build_triples, generate, load_dataset, load_triples, save_dataset, save_triples, split
from .trainer import BIAS_MODES, TrainConfig, save_loss_curve, train

log = logging.getLogger("midaslab")

EXIT_CONFIG, EXIT_IO, EXIT_DATA = 2, 3, 4
OUT_ENV = "MIDASLAB_OUT"

CSV_SCHEMAS = """\
CSV outputs (one header row, comma separated, floats in round-trip repr):
  loss_<mode>.csv        epoch, loss
  effects.csv            model, analysis, measure, variant, interaction_type,
                         mean, ci_low, ci_high, n, filtered
                         (measure is miate or midas; variant and
                         interaction_type are empty on miate rows)
  accuracy.csv           model, split, n, accuracy
  icl_dual.csv           check, n_cases, max_abs_diff
  icl_auc.csv            experiment, n_rows, n_train, n_valid, n_test, n_trees, test_auc
  icl_importance.csv     experiment, grouping, group, n_features, n_occurrences
  icl_rows_<exp>.csv     subtask, target, W:<j>..., dW:<j>...
"""

DEFAULT_CONFIG = {
    "gen": {"both_groups": 300, "extra_11": 300, "extra_10": 200, "extra_01": 200, "extra_00": 300,
            "seed": 1, "holdout": 0.25},
    "analysis": {"text_groups": 78, "image_groups": 84, "extra_00": 100, "seed": 2, "id_prefix": "a",
                 "k": 3, "pick_seed": 0},
    "model": {},
    "train": {"epochs": 20, "bias_modes": ["balanced", "text_only"]},
    "attr": {"m_steps": DEFAULT_M_STEPS},
    "effects": {"analyses": ["image", "text"], "variants": list(VARIANTS), "filter_correct": False,
                "n_boot": 1000, "seed": 0, "aggregate_picks": False},
    "icl": {"n_tasks": 100, "d_model": 8, "n_zsl": 5, "n_demo": 4, "n_rows": 300, "n_tokens": 8,
            "n_toy_rows": 60, "seed": 0},
    "plot": {},
}


class CliError(Exception):
    code = 1


class ConfigProblem(CliError):
    code = EXIT_CONFIG


class InputProblem(CliError):
    code = EXIT_IO


class DataProblem(CliError):
    code = EXIT_DATA


# -------------------------------------------------------------------- config


def _merge(base: dict, override: dict) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for section, values in override.items():
        out.setdefault(section, {}).update(values)
    return out


def _split_keys(section: dict, cls, extra: Sequence[str]) -> tuple[dict, dict]:
    names = {f.name for f in dataclasses.fields(cls)}
    return ({k: v for k, v in section.items() if k in names},
            {k: v for k, v in section.items() if k not in names and k in extra})


def validate_config(cfg: dict) -> list[str]:
    """Every violated field across all sections, as readable messages."""
    problems = []
    unknown = set(cfg) - set(DEFAULT_CONFIG)
    problems += [f"unknown section [{s}]" for s in sorted(unknown)]
    checks = {
        "gen": (GenConfig, ("holdout",)),
        "analysis": (GenConfig, ("k", "pick_seed")),
        "model": (ModelConfig, ()),
        "train": (TrainConfig, ("bias_modes",)),
    }
    for section, (cls, extra) in checks.items():
        values = cfg.get(section, {})
        fields, _ = _split_keys(values, cls, extra)
        bad = set(values) - set(fields) - set(extra)
        problems += [f"[{section}] unknown key {k!r}" for k in sorted(bad)]
        try:
            obj = GenConfig.from_dict(fields) if cls is GenConfig else cls(**fields)
            if cls is GenConfig:
                obj.validate()
        except (TypeError, ValueError) as exc:
            problems += [f"[{section}] {msg.strip()}" for msg in str(exc).split(";")]
    holdout = cfg.get("gen", {}).get("holdout", 0.25)
    if not 0 < holdout < 1:
        problems.append("[gen] holdout must lie in (0, 1)")
    if cfg.get("analysis", {}).get("k", 3) < 1:
        problems.append("[analysis] k must be >= 1")
    for mode in cfg.get("train", {}).get("bias_modes", []):
        if mode not in BIAS_MODES:
            problems.append(f"[train] bias_modes entry {mode!r} not in {BIAS_MODES}")
    eff = cfg.get("effects", {})
    for a in eff.get("analyses", []):
        if a not in fx.ANALYSES:
            problems.append(f"[effects] analysis {a!r} not in {fx.ANALYSES}")
    for v in eff.get("variants", []):
        if v not in VARIANTS:
            problems.append(f"[effects] variant {v!r} not in {VARIANTS}")
    if cfg.get("attr", {}).get("m_steps", 1) < 1:
        problems.append("[attr] m_steps must be >= 1")
    return problems


def load_config(path: str | None) -> dict:
    user = {}
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise InputProblem(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigProblem(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict) or not all(isinstance(v, dict) for v in user.values()):
            raise ConfigProblem(f"config file {path} must map section names to objects")
    cfg = _merge(DEFAULT_CONFIG, user)
    problems = validate_config(cfg)
    if problems:
        raise ConfigProblem("invalid configuration:\n  " + "\n  ".join(problems))
    return cfg


def _gen_config(section: dict) -> GenConfig:
    fields, _ = _split_keys(section, GenConfig, ())
    return GenConfig.from_dict(fields)


def _train_config(section: dict, bias_mode: str) -> TrainConfig:
    fields, _ = _split_keys(section, TrainConfig, ())
    fields["bias_mode"] = bias_mode
    return TrainConfig(**fields)


# ------------------------------------------------------------------ manifest


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Manifest:
    def __init__(self, out: Path, config_path: str | None, cfg: dict):
        self.out = out
        self.path = out / "manifest.json"
        self.data = {"version": __version__, "config_path": config_path, "config": cfg, "commands": {}}

    def record(self, command: str, inputs: Sequence[Path], outputs: Sequence[Path], seconds: float) -> None:
        self.data["commands"][command] = {
            "inputs": {p.name: sha256(p) for p in inputs},
            "outputs": {p.name: sha256(p) for p in outputs},
            "seconds": round(seconds, 3),
        }
        if self.path.exists():
            try:
                old = json.loads(self.path.read_text())
                merged = dict(old.get("commands", {}))
                merged.update(self.data["commands"])
                self.data["commands"] = merged
            except json.JSONDecodeError:
                pass
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True) + "\n")


# ------------------------------------------------------------------- loading


def _need(path: Path) -> Path:
    if not path.exists():
        raise InputProblem(f"missing input file: {path}")
    return path


def _load_dataset(path: Path):
    try:
        return load_dataset(_need(path))
    except (ValueError, KeyError, TypeError) as exc:
        raise InputProblem(f"corrupt dataset {path}: {exc}") from exc


def _load_triples(path: Path, dataset):
    try:
        return load_triples(_need(path), dataset)
    except (ValueError, KeyError, TypeError) as exc:
        raise InputProblem(f"corrupt triples file {path}: {exc}") from exc


def _load_model(path: Path):
    if str(path) == "oracle":
        return fx.OracleModel()
    try:
        return load_checkpoint(_need(path))
    except (ValueError, KeyError, TypeError) as exc:
        raise InputProblem(f"corrupt checkpoint {path}: {exc}") from exc


# ------------------------------------------------------------------ commands


def cmd_gen(cfg: dict, out: Path) -> list[Path]:
    gen, ana = cfg["gen"], cfg["analysis"]
    full = generate(_gen_config(gen))
    train_set, held = split(full, gen.get("holdout", 0.25), _gen_config(gen).seed)
    analysis_set = generate(_gen_config(ana))
    triples = build_triples(analysis_set, k=ana.get("k", 3), seed=ana.get("pick_seed", 0))
    paths = [out / "train.jsonl", out / "heldout.jsonl", out / "analysis.jsonl", out / "triples.jsonl"]
    for p, data in zip(paths[:3], (train_set, held, analysis_set)):
        save_dataset(data, p)
    save_triples(triples, paths[3])
    log.info("gen: %d train, %d held-out, %d analysis samples, %d triples",
             len(train_set), len(held), len(analysis_set), len(triples))
    return paths


def cmd_train(cfg: dict, out: Path, dataset: Path, bias_modes: Sequence[str] | None = None) -> list[Path]:
    samples = _load_dataset(dataset)
    model_cfg = ModelConfig(**cfg["model"])
    held_path = out / "heldout.jsonl"
    held = _load_dataset(held_path) if held_path.exists() else []
    paths, acc_rows = [], []
    for mode in bias_modes or cfg["train"].get("bias_modes", ["balanced"]):
        tcfg = _train_config(cfg["train"], mode)
        try:
            model, curve = train(MultimodalTransformer.init(model_cfg), samples, tcfg)
        except ValueError as exc:
            raise DataProblem(str(exc)) from exc
        ckpt, loss = out / f"checkpoint_{mode}.json", out / f"loss_{mode}.csv"
        save_checkpoint(model, ckpt)
        save_loss_curve(curve, loss)
        paths += [ckpt, loss]
        for name, data in (("train", samples), ("heldout", held)):
            if data:
                acc_rows.append((mode, name, len(data), accuracy(model, data)))
        log.info("train[%s]: final loss %.4f", mode, curve[-1])
    acc = out / "accuracy.csv"
    with open(acc, "w") as f:
        f.write("model,split,n,accuracy\n")
        for mode, name, n, a in acc_rows:
            f.write(f"{mode},{name},{n},{a!r}\n")
    return paths + [acc]


def _models(out: Path, checkpoints: Sequence[str] | None) -> list[tuple[str, Path]]:
    if checkpoints:
        return [(Path(c).stem.replace("checkpoint_", ""), Path(c)) for c in checkpoints]
    found = sorted(out.glob("checkpoint_*.json"))
    if not found:
        raise InputProblem(f"no checkpoint_*.json in {out}; run `midaslab train` first")
    return [(p.stem.replace("checkpoint_", ""), p) for p in found]


def cmd_attr(cfg: dict, out: Path, checkpoints: Sequence[str] | None = None) -> list[Path]:
    analysis = _load_dataset(out / "analysis.jsonl")
    triples = _load_triples(out / "triples.jsonl", analysis)
    members = fx._unique_members(triples)
    paths = []
    for name, ckpt in _models(out, checkpoints):
        model = _load_model(ckpt)
        m = cfg["attr"].get("m_steps", DEFAULT_M_STEPS)
        path = out / f"attributions_{name}.jsonl"
        save_attributions((attribute(model, s, m) for s in members), path)
        paths.append(path)
        log.info("attr[%s]: %d samples, m=%d", name, len(members), m)
    return paths


def cmd_effects(cfg: dict, out: Path, checkpoints: Sequence[str] | None = None, analyses=None, variants=None,
                filter_correct: bool | None = None) -> list[Path]:
    e = cfg["effects"]
    analyses = analyses or e.get("analyses", list(fx.ANALYSES))
    variants = variants if variants is not None else e.get("variants", list(VARIANTS))
    filt = e.get("filter_correct", False) if filter_correct is None else filter_correct
    analysis_set = _load_dataset(out / "analysis.jsonl")
    triples = _load_triples(out / "triples.jsonl", analysis_set)
    reports = []
    for name, ckpt in _models(out, checkpoints):
        model = _load_model(ckpt)
        chosen = fx.filter_correct(model, triples) if filt else triples
        dump = out / f"attributions_{name}.jsonl"
        scores = load_attribution_means(dump) if dump.exists() and variants else None
        if variants and scores is None and isinstance(model, fx.OracleModel):
            raise DataProblem("the oracle model has no attention; use --variants none")
        report = fx.EffectReport(name, filt)
        cache = None if scores is not None else fx.ScoreCache(model, cfg["attr"].get("m_steps", DEFAULT_M_STEPS))
        for analysis in analyses:
            sel = fx.select(chosen, analysis)
            report.n_triples[analysis] = len(sel)
            if not sel:
                log.warning("effects[%s]: no %s triples left", name, analysis)
                continue
            kw = dict(n_boot=e.get("n_boot", 1000), seed=e.get("seed", 0), aggregate_picks=e.get("aggregate_picks", False))
            report.miate[analysis] = fx.miate(model, sel, analysis, **kw)
            report.midas[analysis] = {}
            for v in variants:
                if scores is not None:
                    by_id = {sid: means[v] for sid, means in scores.items()}
                    report.midas[analysis][v] = fx.midas_from_scores(sel, by_id, analysis, **kw)
                else:
                    report.midas[analysis][v] = fx.midas(model, sel, analysis, v, cache=cache, **kw)
        reports.append(report)
    csv_path, json_path = out / "effects.csv", out / "effects.json"
    fx.write_reports(reports, csv_path, json_path)
    return [csv_path, json_path]


def cmd_icl(cfg: dict, out: Path) -> list[Path]:
    c = cfg["icl"]
    rng = np.random.default_rng(c.get("seed", 0))
    d = c.get("d_model", 8)
    tasks = [icl.LinearAttentionTask.random(d, c.get("n_zsl", 5), c.get("n_demo", 4), rng) for _ in range(c.get("n_tasks", 100))]
    dual_gap = max(float(np.max(np.abs(icl.forward_icl(t) - icl.forward_dual(t)))) for t in tasks)
    compose_gap = 0.0
    for t in tasks:
        parts = {s: (rng.normal(size=(d, d)), rng.normal(size=(d, d))) for s in icl.SUBTASKS}
        direct = sum((W + dW) @ t.q for W, dW in parts.values())
        compose_gap = max(compose_gap, float(np.max(np.abs(icl.subtask_compose(t.q, parts) - direct))))
    dual = out / "icl_dual.csv"
    dual.write_text(f"check,n_cases,max_abs_diff\ndual_form,{len(tasks)},{dual_gap!r}\n"
                    f"subtask_compose,{len(tasks)},{compose_gap!r}\n")

    seed, n_rows, n_tok = c.get("seed", 0), c.get("n_rows", 300), c.get("n_tokens", 8)
    experiments = {"separable": icl.separable_rows(n_rows, n_tok, seed), "null": icl.null_rows(n_rows, n_tok, seed)}
    ckpt = out / "checkpoint_balanced.json"
    analysis_path = out / "analysis.jsonl"
    if ckpt.exists() and analysis_path.exists() and c.get("n_toy_rows", 0) > 0:
        model = _load_model(ckpt)
        samples = _load_dataset(analysis_path)
        demos = [s for s in samples if s.group_id is None][:8] or samples[:8]
        queries = [s for s in samples if s not in demos][: c["n_toy_rows"]]
        experiments["toy"] = icl.toy_rows(model, queries, demos)

    paths = [dual]
    auc_path, imp_path = out / "icl_auc.csv", out / "icl_importance.csv"
    with open(auc_path, "w") as fa, open(imp_path, "w") as fi:
        fa.write("experiment,n_rows,n_train,n_valid,n_test,n_trees,test_auc\n")
        fi.write("experiment,grouping,group,n_features,n_occurrences\n")
        for name, rows in experiments.items():
            try:
                res = icl.train_tree_ensemble(rows, seed=seed)
            except ValueError as exc:
                log.warning("icl[%s]: skipped (%s)", name, exc)
                continue
            s = res.model.split
            fa.write(f"{name},{len(rows)},{len(s['train'])},{len(s['valid'])},{len(s['test'])},"
                     f"{len(res.model.trees)},{res.test_auc!r}\n")
            for row in res.importance.rows:
                fi.write(",".join([name, *map(str, row)]) + "\n")
            rows_path = out / f"icl_rows_{name}.csv"
            icl.save_rows(rows, rows_path)
            paths.append(rows_path)
    return paths + [auc_path, imp_path]


def cmd_plot(cfg: dict, out: Path, report: Path | None = None) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "midaslab"
    matplotlib.rcParams["svg.fonttype"] = "none"
    rows = fx.read_report_csv(_need(report or out / "effects.csv"))
    models = sorted({r["model"] for r in rows})
    paths = []

    def save(fig, name):
        path = out / name
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
        paths.append(path)

    def bars(ax, labels, groups, title):
        width = 0.8 / max(len(groups), 1)
        for i, (gname, values) in enumerate(groups):
            means = [v[0] for v in values]
            err = np.array([[v[0] - v[1] for v in values], [v[2] - v[0] for v in values]])
            ax.bar(np.arange(len(labels)) + i * width, means, width, yerr=err, capsize=3, label=gname)
        ax.set_xticks(np.arange(len(labels)) + width * (len(groups) - 1) / 2)
        ax.set_xticklabels(labels)
        ax.axhline(0, color="black", linewidth=0.8)
        ax.set_title(title)
        ax.legend(fontsize="small")

    def triple(r):
        return float(r["mean"]), float(r["ci_low"]), float(r["ci_high"])

    miate_rows = [r for r in rows if r["measure"] == "miate"]
    if miate_rows:
        analyses = sorted({r["analysis"] for r in miate_rows})
        fig, ax = plt.subplots(figsize=(6, 4))
        groups = []
        for a in analyses:
            vals = [next((triple(r) for r in miate_rows if r["model"] == m and r["analysis"] == a), (0, 0, 0)) for m in models]
            groups.append((f"miATE {a}", vals))
        bars(ax, models, groups, "miATE by model")
        save(fig, "miate.svg")

    midas_rows = [r for r in rows if r["measure"] == "midas"]
    for variant in sorted({r["variant"] for r in midas_rows}):
        analyses = sorted({r["analysis"] for r in midas_rows if r["variant"] == variant})
        fig, axes = plt.subplots(1, len(analyses), figsize=(6 * len(analyses), 4), squeeze=False)
        for ax, a in zip(axes[0], analyses):
            sub = [r for r in midas_rows if r["variant"] == variant and r["analysis"] == a]
            types = list(dict.fromkeys(r["interaction_type"] for r in sub))
            groups = [(m, [next((triple(r) for r in sub if r["model"] == m and r["interaction_type"] == t), (0, 0, 0))
                           for t in types]) for m in models]
            bars(ax, types, groups, f"MIDAS ({variant}), {a} confounders")
        save(fig, f"midas_{variant}.svg")
    return paths


# ----------------------------------------------------------------------- cli


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="midaslab",
        description="Synthetic multimodal intersectionality experiments: data, training, attribution, effects, ICL.",
        epilog=CSV_SCHEMAS + f"\nOutput directory: --out, else ${OUT_ENV}, else ./midaslab_out.\n"
               "Exit codes: 0 ok, 2 configuration, 3 missing/corrupt input, 4 unusable data.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file with sections gen, analysis, model, train, attr, effects, icl")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate train/held-out/analysis sets and confounder triples")
    t = sub.add_parser("train", parents=[common], help="train checkpoints; writes loss_<mode>.csv")
    t.add_argument("--dataset", help="training JSONL (default: <out>/train.jsonl)")
    t.add_argument("--bias-mode", choices=BIAS_MODES, action="append", dest="bias_modes")
    t.add_argument("--epochs", type=int)
    a = sub.add_parser("attr", parents=[common], help="attribution dump per checkpoint")
    a.add_argument("--checkpoint", action="append", dest="checkpoints")
    a.add_argument("--m-steps", type=int)
    e = sub.add_parser("effects", parents=[common], help="miATE and MIDAS reports (effects.csv, effects.json)")
    e.add_argument("--checkpoint", action="append", dest="checkpoints", help="checkpoint path or 'oracle'")
    e.add_argument("--analysis", choices=fx.ANALYSES, action="append", dest="analyses")
    e.add_argument("--variants", help="comma-separated subset of " + ",".join(VARIANTS) + ", or 'none'")
    e.add_argument("--filter-correct", action="store_true", default=None)
    sub.add_parser("icl", parents=[common], help="dual-form checks and meta-feature tree ensembles")
    pl = sub.add_parser("plot", parents=[common], help="SVG bar charts from effects.csv")
    pl.add_argument("--report", help="effects CSV (default: <out>/effects.csv)")
    sub.add_parser("run-all", parents=[common], help="gen, train, attr, effects, icl, plot")
    return p


def _apply_overrides(cfg: dict, args) -> dict:
    if args.seed is not None:
        for section in cfg.values():
            for key in ("seed", "pick_seed"):
                if key in section:
                    section[key] = args.seed
        cfg["model"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg["train"]["epochs"] = args.epochs
    if getattr(args, "m_steps", None) is not None:
        cfg["attr"]["m_steps"] = args.m_steps
    problems = validate_config(cfg)
    if problems:
        raise ConfigProblem("invalid configuration:\n  " + "\n  ".join(problems))
    return cfg


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(args.out or os.environ.get(OUT_ENV) or "midaslab_out")
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out, args.config, cfg)

    def step(name, fn, inputs=()):
        t0 = time.perf_counter()
        outputs = fn()
        manifest.record(name, [Path(p) for p in inputs if Path(p).exists()], outputs, time.perf_counter() - t0)
        return outputs

    variants = None
    if getattr(args, "variants", None):
        variants = [] if args.variants == "none" else [v.strip() for v in args.variants.split(",")]
        bad = [v for v in variants if v not in VARIANTS]
        if bad:
            raise ConfigProblem(f"unknown variants: {bad}")

    cmd = args.command
    if cmd in ("gen", "run-all"):
        step("gen", lambda: cmd_gen(cfg, out))
    if cmd in ("train", "run-all"):
        dataset = Path(getattr(args, "dataset", None) or out / "train.jsonl")
        step("train", lambda: cmd_train(cfg, out, dataset, getattr(args, "bias_modes", None)), [dataset])
    if cmd in ("attr", "run-all"):
        step("attr", lambda: cmd_attr(cfg, out, getattr(args, "checkpoints", None)), [out / "triples.jsonl"])
    if cmd in ("effects", "run-all"):
        step("effects", lambda: cmd_effects(cfg, out, getattr(args, "checkpoints", None), getattr(args, "analyses", None),
                                            variants, getattr(args, "filter_correct", None)), [out / "triples.jsonl"])
    if cmd in ("icl", "run-all"):
        step("icl", lambda: cmd_icl(cfg, out))
    if cmd in ("plot", "run-all"):
        report = getattr(args, "report", None)
        step("plot", lambda: cmd_plot(cfg, out, Path(report) if report else None))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except CliError as exc:
        print(f"midaslab: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
