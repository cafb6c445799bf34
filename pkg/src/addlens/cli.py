"""``addlens`` command line: train, ablate, attention, oracle, eval, export-suite.

Every option can also come from an INI file (``--config``); keys are the long
flag names with dashes turned into underscores, in any section. Flags win over
the file, the file wins over built-in defaults, and ``ADDLENS_SEED`` is used
when neither sets a seed. The resolved options are written to
``run_config.ini`` in the output directory, which ``--config`` accepts back.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis as an
from . import datagen as dg
from . import framework as fw
from . import svg
from . import training as tr
from .model import InterventionSpec, ModelConfig, TransformerModel, load_checkpoint

log = logging.getLogger("addlens")

EXIT_OK, EXIT_TARGET, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_TARGET = 0.05
WIDE_TARGET = 0.08  # 10+ digit runs
FINAL_WINDOW = 10  # logged records averaged into the reported final loss
HELDOUT_QUESTIONS = 1024


class UsageError(Exception):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


_T = tr.TrainConfig.__dataclass_fields__

# name -> (type, default); None defaults are filled in per command
OPTIONS = {
    "n_digits": (int, 5), "n_heads": (int, 3), "d_model": (int, 192), "d_mlp": (int, 768),
    "layer_norm": (_bool, True), "plus_prefix": (_bool, False),
    "steps": (int, _T["steps"].default), "batch_size": (int, _T["batch_size"].default),
    "lr": (float, _T["lr"].default), "weight_decay": (float, _T["weight_decay"].default),
    "schedule": (str, _T["schedule"].default), "warmup_steps": (int, _T["warmup_steps"].default),
    "enrichment_prob": (float, dg.GeneratorConfig.enrichment_prob),
    "log_every": (int, _T["log_every"].default), "target_loss": (float, None),
    "seed": (int, None), "out": (str, None),
    "checkpoint": (str, None), "site": (str, "resid_post"), "sweep": (str, "none"),
    "positions": (str, None), "heads": (str, None), "mode": (str, None), "threshold": (float, None),
    "category": (str, None), "suite": (str, None), "questions": (str, None), "count": (int, None),
    "question": (str, "54321+77779"), "n": (int, 3), "progress": (_bool, False),
}


def _add(p: argparse.ArgumentParser, *names: str, **choices) -> None:
    for name in (*names, *choices):
        typ = OPTIONS[name][0]
        flag = "--" + name.replace("_", "-")
        if typ is _bool:
            p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=name, type=typ, default=None, choices=choices.get(name))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="addlens", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="INI file of option values (flags override it)")
        _add(p, "seed", "out")
        return p

    p = command("train", "train a model on fresh random batches")
    _add(p, "n_digits", "n_heads", "d_model", "d_mlp", "layer_norm", "plus_prefix", "steps",
         "batch_size", "lr", "weight_decay", "warmup_steps", "enrichment_prob", "log_every",
         "target_loss", "progress", schedule=["constant", "cosine"])

    p = command("ablate", "zero/mean ablation tables")
    _add(p, "checkpoint", "positions", "heads", "threshold", "category", "questions", "count",
         site=["resid_post", "head_out"], sweep=["none", "positions", "heads"],
         mode=["zero", "mean"], suite=["mixed", "curated", "random", "file"])

    p = command("attention", "attention heatmaps and staircase report")
    _add(p, "checkpoint", "question", "count")

    p = command("oracle", "symbolic algorithm vs true sum: divergences and frequencies")
    _add(p, "n", "count", mode=["enumerate", "sample"])

    p = command("eval", "per-category loss and accuracy")
    _add(p, "checkpoint", "questions", "count", "category", suite=["curated", "random", "file", "mixed"])

    p = command("export-suite", "write the curated question list")
    _add(p, "n_digits")
    return parser


def _read_config(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.read_string("[DEFAULT]\n" + Path(path).read_text())
    flat = dict(cp.defaults())
    for section in cp.sections():
        flat.update(cp.items(section))
    return flat


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags for the options this command accepts."""
    from_file = _read_config(getattr(args, "config", None))
    unknown = set(from_file) - set(OPTIONS)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    run = {"command": args.command}
    for name, (typ, default) in OPTIONS.items():
        if not hasattr(args, name):
            continue
        value = getattr(args, name)
        if value is None and name in from_file:
            try:
                value = typ(from_file[name])
            except ValueError as exc:
                raise UsageError(f"config key {name}: {exc}") from exc
        run[name] = default if value is None else value
    if "seed" in run and run["seed"] is None:
        env = os.environ.get("ADDLENS_SEED")
        try:
            run["seed"] = int(env) if env else 0
        except ValueError as exc:
            raise UsageError(f"ADDLENS_SEED must be an integer, got {env!r}") from exc
    if run.get("out") is None:
        run["out"] = str(Path("runs") / args.command)
    return run


def write_run_config(run: dict, out: Path) -> None:
    cp = configparser.ConfigParser()
    cp["run"] = {k: str(v) for k, v in run.items() if v is not None and k != "command"}
    with open(out / "run_config.ini", "w") as fh:
        fh.write(f"# addlens {run['command']}\n")
        cp.write(fh)


def _int_list(text: str | None, what: str) -> list[int]:
    if text is None or not text.strip():
        return []
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError as exc:
        raise UsageError(f"--{what} expects comma-separated integers, got {text!r}") from exc


def _load(run: dict) -> TransformerModel:
    path = run.get("checkpoint")
    if not path:
        raise UsageError("--checkpoint is required")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _questions(run: dict, model: TransformerModel, default_suite: str) -> tuple[list[dg.Question], str]:
    n, plus = model.cfg.n_digits, model.cfg.plus_prefix
    suite = run.get("suite") or ("file" if run.get("questions") else default_suite)
    if suite == "file":
        if not run.get("questions"):
            raise UsageError("--suite file needs --questions PATH")
        if not Path(run["questions"]).is_file():
            raise UsageError(f"question file not found: {run['questions']}")
        qs = [q for q, _ in dg.read_questions(run["questions"])]
        if any(len(q.d) != n for q in qs):
            raise UsageError(f"question file holds questions that are not {n}-digit")
    elif suite == "curated":
        qs = [q for q, _ in dg.make_test_suite(n)]
    elif suite == "random":
        cfg = dg.GeneratorConfig(n, run["seed"], 0.0, plus)
        qs = dg.random_batch(cfg, run.get("count") or 1000, np.random.default_rng(run["seed"]))
    else:
        qs = an.analysis_questions(n, plus, random_count=run.get("count") or 64, seed=run["seed"])
    cat = run.get("category")
    if cat:
        cat = dg.LABEL_TO_CATEGORY.get(cat, cat)
        if cat not in fw.CATEGORIES:
            raise UsageError(f"unknown category {run['category']!r}")
        if suite == "random" or suite == "mixed":
            rng = np.random.default_rng(run["seed"])
            qs = dg.sample_category(n, cat, run.get("count") or 128, rng)
        else:
            qs = [q for q in qs if dg.classify_question(q) == cat]
    if not qs:
        raise UsageError("no questions to run on")
    return qs, suite


# ---------------------------------------------------------------- commands


def cmd_train(run: dict, out: Path) -> int:
    target = run["target_loss"]
    if target is None:
        target = WIDE_TARGET if run["n_digits"] >= 10 else DEFAULT_TARGET
        run["target_loss"] = target
    cfg = tr.TrainConfig(
        model=ModelConfig(n_digits=run["n_digits"], n_heads=run["n_heads"], d_model=run["d_model"],
                          d_mlp=run["d_mlp"], plus_prefix=run["plus_prefix"],
                          layer_norm=run["layer_norm"], seed=run["seed"]),
        data=dg.GeneratorConfig(run["n_digits"], run["seed"], run["enrichment_prob"], run["plus_prefix"]),
        steps=run["steps"], batch_size=run["batch_size"], lr=run["lr"],
        weight_decay=run["weight_decay"], schedule=run["schedule"], warmup_steps=run["warmup_steps"],
        log_every=run["log_every"],
        checkpoint=str(out / "model.ckpt"), loss_csv=str(out / "loss.csv"))
    write_run_config(run, out)
    try:
        model, records = tr.train(cfg, progress=run["progress"])
    except tr.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    heldout_cfg = dg.GeneratorConfig(cfg.model.n_digits, run["seed"] + 1_000_003, 0.0, cfg.data.plus_prefix)
    heldout = tr.evaluate(model, dg.random_batch(heldout_cfg, HELDOUT_QUESTIONS), decode=False)
    if records:
        final = float(np.mean([r.all_digits for r in records[-FINAL_WINDOW:]]))
    else:
        # nothing was trained: score the initialization on a training-mix batch
        final = tr.evaluate(model, dg.random_batch(cfg.data, HELDOUT_QUESTIONS), decode=False).loss
    if not np.isfinite(final):
        print("error: final loss is not finite", file=sys.stderr)
        return EXIT_NUMERIC

    steps = [r.step for r in records]
    n_tok = len(records[0].per_digit) if records else 0
    series = {"all": (steps, [r.all_digits for r in records])}
    for k in range(n_tok):
        label = "+" if cfg.model.plus_prefix and k == 0 else f"A{cfg.model.n_digits - k + (1 if cfg.model.plus_prefix else 0)}"
        series[label] = (steps, list(tr.smoothed([r.per_digit[k] for r in records], 10)))
    (out / "loss.svg").write_text(svg.line_chart(series, f"training loss, {cfg.model.n_digits}-digit"))

    summary = {
        "steps": cfg.steps, "final_loss": final, "heldout_loss": heldout.loss,
        "heldout_accuracy": heldout.accuracy, "target_loss": target, "met_target": final <= target,
        "phase_boundaries": tr.phase_boundaries(records) if records else {},
        "n_params": model.n_params(),
    }
    _dump(out / "summary.json", summary)
    print(f"final loss {final:.4f} (target {target}), held-out {heldout.loss:.4f}")
    if final > target:
        print(f"target loss {target} not met", file=sys.stderr)
        return EXIT_TARGET
    return EXIT_OK


def cmd_ablate(run: dict, out: Path) -> int:
    model = _load(run)
    qs, suite = _questions(run, model, "mixed")
    run["mode"] = run["mode"] or "zero"
    if run["threshold"] is None:
        run["threshold"] = an.SUITE_THRESHOLD if suite == "curated" else an.POSITION_THRESHOLD
    write_run_config(run, out)
    thr = run["threshold"]
    means = an.ablation_means(model, qs) if run["mode"] == "mean" or run["site"] == "head_out" else None
    base = tr.evaluate(model, qs, decode=False).loss
    report = {"questions": len(qs), "baseline_loss": base, "threshold": thr}

    if run["sweep"] == "positions":
        results = []
        for p in range(model.cfg.n_ctx):
            results.append(an.ablate_positions(model, qs, [p], mode=run["mode"], threshold=thr,
                                               means=means, group=True))
        an.write_position_table(out / "positions.csv", results)
        an.write_failure_table(out / "failures.csv",
                               {int(r.label): r.failures for r in results if r.important})
        report["rows"] = [{"position": r.label, "loss": r.loss, "important": r.important} for r in results]
    elif run["sweep"] == "heads":
        results = an.head_sweep(model, qs, thr, means)
        an.write_head_table(out / "heads.csv", results)
        report["rows"] = [{"head": int(r.label), "loss": r.loss, "important": r.important} for r in results]
    else:
        positions = _int_list(run["positions"], "positions")
        heads = _int_list(run["heads"], "heads")
        if run["site"] == "head_out" and heads and run["positions"] is None:
            positions = list(range(model.cfg.n_ctx))
        spec = None
        if positions:
            spec = InterventionSpec(run["site"], frozenset(positions),
                                    frozenset(heads) if heads else None, run["mode"], means)
        res = tr.evaluate(model, qs, spec, decode=False)
        report.update(loss=res.loss, important=res.loss > thr, positions=positions, heads=heads,
                      by_category=res.by_category)
        with open(out / "ablation.csv", "w") as fh:
            fh.write("site,positions,heads,mode,average_loss,threshold,important\n")
            fh.write(f"{run['site']},{' '.join(map(str, positions)) or '-'},{' '.join(map(str, heads)) or '-'},"
                     f"{run['mode']},{res.loss:.6f},{thr},{int(res.loss > thr)}\n")
    _dump(out / "ablation.json", report)
    print(f"baseline loss {base:.4f} on {len(qs)} questions; tables in {out}")
    return EXIT_OK


def cmd_attention(run: dict, out: Path) -> int:
    model = _load(run)
    write_run_config(run, out)
    try:
        q = dg.Question.parse(run["question"])
    except ValueError as exc:
        raise UsageError(f"--question: {exc}") from exc
    if len(q.d) != model.cfg.n_digits:
        raise UsageError(f"--question must be {model.cfg.n_digits}-digit")
    tokens = dg.tokenize(q, model.cfg.plus_prefix)[None]
    pat = model.attention_patterns(tokens)[0]  # [H, L, L]
    labels = [dg.ID_TO_CHAR[int(t)] for t in tokens[0]]
    for h in range(model.cfg.n_heads):
        (out / f"attention_head{h}.svg").write_text(svg.heatmap(pat[h], labels, f"{q} head {h}"))
    _dump(out / "attention.json", {"question": str(q), "tokens": labels, "pattern": pat.round(6).tolist()})

    cfg = dg.GeneratorConfig(model.cfg.n_digits, run["seed"], 0.0, model.cfg.plus_prefix)
    sample = dg.random_batch(cfg, run.get("count") or 64, np.random.default_rng(run["seed"]))
    report = an.detect_double_staircase(model, sample)
    _dump(out / "staircase.json", report.to_dict())
    print(f"staircase matched fraction {report.matched_fraction:.3f}, head lags {report.offsets}")
    return EXIT_OK


def cmd_oracle(run: dict, out: Path) -> int:
    n, mode = run["n"], run.get("mode") or "enumerate"
    run["mode"] = mode
    if n < 1:
        raise UsageError("--n must be >= 1")
    write_run_config(run, out)
    if mode == "enumerate":
        try:
            rows = fw.divergence_set(n)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        total = 10 ** (2 * n)
    else:
        total = run.get("count") or 100_000
        rows = fw.sampled_divergences(n, total, run["seed"])
    fw.write_divergence_csv(out / "divergences.csv", rows)
    cols = fw.column_frequencies()
    freq = {
        "column": {"P_column_carry": cols["MC1"], "P_MC1": cols["MC1"], "P_MS9": cols["MS9"],
                   "P_BA_only": cols["BA_only"]},
        "categories": fw.task_frequencies(n),
        "divergences": len(rows), "questions": total, "mode": mode, "n": n,
    }
    _dump(out / "frequencies.json", freq)
    print(f"{len(rows)} divergences out of {total} questions; P(column carry) = {cols['MC1']:.2f}")
    return EXIT_OK


def cmd_eval(run: dict, out: Path) -> int:
    model = _load(run)
    qs, suite = _questions(run, model, "curated")
    run["suite"] = suite
    write_run_config(run, out)
    res = tr.evaluate(model, qs)
    report = {
        "suite": suite, "questions": len(qs), "loss": res.loss, "accuracy": res.accuracy,
        "by_category": res.by_category,
        "by_label": {dg.SUITE_LABELS[c]: v for c, v in res.by_category.items()},
        "by_digit_task": {f"A{j}_{t}": v for (j, t), v in sorted(res.by_digit_task.items())},
    }
    _dump(out / "eval.json", report)
    print(f"loss {res.loss:.4f} accuracy {res.accuracy:.3f} on {len(qs)} questions")
    for c, v in res.by_category.items():
        print(f"  {dg.SUITE_LABELS[c]:12s} n={v['count']:4d} loss {v['loss']:.4f} acc {v['accuracy']:.3f}")
    return EXIT_OK


def cmd_export_suite(run: dict, out: Path) -> int:
    write_run_config(run, out)
    path = out / f"suite_{run['n_digits']}.txt"
    dg.write_questions(path, dg.make_test_suite(run["n_digits"]))
    print(path)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "ablate": cmd_ablate, "attention": cmd_attention,
            "oracle": cmd_oracle, "eval": cmd_eval, "export-suite": cmd_export_suite}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = resolve(args)
        out = an.ensure_dir(run["out"])
        return COMMANDS[args.command](run, out)
    except UsageError as exc:
        print(f"addlens {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"addlens {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"addlens {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
