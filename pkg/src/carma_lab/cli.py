"""Command line: ``gen``, ``train``, ``cap``, ``synonyms``, ``report``.

Exit codes: 0 ok, 2 config / input error, 3 runtime failure.  Output goes
under ``--root`` (default ``$CARMA_LAB_DIR`` or ``./carma_lab_out``).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .experiment import (ConfigError, base_model, cap_rows, config_from_dict, config_hash, fit_variant,
                         fmt, load_config, model_tag, provenance, synonym_table, synonym_values)
from .metrics import VARIANTS
from .model import ContractError, Transformer
from .tasks import GenerationError, dataset_from_tsv, dataset_to_tsv, generate
from .train import DivergenceError, overhead_report

log = logging.getLogger("carma_lab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class InputError(ValueError):
    """Missing or malformed input files."""


def default_root() -> Path:
    return Path(os.environ.get("CARMA_LAB_DIR", "carma_lab_out"))


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def csv_text(header: Sequence[str], rows: Sequence[Sequence], cfg_hash: str) -> str:
    buf = io.StringIO()
    buf.write(provenance(cfg_hash) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def read_csv(path: Path) -> list[dict]:
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x != ""]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x != ""]
    except ValueError:
        raise ConfigError(f"expected a comma-separated number list, got {text!r}") from None


# -- gen --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    ds = generate(args.task, args.seed, args.n)
    out = Path(args.out) if args.out else args.root / "data" / args.task
    tsv = dataset_to_tsv(ds)
    manifest = {
        "task": args.task, "seed": args.seed, "n_items": args.n,
        "splits": {k: len(v) for k, v in ds.splits().items()},
        "generator_hash": hashlib.sha256(tsv.encode()).hexdigest(),
        "version": __version__,
    }
    atomic_write(out / "dataset.tsv", tsv)
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {sum(manifest['splits'].values())} items to {out}")
    return EXIT_OK


def load_dataset(data_dir: Path):
    tsv, man = data_dir / "dataset.tsv", data_dir / "manifest.json"
    if not tsv.exists() or not man.exists():
        raise InputError(f"no dataset in {data_dir}; run `gen` first")
    manifest = json.loads(man.read_text())
    text = tsv.read_text()
    if hashlib.sha256(text.encode()).hexdigest() != manifest.get("generator_hash"):
        raise InputError(f"{tsv} does not match its manifest hash")
    return dataset_from_tsv(text, manifest["seed"]), manifest


# -- train --------------------------------------------------------------------------

def _train_seed(cfg_dict: dict, data_dir: str, variants: list[str], seed: int, runs_root: str) -> list[dict]:
    cfg = config_from_dict(cfg_dict)
    ds, manifest = load_dataset(Path(data_dir))
    base = base_model(cfg, ds, seed)
    out = []
    for variant in variants:
        res = fit_variant(cfg, ds, variant, seed, base=base)
        run_dir = Path(runs_root) / variant / ds.task / str(seed)
        eff = res.model.config
        meta = {
            "variant": variant, "task": ds.task, "seed": seed,
            "config": cfg.to_dict(), "config_hash": cfg.hash(),
            "effective_lambda": 0.0 if variant != "carma" else cfg.carma.lam,
            "data_dir": str(Path(data_dir).resolve()), "data_hash": manifest["generator_hash"],
            "model": model_tag(res.model), "n_layers": eff.n_layers,
            "test_accuracy": res.test_accuracy, "val_accuracy": res.log.val_accuracy,
            "best_epoch": res.log.best_epoch, "wall_ms": res.log.wall_ms,
            "pretrain_wall_ms": res.pretrain_log.wall_ms if res.pretrain_log else 0.0,
            "version": __version__,
        }
        atomic_write(run_dir / "model.json", json.dumps(res.model.state_dict()))
        atomic_write(run_dir / "trainlog.jsonl", res.log.to_jsonl())
        atomic_write(run_dir / "run.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
        out.append({"variant": variant, "seed": seed, "test_accuracy": res.test_accuracy,
                    "dir": str(run_dir)})
    return out


def parse_variants(text: str) -> list[str]:
    names = list(VARIANTS) if text == "all" else text.split(",")
    bad = [v for v in names if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variant(s) {bad}; expected {VARIANTS} or 'all'")
    return names


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    variants = parse_variants(args.variant)
    seeds = int_list(args.seeds)
    if not seeds:
        raise ConfigError("--seeds is empty")
    data_dir = Path(args.data) if args.data else args.root / "data" / cfg.data.task
    _, manifest = load_dataset(data_dir)
    if manifest["task"] != cfg.data.task:
        raise ConfigError(f"dataset task {manifest['task']!r} != config data.task {cfg.data.task!r}")
    runs_root = Path(args.runs) if args.runs else args.root / "runs"
    jobs = [(cfg.to_dict(), str(data_dir), variants, s, str(runs_root)) for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = [r for rs in pool.map(_train_seed, *zip(*jobs)) for r in rs]
    else:
        results = [r for j in jobs for r in _train_seed(*j)]
    for r in results:
        print(f"{r['variant']:>8} seed={r['seed']} test_acc={r['test_accuracy']:.2f} -> {r['dir']}")
    return EXIT_OK


# -- evaluation commands ------------------------------------------------------------

def discover_runs(runs_root: Path, task: str) -> list[tuple[dict, Path]]:
    found = []
    for variant in VARIANTS:
        base = runs_root / variant / task
        if not base.is_dir():
            continue
        for d in sorted(base.iterdir(), key=lambda p: (len(p.name), p.name)):
            if (d / "run.json").exists() and (d / "model.json").exists():
                found.append((json.loads((d / "run.json").read_text()), d))
    if not found:
        raise InputError(f"no trained runs for task {task!r} under {runs_root}")
    hashes = {m["data_hash"] for m, _ in found}
    if len(hashes) > 1:
        raise InputError("runs were trained on different datasets; evaluate them separately")
    return found


def _load_runs(args):
    runs_root = Path(args.runs) if args.runs else args.root / "runs"
    found = discover_runs(runs_root, args.task)
    ds, _ = load_dataset(Path(found[0][0]["data_dir"]))
    models = [(m, Transformer.load(d / "model.json")) for m, d in found]
    run_hash = config_hash(sorted((m["variant"], m["seed"], m["config_hash"]) for m, _ in found))
    return ds, models, run_hash


def cmd_cap(args) -> int:
    ds, models, run_hash = _load_runs(args)
    cfg_hash = config_hash({"runs": run_hash, "layers": args.layers, "modes": args.modes, "cmd": "cap"})
    rows = cap_rows([(m["variant"], model) for m, model in models], ds, args.layers, args.modes)
    header = ["variant", "task", "layer", "normalized_layer", "mode", "accuracy", "n_runs"]
    body = [[r.variant, r.task, r.layer, fmt(r.normalized_layer), r.mode, fmt(r.accuracy), r.n_runs]
            for r in rows]
    out = Path(args.out) if args.out else args.root / "results" / f"cap_{args.task}.csv"
    atomic_write(out, csv_text(header, body, cfg_hash))
    print(f"wrote {len(body)} CAP rows to {out}")
    return EXIT_OK


def cmd_synonyms(args) -> int:
    ds, models, run_hash = _load_runs(args)
    rates, seeds = float_list(args.rates), int_list(args.seeds)
    if not rates or not all(0 < r <= 1 for r in rates):
        raise ConfigError(f"--rates must be numbers in (0, 1], got {args.rates!r}")
    if not seeds:
        raise ConfigError("--seeds is empty")
    cfg_hash = config_hash({"runs": run_hash, "rates": rates, "seeds": seeds, "cmd": "synonyms"})
    runs = [(m["variant"], m["seed"], model) for m, model in models]
    values = synonym_values(runs, ds, rates, seeds)
    table = synonym_table(values, model_tag(models[0][1]))
    header = ["Model", "Ver.", "Task", "Int.", "CS", "CV", "NI", "n_runs", "n_seeds", "flag"]
    body = [[r.model, r.variant, r.task, f"{round(r.rate * 100)}%", fmt(r.cs, 2), fmt(r.cv, 4),
             fmt(r.ni, 2), r.n_runs, r.n_seeds, r.flag] for r in table]
    out = Path(args.out) if args.out else args.root / "results" / f"synonyms_{args.task}.csv"
    atomic_write(out, csv_text(header, body, cfg_hash))
    rec_header = ["variant", "task", "intervention", "param", "layer", "seed", "metric", "value"]
    rec_body = [[v.variant, v.task, "synonym", fmt(v.rate, 2), "-", f"{v.run_seed}/{v.synonym_seed}",
                 "consist_syn", fmt(v.consist_syn)] for v in values]
    atomic_write(out.with_name(out.stem + "_records.csv"), csv_text(rec_header, rec_body, cfg_hash))
    for r in table:
        if r.flag:
            log.warning("%s %s %s: %s", r.variant, r.task, r.rate, r.flag)
    print(f"wrote {len(body)} synonym rows to {out}")
    return EXIT_OK


# -- report -------------------------------------------------------------------------

SVG_COLORS = {"original": "#7f7f7f", "ft": "#1f77b4", "carma": "#d62728"}


def svg_lines(series: dict[str, list[tuple[float, float]]], title: str, width: int = 480,
              height: int = 320) -> str:
    """Minimal line plot: x in [0, 1] (normalised layer), y in [0, 100] (accuracy)."""
    pad = 40
    sx = lambda x: pad + x * (width - 2 * pad)            # noqa: E731
    sy = lambda y: height - pad - y / 100 * (height - 2 * pad)  # noqa: E731
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    for i, (name, pts) in enumerate(series.items()):
        color = SVG_COLORS.get(name, "#2ca02c")
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in sorted(pts))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" text-anchor="end" fill="{color}" '
                     f'font-size="12">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(args) -> int:
    results = Path(args.results) if args.results else args.root / "results"
    caps = sorted(results.glob("cap_*.csv")) if results.is_dir() else []
    syns = sorted(p for p in results.glob("synonyms_*.csv") if not p.stem.endswith("_records")) \
        if results.is_dir() else []
    if not caps and not syns:
        raise InputError(f"nothing to report in {results}: no cap_*.csv or synonyms_*.csv")
    out = Path(args.out) if args.out else results
    digest = hashlib.sha256()
    for p in caps + syns:
        digest.update(p.name.encode() + b"\0" + p.read_bytes())
    cfg_hash = digest.hexdigest()[:16]
    md = ["# CARMA lab report", "", provenance(cfg_hash).lstrip("# "), ""]

    for p in caps:
        rows = [r for r in read_csv(p) if r["mode"] == "average"]
        task = rows[0]["task"] if rows else p.stem[4:]
        plot = [[r["normalized_layer"], r["variant"], r["accuracy"]] for r in rows]
        atomic_write(out / f"plot_cap_{task}.csv",
                     csv_text(["normalized_layer", "variant", "accuracy"], plot, cfg_hash))
        md += [f"## CAP ({task}, accuracy averaged over mean/max/sum pooling)", "",
               "| layer/L | " + " | ".join(sorted({r['variant'] for r in rows}, key=VARIANTS.index)) + " |"]
        variants = sorted({r["variant"] for r in rows}, key=VARIANTS.index)
        md.append("|---" * (len(variants) + 1) + "|")
        for x in sorted({r["normalized_layer"] for r in rows}, key=float):
            cells = [next((r["accuracy"] for r in rows if r["variant"] == v and r["normalized_layer"] == x), "")
                     for v in variants]
            md.append(f"| {x} | " + " | ".join(cells) + " |")
        md.append("")
        if args.svg:
            series = {v: [(float(r["normalized_layer"]), float(r["accuracy"])) for r in rows
                          if r["variant"] == v] for v in variants}
            atomic_write(out / f"plot_cap_{task}.svg", svg_lines(series, f"CAP accuracy ({task})"))

    for p in syns:
        rows = read_csv(p)
        md += [f"## Synonym replacement ({p.stem[9:]})", "",
               "| Model | Ver. | Task | Int. | CS | CV | NI | flag |", "|---|---|---|---|---|---|---|---|"]
        md += [f"| {r['Model']} | {r['Ver.']} | {r['Task']} | {r['Int.']} | {r['CS']} | {r['CV']} | "
               f"{r['NI']} | {r['flag']} |" for r in rows]
        md.append("")

    if args.runs:
        md += _overhead_section(Path(args.runs))
    atomic_write(out / "report.md", "\n".join(md).rstrip() + "\n")
    print(f"wrote report to {out / 'report.md'}")
    return EXIT_OK


def _overhead_section(runs_root: Path) -> list[str]:
    from .train import TrainLog
    lines = ["## Training overhead (CARMA / FT wall clock, paired by task and seed)", ""]
    pairs = []
    for ft_dir in sorted((runs_root / "ft").glob("*/*")):
        c_dir = runs_root / "carma" / ft_dir.parent.name / ft_dir.name
        if (c_dir / "trainlog.jsonl").exists() and (ft_dir / "trainlog.jsonl").exists():
            ratio = overhead_report(TrainLog.read(ft_dir / "trainlog.jsonl"),
                                    TrainLog.read(c_dir / "trainlog.jsonl"))
            pairs.append((ft_dir.parent.name, ft_dir.name, ratio))
    if not pairs:
        return lines + ["no paired ft/carma runs found", ""]
    lines += ["| task | seed | ratio |", "|---|---|---|"]
    lines += [f"| {t} | {s} | {r:.2f} |" for t, s, r in pairs]
    lines += ["", f"mean ratio: {np.mean([r for _, _, r in pairs]):.2f}", ""]
    return lines


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="carma-lab", description=__doc__.splitlines()[0])
    p.add_argument("--root", type=Path, default=None, help="output root (default $CARMA_LAB_DIR)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--task", required=True, choices=["idm", "sc"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train original / ft / carma variants")
    t.add_argument("--config", default=None)
    t.add_argument("--variant", default="all", help="comma list or 'all'")
    t.add_argument("--seeds", default="0")
    t.add_argument("--data", default=None)
    t.add_argument("--runs", default=None)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--jobs", type=int, default=1)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("cap", help="constituent-aware pooling sweep")
    c.add_argument("--task", required=True, choices=["idm", "sc"])
    c.add_argument("--runs", default=None)
    c.add_argument("--layers", default="all")
    c.add_argument("--modes", default="all")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_cap)

    s = sub.add_parser("synonyms", help="synonym replacement robustness table")
    s.add_argument("--task", required=True, choices=["idm", "sc"])
    s.add_argument("--runs", default=None)
    s.add_argument("--rates", default="0.25,0.40")
    s.add_argument("--seeds", default="0,1,2,3,4")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_synonyms)

    r = sub.add_parser("report", help="summary markdown and plot data")
    r.add_argument("--results", default=None)
    r.add_argument("--runs", default=None, help="also summarise training overhead")
    r.add_argument("--out", default=None)
    r.add_argument("--svg", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.root is None:
        args.root = default_root()
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, GenerationError, InputError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 -- surface anything else as a runtime failure
        log.debug("unhandled error", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
