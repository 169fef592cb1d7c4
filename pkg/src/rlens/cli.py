"""Command-line driver: gen -> train -> explain -> eval -> report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
degeneracy. Every flag falls back to an ``RLENS_<FLAG>`` environment variable
before its built-in default.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis
from ._util import ConfigError, DataError, DegenerateError, RlensError, substream_seed, thread_map
from .attribution import METHODS, Heatmap, explain, load_heatmap, save_heatmap
from .metrics import DEFAULT_N_GRID, eer, faithfulness, perturbation_test
from .model import ModelConfig, TrainHyper, load_checkpoint, predict_proba, save_checkpoint, train
from .signal import GeneratorSpec, load_dataset, save_dataset, synth_split

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DEGENERATE = 0, 2, 3, 4

DEFAULT_SPLITS = {
    "train": {"bonafide": 400, "spoof": 400},
    "eval": {"bonafide": 100, "spoof": 100},
    "partial": {"bonafide": 100, "partial": 300},
}
TABLE1_COLUMNS = ["method", "AUC-pos", "AUC-neg", "AI", "AD", "AG", "Fid-In"]
TABLE2_COLUMNS = ["method", "RCQ-BR", "RCQ-SR", "RMA", "RRA"]
RCQ_COLUMNS = ["subset", "category", "count", "S_c", "RCQ", "normalized_RCQ"]


@dataclass
class RunConfig:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    splits: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_SPLITS)))
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainHyper = field(default_factory=TrainHyper)
    explain: dict = field(default_factory=lambda: {"score": "logit", "layer_order": "forward",
                                                  "shap_samples": 20})
    eval: dict = field(default_factory=lambda: {"n_grid": list(DEFAULT_N_GRID), "vad_theta": 2.0,
                                               "predicted_spoof_only": True})
    raw: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if not path:
            return cls()
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config {path}: {e}") from None
        unknown = set(d) - {"generator", "splits", "model", "train", "explain", "eval"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(raw=d)
        if "generator" in d:
            cfg.generator = GeneratorSpec.from_dict(d["generator"])
        if "splits" in d:
            cfg.splits = d["splits"]
        try:
            if "model" in d:
                cfg.model = ModelConfig.from_dict(d["model"])
            if "train" in d:
                cfg.train = TrainHyper.from_dict(d["train"])
        except TypeError as e:
            raise ConfigError(str(e)) from None
        cfg.explain.update(d.get("explain", {}))
        cfg.eval.update(d.get("eval", {}))
        return cfg

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:16]


# -- helpers ------------------------------------------------------------------------------

def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Sequence[dict], provenance: dict) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    Path(path).write_text(buf.getvalue())
    _sidecar(path, provenance)


def _sidecar(path, provenance: dict) -> None:
    Path(str(path) + ".meta.json").write_text(json.dumps(provenance, indent=1, sort_keys=True) + "\n")


def _methods(arg: Sequence[str] | None) -> list[str]:
    methods = []
    for a in arg or []:
        methods.extend(m.strip() for m in a.split(",") if m.strip())
    if not methods:
        raise ConfigError("no method selected")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
    return list(dict.fromkeys(methods))


def _n_grid(arg: str | None, cfg: RunConfig) -> tuple[float, ...]:
    if not arg:
        return tuple(float(n) for n in cfg.eval["n_grid"])
    try:
        return tuple(float(v) for v in arg.split(","))
    except ValueError:
        raise ConfigError(f"bad --n-grid {arg!r}") from None


def _load_heatmaps(directory: Path, method: str, utterances) -> list[Heatmap]:
    out = []
    for u in utterances:
        path = directory / method / u.id
        if not path.with_suffix(".f32").exists():
            raise DataError(f"missing {method} heatmap for {u.id} under {directory}")
        uid, h = load_heatmap(path)
        if uid != u.id or len(h) != len(u.waveform):
            raise DataError(f"heatmap {path} does not match utterance {u.id}")
        out.append(h)
    return out


# -- subcommands ------------------------------------------------------------------------------

def cmd_gen(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    for split, counts in cfg.splits.items():
        bad = set(counts) - {"bonafide", "spoof", "partial"}
        if bad:
            raise ConfigError(f"split {split}: unknown classes {sorted(bad)}")
        split_seed = substream_seed(args.seed, "split", split)
        utts = synth_split(cfg.generator, split_seed, counts.get("bonafide", 0),
                           counts.get("spoof", 0), counts.get("partial", 0), prefix=f"{split}_")
        path = save_dataset(utts, out / split, split_seed, cfg.generator)
        print(f"{split}: {len(utts)} utterances -> {path}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    _, utts = load_dataset(args.manifest)
    heldout = load_dataset(args.heldout)[1] if args.heldout else None
    params, log = train(utts, cfg.model, cfg.train, args.seed, heldout)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out)
    prov = {"command": "train", "seed": args.seed, "config_hash": cfg.digest(),
            "manifest_sha256": _sha(args.manifest),
            "heldout_sha256": _sha(args.heldout) if args.heldout else None}
    _sidecar(out, prov)
    log_path = out.with_suffix(".log.json")
    log_path.write_text(json.dumps({
        "epoch_loss": log.losses, "first_batch_loss": log.first_batch_loss,
        "heldout_eer": log.heldout_eer,
    }, indent=1) + "\n")
    if log.heldout_ids:
        rows = [{"id": i, "label": l, "score": s}
                for i, l, s in zip(log.heldout_ids, log.heldout_labels, log.heldout_scores)]
        write_csv(out.with_suffix(".scores.csv"), ["id", "label", "score"], rows, prov)
    print(f"held-out EER: {log.heldout_eer:.4f}%")
    return EXIT_OK


def cmd_explain(args, cfg: RunConfig) -> int:
    methods = _methods(args.method)
    params = load_checkpoint(args.checkpoint)
    _, utts = load_dataset(args.manifest)
    out = Path(args.out)
    ex = cfg.explain
    prov = {"seed": args.seed, "config_hash": cfg.digest(), "checkpoint_sha256": _sha(args.checkpoint),
            "score": ex["score"], "layer_order": ex["layer_order"]}
    for method in methods:
        (out / method).mkdir(parents=True, exist_ok=True)

        def run(u, method=method):
            h = explain(params, u, method, seed=args.seed, score=ex["score"],
                        layer_order=ex["layer_order"], shap_samples=int(ex["shap_samples"]))
            save_heatmap(h, out / method / u.id, u.id, prov)
            return h.degenerate

        degenerate = thread_map(run, utts, args.threads)
        print(f"{method}: {len(utts)} heatmaps ({sum(degenerate)} degenerate) -> {out / method}")
    return EXIT_OK


def _categories(kind: str, utts, theta: float):
    if kind == "vad":
        return [analysis.energy_vad(u.waveform, theta=theta) for u in utts]
    if kind == "tertiles":
        return [analysis.energy_tertiles(u.waveform, analysis.energy_vad(u.waveform, theta=theta))
                for u in utts]
    if kind == "regions":
        return [analysis.region_categories(u) for u in utts]
    if kind.startswith("dir:"):
        d = Path(kind[4:])
        return [analysis.load_category_file(d / f"{u.id}.csv", len(u.waveform)) for u in utts]
    raise ConfigError(f"unknown category source {kind!r} (vad, tertiles, regions, dir:PATH)")


def cmd_eval(args, cfg: RunConfig) -> int:
    methods = _methods(args.method)
    which = list(dict.fromkeys(args.which or ["table1"]))
    params = load_checkpoint(args.checkpoint)
    _, utts = load_dataset(args.manifest)
    utts = sorted(utts, key=lambda u: u.id)
    hdir = Path(args.heatmaps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_grid = _n_grid(args.n_grid, cfg)
    prov = {"command": "eval", "seed": args.seed, "config_hash": cfg.digest(),
            "checkpoint_sha256": _sha(args.checkpoint), "manifest_sha256": _sha(args.manifest),
            "methods": methods, "n_grid": list(n_grid)}

    heatmaps = {m: _load_heatmaps(hdir, m, utts) for m in methods}
    for m, hs in heatmaps.items():
        if all(h.degenerate for h in hs):
            raise DegenerateError(f"every {m} heatmap is all-zero")

    targets = np.array([u.target for u in utts])
    scores = predict_proba(params, np.stack([u.samples for u in utts]), threads=args.threads)[:, 1]
    threshold = eer(scores, targets).threshold if len(set(targets.tolist())) == 2 else 0.5

    if "table1" in which:
        t1, long_rows, curve_rows = [], [], []
        for m in methods:
            fr = faithfulness(params, utts, heatmaps[m], threads=args.threads)
            curves = {pol: perturbation_test(params, utts, heatmaps[m], pol, args.seed, n_grid,
                                             args.threads) for pol in ("positive", "negative")}
            row = {"method": m, "AUC-pos": curves["positive"].auc, "AUC-neg": curves["negative"].auc,
                   "AI": fr.ai, "AD": fr.ad, "AG": fr.ag, "Fid-In": fr.fid_in}
            t1.append(row)
            long_rows += [{"method": m, "metric": k, "value": row[k]} for k in TABLE1_COLUMNS[1:]]
            long_rows += [{"method": m, "metric": "AD-skipped", "value": fr.ad_skipped},
                          {"method": m, "metric": "AG-skipped", "value": fr.ag_skipped}]
            for pol, c in curves.items():
                curve_rows.append({"method": m, "polarity": pol, "n": 0.0, "EER": c.baseline_eer})
                curve_rows += [{"method": m, "polarity": pol, "n": n, "EER": e}
                               for n, e in zip(c.n_grid, c.eers)]
        write_csv(out / "table1.csv", TABLE1_COLUMNS, t1, prov)
        write_csv(out / "faithfulness.csv", ["method", "metric", "value"], long_rows, prov)
        write_csv(out / "perturbation.csv", ["method", "polarity", "n", "EER"], curve_rows, prov)
        print(f"wrote {out / 'table1.csv'}")

    if "table2" in which:
        partial = [i for i, u in enumerate(utts) if u.regions is not None]
        if not partial:
            raise DataError("table2 needs partial-spoof utterances in the manifest")
        keep = [i for i in partial if not cfg.eval["predicted_spoof_only"] or scores[i] >= threshold]
        if not keep:
            raise DegenerateError("no partial utterance is predicted spoof")
        sel = [utts[i] for i in keep]
        t2 = []
        for m in methods:
            hs = [heatmaps[m][i] for i in keep]
            loc = analysis.localization(hs, sel)
            rep = analysis.rcq(hs, [analysis.region_categories(u) for u in sel])
            if rep.degenerate:
                raise DegenerateError(f"{m}: zero relevance on every selected partial utterance")
            t2.append({"method": m, "RCQ-BR": rep.normalized.get("BR", float("nan")),
                       "RCQ-SR": rep.normalized.get("SR", float("nan")), "RMA": loc.rma, "RRA": loc.rra})
        write_csv(out / "table2.csv", TABLE2_COLUMNS, t2, {**prov, "n_selected": len(keep),
                                                            "threshold": threshold})
        print(f"wrote {out / 'table2.csv'} ({len(keep)} partial utterances)")

    if "rcq" in which:
        cats = _categories(args.categories, utts, float(cfg.eval["vad_theta"]))
        subsets = [args.subset] if args.subset else ["bonafide", "spoof"]
        for m in methods:
            rows = []
            for subset in subsets:
                if subset != "all" and not np.any(targets == (subset == "spoof")):
                    continue
                rep = analysis.rcq(heatmaps[m], cats, targets, subset)
                if rep.degenerate:
                    raise DegenerateError(f"{m}: zero relevance in subset {subset}")
                rows += analysis.rcq_rows(rep)
            path = out / f"rcq_{m}_{args.categories.replace(':', '_').replace('/', '_')}.csv"
            write_csv(path, RCQ_COLUMNS, rows, {**prov, "categories": args.categories})
            print(f"wrote {path}")
    return EXIT_OK


def render_rcq_svg(groups: Sequence[tuple[str, list[tuple[str, float]]]]) -> str:
    """Grouped bar chart: one group per (source, subset), one bar per category."""
    bar, gap, left, top, plot_h = 18, 24, 50, 30, 200
    width = left + sum(len(b) * bar + gap for _, b in groups) + 20
    height = top + plot_h + 60
    zero = top + plot_h / 2
    palette = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3",
               "#8c8c8c", "#ccb974", "#64b5cd"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    for v in (-1.0, -0.5, 0.0, 0.5, 1.0):
        y = zero - v * plot_h / 2
        out.append(f'<line x1="{left}" y1="{y:.2f}" x2="{width - 10}" y2="{y:.2f}" '
                   f'stroke="{"#000" if v == 0 else "#ddd"}" stroke-width="1"/>')
        out.append(f'<text x="{left - 6}" y="{y + 3:.2f}" text-anchor="end">{v:.1f}</text>')
    x = left + gap / 2
    colors: dict[str, str] = {}
    for title, bars in groups:
        gx = x
        for cat, val in bars:
            color = colors.setdefault(cat, palette[len(colors) % len(palette)])
            h = 0.0 if math.isnan(val) else abs(val) * plot_h / 2
            y = zero - h if val >= 0 else zero
            out.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar - 2}" height="{h:.2f}" '
                       f'fill="{color}" data-category="{cat}" data-value="{val:.6f}"/>')
            out.append(f'<text x="{x + (bar - 2) / 2:.2f}" y="{top + plot_h + 12}" '
                       f'text-anchor="middle">{cat}</text>')
            x += bar
        out.append(f'<text x="{(gx + x) / 2:.2f}" y="{top + plot_h + 30}" text-anchor="middle" '
                   f'font-weight="bold">{title}</text>')
        x += gap
    out.append(f'<text x="{left}" y="{top - 12}">normalized RCQ</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_report(args, cfg: RunConfig) -> int:
    groups: list[tuple[str, list[tuple[str, float]]]] = []
    for path in args.rcq:
        try:
            with open(path, newline="") as f:
                rows = list(csv.DictReader(f))
        except FileNotFoundError:
            raise DataError(f"RCQ file not found: {path}") from None
        if not rows or set(RCQ_COLUMNS) - set(rows[0]):
            raise DataError(f"{path}: not an RCQ report")
        by_subset: dict[str, list[tuple[str, float]]] = {}
        for r in rows:
            by_subset.setdefault(r["subset"], []).append((r["category"], float(r["normalized_RCQ"])))
        for subset, bars in by_subset.items():
            groups.append((f"{Path(path).stem}:{subset}", bars))
    out = Path(args.out)
    out.write_text(render_rcq_svg(groups))
    _sidecar(out, {"command": "report", "inputs": {str(p): _sha(p) for p in args.rcq}})
    print(f"wrote {out}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------------

def _env(name: str, default=None):
    return os.environ.get(f"RLENS_{name}", default)


def _int(v) -> int:
    try:
        i = int(v)
    except (TypeError, ValueError):
        raise argparse.ArgumentTypeError(f"not an integer: {v!r}") from None
    if not 0 <= i < 2 ** 64:
        raise argparse.ArgumentTypeError("seeds must be 64-bit unsigned integers")
    return i


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_int, default=_int(_env("SEED", 0)))
    common.add_argument("--config", default=_env("CONFIG"), help="JSON run configuration")
    common.add_argument("--threads", type=_int, default=_int(_env("THREADS", 1)))

    p = argparse.ArgumentParser(prog="rlens", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate train/eval/partial splits")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train the toy detector")
    t.add_argument("--manifest", required=True)
    t.add_argument("--heldout")
    t.add_argument("--out", required=True, help="checkpoint path")

    e = sub.add_parser("explain", parents=[common], help="write heatmaps for a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--method", action="append", default=[_env("METHOD")] if _env("METHOD") else None)
    e.add_argument("--out", required=True)

    v = sub.add_parser("eval", parents=[common], help="faithfulness / localisation / RCQ reports")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--manifest", required=True)
    v.add_argument("--heatmaps", required=True)
    v.add_argument("--method", action="append", default=[_env("METHOD")] if _env("METHOD") else None)
    v.add_argument("--which", action="append", choices=["table1", "table2", "rcq"])
    v.add_argument("--n-grid", default=_env("N_GRID"))
    v.add_argument("--subset", choices=analysis.SUBSETS, default=_env("SUBSET"))
    v.add_argument("--categories", default=_env("CATEGORIES", "vad"))
    v.add_argument("--out", required=True)

    r = sub.add_parser("report", parents=[common], help="bar chart of RCQ reports")
    r.add_argument("--rcq", nargs="+", required=True)
    r.add_argument("--out", required=True)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "explain": cmd_explain, "eval": cmd_eval,
            "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        parser = build_parser()
    except argparse.ArgumentTypeError as e:
        print(f"rlens: bad environment override: {e}", file=sys.stderr)
        return EXIT_CONFIG
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"rlens: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateError as e:
        print(f"rlens: degenerate result: {e}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (DataError, RlensError) as e:
        print(f"rlens: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
