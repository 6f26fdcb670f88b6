"""Command-line entry point: ingest, synth, train, embed, eval, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from hybridret.codetok import LexError
from hybridret.config import ConfigError, RunConfig, apply_preset, parse_config, render_config, with_overrides
from hybridret.corpus import Corpus, CorpusError, cap_per_problem, dedup, filter_syntactic, ingest_jsonl, write_jsonl
from hybridret.encoder import Checkpoint, EncoderError
from hybridret.losses import LossError, LossReport
from hybridret.metrics import (
    MetricsError,
    cross_language_matrix,
    evaluate_scenario,
    grid_search_alpha,
    paired_significance,
)
from hybridret.report import (
    MetricRow,
    heatmap_svg,
    read_metrics_csv,
    summary_markdown,
    write_matrix_csv,
    write_metrics_csv,
)
from hybridret.retrieval import STRATEGIES, EmbeddingStore, RetrievalError, Scenario, embed_corpus, meta_path
from hybridret.synth import TOY_LANGUAGES, synth_corpus
from hybridret.trainer import BatchError, train

log = logging.getLogger("hybridret")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2
INPUT_ERRORS = (ConfigError, CorpusError, BatchError, EncoderError, RetrievalError, MetricsError,
                LossError, LexError, OSError)

ABLATIONS = {"mpcl_intra": "disable_mpcl_intra", "rpcl": "disable_rpcl", "augment": "disable_augmentation"}
SWEEPS = {"batch": ("batch_tuples", (8, 16, 32)), "queue": ("queue_size", (600, 2048, 6200))}


class InputError(ValueError):
    pass


def _load_corpus(path: Optional[str]) -> Corpus:
    if not path:
        raise InputError("a corpus file is required (--corpus)")
    corpus = ingest_jsonl(path, Path(path).stem)
    if len(corpus) == 0:
        raise InputError(f"{path}: corpus is empty")
    return corpus


def _out_path(args, cfg: RunConfig, default: str) -> Path:
    out = Path(args.out or cfg.out or ".")
    if out.suffix == "" and not default.startswith("."):
        out.mkdir(parents=True, exist_ok=True)
        return out / default
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


# --- ingest / synth -------------------------------------------------------------


def cmd_ingest(args, cfg: RunConfig) -> int:
    corpus = ingest_jsonl(args.input, args.dataset or cfg.dataset)
    if len(corpus) == 0:
        raise InputError(f"{args.input}: no samples")
    counts = [("ingested", len(corpus))]
    warnings: list[str] = []
    corpus = filter_syntactic(corpus, warnings)
    counts.append(("syntactic", len(corpus)))
    corpus = cap_per_problem(corpus, cfg.cap_per_problem, cfg.seed)
    counts.append(("capped", len(corpus)))
    corpus = dedup(corpus)
    counts.append(("deduplicated", len(corpus)))
    for w in warnings:
        log.warning(w)
    out = _out_path(args, cfg, "corpus.jsonl")
    write_jsonl(corpus, out)
    for stage, n in counts:
        _echo(args, f"{stage}\t{n}")
    _echo(args, f"wrote {out}")
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    langs = [s.strip() for s in args.languages.split(",") if s.strip()]
    try:
        corpus = synth_corpus(args.problems, langs, seed=cfg.seed, dataset_name=args.dataset or "synth")
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = _out_path(args, cfg, "synth.jsonl")
    write_jsonl(corpus, out)
    _echo(args, f"wrote {len(corpus)} samples ({args.problems} problems x {len(langs)} languages) to {out}")
    return EXIT_OK


# --- train ----------------------------------------------------------------------


def write_train_log(reports: Sequence[LossReport], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", *LossReport.columns()])
        for t, r in enumerate(reports, 1):
            w.writerow([t, *(repr(float(v)) for v in r.values())])


def train_run(cfg: RunConfig, corpus: Corpus, out_dir: Path, quiet: bool = True) -> dict:
    """Train, then write checkpoint, loss log and manifest into ``out_dir``."""
    tc = cfg.train_config()

    def progress(t: int, rep: LossReport) -> None:
        if not quiet and (t == 1 or t % 50 == 0 or t == tc.steps):
            print(f"step {t:5d}  l_total {rep.l_total:.4f}  l_mpcl {rep.l_mpcl:.4f}  l_rpcl {rep.l_rpcl:.4f}")

    res = train(tc, corpus, on_step=progress)
    out_dir.mkdir(parents=True, exist_ok=True)
    res.checkpoint.save(out_dir / "checkpoint.bin")
    write_train_log(res.reports, out_dir / "train_log.csv")
    manifest = dict(res.manifest)
    manifest["run_config"] = render_config(cfg)
    # wall-clock varies run to run; keep it out of the determinism-checked file
    timing = {"wall_clock_s": manifest.pop("wall_clock_s")}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out_dir / "timing.json").write_text(json.dumps(timing) + "\n")
    return manifest


def sweep_rows(cfg: RunConfig, corpus: Corpus, kind: str, values: Sequence[int], out_dir: Path,
               quiet: bool = True) -> list[dict]:
    """Train once per value and score cross-language Code2Code; one row per value."""
    field, _ = SWEEPS[kind]
    rows = []
    for v in sorted(values):
        run_cfg = with_overrides(cfg, {field: v})
        run_dir = out_dir / f"{kind}_{v}"
        manifest = train_run(run_cfg, corpus, run_dir, quiet=True)
        ckpt = Checkpoint.load(run_dir / "checkpoint.bin")
        store = embed_corpus(ckpt, corpus)
        mrrs, maps = [], []
        for ql in store.language_set():
            for tl in store.language_set():
                if ql != tl:
                    r = evaluate_scenario(store, Scenario(ql, tl, "Code2Code"))
                    mrrs.append(r.mrr)
                    maps.append(r.map)
        row = {
            "parameter": field,
            "value": v,
            "steps": run_cfg.steps,
            "final_l_total": manifest["final_losses"]["l_total"] if manifest["final_losses"] else "",
            "code2code_mrr": sum(mrrs) / len(mrrs),
            "code2code_map": sum(maps) / len(maps),
        }
        rows.append(row)
        if not quiet:
            print(f"{field}={v}  mrr {row['code2code_mrr']:.4f}")
    return rows


def cmd_train(args, cfg: RunConfig) -> int:
    for name in args.ablate or []:
        cfg = with_overrides(cfg, {ABLATIONS[name]: True})
    if args.steps is not None:
        cfg = with_overrides(cfg, {"steps": args.steps})
    corpus = _load_corpus(args.corpus or cfg.corpus)
    out_dir = _out_dir(args, cfg)
    if args.sweep:
        values = args.values or list(SWEEPS[args.sweep][1])
        rows = sweep_rows(cfg, corpus, args.sweep, values, out_dir, quiet=args.quiet)
        path = out_dir / f"sweep_{args.sweep}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        _echo(args, f"wrote {path}")
        return EXIT_OK
    manifest = train_run(cfg, corpus, out_dir, quiet=args.quiet)
    _echo(args, f"wrote {out_dir / 'checkpoint.bin'} ({manifest['checkpoint_sha256'][:12]})")
    return EXIT_OK


# --- embed / eval -----------------------------------------------------------------


def cmd_embed(args, cfg: RunConfig) -> int:
    ckpt_path = args.checkpoint or cfg.checkpoint
    if not ckpt_path:
        raise InputError("a checkpoint is required (--checkpoint)")
    ckpt = Checkpoint.load(ckpt_path)
    corpus = _load_corpus(args.corpus or cfg.corpus)
    out = _out_path(args, cfg, "store.bin")
    if out.exists() and not args.force:
        old = EmbeddingStore.load(out)
        if old.fingerprint != ckpt.fingerprint() or old.corpus_sha256 != corpus.fingerprint():
            raise InputError(f"{out} was built from a different checkpoint or corpus; use --force to overwrite")
    store = embed_corpus(ckpt, corpus)
    store.save(out)
    _echo(args, f"wrote {len(store)} embeddings to {out} (+ {meta_path(out).name})")
    return EXIT_OK


def _check_fresh(store: EmbeddingStore, ckpt: Optional[Checkpoint], force: bool) -> None:
    if ckpt is not None and not force and store.fingerprint != ckpt.fingerprint():
        raise InputError("store fingerprint does not match the checkpoint (stale store); re-embed or use --force")


def eval_rows(store: EmbeddingStore, strategies: Sequence[str], languages: Sequence[str], alpha: float,
              dataset: str, ckpt: Optional[Checkpoint] = None, corpus: Optional[Corpus] = None):
    rows, results = [], []
    for strategy in strategies:
        for ql in languages:
            for tl in languages:
                sc = Scenario(ql, tl, strategy, alpha)
                try:
                    res = evaluate_scenario(store, sc, ckpt, corpus)
                except MetricsError as exc:
                    log.info("skipping %s -> %s %s: %s", ql, tl, strategy, exc)
                    continue
                rows.append(MetricRow.from_result(dataset, res))
                results.append(res)
    return rows, results


def cmd_eval(args, cfg: RunConfig) -> int:
    store_path = args.store or cfg.store
    if not store_path:
        raise InputError("an embedding store is required (--store)")
    store = EmbeddingStore.load(store_path)
    ckpt = corpus = None
    ckpt_path = args.checkpoint or cfg.checkpoint
    if ckpt_path:
        ckpt = Checkpoint.load(ckpt_path)
    if args.corpus or cfg.corpus:
        corpus = _load_corpus(args.corpus or cfg.corpus)
    if args.strategies:
        strategies = args.strategies.split(",")
    else:
        # Remix re-encodes queries, so it only joins the default set when it can run
        strategies = [s for s in STRATEGIES if s != "Remix" or (ckpt is not None and corpus is not None)]
    for s in strategies:
        if s not in STRATEGIES:
            raise InputError(f"unknown strategy {s!r}")
    if "Remix" in strategies and (ckpt is None or corpus is None):
        raise InputError("Remix needs --checkpoint and --corpus")
    _check_fresh(store, ckpt, args.force)
    languages = args.languages.split(",") if args.languages else store.language_set()
    dataset = args.dataset or cfg.dataset
    out_dir = _out_dir(args, cfg)

    rows, results = eval_rows(store, strategies, languages, cfg.alpha, dataset, ckpt, corpus)
    if not rows:
        raise InputError("no evaluable scenario")

    if args.gridsearch:
        cross = [Scenario(a, b, "Weight") for a in languages for b in languages if a != b] or \
                [Scenario(a, a, "Weight") for a in languages]
        rep = grid_search_alpha({dataset: store}, cross, cfg.alpha_step)
        best = rep.picks[0]
        weight_rows, _ = eval_rows(store, ["Weight"], languages, best.alpha, dataset)
        rows += [r for r in weight_rows if r.alpha != repr(cfg.alpha)]
        with open(out_dir / "weight_report.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "alpha_star", "mrr", "map"])
            for p in rep.picks:
                w.writerow([p.dataset, repr(p.alpha), repr(p.mrr), repr(p.map)])
            w.writerow(["mean+-std", repr(rep.mean_alpha), repr(rep.std_alpha), ""])
        with open(out_dir / "alpha_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "alpha", "mrr", "map"])
            for p in rep.picks:
                for a, m, ap in p.curve:
                    w.writerow([p.dataset, repr(a), repr(m), repr(ap)])
        _echo(args, f"alpha* = {best.alpha:.2f} (MRR {best.mrr:.4f})")

    write_metrics_csv(rows, out_dir / "metrics.csv")

    if args.significance:
        other = EmbeddingStore.load(args.significance)
        with open(out_dir / "significance.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query_lang", "target_lang", "strategy", "alpha", "mrr_a", "mrr_b", "p_value"])
            for res in results:
                if res.scenario.strategy == "Remix":
                    continue
                res_b = evaluate_scenario(other, res.scenario)
                p = paired_significance(res, res_b, resamples=cfg.significance_resamples, seed=cfg.seed)
                sc = res.scenario
                w.writerow([sc.query_language, sc.target_language, sc.strategy, repr(sc.alpha),
                            repr(res.mrr), repr(res_b.mrr), repr(p)])

    for strategy in args.heatmap or []:
        langs, matrix = cross_language_matrix(store, strategy, languages, cfg.alpha, ckpt, corpus)
        write_matrix_csv(langs, matrix, out_dir / f"heatmap_{strategy}.csv")
        (out_dir / f"heatmap_{strategy}.svg").write_text(heatmap_svg(langs, matrix, f"{strategy} MRR"))

    for r in rows:
        _echo(args, f"{r.query_lang:>8} -> {r.target_lang:<8} {r.label:<14} MRR {r.mrr:.4f}  MAP {r.map:.4f}  n={r.n_queries}")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    rows: list[MetricRow] = []
    for path in args.metrics:
        try:
            rows += read_metrics_csv(path)
        except ValueError as exc:
            raise InputError(str(exc)) from None
    if not rows:
        raise InputError("no metric rows to report")
    text = summary_markdown(rows)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _echo(args, f"wrote {out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat key = value config file")
    shared.add_argument("--preset", help="named preset applied before the config file (desk, paper)")
    shared.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--out")
    shared.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="hybridret", description="Contrastive code retrieval toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[shared], help="load, filter, cap and deduplicate a JSONL corpus")
    s.add_argument("input")
    s.add_argument("--dataset")

    s = sub.add_parser("synth", parents=[shared], help="generate a synthetic multilingual corpus")
    s.add_argument("--problems", type=int, default=80)
    s.add_argument("--languages", default=",".join(TOY_LANGUAGES[:3]))
    s.add_argument("--dataset")

    s = sub.add_parser("train", parents=[shared], help="train an encoder")
    s.add_argument("--corpus")
    s.add_argument("--steps", type=int)
    s.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    s.add_argument("--sweep", choices=sorted(SWEEPS))
    s.add_argument("--values", type=lambda v: [int(x) for x in v.split(",")], help="comma-separated sweep values")

    s = sub.add_parser("embed", parents=[shared], help="embed a corpus with a checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--corpus")
    s.add_argument("--force", action="store_true")

    s = sub.add_parser("eval", parents=[shared], help="evaluate retrieval strategies")
    s.add_argument("--store")
    s.add_argument("--checkpoint")
    s.add_argument("--corpus")
    s.add_argument("--strategies", help=f"comma-separated subset of {','.join(STRATEGIES)}")
    s.add_argument("--languages")
    s.add_argument("--dataset")
    s.add_argument("--gridsearch", action="store_true")
    s.add_argument("--significance", metavar="OTHER_STORE")
    s.add_argument("--heatmap", action="append", choices=STRATEGIES)
    s.add_argument("--force", action="store_true")

    s = sub.add_parser("report", parents=[shared], help="render metrics tables as markdown")
    s.add_argument("metrics", nargs="+")
    return p


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "report": cmd_report,
}


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.preset:
        cfg = apply_preset(cfg, args.preset)
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        cfg = parse_config(text, cfg)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    if args.seed is not None:
        overrides["seed"] = args.seed
    return with_overrides(cfg, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (InputError, *INPUT_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
