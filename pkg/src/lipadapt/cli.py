"""Command-line entry point.

Subcommands: gen-corpus, dataset build, dataset stats, train-baseline,
adapt, eval, compare, sweep, ablate. Exit codes: 0 success, 1 usage error,
2 runtime failure. Flag values override config-file values override
built-in defaults; every run writes its resolved configuration next to its
outputs. LIPADAPT_OUT overrides the default output root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .adapters import LoRAConfig, load_adapters, save_adapters
from .checkpoint import load_checkpoint
from .evaluation import evaluate
from .experiments import ExperimentSession, duration_sweep, lora_ablation, method_comparison
from .seeding import derive_seed
from .speakersim import (CorpusSpec, budget_subset, build_corpus, corpus_spec,
                         corpus_vocab, load_manifest, split_rows)
from .training import (AdaptationPlan, ClipDataset, TriStageSchedule, adapt_both,
                       adapt_language, adapt_vision, combine_adapters,
                       train_baseline)

_UNSET = object()


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _out_dir(args, subcommand: str) -> str:
    if getattr(args, "out", None):
        return args.out
    root = os.environ.get("LIPADAPT_OUT", "runs")
    return os.path.join(root, subcommand)


def _load_config_file(args) -> dict:
    path = getattr(args, "config", None)
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _resolve(args, cfg: dict, key: str, default):
    """flag > config file > built-in default."""
    value = getattr(args, key.replace("-", "_"), _UNSET)
    if value is not _UNSET and value is not None:
        return value
    if key in cfg:
        return cfg[key]
    return default


def _write_run_config(out_dir: str, subcommand: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
        json.dump({"subcommand": subcommand, **resolved}, fh, indent=1, sort_keys=True)


def build_parser() -> Parser:
    p = Parser(prog="lipadapt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("gen-corpus", help="generate the synthetic multi-speaker corpus")
    g.add_argument("--out")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--speakers", type=int)
    g.add_argument("--baseline-speakers", type=int)
    g.add_argument("--train-minutes", type=float)
    g.add_argument("--valid-minutes", type=float)
    g.add_argument("--test-minutes", type=float)
    g.add_argument("--baseline-minutes", type=float)
    g.add_argument("--unit-seconds", type=float)
    g.add_argument("--fps", type=float)
    g.add_argument("--workers", type=int, default=1)

    d = sub.add_parser("dataset", help="dataset-construction pipeline")
    dsub = d.add_subparsers(dest="dataset_command", required=True, parser_class=Parser)
    db = dsub.add_parser("build", help="label + identify speakers + build splits")
    db.add_argument("--manifest", action="append", required=True,
                    help="corpus manifest(s); the second one is pseudo-labeled")
    db.add_argument("--out")
    db.add_argument("--config")
    db.add_argument("--seed", type=int)
    db.add_argument("--threshold", type=float)
    db.add_argument("--rho", type=float)
    db.add_argument("--budgets")
    db.add_argument("--min-total", type=float)
    db.add_argument("--unit-seconds", type=float)
    db.add_argument("--embed-dim", type=int)
    db.add_argument("--noise-sigma", type=float)
    ds = dsub.add_parser("stats", help="per-speaker statistics table")
    ds.add_argument("--manifest", required=True)
    ds.add_argument("--out")

    t = sub.add_parser("train-baseline", help="train the baseline lip reading model")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--accum", type=int)
    t.add_argument("--peak-lr", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--decay", type=int)

    a = sub.add_parser("adapt", help="speaker adaptation")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--out")
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--level", choices=["vision", "language", "both"])
    a.add_argument("--speaker", action="append")
    a.add_argument("--minutes", type=float)
    a.add_argument("--targets", help="comma list from wc,wq,wk,wv")
    a.add_argument("--rank", type=int)
    a.add_argument("--alpha", type=float)
    a.add_argument("--np", type=int, dest="prompt_len")
    a.add_argument("--steps", type=int)
    a.add_argument("--updates", type=int)
    a.add_argument("--batch", type=int)
    a.add_argument("--accum", type=int)
    a.add_argument("--no-padding-prompts", action="store_true")
    a.add_argument("--joint", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint (+ optional adapters)")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--adapters")
    e.add_argument("--split", default="test")
    e.add_argument("--speaker", action="append")
    e.add_argument("--out")

    for name, help_text in (("compare", "method comparison table"),
                            ("sweep", "adaptation-duration sweep table"),
                            ("ablate", "LoRA target/rank ablation table")):
        x = sub.add_parser(name, help=help_text)
        x.add_argument("--checkpoint", required=True)
        x.add_argument("--corpus", required=True)
        x.add_argument("--out")
        x.add_argument("--config")
        x.add_argument("--seed", type=int)
        if name == "compare":
            x.add_argument("--minutes", type=float)
        if name == "sweep":
            x.add_argument("--budgets", help="comma list of minute budgets")
        if name == "ablate":
            x.add_argument("--speaker")
            x.add_argument("--minutes", type=float)

    return p


# --------------------------------------------------------------------------- #
# command implementations                                                      #
# --------------------------------------------------------------------------- #


def _cmd_gen_corpus(args) -> int:
    cfg = _load_config_file(args)
    out = _out_dir(args, "corpus")
    spec_dict = dict(cfg.get("spec", {}))
    spec = CorpusSpec.from_dict(spec_dict) if spec_dict else CorpusSpec()
    seed = _resolve(args, cfg, "seed", spec.seed)
    minutes = dict(spec.minutes)
    minutes["train"] = _resolve(args, cfg, "train-minutes", minutes["train"])
    minutes["valid"] = _resolve(args, cfg, "valid-minutes", minutes["valid"])
    minutes["test"] = _resolve(args, cfg, "test-minutes", minutes["test"])
    from dataclasses import replace
    spec = replace(
        spec,
        seed=seed,
        num_speakers=_resolve(args, cfg, "speakers", spec.num_speakers),
        baseline_speakers=_resolve(args, cfg, "baseline-speakers", spec.baseline_speakers),
        baseline_minutes=_resolve(args, cfg, "baseline-minutes", spec.baseline_minutes),
        unit_seconds=_resolve(args, cfg, "unit-seconds", spec.unit_seconds),
        frame_rate=_resolve(args, cfg, "fps", spec.frame_rate),
        minutes=minutes,
    )
    _write_run_config(out, "gen-corpus", {"spec": spec.to_dict(), "workers": args.workers})
    manifest = build_corpus(spec, out, workers=args.workers)
    print(f"corpus written: {manifest}")
    return 0


def _cmd_dataset_build(args) -> int:
    import numpy as np

    from .datasetkit import (VideoRecord, build_splits, identity_cluster,
                             cross_corpus_overlap, make_synthetic_transcriber,
                             pseudo_label, stats_report, synthetic_identity_vectors,
                             synthetic_record_embeddings, write_stats_report)

    cfg = _load_config_file(args)
    out = _out_dir(args, "dataset")
    seed = _resolve(args, cfg, "seed", 0)
    threshold = _resolve(args, cfg, "threshold", 0.7)
    rho = _resolve(args, cfg, "rho", 0.1)
    min_total = _resolve(args, cfg, "min-total", 50.0)
    unit_seconds = _resolve(args, cfg, "unit-seconds", 60.0)
    dim = _resolve(args, cfg, "embed-dim", 64)
    sigma = _resolve(args, cfg, "noise-sigma", 0.05)
    budgets_text = _resolve(args, cfg, "budgets", "train=45,valid=5,test=5")
    budgets = {}
    for part in budgets_text.split(","):
        k, v = part.split("=")
        budgets[k.strip()] = float(v)

    corpora = []
    for i, mpath in enumerate(args.manifest):
        rows = load_manifest(mpath)
        source = f"corpus{i}"
        records = [VideoRecord.from_manifest_row(r, source) for r in rows]
        corpora.append((source, mpath, records))

    all_speakers = sorted({r.speaker_id for _, _, recs in corpora for r in recs})
    identities = synthetic_identity_vectors(len(all_speakers), dim, seed)
    spk_index = {s: i for i, s in enumerate(all_speakers)}

    indexes = []
    for source, _, records in corpora:
        emb = synthetic_record_embeddings(records, identities, spk_index, sigma,
                                          derive_seed(seed, source))
        indexes.append(identity_cluster(emb, threshold))

    overlaps = []
    if len(indexes) == 2:
        overlaps = cross_corpus_overlap(indexes[0], indexes[1], threshold)
    merged_of = {("corpus1", cb): ("corpus0", ca) for ca, cb, _ in overlaps}

    labelled: list[VideoRecord] = []
    for i, (source, _, records) in enumerate(corpora):
        assign = indexes[i].assignment()
        truth = {r.id: r.transcript or "" for r in records}
        transcriber = make_synthetic_transcriber(
            truth, sorted({w for t in truth.values() for w in t.split()}),
            rho, derive_seed(seed, "asr", source))
        for rec in records:
            cid = assign[rec.id]
            owner = merged_of.get((source, cid), (source, cid))
            rec.cluster_id = cid
            rec.speaker_id = f"C{owner[0][-1]}-{owner[1]:03d}"
            if i > 0:  # later corpora lack human transcripts: pseudo-label them
                rec = pseudo_label(rec, transcriber)
            labelled.append(rec)

    result = build_splits(labelled, budgets, unit_seconds=unit_seconds,
                          min_total_units=min_total)
    os.makedirs(out, exist_ok=True)
    _write_run_config(out, "dataset-build", {
        "seed": seed, "threshold": threshold, "rho": rho, "budgets": budgets,
        "min_total": min_total, "unit_seconds": unit_seconds,
        "embed_dim": dim, "noise_sigma": sigma,
        "manifests": list(args.manifest),
    })
    with open(os.path.join(out, "manifest.jsonl"), "w") as fh:
        for row in result.rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(os.path.join(out, "excluded.json"), "w") as fh:
        json.dump(result.excluded, fh, indent=1, sort_keys=True)
    with open(os.path.join(out, "overlap.json"), "w") as fh:
        json.dump([{"cluster_a": a, "cluster_b": b, "cosine": s} for a, b, s in overlaps],
                  fh, indent=1)
    report = stats_report(result.rows)
    write_stats_report(report, os.path.join(out, "stats.json"),
                       os.path.join(out, "stats.tsv"))
    print(f"dataset written: {out} ({len(result.rows)} rows, "
          f"{len(result.excluded)} speakers excluded)")
    return 0


def _cmd_dataset_stats(args) -> int:
    from .datasetkit import stats_report, stats_report_tsv, write_stats_report

    rows = load_manifest(args.manifest)
    report = stats_report(rows)
    out = _out_dir(args, "stats")
    os.makedirs(out, exist_ok=True)
    write_stats_report(report, os.path.join(out, "stats.json"),
                       os.path.join(out, "stats.tsv"))
    print(stats_report_tsv(report), end="")
    return 0


def _cmd_train_baseline(args) -> int:
    cfg = _load_config_file(args)
    out = _out_dir(args, "baseline")
    seed = _resolve(args, cfg, "seed", 0)
    steps = _resolve(args, cfg, "steps", 3000)
    batch = _resolve(args, cfg, "batch", 8)
    accum = _resolve(args, cfg, "accum", 1)
    peak = _resolve(args, cfg, "peak-lr", 1e-3)
    warmup = _resolve(args, cfg, "warmup", max(1, steps // 10))
    decay = _resolve(args, cfg, "decay", max(1, steps // 3))
    schedule = TriStageSchedule(peak_lr=peak, warmup_steps=warmup, decay_steps=decay,
                                total_steps=steps)
    _write_run_config(out, "train-baseline", {
        "corpus": args.corpus, "seed": seed, "steps": steps, "batch": batch,
        "accum": accum, "schedule": schedule.__dict__,
    })
    train_baseline(args.corpus, out, schedule=schedule, steps=steps,
                   batch_size=batch, grad_accum=accum, seed=seed)
    print(f"checkpoint written: {out}")
    return 0


def _plan_from_args(args, cfg) -> AdaptationPlan:
    base = AdaptationPlan()
    targets_text = _resolve(args, cfg, "targets", "wc,wq,wk,wv")
    lora = LoRAConfig(
        rank=_resolve(args, cfg, "rank", 8),
        alpha=_resolve(args, cfg, "alpha", 16.0),
        targets=tuple(t.strip() for t in targets_text.split(",") if t.strip()),
    )
    from dataclasses import replace
    return replace(
        base,
        level=_resolve(args, cfg, "level", "both"),
        vision_steps=_resolve(args, cfg, "steps", base.vision_steps),
        language_updates=_resolve(args, cfg, "updates", base.language_updates),
        batch_size=_resolve(args, cfg, "batch", base.batch_size),
        grad_accum=_resolve(args, cfg, "accum", base.grad_accum),
        lora=lora,
        use_padding_prompts=not getattr(args, "no_padding_prompts", False),
        prompt_len=_resolve(args, cfg, "prompt_len", base.prompt_len),
        seed=_resolve(args, cfg, "seed", 0),
        joint=getattr(args, "joint", False),
    )


def _cmd_adapt(args) -> int:
    cfg = _load_config_file(args)
    out = _out_dir(args, "adapt")
    plan = _plan_from_args(args, cfg)
    minutes = _resolve(args, cfg, "minutes", None)
    model, config = load_checkpoint(args.checkpoint)
    spec = corpus_spec(args.corpus)
    manifest = load_manifest(os.path.join(args.corpus, "manifest.jsonl"))
    speakers = args.speaker or sorted({r["speaker_id"] for r in manifest
                                       if r["speaker_id"].startswith("S")})
    budget = minutes if minutes is not None else spec.budget_ladder[-1]
    _write_run_config(out, "adapt", {"plan": plan.to_dict(), "minutes": budget,
                                     "speakers": speakers, "checkpoint": args.checkpoint,
                                     "corpus": args.corpus})
    vocab = corpus_vocab(args.corpus)
    for speaker in speakers:
        rows = budget_subset(split_rows(manifest, "train", speaker), budget,
                             spec.unit_seconds)
        dataset = ClipDataset.from_rows(args.corpus, rows, vocab, spec.frame_rate)
        speaker_plan = plan.with_seed(derive_seed(plan.seed, "adapt", speaker, budget))
        sdir = os.path.join(out, speaker)
        os.makedirs(sdir, exist_ok=True)
        if plan.level == "vision":
            adapters = adapt_vision(model, dataset, speaker_plan,
                                    log_path=os.path.join(sdir, "vision_log.jsonl"))
        elif plan.level == "language":
            prompt = adapt_language(model, None, dataset, speaker_plan,
                                    log_path=os.path.join(sdir, "language_log.jsonl"))
            adapters = combine_adapters(config, None, prompt)
        else:
            adapters = adapt_both(model, dataset, speaker_plan, log_dir=sdir)
        save_adapters(adapters, os.path.join(sdir, "adapters"))
        counts = adapters.count_trainable()
        print(f"{speaker}: adapters saved ({counts['total']} trainable params)")
    return 0


def _cmd_eval(args) -> int:
    model, config = load_checkpoint(args.checkpoint)
    adapters = load_adapters(args.adapters, config) if args.adapters else None
    report = evaluate(model, adapters, args.corpus, split=args.split,
                      speakers=args.speaker)
    out = _out_dir(args, "eval")
    os.makedirs(out, exist_ok=True)
    report.save(os.path.join(out, "report.json"))
    _write_run_config(out, "eval", {"checkpoint": args.checkpoint,
                                    "adapters": args.adapters, "split": args.split})
    for speaker in sorted(report.per_speaker):
        print(f"{speaker}\t{report.per_speaker[speaker]:.1f}")
    print(f"mean\t{report.mean_wer:.1f}")
    return 0


def _print_table(table) -> None:
    print(table.title)
    print(table.tsv(), end="")


def _cmd_compare(args) -> int:
    cfg = _load_config_file(args)
    seed = _resolve(args, cfg, "seed", 0)
    session = ExperimentSession(args.corpus, args.checkpoint, seed=seed)
    table = method_comparison(session, budget=_resolve(args, cfg, "minutes", None))
    out = _out_dir(args, "compare")
    os.makedirs(out, exist_ok=True)
    _write_run_config(out, "compare", {"seed": seed, "checkpoint": args.checkpoint,
                                       "corpus": args.corpus})
    table.save(os.path.join(out, "comparison.json"), os.path.join(out, "comparison.tsv"))
    _print_table(table)
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config_file(args)
    seed = _resolve(args, cfg, "seed", 0)
    budgets_text = _resolve(args, cfg, "budgets", None)
    budgets = tuple(float(b) for b in budgets_text.split(",")) if budgets_text else None
    session = ExperimentSession(args.corpus, args.checkpoint, seed=seed)
    table = duration_sweep(session, budgets=budgets)
    out = _out_dir(args, "sweep")
    os.makedirs(out, exist_ok=True)
    _write_run_config(out, "sweep", {"seed": seed, "budgets": budgets,
                                     "checkpoint": args.checkpoint, "corpus": args.corpus})
    table.save(os.path.join(out, "sweep.json"), os.path.join(out, "sweep.tsv"))
    _print_table(table)
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config_file(args)
    seed = _resolve(args, cfg, "seed", 0)
    session = ExperimentSession(args.corpus, args.checkpoint, seed=seed)
    table = lora_ablation(session, speaker=getattr(args, "speaker", None),
                          budget=_resolve(args, cfg, "minutes", None))
    out = _out_dir(args, "ablate")
    os.makedirs(out, exist_ok=True)
    _write_run_config(out, "ablate", {"seed": seed, "checkpoint": args.checkpoint,
                                      "corpus": args.corpus})
    table.save(os.path.join(out, "ablation.json"), os.path.join(out, "ablation.tsv"))
    _print_table(table)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        if args.command == "gen-corpus":
            return _cmd_gen_corpus(args)
        if args.command == "dataset":
            if args.dataset_command == "build":
                return _cmd_dataset_build(args)
            return _cmd_dataset_stats(args)
        if args.command == "train-baseline":
            return _cmd_train_baseline(args)
        if args.command == "adapt":
            return _cmd_adapt(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "ablate":
            return _cmd_ablate(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"lipadapt: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())
