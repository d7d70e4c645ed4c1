"""Command line entry point: ``endoview <command> [options]``.

Every command writes CSV (or binary model/cache files) under ``--out``.
A pair directory holds ``A/`` (query intervention), ``B/`` (database) and,
for synthetic data, ``ground_truth.csv``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import Settings, dump_settings, load_settings
from .dataset import MatchRecord, load_intervention, save_results
from .descriptors import describe, write_cache
from .harness import (
    answer_query,
    compute_stats,
    evaluate,
    outcome_records,
    prepare_pair,
    read_score_file,
    sweep_combos,
    sweep_radius,
    write_stats,
)
from .synthgen import generate_pair, load_pair, save_pair
from .uifilter import (
    _intervention_data,
    cross_validate,
    frame_features,
    load_model,
    save_model,
    train_filter,
)

log = logging.getLogger("endoview")


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    log.info("wrote %s", path)


def _filter_arg(args):
    if getattr(args, "model", None):
        return load_model(args.model)
    if getattr(args, "label_filter", False):
        return "labels"
    return None


def _pairs(args, settings: Settings):
    ui = _filter_arg(args)
    out = []
    for d in args.pairs:
        a, b, truth = load_pair(d)
        if truth is None:
            raise SystemExit(f"{d}: ground_truth.csv missing; score files go through `stats`")
        out.append(prepare_pair(a, b, truth, ui))
    return out


def _search_kwargs(settings: Settings) -> dict:
    s = settings.search
    return dict(
        n_queries=s.n_queries,
        correct_roll=s.correct_roll,
        max_k=s.max_k,
        query_noise_mm=s.query_noise_mm,
        seed=settings.seed,
    )


def cmd_generate(args, settings: Settings) -> int:
    syn = settings.synth
    for seed in range(settings.seed, settings.seed + args.count):
        pair = generate_pair(
            seed,
            syn.n_frames,
            syn.em_noise_sigma,
            modality=syn.modality,
            ui_fraction=syn.ui_fraction,
            landmark_noise=syn.landmark_noise,
            depth_jitter=syn.depth_jitter,
            roll_drift=syn.roll_drift,
            image_size=syn.image_size,
            lambda_roll=syn.lambda_roll,
            best_tolerance_mm=syn.best_tolerance_mm,
            partial_band_mm=syn.partial_band_mm,
        )
        path = save_pair(pair, args.out / f"pair_{seed}")
        log.info("wrote %s", path)
    return 0


def cmd_extract(args, settings: Settings) -> int:
    iv = load_intervention(args.dataset)
    cfg = settings.descriptor
    vectors = {f.frame_id: describe(f.image, cfg) for f in iv.frames}
    path = args.out / f"{iv.intervention_id}.evdc"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_cache(path, cfg.fingerprint, vectors)
    log.info("wrote %s (%d vectors)", path, len(vectors))
    return 0


def cmd_filter_train(args, settings: Settings) -> int:
    f = settings.uifilter
    cfg = settings.filter_descriptor()
    ivs = [load_intervention(p) for p in args.datasets]
    data = _intervention_data(ivs, cfg)
    if len(f.C_grid) * len(f.gamma_grid) > 1:
        cv = cross_validate(ivs, f.C_grid, f.gamma_grid, cfg, f.variance, features=data)
        C, gamma = cv.best_C, cv.best_gamma
        _write_csv(
            args.out / "filter_cv.csv",
            ("C", "gamma", "mean_f1"),
            [(repr(c), repr(g), repr(v)) for (c, g), v in cv.grid_f1.items()],
        )
        pooled = cv.pooled
        log.info("LOIO best C=%g gamma=%g precision=%.3f recall=%.3f", C, gamma, pooled.precision, pooled.recall)
    else:
        C, gamma = f.C_grid[0], f.gamma_grid[0]
    trained = train_filter(
        ivs, C, gamma, cfg, fraction=f.fraction, repetitions=f.repetitions, variance=f.variance, seed=settings.seed, features=data
    )
    path = args.out / "filter.evuf"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(path, trained.model)
    log.info("wrote %s (repetition %d)", path, trained.best_repetition)
    return 0


def cmd_filter_apply(args, settings: Settings) -> int:
    model = load_model(args.model)
    iv = load_intervention(args.dataset)
    frames = list(iv.frames)
    decision = model.decision(frame_features(frames, model.config))
    rows = [
        (f.frame_id, repr(float(d)), int(d > 0), f.informative_label.value if f.informative_label else "")
        for f, d in zip(frames, decision)
    ]
    _write_csv(args.out / f"{iv.intervention_id}_filter.csv", ("frame_id", "decision", "uninformative", "label"), rows)
    return 0


def cmd_match(args, settings: Settings) -> int:
    a, b, truth = load_pair(args.pair)
    prepared = prepare_pair(a, b, truth, _filter_arg(args))
    query = a.frame(args.query)
    res = answer_query(
        prepared, query, settings.search.radius_mm, settings.descriptor,
        correct_roll=settings.search.correct_roll, max_k=settings.search.max_k,
    )
    path = args.out / f"match_{a.intervention_id}_{query.frame_id}.csv"
    if res.report is None:
        log.warning("no frame within %g mm; EM nearest neighbour is frame %d", res.radius, res.em_match.frame_id)
        score = truth.score((a.intervention_id, query.frame_id), (b.intervention_id, res.em_match.frame_id)) if truth else None
        records = [MatchRecord(a.intervention_id, query.frame_id, b.intervention_id, res.em_match.frame_id, res.radius, 1, float("nan"), score)]
    else:
        records = res.report.to_records(truth.score if truth else None)
    save_results(records, path)
    log.info("k=%d best=%d em=%d", res.k, res.image_match.frame_id, res.em_match.frame_id)
    return 0


def cmd_sweep_radius(args, settings: Settings) -> int:
    pairs = _pairs(args, settings)
    rows = sweep_radius(pairs, settings.search.radii_mm, settings.descriptor, **_search_kwargs(settings))
    write_stats(rows, args.out / "sweep_radius.csv")
    return 0


def cmd_sweep_combos(args, settings: Settings) -> int:
    pairs = _pairs(args, settings)
    rows = sweep_combos(
        pairs,
        settings.sweep.families,
        settings.sweep.spaces,
        settings.search.radius_mm,
        settings.descriptor,
        **_search_kwargs(settings),
    )
    write_stats(rows, args.out / "sweep_combos.csv")
    return 0


def cmd_evaluate(args, settings: Settings) -> int:
    pairs = _pairs(args, settings)
    ev = evaluate(pairs, settings.search.radius_mm, settings.descriptor, **_search_kwargs(settings))
    save_results(outcome_records(ev, pairs), args.out / "matches.csv")
    cfg = settings.descriptor
    rows = [
        compute_stats(ev.image, cfg.family.value, cfg.space.value, settings.search.radius_mm),
        compute_stats(ev.em, "EM-Based", "n.a.", settings.search.radius_mm),
    ]
    write_stats(rows, args.out / "evaluate.csv")
    return 0


def cmd_stats(args, settings: Settings) -> int:
    records = read_score_file(args.scores, rank=None if args.all_ranks else 1)
    row = compute_stats(records, args.family, args.space, records[0].radius if records else float("nan"))
    write_stats([row], args.out / "stats.csv")
    return 0


def cmd_config(args, settings: Settings) -> int:
    sys.stdout.write(dump_settings(settings))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="endoview", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.add_argument("--config", type=Path, help="key = value settings file")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def filter_opts(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--model", type=Path, help="trained filter model (.evuf)")
        g.add_argument("--label-filter", action="store_true", help="drop frames labeled uninformative")

    sp = sub.add_parser("generate", help="write synthetic interventions with ground truth")
    sp.add_argument("--count", type=int, default=1, help="number of consecutive seeds")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("extract", help="write a descriptor cache for one intervention")
    sp.add_argument("dataset", type=Path)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("filter-train", help="cross-validate and train the uninformative-frame filter")
    sp.add_argument("datasets", type=Path, nargs="+")
    sp.set_defaults(func=cmd_filter_train)

    sp = sub.add_parser("filter-apply", help="classify the frames of one intervention")
    sp.add_argument("dataset", type=Path)
    sp.add_argument("--model", type=Path, required=True)
    sp.set_defaults(func=cmd_filter_apply)

    sp = sub.add_parser("match", help="best view-point for a single query frame")
    sp.add_argument("pair", type=Path)
    sp.add_argument("--query", type=int, required=True, help="frame id in A")
    filter_opts(sp)
    sp.set_defaults(func=cmd_match)

    for name, func, text in (
        ("sweep-radius", cmd_sweep_radius, "statistics over increasing search radii"),
        ("sweep-combos", cmd_sweep_combos, "statistics for every descriptor and color space"),
        ("evaluate", cmd_evaluate, "ranked matches and statistics at one radius"),
    ):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("pairs", type=Path, nargs="+")
        filter_opts(sp)
        sp.set_defaults(func=func)

    sp = sub.add_parser("stats", help="summarize a scored results CSV")
    sp.add_argument("scores", type=Path)
    sp.add_argument("--family", default="")
    sp.add_argument("--space", default="")
    sp.add_argument("--all-ranks", action="store_true", help="use every row, not only rank 1")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("config", help="print the effective settings")
    sp.set_defaults(func=cmd_config)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    settings = load_settings(args.config)
    if args.seed is not None:
        settings = dataclasses.replace(settings, seed=args.seed)
    return args.func(args, settings)


if __name__ == "__main__":
    raise SystemExit(main())
