"""Command-line entry point: ``spkembed <command> [options]``.

On failure every command prints one JSON object on stderr, for example
``{"error": "config_mismatch", "message": "..."}``, and exits with status 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import eval as ev
from . import losses, nn
from .audio import load_wav
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, save_config, toy_config
from .data import SyntheticSpec, read_manifest, synth_data
from .features import featurize, write_matrix
from .sweep import AXES, format_table, run_sweep, write_results_csv
from .train import embed_records, ensure_dir, identification_report, train, verification_report


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else toy_config()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "no_test_augment", False):
        cfg = cfg.replace(test_augment=False)
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# --------------------------------------------------------------------------- commands


def cmd_default_config(args) -> None:
    cfg = toy_config() if args.toy else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out:
        save_config(args.out, cfg)
    else:
        from .config import to_ini

        sys.stdout.write(to_ini(cfg))


def cmd_synth_data(args) -> None:
    spec = SyntheticSpec(
        n_speakers=args.speakers, utts_per_speaker=args.utterances,
        min_duration=args.min_duration, max_duration=args.max_duration, noise=args.noise,
    )
    manifest = synth_data(spec, args.out, seed=args.seed or 0)
    _emit({"manifest": os.path.join(args.out, "manifest.csv"), "utterances": len(manifest),
           "speakers": len(manifest.speakers), "trials": os.path.join(args.out, "trials.txt")})


def cmd_extract_features(args) -> None:
    cfg = _config(args)
    ensure_dir(args.out)
    for path in args.wavs:
        spec = featurize(load_wav(path, cfg.frame.sample_rate), cfg.frame)
        name = os.path.splitext(os.path.basename(path))[0] + ".f32"
        write_matrix(os.path.join(args.out, name), spec.astype(np.float32))
        _emit({"input": path, "output": os.path.join(args.out, name), "shape": list(spec.shape)})


def cmd_train(args) -> None:
    cfg = _config(args)
    manifest = read_manifest(args.manifest)
    warm = load_checkpoint(args.warm_start) if args.warm_start else None
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt = train(cfg, manifest, warm_start=warm, resume=resume, iterations=args.iterations,
                 allow_cold_start=args.allow_cold_start, warm_start_path=args.warm_start)
    ensure_dir(args.out)
    save_config(os.path.join(args.out, "config.ini"), cfg)
    path = os.path.join(args.out, "model.ckpt")
    save_checkpoint(path, ckpt)
    _emit({"checkpoint": path, "iteration": ckpt.iteration, "history": ckpt.history})


def cmd_embed(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest)
    records = manifest.subset(args.split) if args.split != "all" else manifest.records
    ids, matrix = embed_records(ckpt, manifest, records, n_crops=args.n_crops,
                                test_augment=False if args.no_test_augment else None, seed=args.seed)
    ev.write_store(args.out, ids, matrix)
    _emit({"store": args.out, "rows": len(ids), "dim": int(matrix.shape[1])})


def cmd_score_trials(args) -> None:
    ids, matrix = ev.read_store(args.store)
    trials = ev.read_trials(args.trials)
    scores, report = verification_report(ids, matrix, trials)
    if args.out:
        ev.write_scores(args.out, trials, scores)
    _emit(report.as_dict())


def cmd_evaluate_ident(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest)
    if args.store:
        ids, matrix = ev.read_store(args.store)
    else:
        ids, matrix = embed_records(ckpt, manifest, manifest.subset(args.split), n_crops=args.n_crops,
                                    test_augment=False if args.no_test_augment else None, seed=args.seed)
    _emit(identification_report(ckpt, manifest, ids, matrix))


def gradcheck_table(names, trials: int, seed: int) -> list:
    """Worst relative gradient error per loss over random 64-bit instances."""
    rows = []
    for name in names:
        cfg = losses.LOSS_TYPES[name]()
        worst = 0.0
        for t in range(trials):
            rng = np.random.default_rng([seed, t])
            C, d, B = int(rng.integers(2, 11)), int(rng.integers(2, 17)), 4
            head = losses.ClassificationHead(rng.standard_normal((C, d)),
                                             rng.standard_normal(C) if losses.has_bias(cfg) else None)
            inst = {"x": rng.standard_normal((B, d)), "labels": rng.integers(0, C, B), "head": head}

            def op(x, y, h, cfg=cfg):
                return losses.compute_loss(cfg, x, y, h, iteration=0)

            worst = max(worst, losses.grad_check(op, inst))
        rows.append({"loss": name, "trials": trials, "max_rel_error": worst})
    return rows


def cmd_gradcheck(args) -> None:
    names = list(losses.LOSS_TYPES) if args.loss == "all" else [args.loss]
    for row in gradcheck_table(names, args.trials, args.seed or 0):
        _emit(row)


def cmd_sweep(args) -> None:
    cfg = _config(args)
    manifest = read_manifest(args.manifest)
    finetune = None
    if args.finetune_iters:
        s = cfg.schedule
        finetune = nn.LrSchedule(args.finetune_lr or s.initial_lr, s.factor, s.n_steps, max(1, args.finetune_iters // s.n_steps))
    ensure_dir(args.out)
    results = run_sweep(cfg, manifest, args.axis, out_dir=args.out, parallel=args.parallel, finetune_schedule=finetune)
    csv_path = os.path.join(args.out, f"sweep-{args.axis}.csv")
    write_results_csv(csv_path, results)
    print(format_table(results))
    print(f"wrote {csv_path}")


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spkembed", description="Speaker embedding training and evaluation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="run configuration (INI); defaults to the toy config")
        sp.add_argument("--seed", type=int, help="overrides the configured seed")
        return sp

    sp = common(sub.add_parser("default-config", help="print or write a run configuration"), config=False)
    sp.add_argument("--toy", action="store_true", help="the desk-scale toy configuration")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_default_config)

    sp = common(sub.add_parser("synth-data", help="write a synthetic multi-speaker corpus"), config=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--speakers", type=int, default=20)
    sp.add_argument("--utterances", type=int, default=20)
    sp.add_argument("--min-duration", type=float, default=1.0)
    sp.add_argument("--max-duration", type=float, default=2.0)
    sp.add_argument("--noise", type=float, default=SyntheticSpec.noise)
    sp.set_defaults(func=cmd_synth_data)

    sp = common(sub.add_parser("extract-features", help="normalized STFT amplitude of whole WAV files"))
    sp.add_argument("wavs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_extract_features)

    sp = common(sub.add_parser("train", help="train an encoder and classification head"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--warm-start", help="initialize from this checkpoint (required for margin losses)")
    sp.add_argument("--resume", help="continue an interrupted run")
    sp.add_argument("--iterations", type=int, help="stop here instead of at the end of the schedule")
    sp.add_argument("--allow-cold-start", action="store_true", help="train a margin loss from scratch")
    sp.set_defaults(func=cmd_train)

    for name, func, hlp in (("embed", cmd_embed, "multi-crop embeddings for a manifest split"),
                            ("evaluate-ident", cmd_evaluate_ident, "Top-1 / Top-5 identification accuracy")):
        sp = common(sub.add_parser(name, help=hlp), config=False)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--split", default="test")
        sp.add_argument("--n-crops", type=int)
        sp.add_argument("--no-test-augment", action="store_true", help="plain contiguous crops at test time")
        if name == "embed":
            sp.add_argument("--out", required=True, help="embedding store path")
        else:
            sp.add_argument("--store", help="reuse an embedding store instead of embedding again")
        sp.set_defaults(func=func)

    sp = sub.add_parser("score-trials", help="cosine-score a trial list; report EER and min C_det")
    sp.add_argument("--store", required=True)
    sp.add_argument("--trials", required=True)
    sp.add_argument("--out", help="scores file")
    sp.set_defaults(func=cmd_score_trials)

    sp = common(sub.add_parser("gradcheck", help="analytic vs finite-difference loss gradients"), config=False)
    sp.add_argument("--loss", default="all", choices=["all", *losses.LOSS_TYPES])
    sp.add_argument("--trials", type=int, default=20)
    sp.set_defaults(func=cmd_gradcheck)

    sp = common(sub.add_parser("sweep", help="run one axis of the experiment grid"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--axis", required=True, choices=list(AXES))
    sp.add_argument("--out", required=True)
    sp.add_argument("--parallel", type=int, default=1, help="cells run on this many threads")
    sp.add_argument("--finetune-iters", type=int, help="schedule length for warm-started loss cells")
    sp.add_argument("--finetune-lr", type=float)
    sp.add_argument("--no-test-augment", action="store_true")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except Exception as exc:
        code = getattr(exc, "code", None)
        if not isinstance(code, str):
            code = {FileNotFoundError: "missing_file", KeyError: "unknown_id"}.get(type(exc), type(exc).__name__)
        detail = {"error": code, "message": str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)}
        if hasattr(exc, "iteration"):
            detail["iteration"] = exc.iteration
        sys.stderr.write(json.dumps(detail, sort_keys=True) + "\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
