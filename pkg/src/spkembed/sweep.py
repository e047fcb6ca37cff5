"""Experiment grid: train, embed and score one configuration per cell."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import eval as ev
from . import losses, nn
from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig, save_config
from .data import Manifest, all_pairs_trials
from .train import embed_records, ensure_dir, identification_report, train, verification_report

log = logging.getLogger(__name__)

AXES = {
    "dim": (64, 128, 256, 512),
    "loss": ("softmax", "asoftmax", "amsoftmax", "logistic"),
    "dropout": (0.0, 0.5),
    "augment": ("None", "Testing", "Training", "Both"),
}

# (train_augment, test_augment) per row of the augmentation table
AUGMENT_FLAGS = {"None": (False, False), "Testing": (False, True), "Training": (True, False), "Both": (True, True)}

CSV_COLUMNS = ("axis", "value", "top1", "top5", "eer", "min_dcf", "min_dcf_norm", "error")


@dataclass
class CellResult:
    axis: str
    value: object
    metrics: dict = field(default_factory=dict)
    error: str = ""
    checkpoint: Checkpoint | None = None

    def row(self) -> dict:
        out = {"axis": self.axis, "value": str(self.value), "error": self.error}
        for k in ("top1", "top5", "eer", "min_dcf", "min_dcf_norm"):
            v = self.metrics.get(k)
            out[k] = "" if v is None else f"{v:.6f}"
        return out


def evaluate(ckpt: Checkpoint, manifest: Manifest, split: str = "test", out_dir=None,
             n_crops: int | None = None, test_augment: bool | None = None) -> dict:
    """Identification and verification metrics on one manifest split."""
    records = manifest.subset(split)
    ids, matrix = embed_records(ckpt, manifest, records, n_crops=n_crops, test_augment=test_augment)
    trials = all_pairs_trials(records)
    scores, report = verification_report(ids, matrix, trials)
    ident = identification_report(ckpt, manifest, ids, matrix)
    if out_dir is not None:
        ev.write_store(os.path.join(out_dir, f"{split}.emb"), ids, matrix)
        ev.write_scores(os.path.join(out_dir, f"{split}.scores"), trials, scores)
    return {"top1": ident["top1"], "top5": ident["top5"], "eer": report.eer,
            "min_dcf": report.min_dcf, "min_dcf_norm": report.min_dcf_norm}


def train_cell(cfg: RunConfig, manifest: Manifest, out_dir=None, warm_start: Checkpoint | None = None,
               allow_cold_start: bool = False) -> Checkpoint:
    ckpt = train(cfg, manifest, warm_start=warm_start, allow_cold_start=allow_cold_start)
    if out_dir is not None:
        ensure_dir(out_dir)
        save_config(os.path.join(out_dir, "config.ini"), cfg)
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), ckpt)
    return ckpt


def loss_config(name: str) -> losses.LossConfig:
    return losses.LOSS_TYPES[name]()


def _cell_config(template: RunConfig, axis: str, value) -> RunConfig:
    if axis == "dim":
        return template.replace(embedding_dim=int(value))
    if axis == "dropout":
        return template.replace(dropout=float(value))
    if axis == "augment":
        tr, te = AUGMENT_FLAGS[value]
        return template.replace(train_augment=tr, test_augment=te)
    if axis == "loss":
        return template.replace(loss=loss_config(value))
    raise ValueError(f"unknown sweep axis {axis!r}")


def run_sweep(template: RunConfig, manifest: Manifest, axis: str, out_dir=None, values=None,
              parallel: int = 1, finetune_schedule: nn.LrSchedule | None = None) -> list:
    """Run every cell of ``axis``; a failing cell records its error and the sweep continues.

    The loss axis trains softmax first and warm-starts the other losses from
    it. Augmentation rows that share a training setup share one checkpoint.
    """
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    values = AXES[axis] if values is None else tuple(values)

    def cell_dir(value):
        return None if out_dir is None else ensure_dir(os.path.join(out_dir, f"{axis}-{value}"))

    def finish(value, cfg, make_ckpt):
        res = CellResult(axis, value)
        try:
            ckpt = make_ckpt()
            res.checkpoint = ckpt
            res.metrics = evaluate(ckpt, manifest, out_dir=cell_dir(value), test_augment=cfg.test_augment)
        except Exception as exc:  # recorded in the table; the sweep goes on
            log.warning("cell %s=%s failed: %s", axis, value, exc)
            res.error = f"{type(exc).__name__}: {exc}"
        return res

    def run_parallel(jobs):
        if parallel > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=parallel) as pool:
                return list(pool.map(lambda job: job(), jobs))
        return [job() for job in jobs]

    if axis == "loss":
        results = {}
        base = template.replace(loss=losses.Softmax())
        results["softmax"] = finish("softmax", base, lambda: train_cell(base, manifest, cell_dir("softmax")))
        source = results["softmax"].checkpoint
        others = [v for v in values if v != "softmax"]

        def job(value):
            cfg = _cell_config(template, "loss", value)
            if finetune_schedule is not None:
                cfg = cfg.replace(schedule=finetune_schedule)
            if source is None:
                return lambda: CellResult(axis, value, error="softmax cell failed; nothing to warm-start from")
            return lambda: finish(value, cfg, lambda: train_cell(cfg, manifest, cell_dir(value), warm_start=source))

        for value, res in zip(others, run_parallel([job(v) for v in others])):
            results[value] = res
        return [results[v] for v in values if v in results]

    if axis == "augment":
        trained: dict = {}

        def job(value):
            cfg = _cell_config(template, axis, value)

            def make():
                key = cfg.train_augment
                if key not in trained:
                    trained[key] = train_cell(cfg.replace(test_augment=True), manifest, cell_dir(value))
                return trained[key]

            return lambda: finish(value, cfg, make)

        # cells sharing a checkpoint run in order; the two training setups in parallel
        groups = {}
        for v in values:
            groups.setdefault(AUGMENT_FLAGS[v][0], []).append(v)
        chains = [lambda g=g: [job(v)() for v in g] for g in groups.values()]
        by_value = {r.value: r for chain in run_parallel(chains) for r in chain}
        return [by_value[v] for v in values]

    jobs = []
    for value in values:
        cfg = _cell_config(template, axis, value)
        jobs.append(lambda v=value, c=cfg: finish(v, c, lambda: train_cell(c, manifest, cell_dir(v))))
    return run_parallel(jobs)


def write_results_csv(path, results) -> None:
    with open(os.fspath(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in results:
            writer.writerow(r.row())


def format_table(results) -> str:
    lines = [f"{'value':>10} {'top1':>7} {'top5':>7} {'eer':>7} {'min_dcf':>8}  error"]
    for r in results:
        m = r.metrics

        def f(k):
            return f"{m[k]:.4f}" if k in m else "-"

        lines.append(f"{str(r.value):>10} {f('top1'):>7} {f('top5'):>7} {f('eer'):>7} {f('min_dcf'):>8}  {r.error}")
    return "\n".join(lines)
