"""SGD training loop, warm starts, and the embed / score / identify stages built on it."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from . import eval as ev
from . import losses, nn
from .audio import sample_training_crop, utterance_rng
from .checkpoint import Checkpoint, ConfigMismatchError, check_compatible
from .config import RunConfig
from .data import Manifest
from .features import featurize

log = logging.getLogger(__name__)

DTYPE = np.float32

# Sub-stream tags for np.random.default_rng([seed, TAG, ...]).
_INIT, _BATCH, _HEAD, _EMBED, _VAL = 11, 12, 13, 14, 15


class DivergenceError(FloatingPointError):
    code = "diverged"

    def __init__(self, iteration: int):
        super().__init__(f"loss became non-finite at iteration {iteration}")
        self.iteration = iteration


class ColdStartError(ValueError):
    code = "warm_start_required"


def _load_records(manifest: Manifest, records, rate):
    waves = [manifest.load(r, rate) for r in records]
    labels = np.array([manifest.label(r) for r in records], dtype=np.int64)
    return waves, labels


def initial_checkpoint(cfg: RunConfig, speakers) -> Checkpoint:
    enc = cfg.encoder_config()
    params = nn.init_params(enc, cfg.init_scheme, np.random.default_rng([cfg.seed, _INIT]), dtype=DTYPE)
    head = losses.init_head(len(speakers), cfg.embedding_dim, cfg.loss, np.random.default_rng([cfg.seed, _HEAD]), DTYPE)
    return Checkpoint(cfg, 0, params, head.params(), {}, list(speakers))


def warm_checkpoint(cfg: RunConfig, source: Checkpoint, speakers, source_path: str | None = None) -> Checkpoint:
    """Start ``cfg`` from a trained encoder, adapting the head to the new loss."""
    check_compatible(source.config, cfg, what="warm start", same_loss=False)
    if list(source.speakers) != list(speakers):
        raise ConfigMismatchError("warm start checkpoint was trained on a different speaker set")
    head = losses.convert_head(
        losses.ClassificationHead.from_params(source.head), source.config.loss, cfg.loss,
        np.random.default_rng([cfg.seed, _HEAD]),
    )
    params = {k: v.astype(DTYPE, copy=True) for k, v in source.params.items()}
    return Checkpoint(cfg, 0, params, head.params(), {}, list(speakers), warm_start=source_path)


def train(
    cfg: RunConfig,
    manifest: Manifest,
    warm_start: Checkpoint | None = None,
    resume: Checkpoint | None = None,
    iterations: int | None = None,
    allow_cold_start: bool = False,
    warm_start_path: str | None = None,
) -> Checkpoint:
    """Run SGD until ``iterations`` (default: the end of the LR ladder).

    Each iteration draws its batch, crops and dropout masks from a stream keyed
    on (seed, iteration), so a resumed run reproduces an unbroken one exactly.
    """
    total = cfg.schedule.total_iters if iterations is None else iterations
    if resume is not None:
        check_compatible(resume.config, cfg, what="resume")
        ckpt = resume
    elif warm_start is not None:
        ckpt = warm_checkpoint(cfg, warm_start, manifest.speakers, warm_start_path)
    else:
        if not isinstance(cfg.loss, losses.Softmax) and not allow_cold_start:
            raise ColdStartError(f"{cfg.loss.name} training starts from a softmax checkpoint; pass a warm start or allow a cold start")
        ckpt = initial_checkpoint(cfg, manifest.speakers)
    if list(ckpt.speakers) != list(manifest.speakers):
        raise ConfigMismatchError("checkpoint speakers differ from the manifest")

    enc = cfg.encoder_config()
    train_recs = manifest.subset("train")
    waves, labels = _load_records(manifest, train_recs, cfg.frame.sample_rate)
    if not waves:
        raise ValueError("manifest has no training utterances")
    val_recs = manifest.subset("val")
    val_waves, val_labels = _load_records(manifest, val_recs, cfg.frame.sample_rate)
    policy = cfg.train_policy()

    params, head = dict(ckpt.params), dict(ckpt.head)
    state = nn.OptimizerState(nn.lr_at(cfg.schedule, ckpt.iteration), cfg.momentum, cfg.weight_decay, dict(ckpt.velocity))
    history = list(ckpt.history)
    step_losses = list(ckpt.step_losses)
    it = ckpt.iteration
    while it < total:
        state.lr = nn.lr_at(cfg.schedule, it)
        rng = np.random.default_rng([cfg.seed, _BATCH, it])
        picks = rng.integers(0, len(waves), size=cfg.batch_size)
        batch = np.stack([featurize(sample_training_crop(waves[i], policy, rng), cfg.frame) for i in picks]).astype(DTYPE)
        # overflow is caught by the finiteness checks below, not reported as warnings
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                emb, cache = nn.forward(enc, params, batch, mode="train", rng=rng)
            except nn.NonFiniteError:
                raise DivergenceError(it) from None
            out = losses.compute_loss(cfg.loss, emb, labels[picks], losses.ClassificationHead.from_params(head), iteration=it)
        if not np.isfinite(out.loss):
            raise DivergenceError(it)
        grads = nn.backward(enc, params, cache, out.grad_embedding)
        grads["head.W"] = out.grad_W
        if out.grad_c is not None:
            grads["head.c"] = out.grad_c
        merged, state = nn.sgd_step({**params, **head}, grads, state)
        params = {k: merged[k] for k in params}
        head = {k: merged[k] for k in head}
        step_losses.append(float(out.loss))
        it += 1
        if it % cfg.schedule.iters_per_step == 0:
            entry = {"iteration": it, "lr": state.lr, "loss": float(np.mean(step_losses))}
            if val_waves:
                entry["val_top1"] = _val_top1(cfg, enc, params, head, val_waves, val_labels)
            history.append(entry)
            log.info("iter %d lr %.5g loss %.4f val_top1 %s", it, state.lr, entry["loss"], entry.get("val_top1"))
            step_losses = []
    return Checkpoint(cfg, it, params, head, state.velocity, list(ckpt.speakers), history, ckpt.warm_start, step_losses)


def _val_top1(cfg, enc, params, head, waves, labels) -> float:
    embs = np.stack([
        ev.extract_embedding(enc, params, w, cfg.frame, cfg.test_policy(), np.random.default_rng([cfg.seed, _VAL, i]), cfg.val_crops)
        for i, w in enumerate(waves)
    ])
    scores = losses.class_scores(cfg.loss, embs, losses.ClassificationHead.from_params(head))
    return ev.topk_accuracy(scores, labels, 1)


# --------------------------------------------------------------------------- downstream stages


def embed_records(ckpt: Checkpoint, manifest: Manifest, records, n_crops: int | None = None,
                  test_augment: bool | None = None, seed: int | None = None):
    """Multi-crop embeddings; utterance i uses a stream keyed on (seed, i)."""
    cfg = ckpt.config
    n_crops = cfg.n_crops if n_crops is None else n_crops
    seed = cfg.seed if seed is None else seed
    policy = cfg.test_policy()
    if test_augment is not None:
        policy = type(policy)(policy.crop_len, policy.reverse_prob, test_augment)
    enc = cfg.encoder_config()
    rows = []
    for r in records:
        w = manifest.load(r, cfg.frame.sample_rate)
        index = manifest.records.index(r)
        rows.append(ev.extract_embedding(enc, ckpt.params, w, cfg.frame, policy, utterance_rng(seed, index, _EMBED), n_crops))
    ids = [r.path for r in records]
    return ids, np.array(rows, dtype=np.float32).reshape(len(records), cfg.embedding_dim)


@dataclass
class VerificationReport:
    eer: float
    eer_threshold: float
    min_dcf: float
    min_dcf_threshold: float
    min_dcf_norm: float
    n_target: int
    n_nontarget: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def verification_report(ids, matrix, trials, dcf: ev.DcfParams = ev.DcfParams()):
    scores = ev.score_trials(ids, matrix, trials)
    labels = np.array([t.label for t in trials])
    e, e_t = ev.eer(scores, labels)
    c, c_t = ev.min_dcf(scores, labels, dcf)
    report = VerificationReport(e, e_t, c, c_t, c / dcf.default_cost, int(labels.sum()), int((1 - labels).sum()))
    return scores, report


def identification_report(ckpt: Checkpoint, manifest: Manifest, ids, matrix) -> dict:
    by_path = {r.path: r for r in manifest.records}
    index = {s: i for i, s in enumerate(ckpt.speakers)}
    try:
        labels = np.array([index[by_path[i].speaker] for i in ids])
    except KeyError as exc:
        raise KeyError(f"utterance or speaker {exc.args[0]} unknown to the checkpoint") from None
    head = losses.ClassificationHead.from_params(ckpt.head)
    scores = losses.class_scores(ckpt.config.loss, matrix.astype(np.float64), head)
    k5 = min(5, head.n_classes)
    return {
        "top1": ev.topk_accuracy(scores, labels, 1),
        "top5": ev.topk_accuracy(scores, labels, k5),
        "n": len(ids),
    }


def ensure_dir(path) -> str:
    os.makedirs(os.fspath(path), exist_ok=True)
    return os.fspath(path)
