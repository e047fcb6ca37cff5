"""Multi-crop embeddings, cosine scoring, Top-k identification and EER / C_det verification."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import nn
from .audio import AugmentPolicy, Waveform, sample_training_crop
from .features import FrameSpec, featurize, read_matrix, write_matrix


@dataclass(frozen=True)
class DcfParams:
    c_miss: float = 1.0
    c_fa: float = 1.0
    p_target: float = 0.01

    def __post_init__(self):
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("detection costs must be positive")
        if not 0.0 < self.p_target < 1.0:
            raise ValueError("p_target must lie in (0, 1)")

    @property
    def default_cost(self) -> float:
        """Cost of the better trivial policy, used to normalize C_det."""
        return min(self.c_miss * self.p_target, self.c_fa * (1.0 - self.p_target))


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    p_miss: float
    p_fa: float


@dataclass(frozen=True)
class TrialPair:
    label: int
    enroll_id: str
    test_id: str


# --------------------------------------------------------------------------- embeddings


def extract_embedding(
    config: nn.EncoderConfig,
    params: dict,
    w: Waveform,
    frame_spec: FrameSpec,
    policy: AugmentPolicy,
    rng: np.random.Generator,
    n_crops: int = 50,
) -> np.ndarray:
    """Mean of the eval-mode embeddings of ``n_crops`` crops drawn under ``policy``."""
    if n_crops < 1:
        raise ValueError("n_crops must be >= 1")
    feats = [featurize(sample_training_crop(w, policy, rng), frame_spec) for _ in range(n_crops)]
    dtype = next(iter(params.values())).dtype if params else np.float64
    emb, _ = nn.forward(config, params, np.stack(feats).astype(dtype, copy=False), mode="eval")
    return emb.mean(axis=0)


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine score of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# --------------------------------------------------------------------------- verification metrics


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    tar, non = scores[labels], scores[~labels]
    if tar.size == 0 or non.size == 0:
        raise ValueError("need at least one target and one nontarget trial")
    return tar, non


def det_points(scores, labels) -> list:
    """Operating points at -inf, every midpoint between distinct scores, and +inf.

    A trial is accepted when its score is >= the threshold.
    """
    tar, non = _split(scores, labels)
    uniq = np.unique(np.concatenate([tar, non]))
    thresholds = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2.0, [np.inf]])
    tar_sorted, non_sorted = np.sort(tar), np.sort(non)
    p_miss = np.searchsorted(tar_sorted, thresholds, side="left") / tar.size
    p_fa = 1.0 - np.searchsorted(non_sorted, thresholds, side="left") / non.size
    return [OperatingPoint(float(t), float(m), float(f)) for t, m, f in zip(thresholds, p_miss, p_fa)]


def _interp_threshold(t0, t1, frac, uniq_fallback):
    if np.isfinite(t0) and np.isfinite(t1):
        return t0 + frac * (t1 - t0)
    if np.isfinite(t0):
        return t0
    if np.isfinite(t1):
        return t1
    return uniq_fallback


def eer(scores, labels):
    """Equal error rate by linear interpolation where P_miss - P_fa changes sign.

    Returns ``(eer, threshold)``.
    """
    pts = det_points(scores, labels)
    diff = np.array([p.p_miss - p.p_fa for p in pts])
    zero = np.flatnonzero(diff == 0)
    if zero.size:
        p = pts[zero[0]]
        t = p.threshold if np.isfinite(p.threshold) else float(np.median(scores))
        return p.p_miss, t
    i = int(np.flatnonzero(diff > 0)[0]) - 1
    a, b = pts[i], pts[i + 1]
    frac = diff[i] / (diff[i] - diff[i + 1])
    value = a.p_miss + frac * (b.p_miss - a.p_miss)
    return float(value), float(_interp_threshold(a.threshold, b.threshold, frac, np.median(scores)))


def detection_cost(p_miss, p_fa, p: DcfParams = DcfParams()) -> float:
    return p.c_miss * p_miss * p.p_target + p.c_fa * p_fa * (1.0 - p.p_target)


def min_dcf(scores, labels, p: DcfParams = DcfParams()):
    """Minimum over thresholds of the (unnormalized) detection cost; returns ``(cost, threshold)``."""
    best = None
    for pt in det_points(scores, labels):
        cost = detection_cost(pt.p_miss, pt.p_fa, p)
        if best is None or cost < best[0]:
            best = (cost, pt.threshold)
    return best


# --------------------------------------------------------------------------- identification


def topk_accuracy(logit_rows, labels, k: int) -> float:
    """Fraction of rows whose true class is among the ``k`` best; ties rank the lower index first."""
    z = np.asarray(logit_rows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if k > z.shape[1] or k < 1:
        raise ValueError(f"k={k} outside [1, {z.shape[1]}]")
    true = z[np.arange(z.shape[0]), labels][:, None]
    idx = np.arange(z.shape[1])[None, :]
    rank = np.sum(z > true, axis=1) + np.sum((z == true) & (idx < labels[:, None]), axis=1)
    return float(np.mean(rank < k))


# --------------------------------------------------------------------------- files


def read_trials(path) -> list:
    trials = []
    with open(os.fspath(path)) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected '<1|0> <enroll> <test>'")
            trials.append(TrialPair(int(parts[0]), parts[1], parts[2]))
    return trials


def write_trials(path, trials) -> None:
    with open(os.fspath(path), "w") as fh:
        for t in trials:
            fh.write(f"{t.label} {t.enroll_id} {t.test_id}\n")


def write_scores(path, trials, scores) -> None:
    with open(os.fspath(path), "w") as fh:
        for t, s in zip(trials, scores):
            fh.write(f"{t.enroll_id} {t.test_id} {s:.8f}\n")


def write_store(path, ids, matrix) -> None:
    """Embedding matrix (one row per utterance) plus an ``<path>.ids`` sidecar."""
    matrix = np.asarray(matrix)
    if len(ids) != matrix.shape[0]:
        raise ValueError("one id per embedding row required")
    write_matrix(path, matrix)
    with open(os.fspath(path) + ".ids", "w") as fh:
        fh.writelines(f"{i}\n" for i in ids)


def read_store(path):
    matrix = read_matrix(path)
    with open(os.fspath(path) + ".ids") as fh:
        ids = [line.rstrip("\n") for line in fh if line.strip()]
    if len(ids) != matrix.shape[0]:
        raise ValueError(f"{path}: {len(ids)} ids for {matrix.shape[0]} rows")
    return ids, matrix


def score_trials(ids, matrix, trials):
    index = {u: i for i, u in enumerate(ids)}
    scores = []
    for t in trials:
        try:
            a, b = matrix[index[t.enroll_id]], matrix[index[t.test_id]]
        except KeyError as exc:
            raise KeyError(f"trial references unknown utterance {exc.args[0]}") from None
        scores.append(cosine_score(a, b))
    return np.array(scores)
