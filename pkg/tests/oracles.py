"""Independent reference implementations used as test oracles.

The loss references are written directly from the scalar formulas in mpmath at
40 significant digits, so their central differences are accurate far beyond
float64 and can judge the analytic gradients without roundoff noise.
"""

import itertools

import mpmath
import numpy as np

from spkembed.losses import AMSoftmax, ASoftmax, LogisticMargin, Softmax

DPS = 40


def _norm(v):
    return mpmath.sqrt(mpmath.fsum(a * a for a in v))


def _dot(a, b):
    return mpmath.fsum(p * q for p, q in zip(a, b))


def _psi(theta, m):
    k = max(0, min(m - 1, int(mpmath.ceil(m * theta / mpmath.pi)) - 1))
    return (-1) ** k * mpmath.cos(m * theta) - 2 * k


def _score(cfg, x, w, c, true, iteration):
    """One logit z_ij of example x against class (w, c)."""
    if isinstance(cfg, Softmax):
        return _dot(w, x) + (c if c is not None else 0)
    if isinstance(cfg, LogisticMargin):
        s = _dot(w, x) / _norm(x) + (c if c is not None else 0)
        return s - cfg.alpha if true else s
    cos = _dot(w, x) / (_norm(w) * _norm(x))
    if isinstance(cfg, AMSoftmax):
        return cfg.s * (cos - cfg.m) if true else cfg.s * cos
    if isinstance(cfg, ASoftmax):
        if not true:
            return _norm(x) * cos
        lam = max(cfg.lambda_min, cfg.lambda_base / (1 + cfg.gamma * iteration))
        theta = mpmath.acos(max(-1, min(1, cos)))
        return _norm(x) * (lam * cos + _psi(theta, cfg.m)) / (1 + lam)
    raise TypeError(cfg)


def _nll(row, y):
    top = max(row)
    return -(row[y] - top - mpmath.log(mpmath.fsum(mpmath.exp(v - top) for v in row)))


class ReferenceLoss:
    """Mean cross-entropy for one loss config over an (x, labels, head) instance."""

    def __init__(self, cfg, x, labels, W, c=None, iteration=0):
        mpmath.mp.dps = DPS
        self.cfg, self.it = cfg, iteration
        self.x = [[mpmath.mpf(float(v)) for v in row] for row in x]
        self.W = [[mpmath.mpf(float(v)) for v in row] for row in W]
        self.c = None if c is None else [mpmath.mpf(float(v)) for v in c]
        self.y = [int(v) for v in labels]
        self.z = [[self._z(i, j) for j in range(len(self.W))] for i in range(len(self.x))]

    def _z(self, i, j):
        return _score(self.cfg, self.x[i], self.W[j], None if self.c is None else self.c[j], j == self.y[i], self.it)

    def value(self):
        return mpmath.fsum(_nll(row, y) for row, y in zip(self.z, self.y)) / len(self.y)

    def gradients(self, h=mpmath.mpf("1e-15")):
        """Central differences for x, W and c, recomputing only the logits a parameter touches."""
        B, C, d = len(self.x), len(self.W), len(self.x[0])
        losses_ = [_nll(row, y) for row, y in zip(self.z, self.y)]

        def bump(target, idx, i_rows, j_cols):
            out = []
            for sign in (1, -1):
                orig = target[idx[0]][idx[1]] if isinstance(idx, tuple) else target[idx]
                new = orig + sign * h
                if isinstance(idx, tuple):
                    target[idx[0]][idx[1]] = new
                else:
                    target[idx] = new
                total = mpmath.mpf(0)
                for i in range(B):
                    if i in i_rows:
                        row = list(self.z[i])
                        for j in (range(C) if j_cols is None else j_cols):
                            row[j] = self._z(i, j)
                        total += _nll(row, self.y[i])
                    else:
                        total += losses_[i]
                out.append(total / B)
                if isinstance(idx, tuple):
                    target[idx[0]][idx[1]] = orig
                else:
                    target[idx] = orig
            return (out[0] - out[1]) / (2 * h)

        gx = np.zeros((B, d))
        for i, k in itertools.product(range(B), range(d)):
            gx[i, k] = float(bump(self.x, (i, k), {i}, None))
        gW = np.zeros((C, d))
        for j, k in itertools.product(range(C), range(d)):
            gW[j, k] = float(bump(self.W, (j, k), set(range(B)), [j]))
        gc = None
        if self.c is not None:
            gc = np.array([float(bump(self.c, j, set(range(B)), [j])) for j in range(C)])
        return gx, gW, gc


def max_rel_error(analytic, reference):
    a, n = np.asarray(analytic, float).ravel(), np.asarray(reference, float).ravel()
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)))


def loss_gradient_error(cfg, out, x, labels, W, c=None, iteration=0):
    """Worst relative error of a LossOutput's gradients against the reference."""
    gx, gW, gc = ReferenceLoss(cfg, x, labels, W, c, iteration).gradients()
    errs = [max_rel_error(out.grad_embedding, gx), max_rel_error(out.grad_W, gW)]
    if gc is not None:
        errs.append(max_rel_error(out.grad_c, gc))
    return max(errs)


# --------------------------------------------------------------------------- metrics


def brute_force_eer(scores, labels):
    """Scan every threshold (all midpoints plus +-inf) in O(n^2) and
    linearly interpolate the crossing of P_miss and P_fa."""
    scores = [float(s) for s in scores]
    labels = [int(v) for v in labels]
    n_t = sum(labels)
    n_n = len(labels) - n_t
    uniq = sorted(set(scores))
    thresholds = [-np.inf] + [(a + b) / 2 for a, b in zip(uniq, uniq[1:])] + [np.inf]
    pts = []
    for t in thresholds:
        miss = sum(1 for s, l in zip(scores, labels) if l == 1 and s < t) / n_t
        fa = sum(1 for s, l in zip(scores, labels) if l == 0 and s >= t) / n_n
        pts.append((t, miss, fa))
    for (t0, m0, f0), (t1, m1, f1) in zip(pts, pts[1:]):
        d0, d1 = m0 - f0, m1 - f1
        if d0 == 0:
            return m0
        if d0 < 0 <= d1:
            frac = -d0 / (d1 - d0)
            return m0 + frac * (m1 - m0)
    return pts[-1][1]


def brute_force_min_dcf(scores, labels, c_miss=1.0, c_fa=1.0, p_target=0.01):
    scores = [float(s) for s in scores]
    labels = [int(v) for v in labels]
    n_t = sum(labels)
    n_n = len(labels) - n_t
    best = np.inf
    for t in [-np.inf] + sorted(set(scores)) + [np.inf]:
        miss = sum(1 for s, l in zip(scores, labels) if l == 1 and s < t) / n_t
        fa = sum(1 for s, l in zip(scores, labels) if l == 0 and s >= t) / n_n
        best = min(best, c_miss * miss * p_target + c_fa * fa * (1 - p_target))
    return best
