"""Verification backend: embedding post-processing, cosine and PLDA scoring, EER."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .data import CorpusManifest, TrialList
from .nets import Network, extract_embedding

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)


class ScoringError(ValueError):
    pass


class PldaError(ValueError):
    pass


class LookupError_(KeyError):
    """Utterance referenced by a trial is missing from the manifest."""


def length_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ScoringError("cannot length-normalize a zero vector")
    return v / n


def cosine_score(e1, e2) -> float:
    e1, e2 = np.asarray(e1, float), np.asarray(e2, float)
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 == 0 or n2 == 0:
        raise ScoringError("cosine similarity of a zero vector")
    return float(np.clip(e1 @ e2 / (n1 * n2), -1.0, 1.0))


# ---------------------------------------------------------------- PLDA

@dataclass
class PldaModel:
    """Two-covariance model: x = y_spk + e, y_spk ~ N(mean, B), e ~ N(0, W)."""
    mean: np.ndarray
    between: np.ndarray
    within: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _logdet(a):
    sign, ld = np.linalg.slogdet(a)
    if sign <= 0:
        raise PldaError("covariance is not positive definite")
    return ld


def _ridge(W: np.ndarray) -> float:
    d = W.shape[0]
    scale = np.trace(W) / d
    return 1e-6 * (scale if scale > 0 else 1.0)


def _needs_ridge(W: np.ndarray) -> bool:
    ev = np.linalg.eigvalsh(W)
    return ev[0] <= 1e-10 * max(ev[-1], 1e-300)


def _speaker_stats(X, labels):
    groups = {}
    for i, s in enumerate(labels):
        groups.setdefault(s, []).append(i)
    counts, means, scatters = [], [], []
    for s in sorted(groups, key=str):
        xs = X[groups[s]]
        mu = xs.mean(axis=0)
        c = xs - mu
        counts.append(len(xs))
        means.append(mu)
        scatters.append(c.T @ c)
    return np.array(counts), np.array(means), scatters


def plda_loglik(model: PldaModel, X, labels) -> float:
    """Exact marginal log-likelihood of the data under the two-covariance model."""
    counts, means, scatters = _speaker_stats(np.asarray(X, float), labels)
    return _loglik(model.mean, model.between, model.within, counts, means, scatters)


def _loglik(m, B, W, counts, means, scatters):
    d = m.shape[0]
    Winv = np.linalg.inv(W)
    ldW = _logdet(W)
    total = 0.0
    for n, xbar, S in zip(counts, means, scatters):
        C = B + W / n
        r = xbar - m
        total += -0.5 * (d * LOG2PI + _logdet(C) + r @ np.linalg.solve(C, r))
        total += -0.5 * ((n - 1) * d * LOG2PI + (n - 1) * ldW + d * np.log(n) + np.sum(Winv * S))
    return float(total)


def plda_train(X, labels, iters: int = 20, return_history: bool = False):
    """Fit a two-covariance PLDA model by EM.

    The data log-likelihood is checked to be non-decreasing at every
    iteration unless a ridge had to be added to keep W invertible.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = list(labels)
    counts, means, scatters = _speaker_stats(X, labels)
    if len(counts) < 2:
        raise PldaError("PLDA needs at least 2 speakers")
    if counts.max() < 2:
        raise PldaError("PLDA needs at least one speaker with 2 or more utterances")
    N, d = X.shape

    m = X.mean(axis=0)
    dm = means - m
    B = dm.T @ dm / len(counts)
    W = sum(scatters) / N
    ridge = 0.0
    if _needs_ridge(W):
        ridge = _ridge(W + B)
        warnings.warn(f"within-speaker covariance is singular; adding ridge {ridge:.3g}", RuntimeWarning)
        W = W + ridge * np.eye(d)

    history = [_loglik(m, B, W, counts, means, scatters)]
    for _ in range(iters):
        post_means = np.empty_like(means)
        post_covs = []
        cache = {}
        for k, n in enumerate(counts):
            if n not in cache:
                gain = np.linalg.solve((B + W / n).T, B.T).T  # B (B + W/n)^-1
                cache[n] = (gain, B - gain @ B)
            gain, cov = cache[n]
            post_means[k] = m + gain @ (means[k] - m)
            post_covs.append(cov)
        m = post_means.mean(axis=0)
        c = post_means - m
        B = (sum(post_covs) + c.T @ c) / len(counts)
        W = np.zeros((d, d))
        for n, xbar, S, yhat, cov in zip(counts, means, scatters, post_means, post_covs):
            r = xbar - yhat
            W += S + n * (np.outer(r, r) + cov)
        W /= N
        B, W = 0.5 * (B + B.T), 0.5 * (W + W.T)
        if ridge:
            W += ridge * np.eye(d)
        history.append(_loglik(m, B, W, counts, means, scatters))
        if not ridge and history[-1] < history[-2] - 1e-9 * abs(history[-2]):
            raise PldaError(f"EM log-likelihood decreased: {history[-2]!r} -> {history[-1]!r}")

    model = PldaModel(m, B, W)
    return (model, history) if return_history else model


class PldaScorer:
    """Precomputed inverses for scoring many trials with one model."""

    def __init__(self, model: PldaModel):
        d = model.dim
        T = model.between + model.within
        joint = np.block([[T, model.between], [model.between, T]])
        self.model = model
        self.joint_inv = np.linalg.inv(joint)
        self.tot_inv = np.linalg.inv(T)
        self.const = -0.5 * _logdet(joint) + _logdet(T)
        self.d = d

    def score(self, E1, E2) -> np.ndarray:
        E1, E2 = np.atleast_2d(np.asarray(E1, float)), np.atleast_2d(np.asarray(E2, float))
        if E1.shape[1] != self.d or E2.shape[1] != self.d:
            raise ScoringError(f"embedding dim {E1.shape[1]}/{E2.shape[1]} does not match PLDA dim {self.d}")
        E1, E2 = E1 - self.model.mean, E2 - self.model.mean
        Z = np.hstack([E1, E2])
        same = np.einsum("ij,jk,ik->i", Z, self.joint_inv, Z)
        diff = np.einsum("ij,jk,ik->i", E1, self.tot_inv, E1) + np.einsum("ij,jk,ik->i", E2, self.tot_inv, E2)
        return -0.5 * same + 0.5 * diff + self.const


def plda_score(model: PldaModel, e_enroll, e_test) -> float:
    """Same-speaker vs different-speaker log-likelihood ratio."""
    return float(PldaScorer(model).score(e_enroll, e_test)[0])


# ---------------------------------------------------------------- EER / DET

@dataclass
class ScoreSet:
    enroll: list[str]
    test: list[str]
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if not np.all(np.isfinite(self.scores)):
            raise ScoringError("non-finite scores")

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for e, t, s in zip(self.enroll, self.test, self.scores):
                f.write(f"{e}\t{t}\t{float(s)!r}\n")


def _split(scores, labels=None):
    if isinstance(scores, ScoreSet):
        scores, labels = scores.scores, scores.labels
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    tgt, non = np.sort(scores[labels]), np.sort(scores[~labels])
    if len(tgt) == 0 or len(non) == 0:
        raise ScoringError("EER needs at least one target and one nontarget trial")
    return scores, tgt, non


def _rates(scores, labels=None):
    scores, tgt, non = _split(scores, labels)
    u = np.unique(scores)
    thr = np.concatenate([[-np.inf], 0.5 * (u[:-1] + u[1:]), [np.inf]])
    frr = np.searchsorted(tgt, thr, side="left") / len(tgt)
    far = (len(non) - np.searchsorted(non, thr, side="left")) / len(non)
    return thr, far, frr


def det_points(scores, labels=None) -> list[tuple[float, float]]:
    """(FAR, FRR) at every midpoint threshold plus -inf and +inf, ascending threshold."""
    _, far, frr = _rates(scores, labels)
    return list(zip(far.tolist(), frr.tolist()))


def compute_eer(scores, labels=None) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Rates are evaluated at midpoints between distinct scores (plus +-inf);
    the EER is the linear interpolation of FAR and FRR at their crossing.
    Accepts a ScoreSet or (scores, labels).
    """
    thr, far, frr = _rates(scores, labels)
    diff = frr - far  # non-decreasing in the threshold
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0:
        j = i
        while j + 1 < len(diff) and diff[j + 1] == 0:
            j += 1
        lo, hi = thr[i], thr[j]
        t = lo if not np.isfinite(hi) else hi if not np.isfinite(lo) else 0.5 * (lo + hi)
        return float(frr[i]), float(t)
    a = -diff[i - 1] / (diff[i] - diff[i - 1])
    eer = frr[i - 1] + a * (frr[i] - frr[i - 1])
    lo, hi = thr[i - 1], thr[i]
    t = lo if not np.isfinite(hi) else hi if not np.isfinite(lo) else lo + a * (hi - lo)
    return float(eer), float(t)


# ---------------------------------------------------------------- pipeline

def default_backend(net: Network) -> str:
    return "cosine" if net.framework == "d-vector" else "plda"


def embed_manifest(net: Network, manifest: CorpusManifest, utterances=None) -> dict[str, np.ndarray]:
    """Raw (un-normalized) embeddings keyed by utterance id."""
    wanted = None if utterances is None else set(utterances)
    out = {}
    for e in manifest.entries:
        if wanted is None or e.utterance in wanted:
            out[e.utterance] = extract_embedding(net, manifest.load(e))
    if wanted is not None and wanted - out.keys():
        missing = sorted(wanted - out.keys())
        raise LookupError_(f"utterance {missing[0]!r} not found in manifest ({len(missing)} missing)")
    return out


def train_plda_on(net: Network, manifest: CorpusManifest, iters: int = 20) -> PldaModel:
    """PLDA fitted on length-normalized embeddings of the manifest's utterances."""
    if len(manifest) == 0:
        raise PldaError("no PLDA training utterances")
    emb = embed_manifest(net, manifest)
    X = length_normalize(np.array([emb[e.utterance] for e in manifest.entries]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return plda_train(X, [e.speaker for e in manifest.entries], iters)


def run_verification(net: Network, manifest: CorpusManifest, trials: TrialList, backend: str | None = None,
                     plda: PldaModel | None = None) -> tuple[ScoreSet, float]:
    """Score every trial and compute the EER.

    Enrollment embeddings are the renormalized average of the speaker's
    length-normalized enrollment utterance embeddings. When a trial's enroll
    id is not a speaker in ``trials.enrollment`` it is treated as an
    utterance id.
    """
    backend = backend or default_backend(net)
    if backend not in ("cosine", "plda"):
        raise ScoringError(f"unknown backend {backend!r}")
    if backend == "plda" and plda is None:
        raise PldaError("PLDA backend requires a trained PldaModel")
    enroll_utts = {}
    for t in trials:
        enroll_utts.setdefault(t.enroll, trials.enrollment.get(t.enroll, [t.enroll]))
    needed = {u for us in enroll_utts.values() for u in us} | {t.test for t in trials}
    raw = embed_manifest(net, manifest, needed)
    normed = {k: length_normalize(v) for k, v in raw.items()}
    enroll = {k: length_normalize(np.mean([normed[u] for u in us], axis=0)) for k, us in enroll_utts.items()}

    E1 = np.array([enroll[t.enroll] for t in trials])
    E2 = np.array([normed[t.test] for t in trials])
    if backend == "cosine":
        scores = np.clip(np.einsum("ij,ij->i", E1, E2), -1.0, 1.0)
    else:
        scores = PldaScorer(plda).score(E1, E2)
    ss = ScoreSet([t.enroll for t in trials], [t.test for t in trials], scores, trials.labels)
    return ss, compute_eer(ss)[0]


def make_evaluator(manifest: CorpusManifest, trials: TrialList, backend: str = "cosine",
                   plda_manifest: CorpusManifest | None = None):
    """Closure computing test EER for intermediate models during training."""
    def evaluate(net: Network) -> float:
        plda = train_plda_on(net, plda_manifest) if backend == "plda" else None
        return run_verification(net, manifest, trials, backend, plda)[1]
    return evaluate
