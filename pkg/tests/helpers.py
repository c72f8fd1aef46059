"""Shared fixtures for gradient checks: tiny networks with no dead units."""

import numpy as np

from lsv import ladder as lad
from lsv import nets
from lsv.numcore import RngStream, grad_check

# Central differences at h=1e-5 lose ~1e-10 absolute accuracy to roundoff, so
# gradients below ~1e-6 can exceed 1e-4 relative error on unlucky draws. One
# fixed seed is used for every system.
CHECK_SEED = 2
TINY_XV_WIDTHS = (8, 8, 6, 8, 8, 6, 5)
CHECK_LAMBDAS = {
    "d-ladder": (0.05, 0.5, 0.3, 0.2, 0.1),
    "x-ladder": (0.1, 0.5, 0.3, 0.2, 0.2, 0.1),
}


def activate_all_units(net, batch):
    """Set every relu layer's bias so each unit is active on 40-85% of rows.

    Dead units make some gradients exactly zero while finite differences
    still see roundoff, which the relative-error metric cannot absorb. The
    kink is placed midway between two neighbouring pre-activations so no row
    sits within a finite-difference step of it.
    """
    h, lengths = batch.x, batch.lengths
    for layer in net.layers:
        if isinstance(layer, (nets.Dense, nets.TimeDelay)) and layer.spec.activation == "relu":
            layer.b.value[...] = 0.0
            zpre = layer.forward(h, lengths)[2][-1]
            zs = np.sort(zpre, axis=0)
            n = len(zs)
            lo, hi = max(0, int(0.15 * n) - 1), max(1, int(0.6 * n))
            gaps = zs[lo + 1:hi + 1] - zs[lo:hi]
            k = lo + np.argmax(gaps, axis=0)
            cols = np.arange(zs.shape[1])
            layer.b.value[...] = -0.5 * (zs[k, cols] + zs[k + 1, cols])
        h, lengths, _ = layer.forward(h, lengths)


def randomize_combinators(net, rng):
    for name, p in net.params.items():
        if ".comb" in name:
            p.value[...] = lad.init_combinator(p.shape[1], "random", rng)


def tiny_system(system, seed=0, n_speakers=3, width=8, xvector_widths=TINY_XV_WIDTHS, lambda_norm="sum",
                lambdas=None):
    """A small network of the given system plus a batch and a frozen-noise loss.

    ``lambdas`` is a scalar applied to every reconstructed layer; by default
    the per-layer weights in CHECK_LAMBDAS are used.
    """
    data = RngStream(seed, "data")
    if system.startswith("d"):
        fd = 1
        labels = np.arange(6) % n_speakers
        batch = nets.Batch(data.normal((6, 51 * fd)), labels)
    else:
        fd = 3
        batch = nets.Batch.from_sequences([data.normal((T, fd)) for T in (20, 17, 23, 19, 16, 21)],
                                          np.arange(6) % n_speakers)
    kw = {"lambda_norm": lambda_norm}
    if system in CHECK_LAMBDAS:
        kw["lambdas"] = CHECK_LAMBDAS[system] if lambdas is None else (lambdas,) * len(CHECK_LAMBDAS[system])
    if system == "x-multi":
        kw["lambda0"] = 0.2 if lambdas is None else lambdas
    net = nets.build_system(system, n_speakers=n_speakers, feat_dim=fd, seed=seed, width=width,
                            xvector_widths=xvector_widths, **kw)
    activate_all_units(net, batch)
    randomize_combinators(net, RngStream(seed, "comb"))

    def loss_fn():
        return net.loss_and_grad(batch, RngStream(seed, "noise")).total

    return net, batch, loss_fn


def check_system(system, seed=0, width=8, xvector_widths=TINY_XV_WIDTHS, lambda_norm="sum", lambdas=None, **kw):
    net, _, loss_fn = tiny_system(system, seed, width=width, xvector_widths=xvector_widths,
                                  lambda_norm=lambda_norm, lambdas=lambdas)
    return grad_check(loss_fn, list(net.params.values()), **kw)


def eer_oracle(tgt, non):
    """Exhaustive threshold sweep with plain counting loops.

    Thresholds: -inf, midpoints of distinct sorted scores, +inf. FRR counts
    targets below the threshold and FAR counts nontargets at or above it. The
    EER is interpolated linearly where FRR - FAR changes sign; on an exact tie
    interval the common rate is returned.
    """
    u = sorted(set(list(tgt) + list(non)))
    thr = [-np.inf] + [(a + b) / 2 for a, b in zip(u, u[1:])] + [np.inf]
    pts = []
    for t in thr:
        frr = sum(1 for s in tgt if s < t) / len(tgt)
        far = sum(1 for s in non if s >= t) / len(non)
        pts.append((far, frr))
    for (far0, frr0), (far1, frr1) in zip(pts, pts[1:]):
        if frr0 == far0:
            return frr0
        d0, d1 = frr0 - far0, frr1 - far1
        if d0 < 0 < d1:
            a = -d0 / (d1 - d0)
            return frr0 + a * (frr1 - frr0)
    return pts[-1][1]


def sample_plda_data(d, n_spk, n_utt, seed, model=None):
    """Embeddings drawn from a two-covariance model (random unless given), plus the model."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(d, d))
    C = rng.normal(size=(d, d))
    m = rng.normal(size=d)
    B = A @ A.T / d + 0.5 * np.eye(d)
    W = 0.3 * (C @ C.T / d + 0.2 * np.eye(d))
    if model is not None:
        m, B, W = model
    ys = rng.multivariate_normal(m, B, size=n_spk)
    X = np.concatenate([y + rng.multivariate_normal(np.zeros(d), W, size=n_utt) for y in ys])
    labels = np.repeat(np.arange(n_spk), n_utt)
    return X, labels, (m, B, W)
