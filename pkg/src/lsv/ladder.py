"""Layer-wise corruption, the learnable denoising combinator and the weighted
reconstruction cost used by ladder training.

Combinator parameters for one layer are stored as a single ``(10, d)`` array
whose rows are a1..a10 (per-unit vectors).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numcore import DimensionError, RngStream, sigmoid

DEFAULT_SIGMA = 0.3
DEFAULT_LAMBDA0 = 1000.0
DEFAULT_LAMBDA1 = 10.0
DEFAULT_LAMBDA_REST = 0.1


class LadderConfigError(ValueError):
    pass


class LadderStateError(RuntimeError):
    pass


LAMBDA_NORMS = ("unit", "sum")


@dataclass(frozen=True)
class LadderConfig:
    sigma: float = DEFAULT_SIGMA
    lambdas: tuple[float, ...] = ()
    decoder_weight_init: str = "gaussian"
    combinator_init: str = "identity"

    def __post_init__(self):
        if self.sigma < 0:
            raise LadderConfigError(f"sigma must be >= 0, got {self.sigma}")
        if any(l < 0 for l in self.lambdas):
            raise LadderConfigError(f"lambda weights must be >= 0, got {self.lambdas}")
        if self.decoder_weight_init not in ("gaussian",):
            raise LadderConfigError(f"unknown decoder init {self.decoder_weight_init!r}")
        if self.combinator_init not in ("identity", "random"):
            raise LadderConfigError(f"unknown combinator init {self.combinator_init!r}")
        object.__setattr__(self, "lambdas", tuple(float(l) for l in self.lambdas))

    @classmethod
    def preset(cls, n_layers: int, sigma: float = DEFAULT_SIGMA, lambda0=DEFAULT_LAMBDA0,
               lambda1=DEFAULT_LAMBDA1, lambda_rest=DEFAULT_LAMBDA_REST, **kw) -> "LadderConfig":
        """Weights (lambda0, lambda1, lambda_rest, ...) for input + ``n_layers`` hidden layers."""
        lambdas = [lambda0, lambda1] + [lambda_rest] * (n_layers - 1)
        return cls(sigma=sigma, lambdas=tuple(lambdas[: n_layers + 1]), **kw)

    def normalized(self, widths, norm: str = "unit") -> "LadderConfig":
        """Rescale the weights for a cost that sums squared errors over units.

        ``"unit"`` divides each layer's weight by its width, which turns the
        summed cost into a per-unit average; ``"sum"`` keeps the raw weights.
        """
        if norm not in LAMBDA_NORMS:
            raise LadderConfigError(f"lambda_norm must be one of {LAMBDA_NORMS}, got {norm!r}")
        if norm == "sum":
            return self
        if len(widths) < len(self.lambdas):
            raise LadderConfigError(f"{len(self.lambdas)} lambda weights but only {len(widths)} layer widths")
        return replace(self, lambdas=tuple(l / w for l, w in zip(self.lambdas, widths)))


@dataclass
class LadderLayerState:
    h: np.ndarray
    h_tilde: np.ndarray
    u: np.ndarray | None = None
    h_hat: np.ndarray | None = None
    bn_var: np.ndarray | None = field(default=None, repr=False)


def corrupt(h: np.ndarray, sigma: float, rng: RngStream) -> np.ndarray:
    """Add i.i.d. Gaussian noise with standard deviation ``sigma``.

    ``sigma == 0`` returns the input untouched and draws nothing from ``rng``.
    """
    if sigma < 0:
        raise LadderConfigError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return h
    return h + rng.normal(h.shape, sigma)


def init_combinator(d: int, scheme: str = "identity", rng: RngStream | None = None) -> np.ndarray:
    a = np.zeros((10, d))
    if scheme == "identity":
        a[9] = 1.0  # a10: nu == 1, mu == 0, so h_hat == h_tilde
    elif scheme == "random":
        if rng is None:
            raise LadderConfigError("random combinator init needs an rng")
        a = rng.normal((10, d), 0.5)
        a[9] += 1.0
    else:
        raise LadderConfigError(f"unknown combinator init {scheme!r}")
    return a


def _check(u, vecs):
    d = u.shape[1]
    for v in vecs:
        if np.shape(v) != (d,):
            raise DimensionError(f"combinator vector of shape {np.shape(v)} does not match width {d}")


def combinator_mu(u, a1, a2, a3, a4, a5):
    _check(u, (a1, a2, a3, a4, a5))
    return a1 * sigmoid(a2 * u + a3) + a4 * u + a5


def combinator_nu(u, a6, a7, a8, a9, a10):
    _check(u, (a6, a7, a8, a9, a10))
    return a6 * sigmoid(a7 * u + a8) + a9 * u + a10


def denoise(h_tilde: np.ndarray, u: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Reconstruct a layer from its corrupted value and the top-down signal."""
    if h_tilde.shape != u.shape:
        raise DimensionError(f"h_tilde {h_tilde.shape} and u {u.shape} differ")
    mu = combinator_mu(u, *a[:5])
    nu = combinator_nu(u, *a[5:])
    return (h_tilde - mu) * nu + mu


def denoise_backward(g: np.ndarray, h_tilde: np.ndarray, u: np.ndarray, a: np.ndarray):
    """Returns (d h_tilde, d u, d a) for upstream gradient ``g`` on h_hat."""
    s1 = sigmoid(a[1] * u + a[2])
    s2 = sigmoid(a[6] * u + a[7])
    mu = a[0] * s1 + a[3] * u + a[4]
    nu = a[5] * s2 + a[8] * u + a[9]

    dh_tilde = g * nu
    dmu = g * (1.0 - nu)
    dnu = g * (h_tilde - mu)

    ds1 = s1 * (1.0 - s1)
    ds2 = s2 * (1.0 - s2)
    t1 = dmu * a[0] * ds1
    t2 = dnu * a[5] * ds2
    da = np.stack([
        (dmu * s1).sum(0), (t1 * u).sum(0), t1.sum(0), (dmu * u).sum(0), dmu.sum(0),
        (dnu * s2).sum(0), (t2 * u).sum(0), t2.sum(0), (dnu * u).sum(0), dnu.sum(0),
    ])
    du = t1 * a[1] + dmu * a[3] + t2 * a[6] + dnu * a[8]
    return dh_tilde, du, da


def layer_sq_error(h: np.ndarray, h_hat: np.ndarray) -> float:
    """Mean over rows of the per-row squared error summed over units."""
    diff = h - h_hat
    return float(np.sum(diff * diff) / h.shape[0])


def denoising_cost(states: list[LadderLayerState], lambdas) -> float:
    """Weighted reconstruction cost; ``states[0]`` is the input layer."""
    if len(lambdas) != len(states):
        raise LadderConfigError(f"{len(lambdas)} lambda weights for {len(states)} layers")
    total = 0.0
    for l, (st, lam) in enumerate(zip(states, lambdas)):
        if st.h is None or st.h_hat is None:
            raise LadderStateError(f"layer {l} has no reconstruction")
        total += lam * layer_sq_error(st.h, st.h_hat)
    return total


def ladder_pass(net, batch, cfg: LadderConfig | None = None, rng: RngStream | None = None):
    """One joint forward/backward step on a ladder-attached network.

    Returns ``(ce_loss, denoise_cost, total_loss, grads)`` where ``grads`` maps
    parameter names to freshly computed gradient arrays (also left in
    ``param.grad``).
    """
    if net.ladder is None:
        raise LadderConfigError("network has no ladder attachment")
    if cfg is not None and cfg != net.ladder:
        net = net.with_ladder_config(cfg)
    out = net.loss_and_grad(batch, rng)
    grads = {name: p.grad.copy() for name, p in net.params.items()}
    return out.ce, out.aux, out.total, grads
