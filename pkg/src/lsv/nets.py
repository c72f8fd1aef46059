"""d-vector / x-vector networks, their ladder variants and the x-multi baseline.

Activations travel as 2-D arrays. Frame-level (time-delay) layers see a batch
of variable-length sequences stacked along axis 0 together with a tuple of
per-sequence lengths; everything elementwise (relu, corruption, batchnorm,
combinator, reconstruction cost) works on the stacked array directly.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ladder as lad
from .data import DVECTOR_LEFT, DVECTOR_RIGHT, FeatureSequence, window_context
from .numcore import (
    ParamTensor,
    RngStream,
    affine_backward,
    affine_forward,
    batchnorm_backward,
    batchnorm_forward,
    relu,
    relu_backward,
    softmax_xent,
)

DVECTOR_WINDOW = DVECTOR_LEFT + DVECTOR_RIGHT + 1
XVECTOR_CONTEXTS = ((-2, -1, 0, 1, 2), (-2, 0, 2), (-3, 0, 3), (0,), (0,))
XVECTOR_WIDTHS = {
    "desk": (64, 64, 64, 64, 128, 64, 64),
    "full": (512, 512, 512, 512, 1500, 512, 512),
}
POOL_EPS = 1e-10


class NetConfigError(ValueError):
    pass


class LengthError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "fc" | "tdnn" | "pool" | "softmax"
    in_dim: int
    out_dim: int
    context: tuple[int, ...] = (0,)
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ("fc", "tdnn", "pool", "softmax"):
            raise NetConfigError(f"unknown layer kind {self.kind!r}")
        ctx = tuple(int(c) for c in self.context)
        object.__setattr__(self, "context", ctx)
        if not ctx or any(b <= a for a, b in zip(ctx, ctx[1:])):
            raise NetConfigError(f"context offsets must be non-empty and strictly ascending, got {ctx}")
        if self.kind == "pool" and self.out_dim != 2 * self.in_dim:
            raise NetConfigError("stats-pool must have out_dim == 2 * in_dim")
        if self.activation not in ("relu", "none"):
            raise NetConfigError(f"unknown activation {self.activation!r}")

    @property
    def span(self) -> int:
        return self.context[-1] - self.context[0]


@dataclass(frozen=True)
class NetworkConfig:
    framework: str
    layers: tuple[LayerSpec, ...]
    n_speakers: int
    ladder: lad.LadderConfig | None = None
    # x-multi: a plain input-reconstruction DAE; sigma and lambdas=(lambda0,) live here
    dae: lad.LadderConfig | None = None
    profile: str = "desk"

    def __post_init__(self):
        if self.framework not in ("d-vector", "x-vector"):
            raise NetConfigError(f"unknown framework {self.framework!r}")
        kinds = [l.kind for l in self.layers]
        if kinds.count("softmax") != 1 or kinds[-1] != "softmax":
            raise NetConfigError("exactly one softmax layer, in last position, is required")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise NetConfigError(f"layer dims do not chain: {a} -> {b}")
        if self.layers[-1].out_dim != self.n_speakers:
            raise NetConfigError("softmax width must equal n_speakers")

    @property
    def multitask(self) -> bool:
        return self.dae is not None

    @property
    def system(self) -> str:
        base = "d" if self.framework == "d-vector" else "x"
        if self.ladder is not None:
            return f"{base}-ladder"
        if self.dae is not None:
            return "x-multi"
        return self.framework

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["layers"] = tuple(LayerSpec(**{**l, "context": tuple(l["context"])}) for l in d["layers"])
        for key in ("ladder", "dae"):
            if d.get(key) is not None:
                d[key] = lad.LadderConfig(**{**d[key], "lambdas": tuple(d[key]["lambdas"])})
        return cls(**d)


@dataclass
class Batch:
    """Inputs (stacked frames or windows), optional sequence lengths, labels."""
    x: np.ndarray
    labels: np.ndarray
    lengths: tuple[int, ...] | None = None

    @classmethod
    def from_sequences(cls, seqs, labels) -> "Batch":
        return cls(np.concatenate([s.frames if hasattr(s, "frames") else s for s in seqs]),
                   np.asarray(labels, dtype=np.int64),
                   tuple(int((s.frames if hasattr(s, "frames") else s).shape[0]) for s in seqs))


@dataclass
class StepLoss:
    ce: float
    aux: float
    total: float
    states: list = field(default_factory=list, repr=False)


# ---------------------------------------------------------------- time-delay kernels

def context_index(lengths, context) -> tuple[np.ndarray, tuple[int, ...]]:
    """Rows of the stacked input feeding each output frame, one column per offset."""
    span = context[-1] - context[0]
    rel = np.asarray(context) - context[0]
    blocks, out_lengths, start = [], [], 0
    for T in lengths:
        t_out = T - span
        if t_out < 1:
            raise LengthError(f"sequence of {T} frames is shorter than context span {span + 1}")
        blocks.append(start + np.arange(t_out)[:, None] + rel[None, :])
        out_lengths.append(t_out)
        start += T
    return np.concatenate(blocks), tuple(out_lengths)


def tdnn_forward(X: np.ndarray, spec: LayerSpec, W: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    """Valid (unpadded) time-delay affine layer on one sequence; no activation."""
    idx, _ = context_index((X.shape[0],), spec.context)
    return affine_forward(W, b, X[idx].reshape(idx.shape[0], -1))


def _moments(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # reducing over sorted columns makes the result independent of frame order, bitwise
    Xs = np.sort(X, axis=0)
    mean = Xs.mean(axis=0)
    return mean, np.sqrt(np.square(Xs - mean).mean(axis=0))


def stats_pool(X: np.ndarray) -> np.ndarray:
    """Per-dimension mean and population standard deviation over frames."""
    if X.shape[0] < 1:
        raise LengthError("statistics pooling over zero frames")
    return np.concatenate(_moments(X))


# ---------------------------------------------------------------- layers

class Dense:
    def __init__(self, spec: LayerSpec, W: ParamTensor, b: ParamTensor):
        self.spec, self.W, self.b = spec, W, b
        self.act = spec.activation == "relu"

    def forward(self, x, lengths):
        z = affine_forward(self.W.value, self.b.value, x)
        return (relu(z) if self.act else z), lengths, (x, z)

    def backward(self, dy, cache, need_input_grad=True):
        x, z = cache
        dz = relu_backward(dy, z) if self.act else dy
        self.W.grad += dz.T @ x
        self.b.grad += dz.sum(axis=0)
        return dz @ self.W.value if need_input_grad else None


class TimeDelay:
    def __init__(self, spec: LayerSpec, W: ParamTensor, b: ParamTensor):
        self.spec, self.W, self.b = spec, W, b

    def forward(self, x, lengths):
        idx, out_lengths = context_index(lengths, self.spec.context)
        xc = x[idx].reshape(idx.shape[0], -1)
        z = affine_forward(self.W.value, self.b.value, xc)
        return relu(z), out_lengths, (x.shape, idx, xc, z)

    def backward(self, dy, cache, need_input_grad=True):
        xshape, idx, xc, z = cache
        dz = relu_backward(dy, z)
        self.W.grad += dz.T @ xc
        self.b.grad += dz.sum(axis=0)
        if not need_input_grad:
            return None
        dxc = (dz @ self.W.value).reshape(idx.shape[0], idx.shape[1], -1)
        dx = np.zeros(xshape)
        for k in range(idx.shape[1]):
            dx[idx[:, k]] += dxc[:, k]  # rows within one offset column are distinct
        return dx


class StatsPool:
    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def forward(self, x, lengths):
        if lengths is None:
            raise NetConfigError("stats-pool needs sequence lengths")
        bounds = np.cumsum((0,) + tuple(lengths))
        means, stds = [], []
        for s, e in zip(bounds[:-1], bounds[1:]):
            m, sd = _moments(x[s:e])
            means.append(m)
            stds.append(sd)
        mean, std = np.array(means), np.array(stds)
        return np.hstack([mean, std]), None, (x, bounds, mean, std)

    def backward(self, dy, cache, need_input_grad=True):
        x, bounds, mean, std = cache
        d = x.shape[1]
        dx = np.empty_like(x)
        for i, (s, e) in enumerate(zip(bounds[:-1], bounds[1:])):
            n = e - s
            dmean, dstd = dy[i, :d], dy[i, d:]
            # d std / d x_t = (x_t - mean) / (n * std)
            dx[s:e] = dmean / n + dstd * (x[s:e] - mean[i]) / (n * np.maximum(std[i], POOL_EPS))
        return dx


class DenseAdjoint:
    """Mirror of a dense encoder layer: maps width d_l back to d_{l-1}; no bias."""

    def __init__(self, V: ParamTensor):
        self.V = V

    def forward(self, y, out_lengths, in_lengths):
        return y @ self.V.value.T, y

    def backward(self, dz, cache):
        y = cache
        self.V.grad += dz.T @ y
        return dz @ self.V.value


class TimeDelayAdjoint:
    """Transposed-context mirror of a time-delay layer (scatter-add); no bias.

    Output has the encoder layer's input length, so edge frames receive fewer
    contributions than interior frames.
    """

    def __init__(self, spec: LayerSpec, V: ParamTensor):
        self.spec, self.V = spec, V

    def forward(self, y, out_lengths, in_lengths):
        idx, got = context_index(in_lengths, self.spec.context)
        assert got == tuple(out_lengths)
        k = idx.shape[1]
        zc = (y @ self.V.value.T).reshape(idx.shape[0], k, -1)
        z = np.zeros((sum(in_lengths), zc.shape[2]))
        for j in range(k):
            z[idx[:, j]] += zc[:, j]
        return z, (y, idx)

    def backward(self, dz, cache):
        y, idx = cache
        dzc = dz[idx].reshape(idx.shape[0], -1)
        self.V.grad += dzc.T @ y
        return dzc @ self.V.value


# ---------------------------------------------------------------- network

class Network:
    """Classification network plus optional ladder or multi-task decoder."""

    def __init__(self, config: NetworkConfig, params: dict[str, ParamTensor]):
        self.config = config
        self.params = params
        self.layers = []
        for i, spec in enumerate(config.layers):
            if spec.kind in ("fc", "softmax"):
                self.layers.append(Dense(spec, params[f"layer{i + 1}.W"], params[f"layer{i + 1}.b"]))
            elif spec.kind == "tdnn":
                self.layers.append(TimeDelay(spec, params[f"layer{i + 1}.W"], params[f"layer{i + 1}.b"]))
            else:
                self.layers.append(StatsPool(spec))
        self.depth = self._ladder_depth()
        self.decoder = []
        if config.ladder is not None or config.dae is not None:
            prefix = "dec" if config.ladder is not None else "dae"
            for l in range(1, self.depth + 1):
                V = params[f"{prefix}.layer{l}.V"]
                spec = config.layers[l - 1]
                self.decoder.append(TimeDelayAdjoint(spec, V) if spec.kind == "tdnn" else DenseAdjoint(V))
            self.comb = [params[f"{prefix}.comb{l}"] for l in range(self.depth + 1)]

    # -- structure

    @property
    def ladder(self) -> lad.LadderConfig | None:
        return self.config.ladder

    @property
    def framework(self) -> str:
        return self.config.framework

    @property
    def system(self) -> str:
        return self.config.system

    def _ladder_depth(self) -> int:
        if self.framework == "d-vector":
            return sum(1 for l in self.config.layers if l.kind == "fc")
        return sum(1 for l in self.config.layers if l.kind == "tdnn")

    @property
    def widths(self) -> list[int]:
        """Widths of the reconstructable layers, input first."""
        return [self.config.layers[0].in_dim] + [self.config.layers[l].out_dim for l in range(self.depth)]

    @property
    def tap(self) -> int:
        """1-based index of the embedding layer."""
        if self.framework == "d-vector":
            return len(self.config.layers) - 1
        return [l.kind for l in self.config.layers].index("pool") + 2

    @property
    def embedding_dim(self) -> int:
        return self.config.layers[self.tap - 1].out_dim

    @property
    def min_frames(self) -> int:
        if self.framework == "d-vector":
            return DVECTOR_WINDOW
        return 1 + sum(l.span for l in self.config.layers if l.kind == "tdnn")

    def classification_params(self) -> list[ParamTensor]:
        return [p for n, p in self.params.items() if n.startswith("layer")]

    def decoder_params(self) -> list[ParamTensor]:
        return [p for n, p in self.params.items() if not n.startswith("layer")]

    def n_params(self, group: str = "all") -> int:
        sel = {"all": list(self.params.values()), "classification": self.classification_params(),
               "decoder": self.decoder_params()}[group]
        return sum(p.size for p in sel)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def clone(self) -> "Network":
        return Network(self.config, copy.deepcopy(self.params))

    def with_ladder_config(self, cfg: lad.LadderConfig) -> "Network":
        """Same parameters (shared), different sigma/lambda settings."""
        if len(cfg.lambdas) != self.depth + 1:
            raise lad.LadderConfigError(f"need {self.depth + 1} lambda weights, got {len(cfg.lambdas)}")
        return Network(replace(self.config, ladder=cfg), self.params)

    # -- encoder

    def _encode(self, x, lengths, n_layers=None, noise=None):
        """Run the first ``n_layers`` layers. ``noise`` (if given) is applied to the
        input and to each reconstructable layer's output. Returns (hs, caches, out, lens)
        where hs/lens cover layers 0..min(n_layers, depth)."""
        n_layers = len(self.layers) if n_layers is None else n_layers
        h = noise(x) if noise else x
        hs, lens, caches = [h], [lengths], []
        for i in range(n_layers):
            h, lengths, cache = self.layers[i].forward(h, lengths)
            caches.append(cache)
            if i + 1 <= self.depth:
                if noise:
                    h = noise(h)
                hs.append(h)
                lens.append(lengths)
        return hs, caches, h, lens

    def _encode_backward(self, caches, dtop, extra=None):
        """Backprop through the layers in ``caches``; ``extra[l]`` is added to the
        gradient arriving at reconstructable layer l."""
        extra = extra or {}
        n = len(caches)
        d = dtop
        if n in extra and n <= self.depth:
            d = d + extra[n]
        for i in reversed(range(n)):
            d = self.layers[i].backward(d, caches[i], need_input_grad=i > 0)
            if i > 0 and i in extra:
                d = d + extra[i]

    # -- losses

    def loss_and_grad(self, batch: Batch, rng: RngStream | None = None) -> StepLoss:
        """Forward + backward for this network's training objective.

        Gradients are written into ``param.grad`` (zeroed first).
        """
        self.zero_grad()
        if self.config.ladder is not None:
            return self._ladder_loss(batch, rng)
        if self.config.dae is not None:
            return self._multitask_loss(batch, rng)
        _, caches, logits, _ = self._encode(batch.x, batch.lengths)
        ce, dlogits = softmax_xent(logits, batch.labels)
        self._encode_backward(caches, dlogits)
        return StepLoss(ce, 0.0, ce + 0.0)

    def _noise_fn(self, sigma, rng):
        if sigma == 0:
            return lambda h: h
        if rng is None:
            raise lad.LadderConfigError("corruption with sigma > 0 needs an rng")
        return lambda h: lad.corrupt(h, sigma, rng)

    def _ladder_loss(self, batch, rng):
        cfg = self.config.ladder
        L = self.depth
        hs_clean, caches_clean, _, _ = self._encode(batch.x, batch.lengths, n_layers=L)
        hs_tilde, caches_tilde, logits, lens = self._encode(batch.x, batch.lengths,
                                                             noise=self._noise_fn(cfg.sigma, rng))
        ce, dlogits = softmax_xent(logits, batch.labels)

        states = [lad.LadderLayerState(hs_clean[l], hs_tilde[l]) for l in range(L + 1)]
        dec_caches = [None] * (L + 1)
        for l in range(L, -1, -1):
            st = states[l]
            if l == L:
                z = st.h_tilde
            else:
                z, dec_caches[l + 1] = self.decoder[l].forward(states[l + 1].h_hat, lens[l + 1], lens[l])
            st.u, _, st.bn_var = batchnorm_forward(z)
            st.h_hat = lad.denoise(st.h_tilde, st.u, self.comb[l].value)
        cost = lad.denoising_cost(states, cfg.lambdas)

        extra_tilde, extra_clean = {}, {}
        dh_hat = [None] * (L + 1)
        for l in range(L + 1):
            st = states[l]
            diff = st.h - st.h_hat
            g = (-2.0 * cfg.lambdas[l] / diff.shape[0]) * diff
            extra_clean[l] = -g
            if dh_hat[l] is not None:
                g = g + dh_hat[l]
            dht, du, da = lad.denoise_backward(g, st.h_tilde, st.u, self.comb[l].value)
            self.comb[l].grad += da
            dz = batchnorm_backward(du, st.u, st.bn_var)
            if l == L:
                extra_tilde[l] = dht + dz
            else:
                extra_tilde[l] = dht
                dh_hat[l + 1] = self.decoder[l].backward(dz, dec_caches[l + 1])

        self._encode_backward(caches_tilde, dlogits, extra_tilde)
        self._encode_backward(caches_clean, np.zeros_like(hs_clean[L]), extra_clean)
        return StepLoss(ce, cost, ce + cost, states)

    def _multitask_loss(self, batch, rng):
        cfg = self.config.dae
        L = self.depth
        _, caches, logits, _ = self._encode(batch.x, batch.lengths)
        ce, dlogits = softmax_xent(logits, batch.labels)
        self._encode_backward(caches, dlogits)

        x_tilde = lad.corrupt(batch.x, cfg.sigma, rng) if cfg.sigma > 0 else batch.x
        hs, caches_dae, top, lens = self._encode(x_tilde, batch.lengths, n_layers=L)
        # no lateral input: each decoder unit applies the 10-parameter function to its own u
        us, variances, r = [None] * (L + 1), [None] * (L + 1), [None] * (L + 1)
        dec_caches = [None] * (L + 1)
        for l in range(L, -1, -1):
            if l == L:
                z = top
            else:
                z, dec_caches[l + 1] = self.decoder[l].forward(r[l + 1], lens[l + 1], lens[l])
            us[l], _, variances[l] = batchnorm_forward(z)
            r[l] = lad.denoise(us[l], us[l], self.comb[l].value)
        lam0 = cfg.lambdas[0]
        cost = lam0 * lad.layer_sq_error(batch.x, r[0])

        g = (-2.0 * lam0 / batch.x.shape[0]) * (batch.x - r[0])
        for l in range(L + 1):
            dh, du, da = lad.denoise_backward(g, us[l], us[l], self.comb[l].value)
            self.comb[l].grad += da
            dz = batchnorm_backward(dh + du, us[l], variances[l])
            if l == L:
                self._encode_backward(caches_dae, dz)
            else:
                g = self.decoder[l].backward(dz, dec_caches[l + 1])
        return StepLoss(ce, cost, ce + cost)

    # -- inference

    def forward_tap(self, x, lengths=None) -> np.ndarray:
        _, _, out, _ = self._encode(x, lengths, n_layers=self.tap)
        return out

    def logits(self, batch: Batch) -> np.ndarray:
        return self._encode(batch.x, batch.lengths)[2]


# ---------------------------------------------------------------- builders

def _init_params(config: NetworkConfig, seed: int) -> dict[str, ParamTensor]:
    rng = RngStream(seed, "init.classifier")
    params = {}
    for i, spec in enumerate(config.layers):
        if spec.kind == "pool":
            continue
        fan_in = spec.in_dim * len(spec.context)
        params[f"layer{i + 1}.W"] = ParamTensor(f"layer{i + 1}.W", rng.normal((spec.out_dim, fan_in), 1 / np.sqrt(fan_in)))
        params[f"layer{i + 1}.b"] = ParamTensor(f"layer{i + 1}.b", np.zeros(spec.out_dim))
    return params


def build_network(config: NetworkConfig, seed: int = 0) -> Network:
    net = Network(replace(config, ladder=None, dae=None), _init_params(config, seed))
    if config.ladder is not None:
        net = attach_ladder(net, config.ladder, seed)
    if config.dae is not None:
        net = attach_multitask(net, config.dae.sigma, config.dae.lambdas[0], seed)
    return net


def build_dvector(n_speakers: int, width: int = 512, feat_dim: int = 40, n_layers: int = 4,
                  seed: int = 0, window: int = DVECTOR_WINDOW) -> Network:
    if n_speakers < 2:
        raise NetConfigError(f"need at least 2 speakers, got {n_speakers}")
    dims = [window * feat_dim] + [width] * n_layers
    layers = [LayerSpec("fc", a, b) for a, b in zip(dims, dims[1:])]
    layers.append(LayerSpec("softmax", width, n_speakers, activation="none"))
    return build_network(NetworkConfig("d-vector", tuple(layers), n_speakers), seed)


def build_xvector(n_speakers: int, widths=None, contexts=XVECTOR_CONTEXTS, feat_dim: int = 24,
                  profile: str = "desk", seed: int = 0) -> Network:
    """Five time-delay layers, statistics pooling, two segment layers, softmax."""
    if n_speakers < 2:
        raise NetConfigError(f"need at least 2 speakers, got {n_speakers}")
    if widths is None:
        if profile not in XVECTOR_WIDTHS:
            raise NetConfigError(f"unknown profile {profile!r}")
        widths = XVECTOR_WIDTHS[profile]
    widths = tuple(int(w) for w in widths)
    if len(widths) != 7 or min(widths) < 1:
        raise NetConfigError("x-vector needs 7 positive widths (5 frame-level, 2 segment-level)")
    contexts = tuple(tuple(c) for c in contexts)
    if len(contexts) != 5:
        raise NetConfigError(f"x-vector needs 5 frame-level contexts, got {len(contexts)}")
    layers, d = [], feat_dim
    for w, ctx in zip(widths[:5], contexts):
        layers.append(LayerSpec("tdnn", d, w, ctx))
        d = w
    layers.append(LayerSpec("pool", d, 2 * d))
    layers.append(LayerSpec("fc", 2 * d, widths[5]))
    layers.append(LayerSpec("fc", widths[5], widths[6]))
    layers.append(LayerSpec("softmax", widths[6], n_speakers, activation="none"))
    return build_network(NetworkConfig("x-vector", tuple(layers), n_speakers, profile=profile), seed)


def _decoder_params(net: Network, prefix: str, combinator_init: str, seed: int) -> dict[str, ParamTensor]:
    rng = RngStream(seed, f"init.{prefix}")
    params = {}
    for l in range(1, net.depth + 1):
        spec = net.config.layers[l - 1]
        k = len(spec.context) if spec.kind == "tdnn" else 1
        shape = (k * spec.in_dim, spec.out_dim)
        fan_in = k * spec.out_dim
        params[f"{prefix}.layer{l}.V"] = ParamTensor(f"{prefix}.layer{l}.V", rng.normal(shape, 1 / np.sqrt(fan_in)))
    for l, d in enumerate(net.widths):
        params[f"{prefix}.comb{l}"] = ParamTensor(f"{prefix}.comb{l}", lad.init_combinator(d, combinator_init, rng))
    return params


def attach_ladder(net: Network, cfg: lad.LadderConfig, seed: int = 0) -> Network:
    """Add a mirrored decoder and per-layer combinators over the input and the
    frame-level (x-vector) or fully connected (d-vector) hidden layers."""
    if net.config.ladder is not None or net.config.dae is not None:
        raise NetConfigError("network already has a decoder attached")
    if len(cfg.lambdas) != net.depth + 1:
        raise lad.LadderConfigError(
            f"{net.system} reconstructs {net.depth + 1} layers (input included); got {len(cfg.lambdas)} lambda weights"
        )
    params = copy.deepcopy(net.params)
    params.update(_decoder_params(net, "dec", cfg.combinator_init, seed))
    return Network(replace(net.config, ladder=cfg), params)


def attach_multitask(net: Network, sigma: float = lad.DEFAULT_SIGMA, lambda0: float = lad.DEFAULT_LAMBDA0,
                     seed: int = 0, combinator_init: str = "identity") -> Network:
    """x-multi: conventional input-reconstruction DAE on the frame-level stack.

    The decoder has exactly the x-ladder decoder's parameter budget: the same
    mirrored time-delay weights, and per layer a 10-parameter per-unit output
    function applied to the top-down signal alone (no lateral connections).
    """
    if net.framework != "x-vector":
        raise NetConfigError("x-multi is defined for the x-vector framework only")
    if net.config.ladder is not None or net.config.dae is not None:
        raise NetConfigError("network already has a decoder attached")
    cfg = lad.LadderConfig(sigma=sigma, lambdas=(lambda0,), combinator_init=combinator_init)
    params = copy.deepcopy(net.params)
    params.update(_decoder_params(net, "dae", combinator_init, seed))
    return Network(replace(net.config, dae=cfg), params)


def build_system(system: str, n_speakers: int, feat_dim: int, seed: int = 0, width: int = 512,
                 xvector_widths=None, profile: str = "desk", sigma: float = lad.DEFAULT_SIGMA,
                 lambdas=None, lambda0=lad.DEFAULT_LAMBDA0, lambda1=lad.DEFAULT_LAMBDA1,
                 lambda_rest=lad.DEFAULT_LAMBDA_REST, lambda_norm: str = "unit") -> Network:
    """Build one of d-vector, d-ladder, x-vector, x-ladder, x-multi.

    ``lambda_norm="unit"`` divides each reconstruction weight by the width of
    its layer (see ``LadderConfig.normalized``); ``"sum"`` uses them as given.
    """
    if lambda_norm not in lad.LAMBDA_NORMS:
        raise NetConfigError(f"lambda_norm must be one of {lad.LAMBDA_NORMS}, got {lambda_norm!r}")
    if system in ("d-vector", "d-ladder"):
        net = build_dvector(n_speakers, width=width, feat_dim=feat_dim, seed=seed)
    elif system in ("x-vector", "x-ladder", "x-multi"):
        net = build_xvector(n_speakers, widths=xvector_widths, feat_dim=feat_dim, profile=profile, seed=seed)
    else:
        raise NetConfigError(f"unknown system {system!r}")
    if system.endswith("ladder"):
        if lambdas is None:
            cfg = lad.LadderConfig.preset(net.depth, sigma, lambda0, lambda1, lambda_rest)
        else:
            cfg = lad.LadderConfig(sigma=sigma, lambdas=tuple(lambdas))
        net = attach_ladder(net, cfg.normalized(net.widths, lambda_norm), seed)
    elif system == "x-multi":
        lam0 = lambda0 / net.widths[0] if lambda_norm == "unit" else lambda0
        net = attach_multitask(net, sigma, lam0, seed)
    return net


# ---------------------------------------------------------------- embeddings

def extract_embedding(net: Network, utt: FeatureSequence | np.ndarray) -> np.ndarray:
    """Clean-path embedding for one utterance (no corruption, no RNG).

    d-vector: average of the tap activations over non-overlapping windows.
    x-vector: tap activation for the whole utterance as one segment.
    """
    frames = utt.frames if isinstance(utt, FeatureSequence) else np.asarray(utt, dtype=np.float64)
    if frames.shape[0] < net.min_frames:
        raise LengthError(f"utterance has {frames.shape[0]} frames; {net.system} needs at least {net.min_frames}")
    if net.framework == "d-vector":
        X = window_context(frames)
        return net.forward_tap(X).mean(axis=0)
    return net.forward_tap(frames, (frames.shape[0],))[0]
