"""Compact feed-forward forecaster with frozen base weights and low-rank adapters.

Everything is float64 numpy with hand-written backpropagation. The base
network maps a fixed-length feature vector to four normalised horizon flows
and four trend-label logits. Adapters add ``scaling * B @ A`` to chosen
weight matrices; only ``A`` and ``B`` train once the base is frozen.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import CheckpointMismatchError, DimensionError, DivergenceError, RankError
from .promptgen import TREND_LABELS, PromptConfig, PromptContext, build_response, record_context

CHECKPOINT_VERSION = 1
N_FLOWS = 4
N_CLASSES = len(TREND_LABELS)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def featurize(ctx: PromptContext) -> np.ndarray:
    """Encode a prompt context; flow-valued entries are divided by the sensor's flow_max.

    Weighted degrees grow with corridor length, so they enter as log1p.
    """
    st = ctx.stats
    scale = st.flow_max if st.flow_max > 0 else 1.0
    ts = ctx.datetime
    hour = (ts - ts.astype("datetime64[D]")).astype(np.int64) / 3600.0
    dow = float((ts.astype("datetime64[D]").astype(np.int64) + 3) % 7)
    nb = np.zeros(12)
    for k, (_, flows) in enumerate(ctx.neighbours[:3]):
        nb[4 * k:4 * k + 4] = np.asarray(flows) / scale
    parts = [
        np.asarray(ctx.history) / scale,
        [
            ctx.trend_slope / scale,
            ctx.net_change / scale,
            ctx.typical_hourly_mean / scale,
            st.mean_flow / scale,
            st.std_flow / scale,
            st.congestion_ratio,
            st.flow_min / scale,
            st.flow_max / scale,
            math.sin(2 * math.pi * hour / 24.0),
            math.cos(2 * math.pi * hour / 24.0),
            math.sin(2 * math.pi * dow / 7.0),
            math.cos(2 * math.pi * dow / 7.0),
            ctx.meta.lanes / 10.0,
            math.log1p(ctx.in_degree),
            math.log1p(ctx.out_degree),
        ],
        nb,
    ]
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


FEATURE_DIM = 12 + 15 + 12


@dataclass
class Dataset:
    X: np.ndarray  # (n, FEATURE_DIM)
    y_flow: np.ndarray  # (n, 4) normalised targets
    y_class: np.ndarray  # (n,) trend label index
    scale: np.ndarray  # (n,) flow_max per record

    def __len__(self):
        return self.X.shape[0]


def dataset_from_records(records: Sequence[dict]) -> Dataset:
    X, yf, yc, sc = [], [], [], []
    for r in records:
        ctx = record_context(r)
        s = ctx.stats.flow_max if ctx.stats.flow_max > 0 else 1.0
        X.append(featurize(ctx))
        yf.append(np.asarray(r["targets"], dtype=np.float64) / s)
        yc.append(TREND_LABELS.index(r["trend_label"]))
        sc.append(s)
    if not X:
        return Dataset(np.zeros((0, FEATURE_DIM)), np.zeros((0, N_FLOWS)), np.zeros(0, dtype=np.int64), np.zeros(0))
    return Dataset(np.array(X), np.array(yf), np.array(yc, dtype=np.int64), np.array(sc))


# ---------------------------------------------------------------------------
# model containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArchConfig:
    input_dim: int = FEATURE_DIM
    hidden: tuple = (64, 64)
    n_flows: int = N_FLOWS
    n_classes: int = N_CLASSES
    activation: str = "tanh"

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(out, in) of each weight matrix."""
        dims = [self.input_dim, *self.hidden, self.n_flows + self.n_classes]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, h: 1.0 - h * h),
    "identity": (lambda z: z, lambda z, h: np.ones_like(z)),
}


class BaseModel:
    def __init__(self, arch: ArchConfig, weights, biases, frozen: bool = False):
        self.arch = arch
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for w, b, (d, k) in zip(self.weights, self.biases, arch.layer_dims):
            if w.shape != (d, k) or b.shape != (d,):
                raise DimensionError(f"parameter shape {w.shape}/{b.shape} does not match ({d}, {k})")
        self._frozen = False
        if frozen:
            self.freeze()

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "BaseModel":
        for p in self.parameters():
            p.setflags(write=False)
        self._frozen = True
        return self

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def checksum(self) -> str:
        return _digest(self.parameters())

    def copy(self, frozen=None) -> "BaseModel":
        return BaseModel(self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         frozen=self.frozen if frozen is None else frozen)

    def forward(self, X):
        return _forward(self.arch, self.weights, self.biases, X)[0]


@dataclass
class AdapterSet:
    layers: tuple  # indices of adapted weight matrices
    A: list  # each (r, k)
    B: list  # each (d, r)
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank if self.rank else 0.0

    def arrays(self) -> list[np.ndarray]:
        out = []
        for a, b in zip(self.A, self.B):
            out += [a, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.arrays())

    def copy(self) -> "AdapterSet":
        return AdapterSet(tuple(self.layers), [a.copy() for a in self.A], [b.copy() for b in self.B], self.rank,
                          self.alpha)

    def checksum(self) -> str:
        return _digest(self.arrays())

    def delta(self, i: int) -> np.ndarray:
        return self.scaling * (self.B[i] @ self.A[i])

    def same_shape(self, other: "AdapterSet") -> bool:
        return (tuple(self.layers) == tuple(other.layers) and self.rank == other.rank
                and all(a.shape == b.shape for a, b in zip(self.arrays(), other.arrays())))


class AdapterModel:
    def __init__(self, base: BaseModel, adapters: AdapterSet):
        self.base = base
        self.adapters = adapters

    def effective_weights(self) -> list[np.ndarray]:
        ws = list(self.base.weights)
        for i, layer in enumerate(self.adapters.layers):
            ws[layer] = ws[layer] + self.adapters.delta(i)
        return ws

    def forward(self, X):
        return _forward(self.base.arch, self.effective_weights(), self.base.biases, X)[0]

    def checksum(self) -> str:
        return _digest(self.base.parameters() + self.adapters.arrays())


def _digest(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def init_base(arch: ArchConfig = ArchConfig(), seed: int = 0, zero_bias: bool = True) -> BaseModel:
    """Uniform fan-in initialisation, U(-1/sqrt(k), 1/sqrt(k))."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for d, k in arch.layer_dims:
        bound = 1.0 / math.sqrt(k)
        weights.append(rng.uniform(-bound, bound, size=(d, k)))
        biases.append(np.zeros(d) if zero_bias else rng.uniform(-bound, bound, size=d))
    return BaseModel(arch, weights, biases)


def attach_adapters(base: BaseModel, rank: int = 4, alpha: float | None = None, seed: int = 0,
                    layers: Sequence[int] | None = None) -> AdapterModel:
    """Fresh adapters on the hidden-layer weight matrices (all but the output head by default)."""
    if not base.frozen:
        raise ValueError("adapters attach to a frozen base model")
    n_layers = len(base.weights)
    if layers is None:
        layers = tuple(range(n_layers - 1)) if n_layers > 1 else (0,)
    alpha = float(rank) if alpha is None else float(alpha)
    rng = np.random.default_rng(seed)
    A, B = [], []
    for layer in layers:
        d, k = base.weights[layer].shape
        if rank > min(d, k):
            raise RankError(f"rank {rank} exceeds min({d}, {k}) for layer {layer}")
        bound = 1.0 / math.sqrt(k)
        A.append(rng.uniform(-bound, bound, size=(rank, k)))
        B.append(np.zeros((d, rank)))
    return AdapterModel(base, AdapterSet(tuple(layers), A, B, rank, alpha))


def adapter_fraction(base: BaseModel, adapters: AdapterSet) -> float:
    """Adapter parameters relative to the adapted matrices' own parameter count."""
    host = sum(base.weights[layer].size for layer in adapters.layers)
    return adapters.n_params / host


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _forward(arch: ArchConfig, weights, biases, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.shape[1] != arch.input_dim:
        raise DimensionError(f"expected {arch.input_dim} features, got {X.shape[1]}")
    act, _ = _ACTIVATIONS[arch.activation]
    hs = [X]
    h = X
    for w, b in zip(weights[:-1], biases[:-1]):
        h = act(h @ w.T + b)
        hs.append(h)
    out = h @ weights[-1].T + biases[-1]
    flows, logits = out[:, :arch.n_flows], out[:, arch.n_flows:]
    if single:
        flows, logits = flows[0], logits[0]
    return (flows, logits), hs


def forward(model, X):
    """(normalised flows, trend logits) for one feature vector or a batch."""
    return model.forward(X)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_weight_grads(arch, weights, biases, X, y_flow, y_class, w_reg=1.0, w_cls=0.2):
    """Surrogate loss and its gradients with respect to every weight and bias."""
    (flows, logits), hs = _forward(arch, weights, biases, X)
    n = X.shape[0]
    err = flows - y_flow
    mse = float((err ** 2).mean())
    p = _softmax(logits)
    ce = float(-np.log(np.maximum(p[np.arange(n), y_class], 1e-300)).mean())
    loss = w_reg * mse + w_cls * ce
    d_flows = w_reg * 2.0 * err / err.size
    d_logits = p.copy()
    d_logits[np.arange(n), y_class] -= 1.0
    d_logits *= w_cls / n
    dz = np.concatenate([d_flows, d_logits], axis=1)
    _, dact = _ACTIVATIONS[arch.activation]
    gW = [None] * len(weights)
    gb = [None] * len(weights)
    for layer in range(len(weights) - 1, -1, -1):
        gW[layer] = dz.T @ hs[layer]
        gb[layer] = dz.sum(axis=0)
        if layer > 0:
            h = hs[layer]
            dz = (dz @ weights[layer]) * dact(None, h)
    return loss, gW, gb


def adapter_loss_and_grads(model: AdapterModel, X, y_flow, y_class, w_reg=1.0, w_cls=0.2):
    """Loss and gradients for the adapter matrices only: [(dA, dB), ...]."""
    base = model.base
    loss, gW, _ = loss_and_weight_grads(base.arch, model.effective_weights(), base.biases, X, y_flow, y_class,
                                        w_reg, w_cls)
    s = model.adapters.scaling
    grads = []
    for i, layer in enumerate(model.adapters.layers):
        G = gW[layer]
        A, B = model.adapters.A[i], model.adapters.B[i]
        grads.append((s * B.T @ G, s * G @ A.T))
    return loss, grads


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    warmup_steps: int = 50
    total_steps: int = 200
    effective_batch_size: int = 16
    seed: int = 3407
    w_reg: float = 1.0
    w_cls: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.effective_batch_size <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and effective_batch_size must be positive, weight_decay non-negative")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.total_steps and self.total_steps < self.warmup_steps:
            raise ValueError("total_steps must be >= warmup_steps")


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak rate, then half-cosine decay to zero at ``total_steps``."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return cfg.learning_rate
    progress = (step - cfg.warmup_steps) / span
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay over a fixed list of arrays, updated in place."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            p *= 1.0 - lr * c.weight_decay
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


class _BatchStream:
    """Seeded reshuffle-per-epoch minibatches."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.bs = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self.perm = self.rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.bs > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.perm[self.pos:self.pos + self.bs]
        self.pos += self.bs
        return idx


def train_adapters(model: AdapterModel, dataset, cfg: TrainConfig, seed: int | None = None):
    """Train ``model.adapters`` in place; returns (adapters, per-step losses).

    ``dataset`` is a :class:`Dataset` or a list of prompt records.
    """
    if not model.base.frozen:
        raise ValueError("base model must be frozen before adapter training")
    if not isinstance(dataset, Dataset):
        dataset = dataset_from_records(dataset)
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    losses: list[float] = []
    if cfg.total_steps == 0:
        return model.adapters, losses
    stream = _BatchStream(len(dataset), cfg.effective_batch_size, cfg.seed if seed is None else seed)
    params = model.adapters.arrays()
    opt = AdamW(params, cfg)
    for step in range(cfg.total_steps):
        idx = stream.next()
        loss, grads = adapter_loss_and_grads(model, dataset.X[idx], dataset.y_flow[idx], dataset.y_class[idx],
                                             cfg.w_reg, cfg.w_cls)
        if not math.isfinite(loss):
            raise DivergenceError(step, loss)
        flat = []
        for dA, dB in grads:
            flat += [dA, dB]
        opt.step(flat, cosine_lr(step, cfg))
        losses.append(loss)
    return model.adapters, losses


def pretrain_base(base: BaseModel, dataset, cfg: TrainConfig, seed: int | None = None):
    """Full-parameter training of an unfrozen base; freezes it afterwards."""
    if base.frozen:
        raise ValueError("base model is already frozen")
    if not isinstance(dataset, Dataset):
        dataset = dataset_from_records(dataset)
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    stream = _BatchStream(len(dataset), cfg.effective_batch_size, cfg.seed if seed is None else seed)
    params = base.parameters()
    opt = AdamW(params, cfg)
    losses = []
    for step in range(cfg.total_steps):
        idx = stream.next()
        loss, gW, gb = loss_and_weight_grads(base.arch, base.weights, base.biases, dataset.X[idx],
                                             dataset.y_flow[idx], dataset.y_class[idx], cfg.w_reg, cfg.w_cls)
        if not math.isfinite(loss):
            raise DivergenceError(step, loss)
        flat = []
        for g_w, g_b in zip(gW, gb):
            flat += [g_w, g_b]
        opt.step(flat, cosine_lr(step, cfg))
        losses.append(loss)
    base.freeze()
    return base, losses


def evaluate_loss(model, dataset: Dataset, w_reg=1.0, w_cls=0.2) -> float:
    if isinstance(model, AdapterModel):
        weights, biases, arch = model.effective_weights(), model.base.biases, model.base.arch
    else:
        weights, biases, arch = model.weights, model.biases, model.arch
    loss, _, _ = loss_and_weight_grads(arch, weights, biases, dataset.X, dataset.y_flow, dataset.y_class,
                                       w_reg, w_cls)
    return loss


def merge_adapters(model: AdapterModel) -> BaseModel:
    return BaseModel(model.base.arch, model.effective_weights(), [b.copy() for b in model.base.biases], frozen=True)


# ---------------------------------------------------------------------------
# response rendering
# ---------------------------------------------------------------------------


def render_response(pred, ctx: PromptContext, cfg: PromptConfig = PromptConfig()) -> str:
    """Structured JSON text for a model prediction ``(flows_norm, logits)``."""
    flows_norm = np.asarray(pred[0], dtype=np.float64).reshape(-1)
    flows = flows_norm * (ctx.stats.flow_max if ctx.stats.flow_max > 0 else 1.0)
    return build_response(flows, ctx, cfg).to_text()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model, seeds: dict | None = None) -> None:
    """Write base (and adapter) parameters plus architecture and seeds to an ``.npz`` file."""
    base = model.base if isinstance(model, AdapterModel) else model
    arrays = {}
    for i, (w, b) in enumerate(zip(base.weights, base.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    meta = {"version": CHECKPOINT_VERSION, "arch": asdict(base.arch), "seeds": seeds or {}, "adapters": None}
    if isinstance(model, AdapterModel):
        ad = model.adapters
        meta["adapters"] = {"layers": list(ad.layers), "rank": ad.rank, "alpha": ad.alpha}
        for i, (a, b) in enumerate(zip(ad.A, ad.B)):
            arrays[f"A{i}"] = a
            arrays[f"B{i}"] = b
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    # fixed entry timestamps keep the file bytes a pure function of the parameters
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path):
    """Returns a frozen BaseModel or an AdapterModel, matching what was saved."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointMismatchError(f"unsupported checkpoint version {meta.get('version')}")
        arch_d = meta["arch"]
        arch = ArchConfig(arch_d["input_dim"], tuple(arch_d["hidden"]), arch_d["n_flows"], arch_d["n_classes"],
                          arch_d["activation"])
        n = len(arch.layer_dims)
        base = BaseModel(arch, [z[f"W{i}"] for i in range(n)], [z[f"b{i}"] for i in range(n)], frozen=True)
        ad = meta["adapters"]
        if ad is None:
            return base
        k = len(ad["layers"])
        adapters = AdapterSet(tuple(ad["layers"]), [z[f"A{i}"].copy() for i in range(k)],
                              [z[f"B{i}"].copy() for i in range(k)], int(ad["rank"]), float(ad["alpha"]))
    for i, layer in enumerate(adapters.layers):
        d, kk = base.weights[layer].shape
        if adapters.A[i].shape != (adapters.rank, kk) or adapters.B[i].shape != (d, adapters.rank):
            raise CheckpointMismatchError(f"adapter {i} does not fit layer {layer}")
    return AdapterModel(base, adapters)


def checkpoint_seeds(path) -> dict:
    with np.load(path) as z:
        return json.loads(bytes(z["meta"]).decode())["seeds"]
