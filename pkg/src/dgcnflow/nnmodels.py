"""Recurrent graph models for network-wide flow forecasting.

All forward functions accept an optional leading batch axis and return
predictions in the scaled target space.  Model kinds:

``lstm``      stacked LSTM over node features flattened per hour
``convlstm``  1-D convolution along each corridor, then LSTM
``gcnlstm``   graph convolution with a time-constant distance adjacency, then LSTM
``dgcnlstm``  graph convolution with the hourly travel-time adjacency, then LSTM
``transfer``  frozen ``dgcnlstm`` gated by evacuation-demand features
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .numcore import ContractError, ShapeError, Tensor, concat, take

KINDS = ("lstm", "convlstm", "gcnlstm", "dgcnlstm", "transfer")
GRAPH_KINDS = ("gcnlstm", "dgcnlstm")


class ConfigError(ValueError):
    pass


class UnloadedModelError(RuntimeError):
    pass


@dataclass
class ModelSpec:
    kind: str
    n_nodes: int
    seq_len: int = 6
    horizon: int = 6
    n_features: int = 12
    n_demand: int = 9
    hidden_size: int | None = None
    kernel_size: int = 3
    num_layers: int = 1
    seed: int = 0
    # output scaler (min/max of training-split target flow) and extra feature scaling
    flow_min: float | None = None
    flow_max: float | None = None
    demand_scale: list[float] | None = None
    tt_std: float | None = None
    corridors: list[list[int]] | None = None

    def __post_init__(self):
        if self.hidden_size is None:
            self.hidden_size = self.n_nodes * self.horizon
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        for name in ("n_nodes", "seq_len", "horizon", "n_features", "hidden_size", "num_layers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model spec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LstmParams:
    w_x: Tensor  # [input, 4H], gate blocks ordered i, f, o, g
    w_h: Tensor  # [H, 4H]
    b: Tensor  # [4H]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.w_x, self.w_h, self.b]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_lstm(rng: np.random.Generator, input_size: int, hidden_size: int, prefix: str) -> LstmParams:
    H = hidden_size
    b = np.zeros(4 * H)
    b[H : 2 * H] = 1.0
    return LstmParams(
        Tensor(_uniform(rng, (input_size, 4 * H), input_size), True, f"{prefix}.w_x"),
        Tensor(_uniform(rng, (H, 4 * H), H), True, f"{prefix}.w_h"),
        Tensor(b, True, f"{prefix}.b"),
    )


def lstm_step(params: LstmParams, x_t, h_prev, c_prev) -> tuple[Tensor, Tensor]:
    """One LSTM update; ``x_t`` is ``[..., input]``, states ``[..., H]``."""
    x_t, h_prev, c_prev = (v if isinstance(v, Tensor) else Tensor(v) for v in (x_t, h_prev, c_prev))
    H = params.hidden_size
    if x_t.shape[-1] != params.input_size:
        raise ShapeError(f"lstm input has {x_t.shape[-1]} features, params expect {params.input_size}")
    if h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ShapeError(f"lstm state sizes {h_prev.shape}, {c_prev.shape} != hidden {H}")
    gates = x_t @ params.w_x if x_t.ndim >= 2 else (x_t.reshape(1, -1) @ params.w_x).reshape(4 * H)
    rec = h_prev @ params.w_h if h_prev.ndim >= 2 else (h_prev.reshape(1, -1) @ params.w_h).reshape(4 * H)
    return _lstm_gates(gates + rec + params.b, c_prev, H)


def _lstm_gates(gates: Tensor, c_prev: Tensor | None, H: int) -> tuple[Tensor, Tensor]:
    sig = gates[..., : 3 * H].sigmoid()
    i, f, o = sig[..., :H], sig[..., H : 2 * H], sig[..., 2 * H :]
    g = gates[..., 3 * H :].tanh()
    c = i * g if c_prev is None else f * c_prev + i * g
    return o * c.tanh(), c


def lstm_sequence(params: LstmParams, x_seq: Tensor, return_sequence: bool = False):
    """Run an LSTM over ``x_seq`` of shape ``[B, l, input]`` from zero state."""
    if x_seq.shape[-1] != params.input_size:
        raise ShapeError(f"lstm input has {x_seq.shape[-1]} features, params expect {params.input_size}")
    H = params.hidden_size
    B, L = x_seq.shape[0], x_seq.shape[1]
    xw = x_seq @ params.w_x + params.b
    h = c = None
    outs = []
    for s in range(L):
        gates = xw[:, s]
        if h is not None:
            gates = gates + h @ params.w_h
        h, c = _lstm_gates(gates, c, H)
        if return_sequence:
            outs.append(h.reshape(B, 1, H))
    if return_sequence:
        return concat(outs, axis=1)
    return h


def graph_conv(w_gc, a_hat, x) -> Tensor:
    """relu((W_gc * A_hat) @ X); entries of A_hat that are zero never mix."""
    w_gc, a_hat, x = (v if isinstance(v, Tensor) else Tensor(v) for v in (w_gc, a_hat, x))
    N = w_gc.shape[0]
    if w_gc.shape != (N, N) or a_hat.shape[-2:] != (N, N) or x.shape[-2] != N:
        raise ShapeError(
            f"graph_conv: filter {w_gc.shape}, adjacency {a_hat.shape} and features {x.shape} disagree on N"
        )
    return ((w_gc * a_hat) @ x).relu()


def corridor_taps(segments: list[list[int]], n_nodes: int, k: int) -> np.ndarray:
    """[N, k] neighbor table along each corridor; ``n_nodes`` marks zero padding."""
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    half = k // 2
    table = np.full((n_nodes, k), n_nodes, dtype=int)
    seen = set()
    for seg in segments:
        for pos, node in enumerate(seg):
            seen.add(node)
            for tap in range(k):
                q = pos + tap - half
                if 0 <= q < len(seg):
                    table[node, tap] = seg[q]
    if seen != set(range(n_nodes)):
        raise ConfigError("corridor ordering must cover every node exactly once")
    return table


def conv1d_node(x, kernel, segments: list[list[int]]) -> Tensor:
    """Convolution along corridor order with zero padding at corridor ends, then relu.

    ``x``: ``[..., N, c]``; ``kernel``: ``[k, c, c_out]``.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    kernel = kernel if isinstance(kernel, Tensor) else Tensor(kernel)
    k, c, c_out = kernel.shape
    N = x.shape[-2]
    if x.shape[-1] != c:
        raise ShapeError(f"conv1d_node: features {x.shape} vs kernel {kernel.shape}")
    table = corridor_taps(segments, N, k)
    lead = x.shape[:-2]
    padded = concat([x, Tensor(np.zeros(lead + (1, c)))], axis=-2)
    windows = take(padded, table.reshape(-1), axis=x.ndim - 2).reshape(lead + (N, k * c))
    return (windows @ kernel.reshape(k * c, c_out)).relu()


@dataclass
class DgcnLstmParams:
    w_gc: Tensor
    lstm: list[LstmParams]
    head_w: Tensor
    head_b: Tensor
    conv: Tensor | None = None

    def tensors(self) -> list[Tensor]:
        out = [self.w_gc] if self.w_gc is not None else []
        if self.conv is not None:
            out.append(self.conv)
        for layer in self.lstm:
            out.extend(layer.tensors())
        out.extend([self.head_w, self.head_b])
        return out


@dataclass
class TransferParams:
    pretrained: "Model | None"
    demand_lstm: LstmParams
    demand_head_w: Tensor
    demand_head_b: Tensor
    gate_w: Tensor  # W_C: [N*c_d, p*N]
    gate_b: Tensor  # b_C: [p*N]

    def tensors(self) -> list[Tensor]:
        return self.demand_lstm.tensors() + [
            self.demand_head_w,
            self.demand_head_b,
            self.gate_w,
            self.gate_b,
        ]


def _head(h: Tensor, w: Tensor, b: Tensor, p: int, N: int) -> Tensor:
    return (h @ w + b).reshape(h.shape[0], p, N)


def _batched(x: Tensor, ndim: int) -> tuple[Tensor, bool]:
    if x.ndim == ndim - 1:
        return x.reshape((1,) + x.shape), True
    return x, False


def dgcn_lstm_forward(params: DgcnLstmParams, x, a_seq, p: int) -> Tensor:
    """Graph-convolve each hour, run the LSTM, map the last hidden state to ``[p, N]`` via tanh."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    a_seq = a_seq if isinstance(a_seq, Tensor) else Tensor(a_seq)
    x, single = _batched(x, 4)
    a_seq, _ = _batched(a_seq, 4)
    B, L, N, c = x.shape
    if a_seq.shape[1] != L:
        raise ContractError(f"adjacency sequence has {a_seq.shape[1]} steps, inputs have {L}")
    gc = graph_conv(params.w_gc, a_seq, x).reshape(B, L, N * c)
    h = gc
    for layer in params.lstm[:-1]:
        h = lstm_sequence(layer, h, return_sequence=True)
    h = lstm_sequence(params.lstm[-1], h)
    out = _head(h, params.head_w, params.head_b, p, N).tanh()
    return out.reshape(p, N) if single else out


def lstm_forward(params: DgcnLstmParams, x, p: int) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    x, single = _batched(x, 4)
    B, L, N, c = x.shape
    h = x.reshape(B, L, N * c)
    for layer in params.lstm[:-1]:
        h = lstm_sequence(layer, h, return_sequence=True)
    h = lstm_sequence(params.lstm[-1], h)
    out = _head(h, params.head_w, params.head_b, p, N).tanh()
    return out.reshape(p, N) if single else out


def convlstm_forward(params: DgcnLstmParams, x, segments: list[list[int]], p: int) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    x, single = _batched(x, 4)
    B, L, N, _ = x.shape
    feats = conv1d_node(x, params.conv, segments)
    h = feats.reshape(B, L, N * feats.shape[-1])
    for layer in params.lstm[:-1]:
        h = lstm_sequence(layer, h, return_sequence=True)
    h = lstm_sequence(params.lstm[-1], h)
    out = _head(h, params.head_w, params.head_b, p, N).tanh()
    return out.reshape(p, N) if single else out


def transfer_forward(params: TransferParams, x_evc, x_demand, a_seq, p: int) -> Tensor:
    """Gate the frozen model's prediction with demand features and add the demand branch."""
    if params.pretrained is None:
        raise UnloadedModelError("transfer model has no pretrained DGCN-LSTM block")
    x_demand = x_demand if isinstance(x_demand, Tensor) else Tensor(x_demand)
    x_demand, single = _batched(x_demand, 4)
    pre = params.pretrained.forward(x_evc, a_seq)
    if single:
        pre = pre.reshape((1,) + pre.shape)
    B, L, N, cd = x_demand.shape
    h = lstm_sequence(params.demand_lstm, x_demand.reshape(B, L, N * cd))
    h_evc = _head(h, params.demand_head_w, params.demand_head_b, p, N)
    last = x_demand[:, L - 1].reshape(B, N * cd)
    gate = _head(last, params.gate_w, params.gate_b, p, N).sigmoid()
    out = gate * pre + h_evc.tanh()
    return out.reshape(p, N) if single else out


@dataclass
class Model:
    spec: ModelSpec
    params: DgcnLstmParams | TransferParams
    frozen: bool = True
    extras: dict = field(default_factory=dict)

    @property
    def adjacency_mode(self) -> str | None:
        kind = self.spec.kind
        if kind == "transfer":
            return "dynamic"
        return {"dgcnlstm": "dynamic", "gcnlstm": "static"}.get(kind)

    def forward(self, x, a_seq=None, x_demand=None) -> Tensor:
        s = self.spec
        if s.kind in GRAPH_KINDS:
            if a_seq is None:
                raise ContractError(f"{s.kind} needs an adjacency sequence")
            return dgcn_lstm_forward(self.params, x, a_seq, s.horizon)
        if s.kind == "lstm":
            return lstm_forward(self.params, x, s.horizon)
        if s.kind == "convlstm":
            return convlstm_forward(self.params, x, s.corridors, s.horizon)
        if x_demand is None:
            raise ContractError("transfer model needs demand features")
        return transfer_forward(self.params, x, x_demand, a_seq, s.horizon)

    def trainable(self) -> list[Tensor]:
        out = self.params.tensors()
        if self.spec.kind == "transfer" and not self.frozen:
            out = self.params.pretrained.trainable() + out
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        named = {t.name: t for t in self.params.tensors()}
        return dict(sorted(named.items()))

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        if self.spec.kind == "transfer" and self.params.pretrained is not None:
            for t in self.params.pretrained.params.tensors():
                t.requires_grad = not frozen
                t.grad = None


def init_params(spec: ModelSpec, seed: int | None = None, pretrained: Model | None = None) -> Model:
    """Fresh parameters: uniform in +-1/sqrt(fan_in), W_gc all ones, forget biases 1."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    N, c, H, p = spec.n_nodes, spec.n_features, spec.hidden_size, spec.horizon
    if spec.kind == "transfer":
        cd = spec.n_demand
        params = TransferParams(
            pretrained=pretrained,
            demand_lstm=init_lstm(rng, N * cd, H, "demand_lstm"),
            demand_head_w=Tensor(_uniform(rng, (H, p * N), H), True, "demand_head.w"),
            demand_head_b=Tensor(np.zeros(p * N), True, "demand_head.b"),
            gate_w=Tensor(_uniform(rng, (N * cd, p * N), N * cd), True, "gate.w"),
            gate_b=Tensor(np.zeros(p * N), True, "gate.b"),
        )
        model = Model(spec, params)
        if pretrained is not None:
            model.set_frozen(True)
        return model
    w_gc = Tensor(np.ones((N, N)), True, "w_gc") if spec.kind in GRAPH_KINDS else None
    conv = None
    in_size = N * c
    if spec.kind == "convlstm":
        k = spec.kernel_size
        if spec.corridors is None:
            spec.corridors = [list(range(N))]
        conv = Tensor(_uniform(rng, (k, c, c), k * c), True, "conv.kernel")
    layers = []
    for li in range(spec.num_layers):
        layers.append(init_lstm(rng, in_size if li == 0 else H, H, f"lstm{li}"))
    head_w = Tensor(_uniform(rng, (H, p * N), H), True, "head.w")
    head_b = Tensor(np.zeros(p * N), True, "head.b")
    return Model(spec, DgcnLstmParams(w_gc, layers, head_w, head_b, conv))


def assign_params(model: Model, values: dict[str, np.ndarray]) -> None:
    named = model.named_tensors()
    missing = set(named) - set(values)
    extra = set(values) - set(named)
    if missing or extra:
        raise ContractError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, t in named.items():
        arr = np.asarray(values[name], dtype=np.float64)
        if arr.shape != t.shape:
            raise ShapeError(f"parameter {name}: stored shape {arr.shape} != model shape {t.shape}")
        t.data = arr.copy()


def snapshot(model: Model) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.named_tensors().items()}


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def toy_instance(
    kind: str,
    seed: int = 0,
    n_nodes: int = 5,
    seq_len: int = 2,
    horizon: int = 2,
    n_features: int = 3,
    n_demand: int = 2,
    batch: int = 2,
) -> tuple[Model, dict[str, np.ndarray]]:
    """A randomly initialised small model with matching random inputs and targets.

    Parameters are perturbed away from their structured init (ones, zeros) so
    every derivative path is exercised.
    """
    rng = np.random.default_rng(seed)
    N, L, p = n_nodes, seq_len, horizon
    common = dict(
        n_nodes=N, seq_len=L, horizon=p, n_features=n_features, n_demand=n_demand, hidden_size=4, seed=seed
    )
    pretrained = None
    if kind == "transfer":
        pretrained = init_params(ModelSpec("dgcnlstm", **common), seed + 1)
        _jitter(pretrained, rng)
    spec = ModelSpec(kind, corridors=[[0, 1, 2], list(range(3, N))] if kind == "convlstm" else None, **common)
    model = init_params(spec, seed, pretrained)
    _jitter(model, rng)
    a = rng.uniform(0.0, 1.0, (batch, L, N, N)) * (rng.uniform(size=(batch, L, N, N)) < 0.6)
    a = np.triu(a, 1)
    a = a + np.swapaxes(a, -1, -2) + np.eye(N)
    deg = a.sum(axis=-1)
    a_hat = a / np.sqrt(deg[..., :, None] * deg[..., None, :])
    inputs = {
        "x": rng.normal(size=(batch, L, N, n_features)),
        "adj": a_hat if kind in GRAPH_KINDS + ("transfer",) else None,
        "xd": rng.normal(size=(batch, L, N, n_demand)) if kind == "transfer" else None,
        "y": rng.uniform(-0.9, 0.9, (batch, p, N)),
    }
    return model, inputs


def _jitter(model: Model, rng: np.random.Generator) -> None:
    for t in model.params.tensors():
        t.data = t.data + rng.normal(0.0, 0.3, t.shape)
