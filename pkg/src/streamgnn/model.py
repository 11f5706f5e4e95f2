"""Surrogate spatio-temporal forecaster.

    x -> GCN -> temporal conv -> GCN -> [flatten, concat raw x] -> shared FC

Every weight is independent of the node count, so one parameter set serves
any snapshot.  Activations are laid out node-major, (N, B, T, C), so each
adjacency product is a single (N x N) @ (N x B*T*C) matrix product.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .autodiff import ShapeError, Tape

PARAM_NAMES = ("gcn1_w1", "gcn1_w2", "conv_kernel", "conv_bias", "gcn2_w1", "gcn2_w2", "fc_w", "fc_b")
MAGIC = b"SURMODEL"
FORMAT_VERSION = 1
FISHER_TAG = b"FISH"
FISHER_VERSION = 1


class ConfigMismatchError(ValueError):
    pass


class CorruptFileError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    features: int = 1
    in_steps: int = 12
    horizon: int = 12
    c1: int = 16
    c2: int = 16
    c3: int = 16
    kernel: int = 3

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 1:
                raise ValueError(f"{name} must be positive, got {v}")
        if self.kernel > self.in_steps:
            raise ValueError("conv kernel longer than the input window")

    @property
    def conv_steps(self) -> int:
        return self.in_steps - self.kernel + 1

    @property
    def readout_width(self) -> int:
        return self.conv_steps * self.c3 + self.in_steps * self.features

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "gcn1_w1": (self.features, self.c1),
            "gcn1_w2": (self.features, self.c1),
            "conv_kernel": (self.kernel, self.c1, self.c2),
            "conv_bias": (self.c2,),
            "gcn2_w1": (self.c2, self.c3),
            "gcn2_w2": (self.c2, self.c3),
            "fc_w": (self.readout_width, self.horizon),
            "fc_b": (self.horizon,),
        }

    def fan_in(self, name: str) -> int:
        return {
            "gcn1_w1": self.features,
            "gcn1_w2": self.features,
            "conv_kernel": self.kernel * self.c1,
            "conv_bias": self.kernel * self.c1,
            "gcn2_w1": self.c2,
            "gcn2_w2": self.c2,
            "fc_w": self.readout_width,
            "fc_b": self.readout_width,
        }[name]


class ModelParams:
    """Named parameter arrays with a fixed flat enumeration (PARAM_NAMES order, C order)."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        shapes = config.shapes()
        if set(arrays) != set(PARAM_NAMES):
            raise ValueError(f"expected parameters {PARAM_NAMES}, got {sorted(arrays)}")
        self.config = config
        self.arrays = {}
        for name in PARAM_NAMES:
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != shapes[name]:
                raise ShapeError(f"{name}: expected {shapes[name]}, got {a.shape}")
            self.arrays[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def flat_index(self) -> list[tuple[str, tuple[int, ...]]]:
        """Every scalar as (parameter name, element index)."""
        return [(name, tuple(int(i) for i in idx)) for name in PARAM_NAMES for idx in np.ndindex(self.arrays[name].shape)]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].reshape(-1) for n in PARAM_NAMES])

    @classmethod
    def from_flat(cls, config: ModelConfig, flat: np.ndarray) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        shapes = config.shapes()
        total = sum(int(np.prod(s)) for s in shapes.values())
        if flat.shape != (total,):
            raise ShapeError(f"flat vector of length {flat.size}, config needs {total}")
        arrays, i = {}, 0
        for name in PARAM_NAMES:
            k = int(np.prod(shapes[name]))
            arrays[name] = flat[i : i + k].reshape(shapes[name]).copy()
            i += k
        return cls(config, arrays)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        return cls(config, {n: np.zeros(s) for n, s in config.shapes().items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: a.copy() for n, a in self.arrays.items()})

    def equals(self, other: "ModelParams") -> bool:
        return self.config == other.config and all(np.array_equal(self[n], other[n]) for n in PARAM_NAMES)


def init_params(config: ModelConfig, seed: int | np.random.Generator = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per tensor."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in config.shapes().items():
        bound = 1.0 / np.sqrt(config.fan_in(name))
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, arrays)


# -- forward -----------------------------------------------------------------


SPARSE_DENSITY = 0.1


def gcn_layer(h, adjacency, w1, w2):
    """relu(A h w1 + h w2) applied over the leading node axis of h, (N, ..., C_in)."""
    hv = ad._val(h)
    adj = adjacency if sparse.issparse(adjacency) else np.asarray(adjacency, dtype=np.float64)
    n = hv.shape[0]
    cin = ad._val(w1).shape[0]
    if adj.shape != (n, n):
        raise ShapeError(f"gcn_layer: adjacency {adj.shape} for {n} nodes")
    if hv.shape[-1] != cin or ad._val(w2).shape[0] != cin:
        raise ShapeError(f"gcn_layer: features {hv.shape} incompatible with weights {ad._val(w1).shape}")
    lead = hv.shape[:-1]
    agg = ad.matmul(adj, ad.reshape(h, (n, -1)))
    spatial = ad.matmul(ad.reshape(agg, (-1, cin)), w1)
    own = ad.matmul(ad.reshape(h, (-1, cin)), w2)
    out = ad.relu(ad.add(spatial, own))
    return ad.reshape(out, lead + (ad._val(w1).shape[1],))


def _node_major(x, config: ModelConfig):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[2:] != (config.in_steps, config.features):
        raise ShapeError(f"input: expected (B, N, {config.in_steps}, {config.features}), got {x.shape}")
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3)), single


def _features(p, adjacency, xt, config: ModelConfig):
    """Stage-by-stage pipeline on node-major input xt (N, B, T, F) -> (N*B, D)."""
    n, b = xt.shape[:2]
    adjacency = np.asarray(adjacency, dtype=np.float64)
    if adjacency.shape != (n, n):
        raise ShapeError(f"forward: adjacency {adjacency.shape} for {n} nodes")
    if np.count_nonzero(adjacency) <= SPARSE_DENSITY * n * n:
        # road graphs have a handful of neighbours per node
        adjacency = sparse.csr_matrix(adjacency)
    h1 = gcn_layer(xt, adjacency, p["gcn1_w1"], p["gcn1_w2"])  # (N, B, T, C1)
    h1 = ad.reshape(h1, (n * b, config.in_steps, config.c1))
    h2 = ad.conv1d_time(h1, p["conv_kernel"], p["conv_bias"])  # (N*B, T', C2)
    h2 = ad.reshape(h2, (n, b, config.conv_steps, config.c2))
    h3 = gcn_layer(h2, adjacency, p["gcn2_w1"], p["gcn2_w2"])  # (N, B, T', C3)
    flat = ad.reshape(h3, (n * b, config.conv_steps * config.c3))
    raw = xt.reshape(n * b, config.in_steps * config.features)
    return ad.concat([flat, raw], axis=1)


def extract_features(params: ModelParams, adjacency, x) -> np.ndarray:
    """Pre-readout representation, (N, D) or (B, N, D)."""
    cfg = params.config
    xt, single = _node_major(x, cfg)
    n, b = xt.shape[:2]
    u = _features(params.arrays, adjacency, xt, cfg).reshape(n, b, cfg.readout_width).transpose(1, 0, 2)
    return u[0] if single else u


def readout(params: ModelParams, features) -> np.ndarray:
    u = np.asarray(features, dtype=np.float64)
    lead = u.shape[:-1]
    out = ad.linear(u.reshape(-1, u.shape[-1]), params["fc_w"], params["fc_b"])
    return out.reshape(lead + (params.config.horizon,))


def forward(params: ModelParams, adjacency, x) -> np.ndarray:
    """Predictions (N, K) for x (N, T, F), or (B, N, K) for a batch (B, N, T, F)."""
    cfg = params.config
    xt, single = _node_major(x, cfg)
    n, b = xt.shape[:2]
    u = _features(params.arrays, adjacency, xt, cfg)
    y = ad.linear(u, params["fc_w"], params["fc_b"]).reshape(n, b, cfg.horizon).transpose(1, 0, 2)
    return y[0] if single else y


def _loss_graph(p, adjacency, xt, target_nm, config: ModelConfig):
    n, b = xt.shape[:2]
    u = _features(p, adjacency, xt, config)
    y = ad.linear(u, p["fc_w"], p["fc_b"])
    return ad.l2_loss(y, target_nm.reshape(n * b, config.horizon))


def _targets_node_major(targets, n, b, config):
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim == 2:
        t = t[None]
    if t.shape != (b, n, config.horizon):
        raise ShapeError(f"targets: expected {(b, n, config.horizon)}, got {t.shape}")
    return np.ascontiguousarray(t.transpose(1, 0, 2))


def loss(params: ModelParams, adjacency, inputs, targets) -> float:
    """Mean squared error over batch, nodes and horizons."""
    cfg = params.config
    xt, _ = _node_major(inputs, cfg)
    tt = _targets_node_major(targets, xt.shape[0], xt.shape[1], cfg)
    return float(_loss_graph(params.arrays, adjacency, xt, tt, cfg))


def loss_and_grad(params: ModelParams, adjacency, inputs, targets) -> tuple[float, np.ndarray]:
    """Loss and its gradient as a flat vector in flat_index order."""
    cfg = params.config
    xt, _ = _node_major(inputs, cfg)
    tt = _targets_node_major(targets, xt.shape[0], xt.shape[1], cfg)
    tape = Tape()
    p = {name: tape.watch(params[name], name) for name in PARAM_NAMES}
    out = _loss_graph(p, adjacency, xt, tt, cfg)
    tape.backward(out)
    return float(out.value), np.concatenate([p[name].grad.reshape(-1) for name in PARAM_NAMES])


def loss_fn_of_arrays(config: ModelConfig, adjacency, inputs, targets):
    """Scalar function f(*param_arrays) in PARAM_NAMES order, for gradient checking."""
    xt, _ = _node_major(inputs, config)
    tt = _targets_node_major(targets, xt.shape[0], xt.shape[1], config)

    def f(*arrays):
        return _loss_graph(dict(zip(PARAM_NAMES, arrays)), adjacency, xt, tt, config)

    return f


# -- persistence -------------------------------------------------------------


def _config_bytes(config: ModelConfig) -> bytes:
    return json.dumps(asdict(config), sort_keys=True).encode()


def save_params(path, params: ModelParams, fisher=None) -> Path:
    """Binary container: magic, version, config JSON, float64 LE parameters,
    then an optional Fisher section (tag, version, sample count, values)."""
    path = Path(path)
    cfg = _config_bytes(params.config)
    flat = params.flatten().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())
        if fisher is not None:
            values = np.asarray(fisher.values, dtype="<f8")
            if values.size != flat.size:
                raise ShapeError("Fisher diagonal does not align with parameters")
            fh.write(FISHER_TAG)
            fh.write(struct.pack("<IQQ", FISHER_VERSION, int(fisher.sample_count), values.size))
            fh.write(values.tobytes())
    return path


def _read_container(path):
    data = Path(path).read_bytes()
    try:
        if data[:8] != MAGIC:
            raise CorruptFileError(f"{path}: not a parameter file")
        version, clen = struct.unpack_from("<II", data, 8)
        if version != FORMAT_VERSION:
            raise CorruptFileError(f"{path}: unsupported format version {version}")
        off = 16
        config = ModelConfig(**json.loads(data[off : off + clen]))
        off += clen
        (count,) = struct.unpack_from("<Q", data, off)
        off += 8
        if len(data) < off + 8 * count:
            raise CorruptFileError(f"{path}: truncated parameter block")
        flat = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        fisher = None
        if off < len(data):
            if data[off : off + 4] != FISHER_TAG:
                raise CorruptFileError(f"{path}: unknown trailing section")
            fver, samples, fcount = struct.unpack_from("<IQQ", data, off + 4)
            if fver != FISHER_VERSION or fcount != count:
                raise CorruptFileError(f"{path}: bad Fisher section")
            off += 24
            if len(data) != off + 8 * fcount:
                raise CorruptFileError(f"{path}: truncated Fisher section")
            fisher = (np.frombuffer(data, dtype="<f8", count=fcount, offset=off).astype(np.float64), samples)
    except (struct.error, json.JSONDecodeError, TypeError, UnicodeDecodeError) as exc:
        raise CorruptFileError(f"{path}: {exc}") from None
    try:
        params = ModelParams.from_flat(config, flat)
    except ShapeError as exc:
        raise CorruptFileError(f"{path}: {exc}") from None
    return params, fisher


def load_params(path, expected: ModelConfig | None = None) -> ModelParams:
    params, _ = _read_container(path)
    if expected is not None and params.config != expected:
        raise ConfigMismatchError(f"{path}: stored config {params.config} != expected {expected}")
    return params
