"""Forward pass: hybrid Chebyshev graph convolution, shared GRU, linear output head.

A batch of B samples is evaluated as B·N rows, sample-major. Static Laplacians are
broadcast over the batch and each sample's recent-trend Laplacian is applied to its own
rows only, so rows never mix across samples and the GRU (shared by all rows) sees
exactly what it would see sample by sample.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as tc
from .data import N_EXTERNAL_FEATURES, Sample, SliceConfig, ZScoreScaler
from .errors import ConfigError, DataError, DimensionError
from .graphs import ALL_GRAPHS, AdjacencyMatrix, GraphKind, GraphSet
from .tensor import DiffTensor, Tape

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class ModelConfig:
    """Architecture sizes and switches.

    Attributes:
        n_stations: N
        K: Chebyshev order (number of polynomial terms)
        c_in: input channels per time step
        c_h: graph convolution output width
        C: GRU hidden size
        n_features: |F|
        use_external_features: False gives the variant without calendar inputs
        enabled_graphs: graphs summed in the hybrid convolution
        slicing: time-slicing configuration, horizon included
        H, p: recent-trend window and keep proportion
    """

    n_stations: int
    K: int = 3
    c_in: int = 1
    c_h: int = 64
    C: int = 32
    n_features: int = N_EXTERNAL_FEATURES
    use_external_features: bool = True
    enabled_graphs: Tuple[GraphKind, ...] = ALL_GRAPHS
    slicing: SliceConfig = field(default_factory=SliceConfig)
    H: int = 48
    p: float = 0.9

    def __post_init__(self):
        self.enabled_graphs = tuple(GraphKind(g) for g in self.enabled_graphs)
        if not self.enabled_graphs:
            raise ConfigError("at least one graph must be enabled", field="graphs.enabled")
        if self.K < 1 or self.c_in < 1 or self.c_h < 1 or self.C < 1 or self.n_stations < 1:
            raise ConfigError("K, c_in, c_h, C and n_stations must be >= 1", field="model")

    @property
    def head_inputs(self) -> int:
        return self.C + (self.n_features if self.use_external_features else 0)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["enabled_graphs"] = [g.value for g in self.enabled_graphs]
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        data = dict(data)
        data["slicing"] = SliceConfig(**data["slicing"])
        data["enabled_graphs"] = tuple(GraphKind(g) for g in data["enabled_graphs"])
        return cls(**data)


@dataclass
class ChebConvParams:
    """One K×C_in×C_out coefficient tensor per enabled graph."""

    thetas: Dict[GraphKind, np.ndarray]


@dataclass
class GRUParams:
    """GRU weights shared by every station."""

    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.U_z.shape[0]


@dataclass
class OutputHead:
    """x̂ = [Y, F]·W_f + b_f with one bias per station."""

    W_f: np.ndarray
    b_f: np.ndarray


GRU_NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


def theta_name(kind: GraphKind) -> str:
    return f"theta.{kind.value}"


class HybridGraphModel:
    """Parameters plus the graph set used to look up Laplacians for each sample."""

    def __init__(
        self,
        config: ModelConfig,
        cheb: ChebConvParams,
        gru: GRUParams,
        head: OutputHead,
        graphs: Optional[GraphSet] = None,
    ):
        self.config = config
        self.cheb = cheb
        self.gru = gru
        self.head = head
        self.graphs = graphs
        if head.b_f.shape != (config.n_stations, 1):
            raise DimensionError(
                f"b_f must be {config.n_stations}×1, got {head.b_f.shape}"
            )

    def parameters(self) -> Dict[str, np.ndarray]:
        """Live parameter arrays keyed by name (updates write through to the model)."""
        params = {theta_name(k): v for k, v in self.cheb.thetas.items()}
        params.update({name: getattr(self.gru, name) for name in GRU_NAMES})
        params["W_f"] = self.head.W_f
        params["b_f"] = self.head.b_f
        return params

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.parameters().items()}

    def load_parameters(self, values: Dict[str, np.ndarray]) -> None:
        """Copy values into the live arrays, checking names and shapes."""
        live = self.parameters()
        if set(values) != set(live):
            raise DataError(f"parameter names differ: {sorted(set(values) ^ set(live))}")
        for name, arr in live.items():
            src = np.asarray(values[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise DimensionError(f"{name}: expected shape {arr.shape}, got {src.shape}")
            arr[...] = src

    def with_graphs(self, graphs: GraphSet) -> "HybridGraphModel":
        self.graphs = graphs
        return self


# --- initialization -------------------------------------------------------------


def _glorot(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(
    config: ModelConfig, seed: int = 0, graphs: Optional[GraphSet] = None
) -> HybridGraphModel:
    """Glorot-uniform weights, zero biases; deterministic given the seed.

    Θ is treated as a (K·C_in)×C_out matrix for its fan-in.
    """
    rng = np.random.default_rng(seed)
    K, c_in, c_h, C = config.K, config.c_in, config.c_h, config.C
    thetas = {
        kind: _glorot(rng, (K, c_in, c_h), K * c_in, c_h) for kind in config.enabled_graphs
    }
    gru = GRUParams(
        W_z=_glorot(rng, (c_h, C), c_h, C),
        W_r=_glorot(rng, (c_h, C), c_h, C),
        W_h=_glorot(rng, (c_h, C), c_h, C),
        U_z=_glorot(rng, (C, C), C, C),
        U_r=_glorot(rng, (C, C), C, C),
        U_h=_glorot(rng, (C, C), C, C),
        b_z=np.zeros(C),
        b_r=np.zeros(C),
        b_h=np.zeros(C),
    )
    head = OutputHead(
        W_f=_glorot(rng, (config.head_inputs, 1), config.head_inputs, 1),
        b_f=np.zeros((config.n_stations, 1)),
    )
    return HybridGraphModel(config, ChebConvParams(thetas), gru, head, graphs)


# --- layers ---------------------------------------------------------------------


def cheb_conv(laplacian, x, theta) -> DiffTensor:
    """Σ_k T⁽ᵏ⁾·Θ_k with T⁽⁰⁾ = X, T⁽¹⁾ = L̃X, T⁽ᵏ⁾ = 2L̃T⁽ᵏ⁻¹⁾ − T⁽ᵏ⁻²⁾.

    Args:
        laplacian: N×N scaled Laplacian (array or DiffTensor)
        x: N×C_in signal
        theta: K×C_in×C_out coefficients

    Returns:
        N×C_out tensor
    """
    L, x, theta = tc.as_tensor(laplacian), tc.as_tensor(x), tc.as_tensor(theta)
    if theta.values.ndim != 3:
        raise DimensionError(f"theta must be K×C_in×C_out, got {theta.shape}")
    K, c_in, c_out = theta.shape
    if x.values.ndim != 2 or x.shape[1] != c_in or L.shape != (x.shape[0], x.shape[0]):
        raise DimensionError(
            f"cheb_conv shapes disagree: L {L.shape}, X {x.shape}, theta {theta.shape}"
        )
    terms = _chebyshev_terms(L, x, K)
    stacked = tc.concat_columns(*terms) if K > 1 else terms[0]
    return tc.matmul(stacked, tc.reshape(theta, (K * c_in, c_out)))


def _chebyshev_terms(L: DiffTensor, x: DiffTensor, K: int) -> List[DiffTensor]:
    terms = [x]
    if K > 1:
        terms.append(tc.matmul(L, x))
    for _ in range(2, K):
        terms.append(tc.subtract(tc.scale(tc.matmul(L, terms[-1]), 2.0), terms[-2]))
    return terms


def chebyshev_basis(laplacian: np.ndarray, X: np.ndarray, K: int) -> np.ndarray:
    """Chebyshev terms of a constant single-channel signal, grouped by time step.

    Args:
        laplacian: N×N, or B×N×N with one scaled Laplacian per sample
        X: N×T, or B×N×T
        K: number of terms

    Returns:
        T×(B·N)×K array; entry [s, b·N + i, k] is T⁽ᵏ⁾[i, s] of sample b
    """
    L = np.asarray(laplacian, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or L.ndim not in (2, 3):
        raise DimensionError(f"cannot convolve a signal {X.shape} on Laplacian {L.shape}")
    B, N, T = X.shape
    if L.shape[-2:] != (N, N) or (L.ndim == 3 and L.shape[0] != B):
        raise DimensionError(f"Laplacian {L.shape} does not fit a signal of shape {X.shape}")
    terms = [X]
    if K > 1:
        terms.append(np.matmul(L, X))
    for _ in range(2, K):
        terms.append(2.0 * np.matmul(L, terms[-1]) - terms[-2])
    return np.stack(terms, axis=-1).transpose(2, 0, 1, 3).reshape(T, B * N, K)


def cheb_conv_steps(laplacian, X, theta) -> List[DiffTensor]:
    """``cheb_conv`` for every column of a constant single-channel input.

    The Laplacian and the signal are constants; only the products with Θ are recorded.

    Returns:
        T tensors of shape (B·N)×C_out, one per time step
    """
    theta = tc.as_tensor(theta)
    if theta.values.ndim != 3 or theta.shape[1] != 1:
        raise DimensionError(f"step-wise convolution needs a K×1×C_out theta, got {theta.shape}")
    K, _, c_out = theta.shape
    weights = tc.reshape(theta, (K, c_out))
    return [tc.matmul(DiffTensor(step), weights) for step in chebyshev_basis(laplacian, X, K)]


def hybrid_conv_step(
    laplacians: Dict[GraphKind, np.ndarray], x_step, thetas: Dict[GraphKind, DiffTensor]
) -> DiffTensor:
    """Z = Σ over enabled graphs of ReLU(cheb_conv(L̃_g, x, Θ_g)).

    ``laplacians`` lists the enabled graphs; graphs missing from it are skipped.
    """
    if not laplacians:
        raise ConfigError("no graphs enabled for the hybrid convolution", field="graphs.enabled")
    z = None
    for kind, lap in laplacians.items():
        branch = tc.relu(cheb_conv(lap, x_step, thetas[kind]))
        z = branch if z is None else tc.add(z, branch)
    return z


def hybrid_conv_sequence(
    laplacians: Dict[GraphKind, np.ndarray], X, thetas: Dict[GraphKind, DiffTensor]
) -> List[DiffTensor]:
    """``hybrid_conv_step`` for every time step of X, one (B·N)×c_h tensor per step."""
    if not laplacians:
        raise ConfigError("no graphs enabled for the hybrid convolution", field="graphs.enabled")
    seq = None
    for kind, lap in laplacians.items():
        branches = [tc.relu(z) for z in cheb_conv_steps(lap, X, thetas[kind])]
        seq = branches if seq is None else [tc.add(a, b) for a, b in zip(seq, branches)]
    return seq


def gru_sequence(
    z_seq: Sequence[DiffTensor], gru: Dict[str, DiffTensor], h0=None
) -> DiffTensor:
    """Run the shared GRU over a sequence and return the last hidden state (M×C).

    Args:
        z_seq: T tensors of shape M×c_h
        gru: GRU parameter tensors keyed by name (W_z ... b_h)
        h0: initial hidden state (M×C); zeros when omitted
    """
    if len(z_seq) < 1:
        raise DimensionError("GRU needs at least one step")
    rows = z_seq[0].shape[0]
    C = gru["U_z"].shape[0]
    h = tc.as_tensor(np.zeros((rows, C)) if h0 is None else h0)
    ones = tc.as_tensor(np.ones((rows, C)))
    for x in z_seq:
        xz, xr, xh = (tc.matmul(x, gru[f"W_{g}"]) for g in "zrh")
        z = tc.sigmoid(tc.add(tc.add(xz, tc.matmul(h, gru["U_z"])), gru["b_z"]))
        r = tc.sigmoid(tc.add(tc.add(xr, tc.matmul(h, gru["U_r"])), gru["b_r"]))
        h_cand = tc.tanh(tc.add(tc.add(xh, tc.matmul(tc.hadamard(r, h), gru["U_h"])), gru["b_h"]))
        h = tc.add(tc.hadamard(tc.subtract(ones, z), h), tc.hadamard(z, h_cand))
    return h


# --- forward --------------------------------------------------------------------


def bind_parameters(tape: Tape, model: HybridGraphModel) -> Dict[str, DiffTensor]:
    """Register every model parameter on the tape (copies of the current values)."""
    return {name: tape.parameter(name, arr) for name, arr in model.parameters().items()}


def forward_arrays(
    model: HybridGraphModel,
    X: np.ndarray,
    F: np.ndarray,
    laplacians: Sequence[Dict[GraphKind, np.ndarray]],
    params: Dict[str, DiffTensor],
) -> DiffTensor:
    """Batched forward pass on raw arrays.

    Args:
        model: supplies the configuration
        X: B×N×T inputs (normalized units)
        F: B×N×|F| external features
        laplacians: one dict of scaled Laplacians per sample; static graphs are read
            from the first
        params: parameter tensors (usually from ``bind_parameters``)

    Returns:
        (B·N)×1 predictions in normalized units, sample-major
    """
    cfg = model.config
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] != cfg.n_stations:
        raise DimensionError(f"X must be B×{cfg.n_stations}×T, got {X.shape}")
    B, N = X.shape[:2]
    if len(laplacians) != B:
        raise DimensionError(f"{B} samples but {len(laplacians)} Laplacian sets")

    kinds = [k for k in cfg.enabled_graphs if k in laplacians[0]]
    batched = {
        kind: (
            np.stack([lap[kind] for lap in laplacians])
            if kind is GraphKind.RECENT_TREND
            else laplacians[0][kind]
        )
        for kind in kinds
    }
    thetas = {kind: params[theta_name(kind)] for kind in kinds}
    Z = hybrid_conv_sequence(batched, X, thetas)
    Y = gru_sequence(Z, {name: params[name] for name in GRU_NAMES})

    if cfg.use_external_features:
        feats = np.asarray(F, dtype=np.float64).reshape(B * N, cfg.n_features)
        Y = tc.concat_columns(Y, tc.as_tensor(feats))
    b_f = params["b_f"] if B == 1 else tc.tile_rows(params["b_f"], B)
    return tc.add(tc.matmul(Y, params["W_f"]), b_f)


def sample_laplacians(model: HybridGraphModel, samples: Sequence[Sample]):
    if model.graphs is None:
        raise ConfigError("model has no graph set attached", field="graphs")
    return [model.graphs.laplacians_at(s.anchor) for s in samples]


def forward_batch(
    model: HybridGraphModel,
    samples: Sequence[Sample],
    tape: Optional[Tape] = None,
    params: Optional[Dict[str, DiffTensor]] = None,
) -> DiffTensor:
    """Forward pass for a list of samples; records on ``tape`` when given."""
    if params is None:
        params = bind_parameters(tape, model) if tape is not None else {
            k: DiffTensor(v) for k, v in model.parameters().items()
        }
    X = np.stack([s.X for s in samples])
    F = np.stack([s.features for s in samples])
    return forward_arrays(model, X, F, sample_laplacians(model, samples), params)


def forward(model: HybridGraphModel, sample: Sample, tape: Optional[Tape] = None) -> DiffTensor:
    """x̂ for one sample (N×1, normalized units)."""
    return forward_batch(model, [sample], tape=tape)


def predict(model: HybridGraphModel, samples: Sequence[Sample], batch_size: int = 64) -> np.ndarray:
    """Normalized predictions B×N×1 without recording a tape."""
    params = {k: DiffTensor(v) for k, v in model.parameters().items()}
    N = model.config.n_stations
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        pred = forward_batch(model, chunk, params=params).values
        out.append(pred.reshape(len(chunk), N, 1))
    return np.concatenate(out) if out else np.zeros((0, N, 1))


# --- checkpoints ----------------------------------------------------------------


def save_checkpoint(
    model: HybridGraphModel,
    path: Union[str, Path],
    scaler: Optional[ZScoreScaler] = None,
    extra: Optional[Dict] = None,
) -> Path:
    """Write parameters, static graphs and config to one ``.npz`` container.

    Parameters are stored as float64 arrays, so loading is bit-exact.
    """
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "scaler": scaler.to_dict() if scaler is not None else None,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in model.parameters().items()}
    if model.graphs is not None:
        for kind, adj in model.graphs.static.items():
            arrays[f"graph/{kind.value}"] = adj.entries
            header.setdefault("graph_meta", {})[kind.value] = adj.meta
    arrays["header"] = np.array(json.dumps(header, sort_keys=True))
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_checkpoint(
    path: Union[str, Path],
) -> Tuple[HybridGraphModel, Optional[ZScoreScaler], Dict[GraphKind, AdjacencyMatrix], Dict]:
    """Read a checkpoint written by ``save_checkpoint``.

    Returns:
        (model without graph set, scaler or None, static adjacency matrices, header)
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found at {path}")
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path}: unsupported checkpoint format {header.get('format')}")
        config = ModelConfig.from_dict(header["config"])
        params = {
            key.split("/", 1)[1]: data[key].copy() for key in data.files if key.startswith("param/")
        }
        meta = header.get("graph_meta", {})
        static = {
            GraphKind(key.split("/", 1)[1]): AdjacencyMatrix(
                data[key].copy(), meta=meta.get(key.split("/", 1)[1], {})
            )
            for key in data.files
            if key.startswith("graph/")
        }
    model = init_params(config, seed=0)
    model.load_parameters(params)
    scaler = ZScoreScaler.from_dict(header["scaler"]) if header.get("scaler") else None
    return model, scaler, static, header
