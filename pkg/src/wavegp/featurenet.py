"""Sinusoidal feature network mapping spacetime points to feature vectors.

The network is a stack of sine layers, xi(x) = sin(omega0 * (x @ W) + b),
with a final affine layer omega0 * (x @ W) + b and no output sine.  A
fixed per-coordinate affine normalization is applied before the first
layer so positions land in [-1, 1] per axis and the batch time window
maps onto [-1, 1]; derivative evaluation happens w.r.t. the *physical*
coordinates, with the normalization handled as part of the jet seed.

Weights may be plain arrays (inference) or tape Vars (training); the
same code path serves both.  `forward_jet` propagates an order-2 jet
along one input coordinate and its value channel reproduces `forward`
bit for bit, because both run the identical op sequence.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Jet2

# First-layer weight initialization variants.
FIRST_LAYER_DEPTH = "layer-count"  # Uniform(-1/L, 1/L); the default
FIRST_LAYER_FANIN = "fan-in"       # Uniform(-1/in_dim, 1/in_dim)

IN_DIM = 4  # three spatial coordinates plus time


@dataclass(frozen=True)
class SirenConfig:
    """Architecture and input normalization of the feature map.

    depth    L, total layer count (depth-1 sine layers + 1 affine)
    hidden   width of every sine layer
    out_dim  feature dimension h of the final affine layer
    omega0   frequency scale multiplying every pre-activation
    c0       numerator of the deep-layer init bound sqrt(c0/(omega0^2 H))
    """

    depth: int = 5
    hidden: int = 100
    out_dim: int = 100
    omega0: float = 30.0
    c0: float = 6.0
    norm_scale: tuple = (1.0, 1.0, 1.0, 1.0)
    norm_offset: tuple = (0.0, 0.0, 0.0, 0.0)
    first_layer_init: str = FIRST_LAYER_DEPTH

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be at least 2 (one sine + final affine)")
        if self.hidden < 1 or self.out_dim < 1:
            raise ValueError("hidden and out_dim must be positive")
        if self.omega0 <= 0:
            raise ValueError("omega0 must be positive")
        if self.first_layer_init not in (FIRST_LAYER_DEPTH, FIRST_LAYER_FANIN):
            raise ValueError(f"unknown first_layer_init: {self.first_layer_init}")
        if len(self.norm_scale) != IN_DIM or len(self.norm_offset) != IN_DIM:
            raise ValueError("normalization must cover all 4 coordinates")

    def layer_dims(self) -> list[int]:
        return [IN_DIM] + [self.hidden] * (self.depth - 1) + [self.out_dim]


@dataclass
class SirenParams:
    """Per-layer weight matrices (in_dim, out_dim) and bias vectors."""

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def n_layers(self) -> int:
        return len(self.weights)

    def n_scalars(self) -> int:
        return int(sum(np.size(ad.value_of(w)) for w in self.weights)
                   + sum(np.size(ad.value_of(b)) for b in self.biases))


def normalization_for(center, half_extent, t_span: float) -> tuple[tuple, tuple]:
    """(scale, offset) mapping physical inputs to the network's range.

    Positions: (r - center) / half_extent per axis.  Time: 2 t / T - 1,
    i.e. offset T/2 and scale 2/T for a batch window of length T.
    """
    center = np.asarray(center, dtype=np.float64)
    half = np.broadcast_to(np.asarray(half_extent, dtype=np.float64), (3,))
    if np.any(half <= 0) or t_span <= 0:
        raise ValueError("normalization extents must be positive")
    scale = (1.0 / half[0], 1.0 / half[1], 1.0 / half[2], 2.0 / t_span)
    offset = (float(center[0]), float(center[1]), float(center[2]), t_span / 2.0)
    return scale, offset


def init(config: SirenConfig, seed) -> SirenParams:
    """Draw weights for the given architecture; biases start at zero.

    First layer: Uniform(-1/L, 1/L) in the default variant, or
    Uniform(-1/in_dim, 1/in_dim) in the fan-in variant.  Every deeper
    layer (final affine included): Uniform(+-sqrt(c0 / (omega0^2 H))).
    `seed` is an int or a numpy Generator; the draw is deterministic
    and identical across platforms for a given seed.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dims = config.layer_dims()
    if config.first_layer_init == FIRST_LAYER_DEPTH:
        first_bound = 1.0 / config.depth
    else:
        first_bound = 1.0 / IN_DIM
    deep_bound = np.sqrt(config.c0 / (config.omega0 ** 2 * config.hidden))

    params = SirenParams()
    for layer in range(config.depth):
        bound = first_bound if layer == 0 else deep_bound
        w = rng.uniform(-bound, bound, size=(dims[layer], dims[layer + 1]))
        params.weights.append(w)
        params.biases.append(np.zeros(dims[layer + 1]))
    return params


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x.reshape(1, -1), True
    return x, False


def normalize_inputs(config: SirenConfig, x: np.ndarray) -> np.ndarray:
    scale = np.asarray(config.norm_scale)
    offset = np.asarray(config.norm_offset)
    return (x - offset) * scale


def forward(config: SirenConfig, params: SirenParams, x):
    """Feature vectors for x of shape (4,) or (N, 4); returns (h,) / (N, h)."""
    xb, squeeze = _as_batch(x)
    a = normalize_inputs(config, xb)
    out = _forward_from_normalized(config, params, a)
    if squeeze:
        out = ad.reshape(out, (config.out_dim,))
    return out


def _forward_from_normalized(config: SirenConfig, params: SirenParams, a):
    last = config.depth - 1
    for layer in range(config.depth):
        pre = config.omega0 * ad.matmul(a, params.weights[layer]) + params.biases[layer]
        a = pre if layer == last else ad.sin(pre)
    return a


def forward_jet(config: SirenConfig, params: SirenParams, x, coord: int) -> Jet2:
    """Order-2 jet of the feature map along physical coordinate `coord`.

    x is (4,) or (N, 4); the jet's channels are (h,) or (N, h).  The
    value channel is bit-identical to forward(); d1/d2 are first and
    second derivatives w.r.t. the physical input coordinate, with the
    input normalization folded into the seed.
    """
    if not 0 <= coord < IN_DIM:
        raise ValueError(f"coordinate index out of range: {coord}")
    xb, squeeze = _as_batch(x)
    v = normalize_inputs(config, xb)
    d1 = np.zeros_like(xb)
    d1[:, coord] = config.norm_scale[coord]  # d/dx_phys of the affine pre-layer
    jet = Jet2(v, d1, np.zeros_like(xb))
    out = propagate_jet(config, params, jet)
    if squeeze:
        out = Jet2(ad.reshape(out.v, (config.out_dim,)),
                   ad.reshape(out.d1, (config.out_dim,)),
                   ad.reshape(out.d2, (config.out_dim,)))
    return out


def propagate_jet(config: SirenConfig, params: SirenParams, jet: Jet2) -> Jet2:
    """Push an already-normalized input jet through the layer stack."""
    last = config.depth - 1
    for layer in range(config.depth):
        lin = ad.jet_matmul(jet, params.weights[layer])
        pre = Jet2(config.omega0 * lin.v + params.biases[layer],
                   config.omega0 * lin.d1,
                   config.omega0 * lin.d2)
        jet = pre if layer == last else ad.jet_sin(pre)
    return jet


class SirenNet:
    """Config + params bundle exposing the feature-map interface the
    kernel layer consumes: forward(x) and forward_jet(x, coord)."""

    def __init__(self, config: SirenConfig, params: SirenParams):
        self.config = config
        self.params = params

    @property
    def out_dim(self) -> int:
        return self.config.out_dim

    def forward(self, x):
        return forward(self.config, self.params, x)

    def forward_jet(self, x, coord: int) -> Jet2:
        return forward_jet(self.config, self.params, x, coord)

    def difference_view(self) -> "SirenNet":
        """Evaluation view with the final affine bias pinned to zero.

        Feature differences phi(u) - phi(v), and every coordinate
        derivative of phi, are exactly independent of that bias, so
        consumers built on differences (the kernel layer) lose nothing.
        Pinning it keeps such computations bitwise invariant to the
        stored bias and its gradient exactly zero, instead of leaving
        a cancellation residue that a finite-difference check would
        read as disagreement.
        """
        biases = list(self.params.biases)
        biases[-1] = np.zeros(self.config.out_dim)
        return SirenNet(self.config, SirenParams(list(self.params.weights), biases))


class IdentityFeatureMap:
    """Normalization-free identity embedding of the 4 raw coordinates.

    Turns the learned kernel into a plain squared-exponential on
    spacetime; used by tests and symbolic oracles.
    """

    out_dim = IN_DIM

    def forward(self, x):
        return np.asarray(x, dtype=np.float64)

    def forward_jet(self, x, coord: int) -> Jet2:
        xb, squeeze = _as_batch(x)
        d1 = np.zeros_like(xb)
        d1[:, coord] = 1.0
        if squeeze:
            return Jet2(xb[0], d1[0], np.zeros(IN_DIM))
        return Jet2(xb, d1, np.zeros_like(xb))


# ------------------------------------------------------------- checkpoints

_MAGIC = b"WGPSIREN"
_VERSION = 1
_MODE_CODE = {FIRST_LAYER_DEPTH: 0, FIRST_LAYER_FANIN: 1}
_MODE_NAME = {v: k for k, v in _MODE_CODE.items()}


def save_checkpoint(path, config: SirenConfig, params: SirenParams) -> None:
    """Write config header + float64 weight payload.

    Layout (little-endian): magic 'WGPSIREN', u32 version, u32 depth,
    u32 hidden, u32 out_dim, f64 omega0, f64 c0, u32 init-mode code,
    4xf64 norm scale, 4xf64 norm offset, then per layer the weight
    matrix row-major followed by the bias vector, all float64.
    """
    header = _MAGIC + struct.pack(
        "<IIIIddI",
        _VERSION, config.depth, config.hidden, config.out_dim,
        config.omega0, config.c0, _MODE_CODE[config.first_layer_init],
    )
    header += struct.pack("<4d", *config.norm_scale)
    header += struct.pack("<4d", *config.norm_offset)
    with open(path, "wb") as fh:
        fh.write(header)
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(ad.value_of(w), dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(ad.value_of(b), dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[SirenConfig, SirenParams]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"not a feature-net checkpoint: {path}")
    off = len(_MAGIC)
    version, depth, hidden, out_dim, omega0, c0, mode = struct.unpack_from("<IIIIddI", blob, off)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += struct.calcsize("<IIIIddI")
    scale = struct.unpack_from("<4d", blob, off)
    off += 32
    offset = struct.unpack_from("<4d", blob, off)
    off += 32
    config = SirenConfig(depth=depth, hidden=hidden, out_dim=out_dim,
                         omega0=omega0, c0=c0, norm_scale=scale,
                         norm_offset=offset, first_layer_init=_MODE_NAME[mode])
    params = SirenParams()
    dims = config.layer_dims()
    for layer in range(depth):
        n_w = dims[layer] * dims[layer + 1]
        w = np.frombuffer(blob, dtype="<f8", count=n_w, offset=off).reshape(
            dims[layer], dims[layer + 1]).copy()
        off += 8 * n_w
        b = np.frombuffer(blob, dtype="<f8", count=dims[layer + 1], offset=off).copy()
        off += 8 * dims[layer + 1]
        params.weights.append(w)
        params.biases.append(b)
    if off != len(blob):
        raise ValueError("checkpoint has trailing bytes; file is corrupt")
    return config, params
