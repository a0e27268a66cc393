"""Encoder / locally-linear transition / decoder surrogate (E2C, with an optional observation head).

The encoder maps a normalized ``3 x H x W`` sector (pressure, saturation,
log-permeability) to a latent vector; the transition advances it with

    z_next = A(z) z + B(z) u + o(z),   A(z) = I + v(z) w(z)^T

and the decoder maps latents back to a ``2 x H x W`` (pressure, saturation)
prediction. With ``e2co`` a global linear head predicts producer rates,
``y = C z_next + D u``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, UsageError
from .tensor import Tensor

CKPT_MAGIC = b"ADRC"
CKPT_VERSION = 1
LAYOUT = "CHWN"  # batch axis innermost inside the network


@dataclass
class Normalization:
    p_min: float = 0.0
    p_max: float = 1.0
    lnk_mean: float = 0.0
    lnk_std: float = 1.0
    y_scale: float = 1.0
    s_min: float = 0.0  # saturation is left in physical units; range kept for provenance
    s_max: float = 1.0


@dataclass
class ModelConfig:
    extent: tuple = (24, 24)  # expanded sector size fed to the network
    n_z: int = 50
    channels: tuple = (16, 32, 64, 64)
    kernel: int = 3
    trans_hidden: int = 64
    rank: int = 1
    d_u: int = 4
    d_y: int = 0
    e2co: bool = False
    in_channels: int = 3
    grid: tuple = (60, 60)
    core: tuple = (20, 20)
    halo: int = 4
    well_cells: list = field(default_factory=list)  # (i, j) per control, dataset order
    producer_slots: list = field(default_factory=list)  # control index of each producer
    norm: Normalization = field(default_factory=Normalization)

    def __post_init__(self):
        self.extent = tuple(int(v) for v in self.extent)
        self.channels = tuple(int(v) for v in self.channels)
        self.grid = tuple(int(v) for v in self.grid)
        self.core = tuple(int(v) for v in self.core)
        self.well_cells = [tuple(int(v) for v in c) for c in self.well_cells]
        self.producer_slots = [int(v) for v in self.producer_slots]
        if isinstance(self.norm, dict):
            self.norm = Normalization(**self.norm)
        if len(self.channels) != 4:
            raise ConfigError("encoder needs exactly four channel counts")
        if any(e % 4 for e in self.extent):
            raise ConfigError(f"sector extent {self.extent} must be divisible by 4 (two stride-2 stages)")
        if not 1 <= self.rank <= self.n_z:
            raise ConfigError(f"transition rank {self.rank} must lie in [1, n_z={self.n_z}]")
        if self.e2co and self.d_y < 1:
            raise ConfigError("e2co needs at least one output")
        if self.well_cells and len(self.well_cells) != self.d_u:
            raise ConfigError(f"{len(self.well_cells)} well cells for {self.d_u} controls")

    @property
    def d_aug(self):
        return self.d_u + 2 + 2 * self.d_u

    @property
    def bottleneck(self):
        return (self.channels[3], self.extent[0] // 4, self.extent[1] // 4)

    def to_dict(self):
        d = asdict(self)
        d["norm"] = asdict(self.norm)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


def _uniform(rng, shape, fan_in, gain=1.0):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed=0, dtype=np.float32):
    """Fan-in scaled uniform weights; transition and observation heads start at the identity dynamics."""
    rng = np.random.default_rng(seed)
    ps = T.ParamStore()
    k = cfg.kernel
    c1, c2, c3, c4 = cfg.channels
    enc = [(cfg.in_channels, c1), (c1, c2), (c2, c3), (c3, c4)]
    for n, (ci, co) in enumerate(enc, 1):
        ps.add(f"enc.conv{n}.W", _uniform(rng, (co, ci, k, k), ci * k * k).astype(dtype))
        ps.add(f"enc.conv{n}.b", np.zeros(co, dtype))
    for n in range(1, 4):
        for m in (1, 2):
            gain = 1.0 if m == 1 else 0.1
            ps.add(f"enc.res{n}.W{m}", _uniform(rng, (c4, c4, k, k), c4 * k * k, gain).astype(dtype))
            ps.add(f"enc.res{n}.b{m}", np.zeros(c4, dtype))
    flat = int(np.prod(cfg.bottleneck))
    ps.add("enc.dense.W", _uniform(rng, (cfg.n_z, flat), flat).astype(dtype))
    ps.add("enc.dense.b", np.zeros(cfg.n_z, dtype))

    h = cfg.trans_hidden
    ps.add("trans.hidden.W", _uniform(rng, (h, cfg.n_z), cfg.n_z).astype(dtype))
    ps.add("trans.hidden.b", np.zeros(h, dtype))
    nr = cfg.n_z * cfg.rank
    ps.add("trans.v.W", np.zeros((nr, h), dtype))
    ps.add("trans.v.b", np.zeros(nr, dtype))
    # w is not zeroed: with v = w = 0 both gradients vanish and A would stay I forever
    ps.add("trans.w.W", _uniform(rng, (nr, h), h, 0.1).astype(dtype))
    ps.add("trans.w.b", np.zeros(nr, dtype))
    ps.add("trans.B.W", np.zeros((cfg.n_z * cfg.d_aug, h), dtype))
    ps.add("trans.B.b", np.zeros(cfg.n_z * cfg.d_aug, dtype))
    ps.add("trans.o.W", np.zeros((cfg.n_z, h), dtype))
    ps.add("trans.o.b", np.zeros(cfg.n_z, dtype))
    if cfg.e2co:
        ps.add("obs.C", np.zeros((cfg.d_y, cfg.n_z), dtype))
        ps.add("obs.D", np.zeros((cfg.d_y, cfg.d_aug), dtype))

    ps.add("dec.dense.W", _uniform(rng, (flat, cfg.n_z), cfg.n_z).astype(dtype))
    ps.add("dec.dense.b", np.zeros(flat, dtype))
    for n in range(1, 4):
        for m in (1, 2):
            gain = 1.0 if m == 1 else 0.1
            ps.add(f"dec.res{n}.W{m}", _uniform(rng, (c4, c4, k, k), c4 * k * k, gain).astype(dtype))
            ps.add(f"dec.res{n}.b{m}", np.zeros(c4, dtype))
    dec = [(c4, c3, 1), (c3, c2, 1), (c2, c1, 2), (c1, 2, 2)]
    for n, (ci, co, s) in enumerate(dec, 1):
        ps.add(f"dec.convT{n}.W", _uniform(rng, (ci, co, k, k), ci * k * k / (s * s)).astype(dtype))
        ps.add(f"dec.convT{n}.b", np.zeros(co, dtype))
    return ps


def _batched(x, ndim):
    """Add a batch axis if ``x`` has ``ndim`` dims; returns the tensor and a squeeze flag."""
    if x.data.ndim == ndim:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def encode(x, ps, cfg: ModelConfig):
    x = x if isinstance(x, Tensor) else Tensor(x)
    x, squeeze = _batched(x, 3)
    if x.shape[1:] != (cfg.in_channels,) + cfg.extent:
        raise DimensionError(f"encoder expects {(cfg.in_channels,) + cfg.extent}, got {x.shape[1:]}")
    h = T.transpose(x, (1, 2, 3, 0))
    for n, s in zip(range(1, 5), (2, 2, 1, 1)):
        h = T.activation(T.conv2d(h, ps[f"enc.conv{n}.W"], ps[f"enc.conv{n}.b"], stride=s, padding=1, layout=LAYOUT))
    for n in range(1, 4):
        h = T.residual_block(h, ps[f"enc.res{n}.W1"], ps[f"enc.res{n}.b1"], ps[f"enc.res{n}.W2"], ps[f"enc.res{n}.b2"],
                             layout=LAYOUT)
    h = T.transpose(T.reshape(h, (-1, h.shape[-1])), (1, 0))
    z = T.dense(h, ps["enc.dense.W"], ps["enc.dense.b"])
    return T.reshape(z, (cfg.n_z,)) if squeeze else z


def decode(z, ps, cfg: ModelConfig):
    z = z if isinstance(z, Tensor) else Tensor(z)
    z, squeeze = _batched(z, 1)
    n = z.shape[0]
    h = T.activation(T.dense(z, ps["dec.dense.W"], ps["dec.dense.b"]))
    h = T.reshape(T.transpose(h, (1, 0)), cfg.bottleneck + (n,))
    for r in range(1, 4):
        h = T.residual_block(h, ps[f"dec.res{r}.W1"], ps[f"dec.res{r}.b1"], ps[f"dec.res{r}.W2"],
                             ps[f"dec.res{r}.b2"], transpose=True, layout=LAYOUT)
    for m, (s, op) in zip(range(1, 5), ((1, 0), (1, 0), (2, 1), (2, 1))):
        h = T.conv_transpose2d(h, ps[f"dec.convT{m}.W"], ps[f"dec.convT{m}.b"], stride=s, padding=1,
                               output_padding=op, layout=LAYOUT)
        if m < 4:
            h = T.activation(h)
    h = T.transpose(h, (3, 0, 1, 2))
    pressure = T.getitem(h, (slice(None), slice(0, 1)))
    saturation = T.sigmoid(T.getitem(h, (slice(None), slice(1, 2))))
    out = T.concat([pressure, saturation], axis=1)
    return T.reshape(out, out.shape[1:]) if squeeze else out


@dataclass
class TransitionOutput:
    v: list  # rank-many (N, n_z) tensors
    w: list
    B: Tensor  # (N, n_z, d_aug)
    o: Tensor

    def A(self):
        """Explicit ``I + sum_k v_k w_k^T`` per batch item, as numpy."""
        n_z = self.v[0].shape[-1]
        A = np.broadcast_to(np.eye(n_z), self.v[0].shape[:1] + (n_z, n_z)).copy()
        for v, w in zip(self.v, self.w):
            A += v.data[:, :, None] * w.data[:, None, :]
        return A


def transition(z, u_aug, ps, cfg: ModelConfig):
    """``(z_next, TransitionOutput)`` with ``z_next = z + v (w . z) + B u + o`` (summed over rank)."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    u_aug = u_aug if isinstance(u_aug, Tensor) else Tensor(u_aug)
    z, squeeze = _batched(z, 1)
    u_aug, _ = _batched(u_aug, 1)
    if u_aug.shape != (z.shape[0], cfg.d_aug):
        raise DimensionError(f"augmented control {u_aug.shape} does not match batch {z.shape[0]} x {cfg.d_aug}")
    h = T.activation(T.dense(z, ps["trans.hidden.W"], ps["trans.hidden.b"]))
    v_all = T.dense(h, ps["trans.v.W"], ps["trans.v.b"])
    w_all = T.dense(h, ps["trans.w.W"], ps["trans.w.b"])
    B = T.reshape(T.dense(h, ps["trans.B.W"], ps["trans.B.b"]), (z.shape[0], cfg.n_z, cfg.d_aug))
    o = T.dense(h, ps["trans.o.W"], ps["trans.o.b"])
    vs, ws, z_next = [], [], z
    for k in range(cfg.rank):
        cols = (slice(None), slice(k * cfg.n_z, (k + 1) * cfg.n_z))
        v, w = T.getitem(v_all, cols), T.getitem(w_all, cols)
        z_next = T.add(z_next, T.scale_rows(v, T.rowdot(w, z)))
        vs.append(v)
        ws.append(w)
    z_next = T.add(z_next, T.add(T.bmv(B, u_aug), o))
    out = TransitionOutput(vs, ws, B, o)
    return (T.reshape(z_next, (cfg.n_z,)) if squeeze else z_next), out


def observe(z_bar, z_next, u_aug, ps, cfg: ModelConfig):
    """Producer rates ``C z_next + D u`` (normalized units).

    C and D are global matrices, so the reference latent ``z_bar`` does not
    enter; it is accepted to keep the call shape of the state-dependent form.
    """
    if not cfg.e2co:
        raise UsageError("observe called on a model without the observation head")
    z_next = z_next if isinstance(z_next, Tensor) else Tensor(z_next)
    u_aug = u_aug if isinstance(u_aug, Tensor) else Tensor(u_aug)
    return T.add(T.dense(z_next, ps["obs.C"]), T.dense(u_aug, ps["obs.D"]))


def predict_sector(x, u_aug, ps, cfg: ModelConfig):
    """Next-state sector prediction (and rates with e2co); no tape needed."""
    z = encode(x, ps, cfg)
    z_next, _ = transition(z, u_aug, ps, cfg)
    x_next = decode(z_next, ps, cfg)
    y = observe(z, z_next, u_aug, ps, cfg) if cfg.e2co else None
    return x_next, y


# ---------------------------------------------------------------- normalization

def normalize(state, perm, cfg_or_norm):
    """Stack ``(p, S)`` and permeability into the ``3 x H x W`` model input.

    ``state`` is ``(..., 2, H, W)`` in psi / fraction; ``perm`` is mD with the
    same trailing shape.
    """
    nm = cfg_or_norm.norm if isinstance(cfg_or_norm, ModelConfig) else cfg_or_norm
    state = np.asarray(state, dtype=np.float64)
    perm = np.asarray(perm, dtype=np.float64)
    p = (state[..., 0, :, :] - nm.p_min) / (nm.p_max - nm.p_min)
    k = (np.log(perm) - nm.lnk_mean) / nm.lnk_std if nm.lnk_std > 0 else np.zeros_like(perm)
    k = np.broadcast_to(k, p.shape)
    return np.stack([p, state[..., 1, :, :], k], axis=-3)


def normalize_state(state, norm: Normalization):
    state = np.asarray(state, dtype=np.float64)
    p = (state[..., 0, :, :] - norm.p_min) / (norm.p_max - norm.p_min)
    return np.stack([p, state[..., 1, :, :]], axis=-3)


def denormalize(pred, cfg_or_norm):
    nm = cfg_or_norm.norm if isinstance(cfg_or_norm, ModelConfig) else cfg_or_norm
    pred = np.asarray(pred, dtype=np.float64)
    p = pred[..., 0, :, :] * (nm.p_max - nm.p_min) + nm.p_min
    return np.stack([p, pred[..., 1, :, :]], axis=-3)


def fit_normalization(p, perm, y=None):
    """Dataset-wide constants: pressure min/max, log-permeability moments, rate scale."""
    lnk = np.log(np.asarray(perm, dtype=np.float64))
    y_scale = float(np.max(np.abs(y))) if y is not None and np.size(y) and np.max(np.abs(y)) > 0 else 1.0
    lnk_std = float(lnk.std())
    if lnk_std <= 1e-12 * max(1.0, abs(float(lnk.mean()))):
        lnk_std = 0.0  # constant field: rounding spread only
    p_min, p_max = float(np.min(p)), float(np.max(p))
    if p_max <= p_min:
        p_max = p_min + 1.0
    return Normalization(p_min, p_max, float(lnk.mean()), lnk_std, y_scale)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: ModelConfig
    params: T.ParamStore
    meta: dict = field(default_factory=dict)

    def save(self, path):
        header = json.dumps({"model": self.config.to_dict(), "meta": self.meta}, sort_keys=True).encode()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
            fh.write(struct.pack("<I", len(header)) + header)
            fh.write(struct.pack("<I", len(self.params)))
            for name, p in self.params.items():
                nb = name.encode()
                fh.write(struct.pack("<I", len(nb)) + nb)
                fh.write(struct.pack("<I", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
                fh.write(p.data.astype("<f4").tobytes())
        return path

    @classmethod
    def load(cls, path, dtype=np.float32):
        raw = Path(path).read_bytes()
        if raw[:4] != CKPT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CKPT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        (hl,) = struct.unpack_from("<I", raw, 8)
        head = json.loads(raw[12:12 + hl])
        off = 12 + hl
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        ps = T.ParamStore()
        for _ in range(count):
            (nl,) = struct.unpack_from("<I", raw, off)
            name = raw[off + 4:off + 4 + nl].decode()
            off += 4 + nl
            (nd,) = struct.unpack_from("<I", raw, off)
            shape = struct.unpack_from(f"<{nd}I", raw, off + 4)
            off += 4 + 4 * nd
            size = int(np.prod(shape)) if nd else 1
            data = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            ps.add(name, data.astype(dtype))
        return cls(ModelConfig.from_dict(head["model"]), ps, head.get("meta", {}))
