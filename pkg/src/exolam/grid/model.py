"""Conv/MLP inverse dynamics with a VQ bottleneck and a conv forward model.

Encoder: (obs, obs') stacked as 2 channels -> 3x3 conv stack -> flatten ->
MLP -> z_pre -> nearest code z_q. Decoder: obs plus z_q broadcast over the
grid -> 3x3 conv stack -> 1-channel next-frame prediction. ReLU throughout.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..numerics import RngStream
from .env import GRID, GridData
from .tape import Node, Tape

DTYPE = np.float32


@dataclass(frozen=True)
class GridModelConfig:
    enc_channels: tuple = (128, 128, 128)
    mlp_hidden: int = 64
    d_z: int = 32
    n_codes: int = 5
    beta: float = 0.25
    dec_channels: tuple = (32, 32, 32, 32)
    d_y: int = 4

    def to_dict(self):
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        d["dec_channels"] = list(self.dec_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        for k in ("enc_channels", "dec_channels"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


@dataclass
class GridLamParams:
    cfg: GridModelConfig
    arrays: dict = field(default_factory=dict)

    def names(self):
        return list(self.arrays)

    def values(self):
        return list(self.arrays.values())

    def with_values(self, values) -> "GridLamParams":
        return GridLamParams(self.cfg, dict(zip(self.arrays, values)))

    def copy(self) -> "GridLamParams":
        return self.with_values([v.copy() for v in self.values()])

    @property
    def codebook(self) -> np.ndarray:
        return self.arrays["codebook"]

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.values()))


def init_grid_params(cfg: GridModelConfig, rng: RngStream) -> GridLamParams:
    """He-normal weights, zero biases, codebook ~ N(0, 1/d_z)."""
    a: dict[str, np.ndarray] = {}

    def dense(name, fan_in, fan_out):
        a[f"{name}_w"] = rng.normal((fan_in, fan_out), np.sqrt(2.0 / fan_in)).astype(DTYPE)
        a[f"{name}_b"] = np.zeros(fan_out, dtype=DTYPE)

    c_in = 2
    for i, c in enumerate(cfg.enc_channels):
        dense(f"enc_conv{i}", 9 * c_in, c)
        c_in = c
    dense("enc_fc0", GRID * GRID * c_in, cfg.mlp_hidden)
    dense("enc_fc1", cfg.mlp_hidden, cfg.d_z)
    a["codebook"] = rng.normal((cfg.n_codes, cfg.d_z), 1.0 / np.sqrt(cfg.d_z)).astype(DTYPE)
    c_in = 1 + cfg.d_z
    for i, c in enumerate(cfg.dec_channels):
        dense(f"dec_conv{i}", 9 * c_in, c)
        c_in = c
    dense("dec_out", 9 * c_in, 1)
    a["head_w"] = rng.normal((cfg.d_z, cfg.d_y), 1.0 / np.sqrt(cfg.d_z)).astype(DTYPE)
    return GridLamParams(cfg, a)


def nearest_code(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    d = (np.sum(z * z, axis=1, keepdims=True) - 2.0 * z @ codebook.T
         + np.sum(codebook * codebook, axis=1)[None, :])
    return np.argmin(d, axis=1)


class Graph:
    """Parameters placed on a tape for one forward/backward pass."""

    def __init__(self, params: GridLamParams, tape: Tape | None = None):
        self.tape = tape or Tape()
        self.tape.reset()
        self.params = params
        self.p = {k: self.tape.param(v) for k, v in params.arrays.items()}

    def _conv(self, x: Node, name: str, act: bool = True) -> Node:
        t = self.tape
        y = t.bias_add(t.conv3x3(x, self.p[f"{name}_w"]), self.p[f"{name}_b"])
        return t.relu(y) if act else y

    def _dense(self, x: Node, name: str, act: bool = True) -> Node:
        t = self.tape
        y = t.bias_add(t.matmul(x, self.p[f"{name}_w"]), self.p[f"{name}_b"])
        return t.relu(y) if act else y

    def encode(self, obs: np.ndarray, obs_next: np.ndarray):
        """Returns (z_pre node, z_q straight-through node, codebook-gather node, codes)."""
        t, cfg = self.tape, self.params.cfg
        x = t.const(np.stack([obs, obs_next], axis=-1).astype(DTYPE))
        for i in range(len(cfg.enc_channels)):
            x = self._conv(x, f"enc_conv{i}")
        x = t.reshape(x, (x.value.shape[0], -1))
        x = self._dense(x, "enc_fc0")
        z_pre = self._dense(x, "enc_fc1", act=False)
        codes = nearest_code(z_pre.value, self.p["codebook"].value)
        z_code = t.gather_rows(self.p["codebook"], codes)
        z_q = t.straight_through(z_pre, z_code)
        return z_pre, z_q, z_code, codes

    def decode(self, obs: np.ndarray, z_q: Node) -> Node:
        t, cfg = self.tape, self.params.cfg
        o = t.const(obs[..., None].astype(DTYPE))
        x = t.concat([o, t.broadcast_spatial(z_q, GRID, GRID)], axis=-1)
        for i in range(len(cfg.dec_channels)):
            x = self._conv(x, f"dec_conv{i}")
        y = self._conv(x, "dec_out", act=False)
        return t.reshape(y, (y.value.shape[0], GRID, GRID))

    def vq_loss(self, z_pre: Node, z_code: Node) -> Node:
        t = self.tape
        codebook_term = t.mse(t.stop_gradient(z_pre), z_code)
        commit = t.mse(z_pre, t.stop_gradient(z_code))
        return t.add(codebook_term, t.scale(commit, self.params.cfg.beta))

    def robust_loss(self, z_pre: Node, actions: np.ndarray) -> Node:
        t = self.tape
        onehot = np.eye(self.params.cfg.d_y, dtype=DTYPE)[actions]
        pred = t.matmul(z_pre, self.p["head_w"])
        # mean over rows of the squared norm = d_y * elementwise mean
        return t.scale(t.mse(pred, t.const(onehot)), float(self.params.cfg.d_y))


# ---------------------------------------------------------------- inference helpers


def encode(p: GridLamParams, obs: np.ndarray, obs_next: np.ndarray):
    """(z_pre, z_q, code index) without recording gradients."""
    g = Graph(p)
    z_pre, z_q, _, codes = g.encode(obs, obs_next)
    return z_pre.value, z_q.value, codes


def decode(p: GridLamParams, obs: np.ndarray, z_q: np.ndarray) -> np.ndarray:
    g = Graph(p)
    return g.decode(obs, g.tape.const(np.asarray(z_q, dtype=DTYPE))).value


def predict(p: GridLamParams, data: GridData, chunk: int = 512):
    """Encode each transition and decode its next frame."""
    zs, zq, codes, preds = [], [], [], []
    for start in range(0, len(data), chunk):
        d = data.take(slice(start, start + chunk))
        a, b, c = encode(p, d.obs, d.obs_next)
        zs.append(a)
        zq.append(b)
        codes.append(c)
        preds.append(decode(p, d.obs, b))
    return np.concatenate(zs), np.concatenate(zq), np.concatenate(codes), np.concatenate(preds)


def encode_all(p: GridLamParams, obs, obs_next, chunk: int = 512):
    zs, codes = [], []
    for start in range(0, obs.shape[0], chunk):
        a, _, c = encode(p, obs[start:start + chunk], obs_next[start:start + chunk])
        zs.append(a)
        codes.append(c)
    return np.concatenate(zs), np.concatenate(codes)
