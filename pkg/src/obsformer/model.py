"""The one-shot trajectory predictor.

Two encoder stacks run side by side: one over the encoded observed track
(``T_obs`` or ``T_obs - 1`` two-dimensional tokens), one over the obstacle
grid patches. The trajectory tokens are flattened into ``T_obs`` slots
(zero-padded when the input form drops a step) and the obstacle tokens are
mean-pooled; the concatenation feeds one small MLP per axis that emits every
future adjacent-frame deviation at once.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import layers as L
from .obstacle import ConfigError
from .preprocess import EncodedSequence, InputForm, decode_adjacent_diffs

AXES = ("x", "y")


@dataclass(frozen=True)
class ModelConfig:
    d_traj: int = 64
    d_obs: int = 256
    L_traj: int = 6
    L_obs: int = 4
    heads: int = 8
    d_ff: int | None = None  # None: 4x the branch width
    T_obs: int = 8
    T_pred: int = 12
    fuse_hidden: int = 256
    patch_dim: int = 256
    n_patches: int = 16
    fuse_in: int | None = None  # derived when None

    def __post_init__(self):
        if self.fuse_in is None:
            object.__setattr__(self, "fuse_in", self.T_obs * self.d_traj + self.d_obs)
        if self.d_traj % self.heads or self.d_obs % self.heads:
            raise ConfigError("token widths must be divisible by the head count")
        if self.d_traj % 2 or self.d_obs % 2:
            raise ConfigError("token widths must be even")
        if self.fuse_in != self.T_obs * self.d_traj + self.d_obs:
            raise ConfigError(
                f"fuse_in={self.fuse_in} != T_obs*d_traj + d_obs "
                f"= {self.T_obs * self.d_traj + self.d_obs}"
            )
        if min(self.T_obs - 1, self.T_pred, self.fuse_hidden, self.patch_dim, self.n_patches) < 1:
            raise ConfigError("sizes must be positive (T_obs >= 2)")
        if self.L_traj < 0 or self.L_obs < 0:
            raise ConfigError("layer counts must be non-negative")

    def ff_width(self, d: int) -> int:
        return 4 * d if self.d_ff is None else self.d_ff

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of config and every tensor."""
        return (
            self.config == other.config
            and list(self.tensors) == list(other.tensors)
            and all(
                a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(self.tensors.values(), other.tensors.values())
            )
        )


@dataclass
class PredictedTrajectory:
    diffs: np.ndarray  # (T_pred, 2)
    positions: np.ndarray  # (T_pred, 2)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in a fixed order."""
    shapes: dict[str, tuple[int, ...]] = {}

    def stack(prefix, d, n_layers):
        f = cfg.ff_width(d)
        for i in range(n_layers):
            p = f"{prefix}.{i}."
            for m in "qkvo":
                shapes[p + f"attn.W{m}"] = (d, d)
                shapes[p + f"attn.b{m}"] = (d,)
            shapes[p + "ln1.g"] = (d,)
            shapes[p + "ln1.b"] = (d,)
            shapes[p + "ffn.W1"] = (d, f)
            shapes[p + "ffn.b1"] = (f,)
            shapes[p + "ffn.W2"] = (f, d)
            shapes[p + "ffn.b2"] = (d,)
            shapes[p + "ln2.g"] = (d,)
            shapes[p + "ln2.b"] = (d,)

    shapes["traj.embed.W"] = (2, cfg.d_traj)
    shapes["traj.embed.b"] = (cfg.d_traj,)
    stack("traj.enc", cfg.d_traj, cfg.L_traj)
    shapes["obs.embed.W"] = (cfg.patch_dim, cfg.d_obs)
    shapes["obs.embed.b"] = (cfg.d_obs,)
    stack("obs.enc", cfg.d_obs, cfg.L_obs)
    for ax in AXES:
        shapes[f"head.{ax}.W1"] = (cfg.fuse_in, cfg.fuse_hidden)
        shapes[f"head.{ax}.b1"] = (cfg.fuse_hidden,)
        shapes[f"head.{ax}.W2"] = (cfg.fuse_hidden, cfg.T_pred)
        shapes[f"head.{ax}.b2"] = (cfg.T_pred,)
    return shapes


def glorot_bound(shape) -> float:
    return float(np.sqrt(6.0 / (shape[0] + shape[1])))


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit norm gains; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 2:
            b = glorot_bound(shape)
            tensors[name] = rng.uniform(-b, b, size=shape)
        elif name.endswith(".g"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(cfg, tensors)


def resize_head(params: ModelParams, T_pred: int, seed: int = 0) -> ModelParams:
    """Same encoders, output layers re-sized (and freshly initialized) for ``T_pred`` steps."""
    cfg = replace(params.config, T_pred=T_pred)
    out = ModelParams(cfg, dict(params.tensors))
    rng = np.random.default_rng(seed)
    for ax in AXES:
        shape = (cfg.fuse_hidden, T_pred)
        b = glorot_bound(shape)
        out.tensors[f"head.{ax}.W2"] = rng.uniform(-b, b, size=shape)
        out.tensors[f"head.{ax}.b2"] = np.zeros(T_pred)
    return out


def _sub(tensors, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}


def _check_finite(a, what):
    if not np.isfinite(a).all():
        raise FloatingPointError(f"non-finite values in {what}")


def encode_trajectory(params: ModelParams, traj_in: np.ndarray):
    """(B, Lt, 2) encoded steps -> (B, T_obs * d_traj) flattened, zero-padded feature."""
    cfg, t = params.config, params.tensors
    B, Lt, two = traj_in.shape
    if two != 2 or not 1 <= Lt <= cfg.T_obs:
        raise ConfigError(f"trajectory input of shape {traj_in.shape} does not fit T_obs={cfg.T_obs}")
    dtype = t["traj.embed.W"].dtype
    x, c_emb = L.linear_forward(traj_in, t["traj.embed.W"], t["traj.embed.b"])
    x = x + L.positional_encoding(Lt, cfg.d_traj, dtype)
    x, c_enc = L.encoder_stack_forward(x, _sub(t, "traj.enc."), cfg.L_traj, cfg.heads)
    feat = np.zeros((B, cfg.T_obs * cfg.d_traj), dtype=x.dtype)
    feat[:, : Lt * cfg.d_traj] = x.reshape(B, -1)
    return feat, (c_emb, c_enc, Lt)


def encode_obstacle(params: ModelParams, patches: np.ndarray):
    """(B, P, patch_dim) grid patches -> (B, d_obs) mean-pooled feature."""
    cfg, t = params.config, params.tensors
    if patches.shape[1:] != (cfg.n_patches, cfg.patch_dim):
        raise ConfigError(
            f"patch input {patches.shape[1:]} != ({cfg.n_patches}, {cfg.patch_dim})"
        )
    dtype = t["obs.embed.W"].dtype
    x, c_emb = L.linear_forward(patches, t["obs.embed.W"], t["obs.embed.b"])
    x = x + L.positional_encoding(cfg.n_patches, cfg.d_obs, dtype)
    x, c_enc = L.encoder_stack_forward(x, _sub(t, "obs.enc."), cfg.L_obs, cfg.heads)
    return x.mean(axis=1), (c_emb, c_enc)


def head_forward(params: ModelParams, z: np.ndarray):
    t = params.tensors
    outs, caches = [], []
    for ax in AXES:
        h, c1 = L.linear_forward(z, t[f"head.{ax}.W1"], t[f"head.{ax}.b1"])
        r, c2 = L.relu_forward(h)
        o, c3 = L.linear_forward(r, t[f"head.{ax}.W2"], t[f"head.{ax}.b2"])
        outs.append(o)
        caches.append((c1, c2, c3))
    return np.stack(outs, axis=-1), caches


def forward(params: ModelParams, traj_in: np.ndarray, patches: np.ndarray):
    """Batched forward: (B, Lt, 2), (B, P, patch_dim) -> diffs (B, T_pred, 2), cache.

    All ``T_pred`` steps come out of one pass; nothing iterates over the horizon.
    """
    dtype = params.tensors["traj.embed.W"].dtype
    traj_in = np.asarray(traj_in, dtype=dtype)
    patches = np.asarray(patches, dtype=dtype)
    _check_finite(traj_in, "trajectory input")
    _check_finite(patches, "obstacle input")
    tf, ct = encode_trajectory(params, traj_in)
    of, co = encode_obstacle(params, patches)
    z = np.concatenate([tf, of], axis=1)
    _check_finite(z, "encoders")
    diffs, ch = head_forward(params, z)
    _check_finite(diffs, "head")
    return diffs, (ct, co, ch, tf.shape[1])


def backward(params: ModelParams, cache, d_diffs: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given dLoss/d(diffs), for every tensor."""
    cfg, t = params.config, params.tensors
    (c_temb, c_tenc, Lt), (c_oemb, c_oenc), ch, n_traj = cache
    grads: dict[str, np.ndarray] = {}
    dz = 0
    for i, ax in enumerate(AXES):
        c1, c2, c3 = ch[i]
        dr, grads[f"head.{ax}.W2"], grads[f"head.{ax}.b2"] = L.linear_backward(
            d_diffs[..., i], c3, t[f"head.{ax}.W2"]
        )
        dh = L.relu_backward(dr, c2)
        dzi, grads[f"head.{ax}.W1"], grads[f"head.{ax}.b1"] = L.linear_backward(
            dh, c1, t[f"head.{ax}.W1"]
        )
        dz = dz + dzi
    B = dz.shape[0]

    d_of = dz[:, n_traj:]
    dx = np.repeat(d_of[:, None, :] / cfg.n_patches, cfg.n_patches, axis=1)
    dx, g = L.encoder_stack_backward(dx, c_oenc, _sub(t, "obs.enc."), cfg.heads)
    grads.update({"obs.enc." + k: v for k, v in g.items()})
    _, grads["obs.embed.W"], grads["obs.embed.b"] = L.linear_backward(dx, c_oemb, t["obs.embed.W"])

    dx = dz[:, : Lt * cfg.d_traj].reshape(B, Lt, cfg.d_traj)
    dx, g = L.encoder_stack_backward(dx, c_tenc, _sub(t, "traj.enc."), cfg.heads)
    grads.update({"traj.enc." + k: v for k, v in g.items()})
    _, grads["traj.embed.W"], grads["traj.embed.b"] = L.linear_backward(dx, c_temb, t["traj.embed.W"])
    return {k: grads[k] for k in t}


def encoded_last_position(seq: EncodedSequence) -> np.ndarray:
    """Last raw position recoverable from an encoded observation."""
    if seq.form is InputForm.RAW:
        return seq.values[-1]
    if seq.form is InputForm.ADJACENT_DIFF:
        return seq.anchor + seq.values.sum(axis=0)
    return seq.anchor + seq.values[-1]


def predict(seq: EncodedSequence, patches: np.ndarray, params: ModelParams) -> PredictedTrajectory:
    """Single-window prediction from an encoded observation and its grid patches."""
    diffs, _ = forward(params, seq.values[None], np.asarray(patches)[None])
    diffs = diffs[0].astype(np.float64)
    last = encoded_last_position(seq)
    return PredictedTrajectory(diffs, decode_adjacent_diffs(last, diffs))


# Checkpoint container: magic, u64 header length, JSON header, raw little-endian tensors.
_MAGIC = b"OBSFCKPT\x01"


def save_checkpoint(params: ModelParams, path: str | Path, extra: dict | None = None) -> Path:
    header = {"config": params.config.to_dict(), "extra": extra or {}, "tensors": []}
    blobs, offset = [], 0
    for name, arr in params.tensors.items():
        a = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        header["tensors"].append(
            {"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes}
        )
        blobs.append(a.tobytes())
        offset += a.nbytes
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos : pos + hlen])
    base = pos + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(data[start : start + entry["nbytes"]], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(arr.dtype.newbyteorder("="))
    return ModelParams(ModelConfig(**header["config"]), tensors), header["extra"]
