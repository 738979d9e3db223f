"""Transformer mapping CSI windows to fixed-size 3D point clouds.

Pipeline per sample: temporal conv over the time axis of each
antenna-subcarrier pair -> learned antenna + subcarrier embeddings ->
self-attention encoder -> decoder cross-attending learned point queries
against the encoded tokens -> learned feature transform -> linear 3D
projection.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, asdict

import numpy as np

from .csidata import ModelInput, PointCloud
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    gelu,
    layer_norm,
    no_grad,
    softmax_last,
    unchecked,
)

CHECKPOINT_MAGIC = b"C2PC"
CHECKPOINT_VERSION = 2
_DTYPE_CODES = {0: "<f4", 1: "<f8"}


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    A: int = 3
    S: int = 114
    T: int = 10
    E: int = 512
    n_heads: int = 4
    n_encoder_layers: int = 4
    n_decoder_layers: int = 4
    N: int = 1200
    ffn_dim: int = 0  # 0 -> 4*E
    dropout_rate: float = 0.0
    kernel_size: int = 0  # 0 -> full window (T)

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.E
        if self.kernel_size == 0:
            self.kernel_size = self.T
        if self.E % self.n_heads != 0:
            raise ValueError("E must be divisible by n_heads")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not 1 <= self.kernel_size <= self.T:
            raise ValueError("kernel_size must be in [1, T]")

    @property
    def F(self) -> int:
        return self.A * self.S

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """Small configuration for fast desk-scale tests."""
    base = dict(A=2, S=4, T=5, E=8, n_heads=2, n_encoder_layers=2,
                n_decoder_layers=2, N=16)
    base.update(overrides)
    return ModelConfig(**base)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Initialize all learnable tensors, keyed by name.

    Linear weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero,
    embeddings and point queries ~ N(0, 0.02), feature transform = identity.
    """
    rng = np.random.default_rng(seed)

    def linear(fan_in, *shape):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    def table(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    E, H = cfg.E, cfg.ffn_dim
    p: dict[str, Tensor] = {}
    p["conv.kernel"] = linear(cfg.kernel_size * 2, cfg.kernel_size, 2, E)
    p["conv.bias"] = zeros(E)
    p["emb.antenna"] = table(cfg.A, E)
    p["emb.subcarrier"] = table(cfg.S, E)

    def attention_block(prefix):
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{prefix}.{name}"] = linear(E, E, E)
            p[f"{prefix}.b{name[1]}"] = zeros(E)

    def ffn_block(prefix):
        p[f"{prefix}.w1"] = linear(E, E, H)
        p[f"{prefix}.b1"] = zeros(H)
        p[f"{prefix}.w2"] = linear(H, H, E)
        p[f"{prefix}.b2"] = zeros(E)

    def ln_block(prefix):
        p[f"{prefix}.gamma"] = ones(E)
        p[f"{prefix}.beta"] = zeros(E)

    for i in range(cfg.n_encoder_layers):
        attention_block(f"enc{i}.attn")
        ln_block(f"enc{i}.ln1")
        ffn_block(f"enc{i}.ffn")
        ln_block(f"enc{i}.ln2")
    for i in range(cfg.n_decoder_layers):
        attention_block(f"dec{i}.self")
        ln_block(f"dec{i}.ln1")
        attention_block(f"dec{i}.cross")
        ln_block(f"dec{i}.ln2")
        ffn_block(f"dec{i}.ffn")
        ln_block(f"dec{i}.ln3")

    p["queries"] = table(cfg.N, E)
    p["tf"] = Tensor(np.eye(E), requires_grad=True)
    p["proj.w"] = linear(E, E, 3)
    p["proj.b"] = zeros(3)
    return p


# -- forward pieces --------------------------------------------------------------


def temporal_encode(params: dict, cfg: ModelConfig, inp: ModelInput) -> Tensor:
    """Shared temporal conv over each pair's [T, 2] trace -> [F, E] tokens.

    The kernel spans the full window by default (one output position); a
    shorter kernel mean-pools over the remaining time positions.  Both cases
    reduce to one matmul because the pooling is linear in the input.
    """
    feats = np.asarray(inp.features, dtype=np.float64)
    if feats.shape != (cfg.F, 2, cfg.T):
        raise ShapeError(f"expected features {(cfg.F, 2, cfg.T)}, got {feats.shape}")
    kernel, bias = params["conv.kernel"], params["conv.bias"]
    K = kernel.shape[0]
    if K > cfg.T:
        raise ShapeError(f"kernel length {K} exceeds window {cfg.T}")
    windows = np.lib.stride_tricks.sliding_window_view(feats, K, axis=2)  # [F, 2, T-K+1, K]
    design = windows.mean(axis=2).transpose(0, 2, 1).reshape(cfg.F, K * 2)  # (k, c) order
    return Tensor(design) @ kernel.reshape(K * 2, cfg.E) + bias


def add_positional(params: dict, H: Tensor, antenna_index, subcarrier_index) -> Tensor:
    pa = params["emb.antenna"].gather_rows(antenna_index)
    ps = params["emb.subcarrier"].gather_rows(subcarrier_index)
    return H + pa + ps


def _attention(params: dict, prefix: str, x: Tensor, memory: Tensor, cfg: ModelConfig) -> Tensor:
    """Multi-head attention; queries from x, keys/values from memory."""
    E, h = cfg.E, cfg.n_heads
    dk = E // h
    nq = x.shape[0]
    nk = memory.shape[0]
    q = x @ params[f"{prefix}.wq"] + params[f"{prefix}.bq"]
    k = memory @ params[f"{prefix}.wk"] + params[f"{prefix}.bk"]
    v = memory @ params[f"{prefix}.wv"] + params[f"{prefix}.bv"]
    q = q.reshape(nq, h, dk).transpose(1, 0, 2)
    k = k.reshape(nk, h, dk).transpose(1, 0, 2)
    v = v.reshape(nk, h, dk).transpose(1, 0, 2)
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dk))
    attn = softmax_last(scores)
    mixed = (attn @ v).transpose(1, 0, 2).reshape(nq, E)
    return mixed @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]


def _ffn(params: dict, prefix: str, x: Tensor) -> Tensor:
    hidden = gelu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return hidden @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def _ln(params: dict, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def encode(params: dict, cfg: ModelConfig, x: Tensor) -> Tensor:
    """Self-attention encoder over the F tokens (post-norm residual layers)."""
    for i in range(cfg.n_encoder_layers):
        x = _ln(params, f"enc{i}.ln1", x + _attention(params, f"enc{i}.attn", x, x, cfg))
        x = _ln(params, f"enc{i}.ln2", x + _ffn(params, f"enc{i}.ffn", x))
    return x


def decode(params: dict, cfg: ModelConfig, memory: Tensor) -> Tensor:
    """Cross-attend learned point queries against encoder memory -> [N, E]."""
    y = params["queries"]
    for i in range(cfg.n_decoder_layers):
        y = _ln(params, f"dec{i}.ln1", y + _attention(params, f"dec{i}.self", y, y, cfg))
        y = _ln(params, f"dec{i}.ln2", y + _attention(params, f"dec{i}.cross", y, memory, cfg))
        y = _ln(params, f"dec{i}.ln3", y + _ffn(params, f"dec{i}.ffn", y))
    return y @ params["tf"]


def project_points(params: dict, features: Tensor) -> Tensor:
    return features @ params["proj.w"] + params["proj.b"]


class PointCloudModel:
    """Bundles config + parameters and runs the full forward pass."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def forward(self, inp: ModelInput) -> tuple[Tensor, Tensor]:
        """Run one sample; returns (points [N,3], feature transform)."""
        h = temporal_encode(self.params, self.cfg, inp)
        h = add_positional(self.params, h, inp.antenna_index, inp.subcarrier_index)
        memory = encode(self.params, self.cfg, h)
        feats = decode(self.params, self.cfg, memory)
        return project_points(self.params, feats), self.params["tf"]

    def forward_batch(self, inputs) -> list[Tensor]:
        return [self.forward(inp)[0] for inp in inputs]

    def predict(self, inp: ModelInput) -> PointCloud:
        # inference path: no graph, no per-op checks; validate the output once
        with no_grad(), unchecked():
            pts, _ = self.forward(inp)
        if not np.all(np.isfinite(pts.data)):
            raise NonFiniteError("model produced non-finite points")
        return PointCloud(pts.data.copy())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# -- checkpoint I/O ----------------------------------------------------------------
#
# Layout (little-endian):
#   magic "C2PC" | u32 version | u32 header length | UTF-8 JSON header
#   | u32 tensor count
#   | per tensor: u32 name length | name | u32 dtype code (0=f32, 1=f64)
#     | u32 rank | u32 dims... | payload
#   | u32 CRC32 of everything before it
#
# The JSON header holds the model config under "model" plus arbitrary extra
# state (optimizer scalars, epoch counters).


def save_checkpoint(path, cfg: ModelConfig, tensors: dict[str, np.ndarray | Tensor],
                    extra: dict | None = None) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    header = json.dumps({"model": cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(header)))
    parts.append(header)
    parts.append(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        code = 0 if arr.dtype == np.float32 else 1
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<II", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path, expect_cfg: ModelConfig | None = None):
    """Returns (config, {name: float64 ndarray}, extra dict)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt payload)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version not in (1, CHECKPOINT_VERSION):
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    off = 12
    header = json.loads(buf[off : off + hlen].decode("utf-8"))
    off += hlen
    cfg = ModelConfig.from_dict(header["model"])
    if expect_cfg is not None and cfg.to_dict() != expect_cfg.to_dict():
        raise CheckpointError("checkpoint config does not match expected config")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        code, rank = struct.unpack_from("<II", buf, off)
        off += 8
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        dtype = _DTYPE_CODES.get(code)
        if dtype is None:
            raise CheckpointError(f"unknown dtype code {code} for tensor '{name}'")
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype=dtype, count=n, offset=off).reshape(dims)
        off += n * int(dtype[-1])
        tensors[name] = arr.astype(np.float64)
    return cfg, tensors, header.get("extra", {})


def save_model(path, model: PointCloudModel, extra: dict | None = None) -> None:
    save_checkpoint(path, model.cfg, model.params, extra=extra)


def load_model(path, expect_cfg: ModelConfig | None = None) -> PointCloudModel:
    cfg, tensors, _ = load_checkpoint(path, expect_cfg)
    ref = init_params(cfg, seed=0)
    params = {}
    for name, template in ref.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing parameter '{name}'")
        if tensors[name].shape != template.shape:
            raise CheckpointError(f"parameter '{name}' has wrong shape")
        params[name] = Tensor(tensors[name], requires_grad=True)
    return PointCloudModel(cfg, params=params)
