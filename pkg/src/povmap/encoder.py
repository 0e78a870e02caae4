"""Tiny patch-transformer image encoder with hand-written gradients.

The three trait encoders share this architecture (separate parameters):
32x32 patches are linearly projected, a learnable summary token is
prepended, a learned positional table is added, and a stack of pre-norm
blocks (multi-head self-attention, then a ReLU feed-forward) follows.  The
embedding is a linear head applied to the final-layernormed summary token.

The exported attention map is the last layer's summary-to-patch attention:
per head, a softmax over the patch keys only (the summary key is excluded
so the scores form a distribution over patches), then averaged over heads.

Everything is plain numpy; the backward pass mirrors the forward pass
step by step and is verified against finite differences in the tests.
Training may run in float32; float64 is the canonical storage type.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericError, ValidationError
from .rng import substream

IMAGE_PX = 256
LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"POVMAPCK"

__all__ = [
    "EncoderConfig",
    "EncoderParams",
    "PoiEncoderParams",
    "init_params",
    "init_poi_params",
    "init_bound",
    "patchify",
    "encode_patches",
    "encode_patches_backward",
    "encode_image",
    "encode_poi",
    "encode_poi_backward",
    "project",
    "project_backward",
    "write_param_blob",
    "read_param_blob",
]


@dataclass(frozen=True)
class EncoderConfig:
    patch_px: int = 32
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    seed: int = 0

    def __post_init__(self):
        if IMAGE_PX % self.patch_px != 0:
            raise DomainError(f"patch_px {self.patch_px} must divide {IMAGE_PX}")
        if self.embed_dim % self.heads != 0:
            raise DomainError("embed_dim must be divisible by heads")
        if min(self.layers, self.heads, self.mlp_ratio, self.embed_dim) < 1:
            raise DomainError("layers/heads/mlp_ratio/embed_dim must be positive")

    @property
    def grid(self) -> int:
        return IMAGE_PX // self.patch_px

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_px * self.patch_px * 3

    def to_dict(self) -> dict:
        return {
            "patch_px": self.patch_px,
            "embed_dim": self.embed_dim,
            "layers": self.layers,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "seed": self.seed,
        }


def param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declared parameter order; checkpoints serialize arrays in this order."""
    d, pd = cfg.embed_dim, cfg.patch_dim
    hidden = cfg.mlp_ratio * d
    out: list[tuple[str, tuple[int, ...]]] = [
        ("patch_w", (pd, d)),
        ("patch_b", (d,)),
        ("summary", (d,)),
        ("pos", (cfg.n_patches + 1, d)),
    ]
    for l in range(cfg.layers):
        out += [
            (f"l{l}.ln1_g", (d,)),
            (f"l{l}.ln1_b", (d,)),
            (f"l{l}.wq", (d, d)),
            (f"l{l}.bq", (d,)),
            (f"l{l}.wk", (d, d)),
            (f"l{l}.bk", (d,)),
            (f"l{l}.wv", (d, d)),
            (f"l{l}.bv", (d,)),
            (f"l{l}.wo", (d, d)),
            (f"l{l}.bo", (d,)),
            (f"l{l}.ln2_g", (d,)),
            (f"l{l}.ln2_b", (d,)),
            (f"l{l}.w1", (d, hidden)),
            (f"l{l}.b1", (hidden,)),
            (f"l{l}.w2", (hidden, d)),
            (f"l{l}.b2", (d,)),
        ]
    out += [("lnf_g", (d,)), ("lnf_b", (d,)), ("out_w", (d, d)), ("out_b", (d,))]
    return out


def init_bound(name: str, shape: tuple[int, ...]) -> float:
    """Half-width of the uniform init for a parameter array (0 = constant)."""
    if name.endswith(("ln1_g", "ln2_g", "lnf_g", "ln1_b", "ln2_b", "lnf_b")):
        return 0.0
    fan_in = shape[0] if len(shape) == 2 else shape[-1]
    return 1.0 / np.sqrt(fan_in)


@dataclass
class EncoderParams:
    config: EncoderConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def check_finite(self) -> None:
        for k, v in self.arrays.items():
            if not np.isfinite(v).all():
                raise NumericError(f"encoder parameter {k} has non-finite entries")


def init_params(cfg: EncoderConfig) -> EncoderParams:
    """Scaled-uniform (per fan-in) init; layernorm gains 1, biases 0."""
    rng = substream(cfg.seed, "init")
    arrays = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(("ln1_g", "ln2_g", "lnf_g")):
            arrays[name] = np.ones(shape)
        elif name.endswith(("ln1_b", "ln2_b", "lnf_b")):
            arrays[name] = np.zeros(shape)
        else:
            b = init_bound(name, shape)
            arrays[name] = rng.uniform(-b, b, shape)
    return EncoderParams(cfg, arrays)


@dataclass
class PoiEncoderParams:
    """Two-layer perceptron mapping a gravity vector to the embedding space."""

    in_dim: int
    hidden: int
    out_dim: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def astype(self, dtype) -> "PoiEncoderParams":
        return PoiEncoderParams(
            self.in_dim, self.hidden, self.out_dim,
            {k: v.astype(dtype) for k, v in self.arrays.items()},
        )


POI_PARAM_ORDER = ("w1", "b1", "w2", "b2")


def init_poi_params(in_dim: int, out_dim: int, seed: int, hidden: int | None = None) -> PoiEncoderParams:
    hidden = out_dim if hidden is None else hidden
    rng = substream(seed, "init.poi")
    shapes = {"w1": (in_dim, hidden), "b1": (hidden,), "w2": (hidden, out_dim), "b2": (out_dim,)}
    arrays = {}
    for name in POI_PARAM_ORDER:
        shape = shapes[name]
        b = init_bound(name, shape)
        arrays[name] = rng.uniform(-b, b, shape)
    return PoiEncoderParams(in_dim, hidden, out_dim, arrays)


# ---------------------------------------------------------------------------
# forward / backward


def patchify(pixels: np.ndarray, patch_px: int, dtype=np.float64) -> np.ndarray:
    """(..., 256, 256, 3) pixels -> (..., n_patches, patch_dim), row-major patches."""
    arr = np.asarray(pixels)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    b = arr.shape[0]
    g = IMAGE_PX // patch_px
    if arr.shape[1:] != (IMAGE_PX, IMAGE_PX, 3):
        raise DomainError(f"expected (B,{IMAGE_PX},{IMAGE_PX},3) pixels, got {arr.shape}")
    out = (
        arr.reshape(b, g, patch_px, g, patch_px, 3)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, g * g, patch_px * patch_px * 3)
        .astype(dtype)
    )
    return out[0] if single else out


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layernorm_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, t, h * dh)


def _bt_matmul(x, w):
    """(B,T,D) @ (D,E) as one flattened GEMM."""
    b, t, d = x.shape
    return (x.reshape(b * t, d) @ w).reshape(b, t, -1)


def _bt_outer(x, dy):
    """sum_bt x[b,t,:]^T dy[b,t,:] as one flattened GEMM."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def encode_patches(params: EncoderParams, patches: np.ndarray, check: bool = True):
    """Forward pass over a batch of patch matrices.

    Returns (embeddings (B, D), attention maps (B, n_patches), cache).
    """
    cfg = params.config
    a = params.arrays
    x = np.asarray(patches)
    single = x.ndim == 2
    if single:
        x = x[None]
    b, n_p, pd = x.shape
    if n_p != cfg.n_patches or pd != cfg.patch_dim:
        raise DomainError(f"patch matrix {x.shape[1:]} incompatible with config")
    dtype = a["patch_w"].dtype
    x = x.astype(dtype, copy=False)

    proj = _bt_matmul(x, a["patch_w"]) + a["patch_b"]
    h = np.concatenate([np.broadcast_to(a["summary"], (b, 1, cfg.embed_dim)), proj], axis=1)
    h = h + a["pos"]
    cache = {"patches": x, "layers": []}
    last_scores = None

    for l in range(cfg.layers):
        lp = {k.split(".", 1)[1]: v for k, v in a.items() if k.startswith(f"l{l}.")}
        a_in, ln1_cache = _layernorm(h, lp["ln1_g"], lp["ln1_b"])
        q = _split_heads(_bt_matmul(a_in, lp["wq"]) + lp["bq"], cfg.heads)
        k = _split_heads(_bt_matmul(a_in, lp["wk"]) + lp["bk"], cfg.heads)
        v = _split_heads(_bt_matmul(a_in, lp["wv"]) + lp["bv"], cfg.heads)
        scale = 1.0 / math.sqrt(q.shape[-1])
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(attn @ v)
        o = _bt_matmul(ctx, lp["wo"]) + lp["bo"]
        h = h + o

        m_in, ln2_cache = _layernorm(h, lp["ln2_g"], lp["ln2_b"])
        z1 = _bt_matmul(m_in, lp["w1"]) + lp["b1"]
        r = np.maximum(z1, 0.0)
        z2 = _bt_matmul(r, lp["w2"]) + lp["b2"]
        h = h + z2

        if check and not np.isfinite(h).all():
            raise NumericError(f"non-finite activations after layer {l}")
        cache["layers"].append(
            {"ln1": ln1_cache, "a_in": a_in, "q": q, "k": k, "v": v, "attn": attn,
             "ctx": ctx, "ln2": ln2_cache, "m_in": m_in, "z1_pos": z1 > 0, "r": r}
        )
        if l == cfg.layers - 1:
            last_scores = scores

    hf, lnf_cache = _layernorm(h, a["lnf_g"], a["lnf_b"])
    emb = hf[:, 0, :] @ a["out_w"] + a["out_b"]
    if check and not np.isfinite(emb).all():
        raise NumericError("non-finite embedding at output head")
    cache["lnf"] = lnf_cache
    cache["hf0"] = hf[:, 0, :]

    # Attention map: last layer, summary query over patch keys only.
    s = last_scores[:, :, 0, 1:]
    s = s - s.max(axis=-1, keepdims=True)
    es = np.exp(s)
    amap = (es / es.sum(axis=-1, keepdims=True)).mean(axis=1)

    if single:
        return emb[0], amap[0], cache
    return emb, amap, cache


def encode_patches_backward(params: EncoderParams, cache, d_emb: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. all encoder parameters.

    ``d_emb`` is the loss gradient at the output embeddings, shape (B, D).
    """
    cfg = params.config
    a = params.arrays
    d_emb = np.asarray(d_emb)
    if d_emb.ndim == 1:
        d_emb = d_emb[None]
    b = d_emb.shape[0]
    grads = {}

    grads["out_w"] = cache["hf0"].T @ d_emb
    grads["out_b"] = d_emb.sum(axis=0)
    d_hf = np.zeros((b, cfg.n_patches + 1, cfg.embed_dim), dtype=d_emb.dtype)
    d_hf[:, 0, :] = d_emb @ a["out_w"].T
    dh, dg, dbias = _layernorm_backward(d_hf, cache["lnf"])
    grads["lnf_g"] = dg
    grads["lnf_b"] = dbias

    for l in reversed(range(cfg.layers)):
        lp = {k.split(".", 1)[1]: v for k, v in a.items() if k.startswith(f"l{l}.")}
        lc = cache["layers"][l]

        # feed-forward block
        dz2 = dh
        grads[f"l{l}.w2"] = _bt_outer(lc["r"], dz2)
        grads[f"l{l}.b2"] = dz2.sum(axis=(0, 1))
        dr = _bt_matmul(dz2, lp["w2"].T)
        dz1 = dr * lc["z1_pos"]
        grads[f"l{l}.w1"] = _bt_outer(lc["m_in"], dz1)
        grads[f"l{l}.b1"] = dz1.sum(axis=(0, 1))
        dm_in = _bt_matmul(dz1, lp["w1"].T)
        dx, dg, dbias = _layernorm_backward(dm_in, lc["ln2"])
        grads[f"l{l}.ln2_g"] = dg
        grads[f"l{l}.ln2_b"] = dbias
        dh = dh + dx

        # attention block
        do = dh
        grads[f"l{l}.wo"] = _bt_outer(lc["ctx"], do)
        grads[f"l{l}.bo"] = do.sum(axis=(0, 1))
        dctx = _split_heads(_bt_matmul(do, lp["wo"].T), cfg.heads)
        dattn = dctx @ lc["v"].transpose(0, 1, 3, 2)
        dv = lc["attn"].transpose(0, 1, 3, 2) @ dctx
        dscores = lc["attn"] * (dattn - (dattn * lc["attn"]).sum(axis=-1, keepdims=True))
        scale = 1.0 / math.sqrt(lc["q"].shape[-1])
        dq = (dscores @ lc["k"]) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ lc["q"]) * scale
        da_in = None
        for name, dmat in (("wq", dq), ("wk", dk), ("wv", dv)):
            dflat = _merge_heads(dmat)
            grads[f"l{l}.{name}"] = _bt_outer(lc["a_in"], dflat)
            grads[f"l{l}.b{name[1]}"] = dflat.sum(axis=(0, 1))
            contrib = _bt_matmul(dflat, lp[name].T)
            da_in = contrib if da_in is None else da_in + contrib
        dx, dg, dbias = _layernorm_backward(da_in, lc["ln1"])
        grads[f"l{l}.ln1_g"] = dg
        grads[f"l{l}.ln1_b"] = dbias
        dh = dh + dx

    grads["pos"] = dh.sum(axis=0)
    grads["summary"] = dh[:, 0, :].sum(axis=0)
    dproj = dh[:, 1:, :]
    grads["patch_w"] = _bt_outer(cache["patches"], dproj)
    grads["patch_b"] = dproj.sum(axis=(0, 1))
    return grads


def encode_image(params: EncoderParams, pixels: np.ndarray):
    """Single-image convenience wrapper: (embedding, attention map)."""
    patches = patchify(pixels, params.config.patch_px, dtype=params.arrays["patch_w"].dtype)
    emb, amap, _ = encode_patches(params, patches)
    return emb, amap


def encode_poi(params: PoiEncoderParams, gravity: np.ndarray):
    """Two-layer MLP forward; returns (embeddings, cache)."""
    x = np.asarray(gravity)
    single = x.ndim == 1
    if single:
        x = x[None]
    if not np.isfinite(x).all():
        raise NumericError("non-finite gravity vector input")
    a = params.arrays
    z1 = x.astype(a["w1"].dtype, copy=False) @ a["w1"] + a["b1"]
    r = np.maximum(z1, 0.0)
    out = r @ a["w2"] + a["b2"]
    cache = {"x": x, "z1_pos": z1 > 0, "r": r}
    return (out[0], cache) if single else (out, cache)


def encode_poi_backward(params: PoiEncoderParams, cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    d_out = np.asarray(d_out)
    if d_out.ndim == 1:
        d_out = d_out[None]
    a = params.arrays
    grads = {}
    grads["w2"] = cache["r"].T @ d_out
    grads["b2"] = d_out.sum(axis=0)
    dr = d_out @ a["w2"].T
    dz1 = dr * cache["z1_pos"]
    grads["w1"] = cache["x"].T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return grads


def project(head_w: np.ndarray, emb: np.ndarray) -> np.ndarray:
    """Linear head: scores = emb @ W^T (no bias)."""
    head_w = np.asarray(head_w)
    emb = np.asarray(emb)
    if head_w.shape[1] != emb.shape[-1]:
        raise DomainError(f"head {head_w.shape} incompatible with embedding dim {emb.shape[-1]}")
    return emb @ head_w.T


def project_backward(head_w: np.ndarray, emb: np.ndarray, d_scores: np.ndarray):
    """Returns (d_head_w, d_emb)."""
    d_scores = np.asarray(d_scores)
    if d_scores.ndim == 1:
        d_scores = d_scores[:, None]
    return d_scores.T @ emb, d_scores @ head_w


# ---------------------------------------------------------------------------
# flat binary parameter blobs (shared by the checkpoint files)


def write_param_blob(meta: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    """Magic, JSON header, then float64 little-endian arrays in order."""
    header = dict(meta)
    header["arrays"] = [[name, list(arr.shape)] for name, arr in arrays]
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(hjson)))
    buf.write(hjson)
    for _, arr in arrays:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def read_param_blob(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValidationError("bad checkpoint magic")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off : off + hlen].decode("utf-8"))
    off += hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        arrays[name] = arr
        off += n * 8
    if off != len(blob):
        raise ValidationError("checkpoint has trailing bytes")
    return header, arrays
