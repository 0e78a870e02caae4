"""Optimization loops for the three trait encoders.

Each module trains its own encoder with decoupled-weight-decay adaptive
moment updates (AdamW), seeded per-epoch shuffles and a fixed parameter
iteration order, so a (seed, config, data) triple fully determines the
resulting checkpoint.  float64 is the default working precision; float32
is supported for faster production runs and stored as float64 on disk.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .backdoor import PatchPartition, compute_partitions
from .bundle import CityBundle
from .encoder import (
    EncoderConfig,
    EncoderParams,
    PoiEncoderParams,
    encode_patches,
    encode_patches_backward,
    encode_poi,
    encode_poi_backward,
    init_params,
    init_poi_params,
    param_shapes,
    patchify,
    project,
    project_backward,
    read_param_blob,
    write_param_blob,
    POI_PARAM_ORDER,
)
from .errors import ConfigError, DomainError, NumericError, ValidationError
from .losses import (
    TAU_INIT,
    clamp_log_tau,
    combined_access_loss,
    contrastive_loss,
    pearson_loss,
    precondition_loss,
)
from .rng import substream
from .traits import AccessSample, EconSample, MorphSample, PoiEmbeddingTable

MODULE_INDEX = {"access": 0, "morph": 1, "econ": 2}

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "TileStack",
    "AdamW",
    "train_access",
    "train_morph",
    "train_econ",
    "save_checkpoint",
    "load_checkpoint",
    "config_hash",
    "encoder_config_for",
]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    lambda1: float = 0.1
    quantile: float = 0.30
    gamma_m: float = 2000.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    dtype: str = "float64"
    poi_embed_dim: int = 16
    patch_px: int = 32
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 0:
            raise DomainError("learning_rate/batch_size/epochs out of range")
        if self.lambda1 < 0:
            raise DomainError("lambda1 must be >= 0")
        if self.dtype not in ("float64", "float32"):
            raise DomainError(f"dtype must be float64 or float32, got {self.dtype}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


def encoder_config_for(module: str, cfg: TrainConfig) -> EncoderConfig:
    """Each trait encoder gets an independent init seed (base + module index)."""
    return EncoderConfig(
        patch_px=cfg.patch_px,
        embed_dim=cfg.embed_dim,
        layers=cfg.layers,
        heads=cfg.heads,
        mlp_ratio=cfg.mlp_ratio,
        seed=cfg.seed + MODULE_INDEX[module],
    )


def config_hash(module: str, cfg: TrainConfig) -> str:
    payload = {"module": module, "train": cfg.to_dict()}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class TileStack:
    """Tiles of a bundle as one uint8 pixel stack, sorted by tile_id.

    A single dequantized patch-matrix cache (one patch size and dtype at a
    time) backs the training loops, which revisit every tile each epoch.
    """

    tile_ids: list[str]
    pixels_u8: np.ndarray
    district_ids: list[int | None]
    _cache_key: tuple | None = None
    _cache: np.ndarray | None = None

    @classmethod
    def from_bundle(cls, bundle: CityBundle) -> "TileStack":
        tiles = sorted(bundle.tiles, key=lambda t: t.tile_id)
        px = np.stack([t.pixels_u8 for t in tiles]) if tiles else np.zeros((0, 256, 256, 3), np.uint8)
        return cls([t.tile_id for t in tiles], px, [t.district_id for t in tiles])

    def __len__(self) -> int:
        return len(self.tile_ids)

    def _ensure_cache(self, patch_px: int, dtype) -> np.ndarray:
        key = (patch_px, np.dtype(dtype).str)
        if self._cache_key != key:
            n = len(self)
            g = self.pixels_u8.shape[1] // patch_px
            out = np.empty((n, g * g, patch_px * patch_px * 3), dtype=dtype)
            for lo in range(0, n, 128):
                hi = min(lo + 128, n)
                out[lo:hi] = patchify(self.pixels_u8[lo:hi], patch_px, dtype=dtype)
            out /= dtype(255.0)
            self._cache = out
            self._cache_key = key
        return self._cache

    def patches(self, idx: np.ndarray, patch_px: int, dtype) -> np.ndarray:
        return self._ensure_cache(patch_px, dtype)[idx]


class AdamW:
    """Decoupled weight decay Adam; parameters update in sorted name order."""

    def __init__(self, arrays: dict[str, np.ndarray], cfg: TrainConfig, no_decay: set[str] = frozenset()):
        self.cfg = cfg
        self.no_decay = set(no_decay)
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        cfg = self.cfg
        b1c = 1.0 - cfg.beta1 ** self.t
        b2c = 1.0 - cfg.beta2 ** self.t
        for name in sorted(arrays):
            g = grads[name]
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * (g * g)
            update = (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + 1e-8)
            if name not in self.no_decay:
                update = update + cfg.weight_decay * arrays[name]
            arrays[name] = arrays[name] - cfg.learning_rate * update


@dataclass
class Checkpoint:
    module: str
    step: int
    encoder: EncoderParams
    head: np.ndarray
    cfg_hash: str
    poi_encoder: PoiEncoderParams | None = None
    poi_table: np.ndarray | None = None
    log_tau: float | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    arrays: list[tuple[str, np.ndarray]] = [
        (f"enc.{name}", ckpt.encoder.arrays[name]) for name, _ in param_shapes(ckpt.encoder.config)
    ]
    arrays.append(("head", ckpt.head))
    if ckpt.poi_encoder is not None:
        arrays += [(f"poi.{n}", ckpt.poi_encoder.arrays[n]) for n in POI_PARAM_ORDER]
    if ckpt.poi_table is not None:
        arrays.append(("poi_table", ckpt.poi_table))
    if ckpt.log_tau is not None:
        arrays.append(("log_tau", np.array([ckpt.log_tau])))
    meta = {
        "module": ckpt.module,
        "step": ckpt.step,
        "config_hash": ckpt.cfg_hash,
        "encoder_config": ckpt.encoder.config.to_dict(),
        "extra": ckpt.extra,
    }
    blob = write_param_blob(meta, arrays)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        header, arrays = read_param_blob(fh.read())
    enc_cfg = EncoderConfig(**header["encoder_config"])
    enc_arrays = {}
    for name, _ in param_shapes(enc_cfg):
        key = f"enc.{name}"
        if key not in arrays:
            raise ValidationError(f"checkpoint missing array {key}")
        enc_arrays[name] = arrays[key]
    poi = None
    if "poi.w1" in arrays:
        w1, w2 = arrays["poi.w1"], arrays["poi.w2"]
        poi = PoiEncoderParams(
            w1.shape[0], w1.shape[1], w2.shape[1],
            {n: arrays[f"poi.{n}"] for n in POI_PARAM_ORDER},
        )
    return Checkpoint(
        module=header["module"],
        step=header["step"],
        encoder=EncoderParams(enc_cfg, enc_arrays),
        head=arrays["head"],
        cfg_hash=header["config_hash"],
        poi_encoder=poi,
        poi_table=arrays.get("poi_table"),
        log_tau=float(arrays["log_tau"][0]) if "log_tau" in arrays else None,
        extra=header.get("extra", {}),
    )


def _epoch_batches(n: int, cfg: TrainConfig, shuffle_rng) -> list[np.ndarray]:
    perm = shuffle_rng.permutation(n)
    return [perm[lo : lo + cfg.batch_size] for lo in range(0, n, cfg.batch_size)]


def _check_alignment(tile_ids: list[str], samples) -> None:
    if [s.tile_id for s in samples] != tile_ids:
        raise ValidationError("samples are not aligned with the tile stack by tile_id")


def _finite_or_raise(value: float, step: int, module: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"{module}: non-finite loss at step {step}")


def train_access(
    stack: TileStack,
    samples: list[AccessSample],
    cfg: TrainConfig,
) -> tuple[Checkpoint, list[tuple[int, float, float]]]:
    """Optimize the accessibility encoder, POI encoder, head and temperature."""
    if len(samples) == 0:
        raise DomainError("empty accessibility dataset")
    _check_alignment(stack.tile_ids, samples)
    dt = cfg.np_dtype
    enc_cfg = encoder_config_for("access", cfg)
    enc = init_params(enc_cfg).astype(dt)
    poi_dim = samples[0].gravity.shape[0]
    poi = init_poi_params(poi_dim, enc_cfg.embed_dim, seed=enc_cfg.seed).astype(dt)
    head_rng = substream(cfg.seed, "init.head.access")
    head = head_rng.uniform(-1, 1, (4, enc_cfg.embed_dim)) / np.sqrt(enc_cfg.embed_dim)
    head = head.astype(dt)
    log_tau = math.log(TAU_INIT)

    gravity = np.stack([s.gravity for s in samples]).astype(dt)
    labels = np.stack([s.multilabel for s in samples])

    arrays = {f"enc.{k}": v for k, v in enc.arrays.items()}
    arrays.update({f"poi.{k}": v for k, v in poi.arrays.items()})
    arrays["head"] = head
    arrays["log_tau"] = np.array([log_tau], dtype=np.float64)
    opt = AdamW(arrays, cfg, no_decay={"log_tau"})

    shuffle_rng = substream(cfg.seed, "shuffle.access")
    log_rows = []
    step = 0
    t0 = time.perf_counter()
    for _ in range(cfg.epochs):
        for idx in _epoch_batches(len(stack), cfg, shuffle_rng):
            patches = stack.patches(idx, enc_cfg.patch_px, dt)
            enc_live = EncoderParams(enc_cfg, {k[4:]: v for k, v in arrays.items() if k.startswith("enc.")})
            poi_live = PoiEncoderParams(poi.in_dim, poi.hidden, poi.out_dim,
                                        {k[4:]: v for k, v in arrays.items() if k.startswith("poi.")})
            emb, _, cache = encode_patches(enc_live, patches)
            emb = np.atleast_2d(emb)
            poi_emb, poi_cache = encode_poi(poi_live, gravity[idx])
            poi_emb = np.atleast_2d(poi_emb)
            logits = project(arrays["head"], emb)

            l_c, g_c = contrastive_loss(emb, poi_emb, float(arrays["log_tau"][0]))
            l_p, g_p = precondition_loss(logits, labels[idx])
            l_a, _ = combined_access_loss(l_c, l_p, cfg.lambda1)
            step += 1
            _finite_or_raise(l_a, step, "access")

            d_head, d_emb_p = project_backward(arrays["head"], emb, cfg.lambda1 * g_p["logits"])
            d_emb = (g_c["e_img"] + d_emb_p).astype(dt)
            grads = {f"enc.{k}": v for k, v in encode_patches_backward(enc_live, cache, d_emb).items()}
            grads.update({f"poi.{k}": v for k, v in
                          encode_poi_backward(poi_live, poi_cache, g_c["e_poi"].astype(dt)).items()})
            grads["head"] = d_head.astype(dt)
            grads["log_tau"] = np.array([g_c["log_tau"]], dtype=np.float64)
            opt.step(arrays, grads)
            arrays["log_tau"][0] = clamp_log_tau(float(arrays["log_tau"][0]))
            log_rows.append((step, l_a, time.perf_counter() - t0))

    enc_final = EncoderParams(enc_cfg, {k[4:]: v.astype(np.float64) for k, v in arrays.items() if k.startswith("enc.")})
    poi_final = PoiEncoderParams(poi.in_dim, poi.hidden, poi.out_dim,
                                 {k[4:]: v.astype(np.float64) for k, v in arrays.items() if k.startswith("poi.")})
    ckpt = Checkpoint(
        module="access", step=step, encoder=enc_final,
        head=arrays["head"].astype(np.float64), cfg_hash=config_hash("access", cfg),
        poi_encoder=poi_final, log_tau=float(arrays["log_tau"][0]),
        extra={"gamma_m": cfg.gamma_m},
    )
    return ckpt, log_rows


def _train_pearson_module(
    module: str,
    stack: TileStack,
    targets: np.ndarray,
    cfg: TrainConfig,
    partitions: list[PatchPartition] | None,
    extra: dict,
) -> tuple[Checkpoint, list[tuple[int, float, float]]]:
    dt = cfg.np_dtype
    enc_cfg = encoder_config_for(module, cfg)
    enc = init_params(enc_cfg).astype(dt)
    head_rng = substream(cfg.seed, f"init.head.{module}")
    head = (head_rng.uniform(-1, 1, (1, enc_cfg.embed_dim)) / np.sqrt(enc_cfg.embed_dim)).astype(dt)

    arrays = {f"enc.{k}": v for k, v in enc.arrays.items()}
    arrays["head"] = head
    opt = AdamW(arrays, cfg)

    from .backdoor import adjust_patch_matrix

    shuffle_rng = substream(cfg.seed, f"shuffle.{module}")
    log_rows = []
    step = 0
    degenerate = 0
    t0 = time.perf_counter()
    for _ in range(cfg.epochs):
        for idx in _epoch_batches(len(stack), cfg, shuffle_rng):
            if idx.size < 2:
                continue
            patches = stack.patches(idx, enc_cfg.patch_px, dt)
            if partitions is not None:
                for j, tile_i in enumerate(idx):
                    patches[j] = adjust_patch_matrix(patches[j], partitions[tile_i])
            enc_live = EncoderParams(enc_cfg, {k[4:]: v for k, v in arrays.items() if k.startswith("enc.")})
            emb, _, cache = encode_patches(enc_live, patches)
            pred = project(arrays["head"], emb).ravel()
            res = pearson_loss(pred, targets[idx])
            step += 1
            _finite_or_raise(res.loss, step, module)
            if res.degenerate:
                degenerate += 1
                log_rows.append((step, res.loss, time.perf_counter() - t0))
                continue
            d_head, d_emb = project_backward(arrays["head"], emb, res.grad_pred[:, None])
            grads = {f"enc.{k}": v for k, v in
                     encode_patches_backward(enc_live, cache, d_emb.astype(dt)).items()}
            grads["head"] = d_head.astype(dt)
            opt.step(arrays, grads)
            log_rows.append((step, res.loss, time.perf_counter() - t0))
    if degenerate:
        warnings.warn(f"{module}: {degenerate} degenerate batches skipped (flat targets or predictions)")

    enc_final = EncoderParams(enc_cfg, {k[4:]: v.astype(np.float64) for k, v in arrays.items() if k.startswith("enc.")})
    ckpt = Checkpoint(
        module=module, step=step, encoder=enc_final,
        head=arrays["head"].astype(np.float64), cfg_hash=config_hash(module, cfg), extra=extra,
    )
    return ckpt, log_rows


def train_morph(
    stack: TileStack, samples: list[MorphSample], cfg: TrainConfig
) -> tuple[Checkpoint, list[tuple[int, float, float]]]:
    """Optimize the morphological encoder against log floor area."""
    if len(samples) == 0:
        raise DomainError("empty morphological dataset")
    _check_alignment(stack.tile_ids, samples)
    targets = np.array([s.log_fa for s in samples])
    return _train_pearson_module("morph", stack, targets, cfg, None, {})


def train_econ(
    stack: TileStack,
    samples: list[EconSample],
    morph_ckpt: Checkpoint | None,
    cfg: TrainConfig,
) -> tuple[Checkpoint, list[tuple[int, float, float]]]:
    """Optimize the economic encoder against log nightlight on adjusted tiles.

    With quantile 0 no patch is replaced and this reduces to plain
    nightlight-proxy training; otherwise a frozen morphological checkpoint
    must be supplied and the partitions are computed once up front.
    """
    if len(samples) == 0:
        raise DomainError("empty economic dataset")
    _check_alignment(stack.tile_ids, samples)
    targets = np.array([s.log_ni for s in samples])
    partitions = None
    if cfg.quantile > 0.0:
        if morph_ckpt is None:
            raise ConfigError("economic training with quantile > 0 requires a morph checkpoint")
        partitions = []
        for lo in range(0, len(stack), 64):
            idx = np.arange(lo, min(lo + 64, len(stack)))
            pm = stack.patches(idx, cfg.patch_px, np.float64)
            partitions.extend(compute_partitions(pm, morph_ckpt.encoder, cfg.quantile))
    extra = {"quantile": cfg.quantile, "proxy_mode": cfg.quantile == 0.0}
    return _train_pearson_module("econ", stack, targets, cfg, partitions, extra)
