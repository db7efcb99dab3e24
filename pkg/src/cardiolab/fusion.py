"""Tabular encoder, outer-product fusion, classification head and masked BCE."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import layers, s4
from .cohort import FEATURE_DIM, MISSING
from .errors import ShapeMismatch


@dataclass(frozen=True)
class FusionConfig:
    latent_dim: int = 64
    fusion_proj_dim: int | None = 16  # None: no projection, fuse the H-dim latents directly
    n_labels: int = 1
    feature_dim: int = FEATURE_DIM
    prelu_init: float = 0.25

    def __post_init__(self):
        if self.fusion_proj_dim is not None and self.fusion_proj_dim < 1:
            raise ValueError("fusion_proj_dim must be >= 1")
        if self.n_labels < 1 or self.latent_dim < 1 or self.feature_dim < 1:
            raise ValueError("dimensions must be positive")

    @property
    def fused_side(self) -> int:
        return (self.fusion_proj_dim or self.latent_dim) + 1

    def to_dict(self) -> dict:
        return asdict(self)


def init_head(cfg: FusionConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}

    def lin(name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        p[f"{name}.W"] = rng.uniform(-bound, bound, (fan_in, fan_out))
        p[f"{name}.b"] = rng.uniform(-bound, bound, fan_out)

    lin("tab", cfg.feature_dim, cfg.latent_dim)
    p["tab.slope"] = np.asarray(cfg.prelu_init, dtype=np.float64)
    if cfg.fusion_proj_dim is not None:
        lin("proj_ts", cfg.latent_dim, cfg.fusion_proj_dim)
        lin("proj_tab", cfg.latent_dim, cfg.fusion_proj_dim)
    lin("cls", cfg.fused_side**2, cfg.n_labels)
    return p


def tabular_encode(p, x):
    x = np.asarray(x, dtype=p["tab.W"].dtype)
    if x.shape[-1] != p["tab.W"].shape[0]:
        raise ShapeMismatch(f"feature vector has {x.shape[-1]} entries, expected {p['tab.W'].shape[0]}")
    pre, _ = layers.linear_forward(x, p["tab.W"], p["tab.b"])
    out, c = layers.prelu_forward(pre, p["tab.slope"])
    return out, (x, c)


def tabular_backward(p, cache, dout, grads):
    x, c = cache
    dpre, grads["tab.slope"] = layers.prelu_backward(c, dout)
    _, grads["tab.W"], grads["tab.b"] = layers.linear_backward(x, dpre, p["tab.W"])


def outer_fuse(a, b):
    """Row-major flattened outer product of [a, 1] and [b, 1]; last element is exactly 1."""
    one = np.ones(a.shape[:-1] + (1,), dtype=a.dtype)
    at = np.concatenate([a, one], axis=-1)
    bt = np.concatenate([b, one], axis=-1)
    fused = (at[..., :, None] * bt[..., None, :]).reshape(a.shape[:-1] + (-1,))
    return fused, (at, bt)


def fuse(p, z_ts, z_tab):
    if z_ts.shape != z_tab.shape:
        raise ShapeMismatch(f"latent shapes differ: {z_ts.shape} vs {z_tab.shape}")
    if "proj_ts.W" in p:
        a, _ = layers.linear_forward(z_ts, p["proj_ts.W"], p["proj_ts.b"])
        b, _ = layers.linear_forward(z_tab, p["proj_tab.W"], p["proj_tab.b"])
    else:
        a, b = z_ts, z_tab
    fused, c = outer_fuse(a, b)
    return fused, (z_ts, z_tab, c)


def fuse_backward(p, cache, dfused, grads):
    z_ts, z_tab, (at, bt) = cache
    side = at.shape[-1]
    dF = dfused.reshape(dfused.shape[:-1] + (side, side))
    da = np.einsum("...ij,...j->...i", dF, bt)[..., :-1]
    db = np.einsum("...ij,...i->...j", dF, at)[..., :-1]
    if "proj_ts.W" in p:
        dz_ts, grads["proj_ts.W"], grads["proj_ts.b"] = layers.linear_backward(z_ts, da, p["proj_ts.W"])
        dz_tab, grads["proj_tab.W"], grads["proj_tab.b"] = layers.linear_backward(z_tab, db, p["proj_tab.W"])
        return dz_ts, dz_tab
    return da, db


def head_forward(p, z_ts, features):
    z_tab, c_tab = tabular_encode(p, features)
    fused, c_fuse = fuse(p, z_ts, z_tab)
    logits, _ = layers.linear_forward(fused, p["cls.W"], p["cls.b"])
    return logits, (c_tab, c_fuse, fused)


def head_backward(p, cache, dlogits, grads):
    """Accumulates head gradients into ``grads``; returns d(loss)/d(z_ts)."""
    c_tab, c_fuse, fused = cache
    dfused, grads["cls.W"], grads["cls.b"] = layers.linear_backward(fused, dlogits, p["cls.W"])
    dz_ts, dz_tab = fuse_backward(p, c_fuse, dfused, grads)
    tabular_backward(p, c_tab, dz_tab, grads)
    return dz_ts


def masked_bce(logits, targets):
    """Mean BCE over observed entries (targets != MISSING); gradients at MISSING entries are 0.

    Returns (loss, dloss/dlogits, number of observed entries).
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.shape != targets.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs targets {targets.shape}")
    mask = targets != MISSING
    m = int(mask.sum())
    if m == 0:
        return 0.0, np.zeros_like(logits), 0
    y = np.where(mask, targets, 0).astype(np.float64)
    per = layers.softplus(logits) - y * logits
    loss = float(per[mask].sum() / m)
    grad = np.where(mask, (layers.sigmoid(logits) - y) / m, 0.0)
    return loss, grad, m


# ---------------------------------------------------------------------------
# whole model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    encoder: s4.EncoderConfig
    fusion: FusionConfig

    def __post_init__(self):
        if self.encoder.model_dim != self.fusion.latent_dim:
            raise ValueError("encoder model_dim must equal fusion latent_dim")

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "fusion": self.fusion.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(s4.EncoderConfig(**d["encoder"]), FusionConfig(**d["fusion"]))


def init_model(cfg: ModelConfig, seed: int, dtype=np.float64) -> dict[str, np.ndarray]:
    """Parameters are drawn in float64 and then cast, so both precisions start from the same values."""
    rng = np.random.default_rng(seed)
    params = s4.init_encoder(cfg.encoder, rng)
    params.update(init_head(cfg.fusion, rng))
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def forward_logits(p, segments, features, cfg: ModelConfig, train: bool = False, rng=None):
    z, c_enc = s4.encode(p, segments, cfg.encoder, train, rng)
    logits, c_head = head_forward(p, z, features)
    return logits, (c_enc, c_head)


def model_backward(p, cache, dlogits, cfg: ModelConfig) -> dict[str, np.ndarray]:
    c_enc, c_head = cache
    dlogits = np.asarray(dlogits, dtype=p["cls.W"].dtype)
    grads: dict[str, np.ndarray] = {}
    dz = head_backward(p, c_head, dlogits, grads)
    grads.update(s4.encoder_backward(p, c_enc, dz, cfg.encoder))
    return grads
