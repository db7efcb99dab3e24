"""Bidirectional diagonal state-space (S4D) encoder with hand-written gradients.

Each model channel runs an N-state diagonal SSM with zero-order-hold
discretization.  The impulse response is a sum of decaying complex
geometric sequences, so the layer is evaluated as a causal convolution via
FFT.  Backward passes are exact; ``tests/test_s4.py`` checks them against
central finite differences.

Shapes: activations are (B, L, H); kernels are (H, L).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import layers
from .errors import NonFiniteActivation, ShapeMismatch

N_LEADS = 12


@dataclass(frozen=True)
class EncoderConfig:
    model_dim: int = 64
    n_blocks: int = 4
    state_size: int = 8
    segment_len: int = 250
    n_input_channels: int = N_LEADS
    ff_mult: int = 2
    dropout: float = 0.1
    dt_min: float = 0.001
    dt_max: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("model_dim", "n_blocks", "state_size", "n_input_channels", "ff_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.segment_len < 2:
            raise ValueError("segment_len must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SsmParams:
    """Diagonal SSM parameters for H channels with N states each.

    Re(lambda) = -exp(rho) keeps every mode strictly stable; B is fixed to 1.
    """

    rho: np.ndarray  # (H, N)
    im: np.ndarray  # (H, N)
    log_dt: np.ndarray  # (H,)
    C: np.ndarray  # (H, N) complex
    D: np.ndarray  # (H,)

    @property
    def lam(self) -> np.ndarray:
        return -np.exp(self.rho) + 1j * self.im

    @property
    def dt(self) -> np.ndarray:
        return np.exp(self.log_dt)

    def as_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.rho": self.rho,
            f"{prefix}.im": self.im,
            f"{prefix}.log_dt": self.log_dt,
            f"{prefix}.C_re": self.C.real.copy(),
            f"{prefix}.C_im": self.C.imag.copy(),
            f"{prefix}.D": self.D,
        }

    @classmethod
    def from_arrays(cls, params: dict, prefix: str) -> "SsmParams":
        return cls(
            rho=params[f"{prefix}.rho"],
            im=params[f"{prefix}.im"],
            log_dt=params[f"{prefix}.log_dt"],
            C=params[f"{prefix}.C_re"] + 1j * params[f"{prefix}.C_im"],
            D=params[f"{prefix}.D"],
        )


def init_ssm(n_channels: int, state_size: int, rng: np.random.Generator, dt_min=0.001, dt_max=0.1) -> SsmParams:
    """S4D-Lin initialization: lambda_n = -1/2 + i*pi*n, log-uniform dt, C ~ CN(0, 1)/sqrt(N), D = 1."""
    H, N = n_channels, state_size
    n = np.arange(N, dtype=np.float64)
    log_dt = rng.uniform(np.log(dt_min), np.log(dt_max), size=H)
    C = (rng.standard_normal((H, N)) + 1j * rng.standard_normal((H, N))) * np.sqrt(0.5) / np.sqrt(N)
    return SsmParams(
        rho=np.full((H, N), np.log(0.5)),
        im=np.tile(np.pi * n, (H, 1)),
        log_dt=log_dt,
        C=C,
        D=np.ones(H),
    )


_SERIES_RADIUS = 1e-4


def _complex(z):
    z = np.asarray(z)
    return z.astype(np.result_type(z.dtype, np.complex64), copy=False)


def _phi(z):
    """(exp(z) - 1) / z, with its series near 0."""
    z = _complex(z)
    small = np.abs(z) < _SERIES_RADIUS
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z / 2 + z * z / 6, np.expm1(safe) / safe)


def _dphi(z):
    """Derivative of _phi: (exp(z)(z - 1) + 1) / z^2."""
    z = _complex(z)
    small = np.abs(z) < 1e-3
    safe = np.where(small, 1.0, z)
    direct = (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe)
    return np.where(small, 0.5 + z / 3 + z * z / 8 + z**3 / 30, direct)


def discretize(lam, dt):
    """Zero-order hold with B = 1: A_bar = exp(dt*lam), B_bar = (A_bar - 1)/lam.

    Near lam = 0 the series form gives B_bar -> dt.
    """
    z = np.asarray(dt) * np.asarray(lam)
    return np.exp(z), np.asarray(dt) * _phi(z)


def compute_kernel(params: SsmParams, L: int) -> np.ndarray:
    return _kernel_forward(params, L)[0]


def _kernel_forward(params: SsmParams, L: int):
    lam = params.lam
    dt = params.dt[:, None]
    z = dt * lam  # (H, N)
    Q = params.C * _phi(z)
    steps = np.arange(L, dtype=params.rho.dtype)
    V = np.exp(z[:, :, None] * steps)  # (H, N, L)
    S = np.einsum("hn,hnl->hl", Q, V)
    K = 2.0 * dt * S.real
    return K, (lam, dt, z, Q, V, K)


def _kernel_backward(params: SsmParams, cache, dK):
    """Gradients of K (H, L) w.r.t. rho, im, log_dt, C_re, C_im.

    Complex quantities carry gradients as d/dRe + i d/dIm.
    """
    lam, dt, z, Q, V, K = cache
    L = K.shape[1]
    g_dt = (dK * K).sum(axis=1, keepdims=True) / dt  # direct dt prefactor
    Vc_dK = np.einsum("hnl,hl->hn", V.conj(), dK)
    Vc_ldK = np.einsum("hnl,hl->hn", V.conj(), dK * np.arange(L, dtype=dK.dtype))
    g_Q = 2.0 * dt * Vc_dK
    g_z = 2.0 * dt * Q.conj() * Vc_ldK
    g_C = _phi(z).conj() * g_Q
    g_z = g_z + (params.C * _dphi(z)).conj() * g_Q
    g_lam = dt * g_z
    g_dt = g_dt + np.real(lam.conj() * g_z).sum(axis=1, keepdims=True)
    return {
        "rho": g_lam.real * (-np.exp(params.rho)),
        "im": g_lam.imag,
        "log_dt": (g_dt * dt)[:, 0],
        "C_re": g_C.real,
        "C_im": g_C.imag,
    }


def causal_conv(u, K, D):
    """y[t] = sum_{l<=t} K[l] u[t-l] + D u[t] along the last axis, via zero-padded FFT."""
    L = u.shape[-1]
    if K.shape[-1] != L:
        raise ShapeMismatch(f"kernel length {K.shape[-1]} != input length {L}")
    n = 2 * L
    y = np.fft.irfft(np.fft.rfft(u, n) * np.fft.rfft(K, n), n)[..., :L]
    return y + np.asarray(D)[..., None] * u


def recurrence(params: SsmParams, u: np.ndarray) -> np.ndarray:
    """Stepwise evaluation x_t = A_bar x_{t-1} + B_bar u_t, y_t = 2 Re(C x_t) + D u_t.

    ``u`` is (H, L); independent of the FFT path, used as its oracle.
    """
    A_bar, B_bar = discretize(params.lam, params.dt[:, None])
    H, L = u.shape
    x = np.zeros(A_bar.shape, dtype=np.complex128)
    y = np.empty((H, L))
    for t in range(L):
        x = A_bar * x + B_bar * u[:, t : t + 1]
        y[:, t] = 2.0 * np.real((params.C * x).sum(axis=1)) + params.D * u[:, t]
    return y


def ssm_forward(params: SsmParams, u):
    """u: (B, L, H) -> (B, L, H)."""
    L = u.shape[1]
    K, kcache = _kernel_forward(params, L)
    uT = np.ascontiguousarray(u.transpose(0, 2, 1))
    n = 2 * L
    Uf = np.fft.rfft(uT, n)
    Kf = np.fft.rfft(K, n)
    y = np.fft.irfft(Uf * Kf, n)[..., :L] + params.D[:, None] * uT
    return y.transpose(0, 2, 1), (kcache, uT, Uf, Kf)


def ssm_backward(params: SsmParams, cache, dy):
    kcache, uT, Uf, Kf = cache
    L = uT.shape[-1]
    n = 2 * L
    dyT = np.ascontiguousarray(dy.transpose(0, 2, 1))
    Gf = np.fft.rfft(dyT, n)
    # du[s] = sum_{t>=s} dy[t] K[t-s]; dK[l] = sum_t dy[t] u[t-l]  (cross-correlations)
    du = np.fft.irfft(Gf * Kf.conj(), n)[..., :L] + params.D[:, None] * dyT
    dK = np.fft.irfft((Gf * Uf.conj()).sum(axis=0), n)[..., :L]
    grads = _kernel_backward(params, kcache, dK)
    grads["D"] = (dyT * uT).sum(axis=(0, 2))
    return du.transpose(0, 2, 1), grads


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

SSM_FIELDS = ("rho", "im", "log_dt", "C_re", "C_im", "D")


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    H, F = cfg.model_dim, cfg.model_dim * cfg.ff_mult
    p: dict[str, np.ndarray] = {}

    def lin(name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        p[f"{name}.W"] = rng.uniform(-bound, bound, (fan_in, fan_out))
        p[f"{name}.b"] = rng.uniform(-bound, bound, fan_out)

    lin("stem", cfg.n_input_channels, H)
    for i in range(cfg.n_blocks):
        b = f"blocks.{i}"
        p[f"{b}.norm1.gamma"] = np.ones(H)
        p[f"{b}.norm1.beta"] = np.zeros(H)
        for d in ("fwd", "bwd"):
            p.update(init_ssm(H, cfg.state_size, rng, cfg.dt_min, cfg.dt_max).as_arrays(f"{b}.ssm_{d}"))
        lin(f"{b}.mix", 2 * H, H)
        p[f"{b}.norm2.gamma"] = np.ones(H)
        p[f"{b}.norm2.beta"] = np.zeros(H)
        lin(f"{b}.ff1", H, F)
        lin(f"{b}.ff2", F, H)
    return p


def block_forward(p, prefix: str, x, cfg: EncoderConfig, train: bool, rng=None):
    """Pre-norm bidirectional SSM residual, then a GELU feed-forward residual."""
    if x.ndim != 3 or x.shape[2] != cfg.model_dim:
        raise ShapeMismatch(f"block input must be (B, L, {cfg.model_dim}), got {x.shape}")
    n1, c_n1 = layers.layer_norm_forward(x, p[f"{prefix}.norm1.gamma"], p[f"{prefix}.norm1.beta"])
    fwd = SsmParams.from_arrays(p, f"{prefix}.ssm_fwd")
    bwd = SsmParams.from_arrays(p, f"{prefix}.ssm_bwd")
    yf, c_f = ssm_forward(fwd, n1)
    yb_rev, c_b = ssm_forward(bwd, n1[:, ::-1])
    cat = np.concatenate([yf, yb_rev[:, ::-1]], axis=-1)
    m, _ = layers.linear_forward(cat, p[f"{prefix}.mix.W"], p[f"{prefix}.mix.b"])
    m, mask1 = layers.dropout_forward(m, cfg.dropout, rng, train)
    h = x + m
    n2, c_n2 = layers.layer_norm_forward(h, p[f"{prefix}.norm2.gamma"], p[f"{prefix}.norm2.beta"])
    a, _ = layers.linear_forward(n2, p[f"{prefix}.ff1.W"], p[f"{prefix}.ff1.b"])
    g, c_g = layers.gelu_forward(a)
    f, _ = layers.linear_forward(g, p[f"{prefix}.ff2.W"], p[f"{prefix}.ff2.b"])
    f, mask2 = layers.dropout_forward(f, cfg.dropout, rng, train)
    cache = (fwd, bwd, c_n1, c_f, c_b, cat, mask1, c_n2, n2, c_g, g, mask2)
    return h + f, cache


def block_backward(p, prefix: str, cache, dout, grads: dict):
    fwd, bwd, c_n1, c_f, c_b, cat, mask1, c_n2, n2, c_g, g, mask2 = cache
    H = dout.shape[-1]
    df = layers.dropout_backward(mask2, dout)
    dg, grads[f"{prefix}.ff2.W"], grads[f"{prefix}.ff2.b"] = layers.linear_backward(g, df, p[f"{prefix}.ff2.W"])
    da = layers.gelu_backward(c_g, dg)
    dn2, grads[f"{prefix}.ff1.W"], grads[f"{prefix}.ff1.b"] = layers.linear_backward(n2, da, p[f"{prefix}.ff1.W"])
    dh_ln, grads[f"{prefix}.norm2.gamma"], grads[f"{prefix}.norm2.beta"] = layers.layer_norm_backward(c_n2, dn2)
    dh = dout + dh_ln
    dm = layers.dropout_backward(mask1, dh)
    dcat, grads[f"{prefix}.mix.W"], grads[f"{prefix}.mix.b"] = layers.linear_backward(cat, dm, p[f"{prefix}.mix.W"])
    dn1_f, gf = ssm_backward(fwd, c_f, dcat[..., :H])
    dn1_b_rev, gb = ssm_backward(bwd, c_b, np.ascontiguousarray(dcat[:, ::-1, H:]))
    for k in SSM_FIELDS:
        grads[f"{prefix}.ssm_fwd.{k}"] = gf[k]
        grads[f"{prefix}.ssm_bwd.{k}"] = gb[k]
    dn1 = dn1_f + dn1_b_rev[:, ::-1]
    dx_ln, grads[f"{prefix}.norm1.gamma"], grads[f"{prefix}.norm1.beta"] = layers.layer_norm_backward(c_n1, dn1)
    return dh + dx_ln


def encode(p, segments, cfg: EncoderConfig, train: bool = False, rng=None):
    """segments: (B, 12, L) -> latents (B, H) and a cache for ``encoder_backward``."""
    segments = np.asarray(segments, dtype=p["stem.W"].dtype)
    if segments.ndim == 2:
        segments = segments[None]
    if segments.ndim != 3 or segments.shape[1] != cfg.n_input_channels or segments.shape[2] != cfg.segment_len:
        raise ShapeMismatch(
            f"segments must be (B, {cfg.n_input_channels}, {cfg.segment_len}), got {segments.shape}"
        )
    if train and cfg.dropout > 0 and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    x = segments.transpose(0, 2, 1)
    h, _ = layers.linear_forward(x, p["stem.W"], p["stem.b"])
    block_caches = []
    for i in range(cfg.n_blocks):
        h, c = block_forward(p, f"blocks.{i}", h, cfg, train, rng)
        block_caches.append(c)
    z = h.mean(axis=1)
    if not np.all(np.isfinite(z)):
        raise NonFiniteActivation("encoder produced a non-finite latent")
    return z, (x, block_caches, h.shape)


def encoder_backward(p, cache, dz, cfg: EncoderConfig) -> dict[str, np.ndarray]:
    x, block_caches, hshape = cache
    grads: dict[str, np.ndarray] = {}
    dh = np.broadcast_to(dz[:, None, :] / hshape[1], hshape)
    for i in reversed(range(cfg.n_blocks)):
        dh = block_backward(p, f"blocks.{i}", block_caches[i], dh, grads)
    _, grads["stem.W"], grads["stem.b"] = layers.linear_backward(x, dh, p["stem.W"])
    return grads
