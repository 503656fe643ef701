"""Encoder/decoder MLPs, the three Hub-VAE loss terms and their exact gradients.

The network is fixed: ``x -> [affine -> ReLU]* -> (mu, softplus + 1e-6)`` for
the encoder and ``z -> [affine -> ReLU]* -> logistic`` for the decoder, so the
reverse pass is written out by hand rather than recorded on a tape.

All losses are averaged over the rows of the mini-batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .distributions import LOG_2PI, PROB_CLAMP, DiagGaussian, IsoGaussian
from .numerics import NumericalError, check_finite, zeros_like_params

VAR_FLOOR = 1e-6
KL_MODES = ("mixture", "gaussian", "none")


@dataclass
class Triplet:
    anchor: int
    positive: int
    negatives: list[int] = field(default_factory=list)


@dataclass
class LossSpec:
    """Which loss terms are active and how they are weighted.

    ``kl_mode`` is ``"mixture"`` for the hub prior, ``"gaussian"`` for the
    factored N(0, I) prior of the baseline VAE, ``"none"`` to drop the term.
    """

    recon_weight: float = 1.0
    contrastive_weight: float = 1.0
    beta: float = 1.0
    kl_mode: str = "mixture"

    def __post_init__(self):
        if self.kl_mode not in KL_MODES:
            raise ValueError(f"kl_mode must be one of {KL_MODES}, got {self.kl_mode!r}")

    @classmethod
    def zero(cls) -> "LossSpec":
        return cls(recon_weight=0.0, contrastive_weight=0.0, beta=0.0, kl_mode="none")


@dataclass
class LossBreakdown:
    recon: float
    kl: float
    contrastive: float
    beta: float
    total: float

    def as_dict(self) -> dict:
        return {"recon": self.recon, "kl": self.kl, "contrastive": self.contrastive,
                "beta": self.beta, "total": self.total}


@dataclass
class EncoderOutput:
    mean: np.ndarray  # (B, d)
    var: np.ndarray  # (B, d)
    eps: np.ndarray  # (B, d)
    z: np.ndarray  # (B, d)

    def posterior(self, i: int) -> DiagGaussian:
        return DiagGaussian(self.mean[i], self.var[i])

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)


def _n_hidden(params, prefix: str) -> int:
    return sum(1 for name in params if name.startswith(prefix + "_W") and name[len(prefix) + 2:].isdigit())


# ---------------------------------------------------------------------------
# forward passes with caches
# ---------------------------------------------------------------------------

def _encoder_forward(params, x):
    acts = [x]
    h = x
    for i in range(_n_hidden(params, "enc")):
        h = np.maximum(h @ params[f"enc_W{i}"] + params[f"enc_b{i}"], 0.0)
        acts.append(h)
    mu = h @ params["enc_Wmu"] + params["enc_bmu"]
    pre_var = h @ params["enc_Wvar"] + params["enc_bvar"]
    var = np.logaddexp(0.0, pre_var) + VAR_FLOOR
    check_finite("encoder output", mu)
    check_finite("encoder output", var)
    return mu, var, {"acts": acts, "pre_var": pre_var}


def _encoder_backward(params, cache, d_mu, d_var, grads):
    acts = cache["acts"]
    h = acts[-1]
    d_h = np.zeros_like(h)
    if d_mu is not None:
        grads["enc_Wmu"] += h.T @ d_mu
        grads["enc_bmu"] += d_mu.sum(0, keepdims=True)
        d_h += d_mu @ params["enc_Wmu"].T
    if d_var is not None:
        d_pre = d_var * expit(cache["pre_var"])
        grads["enc_Wvar"] += h.T @ d_pre
        grads["enc_bvar"] += d_pre.sum(0, keepdims=True)
        d_h += d_pre @ params["enc_Wvar"].T
    for i in reversed(range(len(acts) - 1)):
        d_pre = d_h * (acts[i + 1] > 0)
        grads[f"enc_W{i}"] += acts[i].T @ d_pre
        grads[f"enc_b{i}"] += d_pre.sum(0, keepdims=True)
        d_h = d_pre @ params[f"enc_W{i}"].T


def _decoder_forward(params, z):
    acts = [z]
    h = z
    for i in range(_n_hidden(params, "dec")):
        h = np.maximum(h @ params[f"dec_W{i}"] + params[f"dec_b{i}"], 0.0)
        acts.append(h)
    logits = h @ params["dec_Wout"] + params["dec_bout"]
    raw = expit(logits)
    probs = np.clip(raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (raw > PROB_CLAMP) & (raw < 1.0 - PROB_CLAMP)
    return probs, {"acts": acts, "inside": inside}


def _decoder_backward(params, cache, d_logits, grads):
    acts = cache["acts"]
    grads["dec_Wout"] += acts[-1].T @ d_logits
    grads["dec_bout"] += d_logits.sum(0, keepdims=True)
    d_h = d_logits @ params["dec_Wout"].T
    for i in reversed(range(len(acts) - 1)):
        d_pre = d_h * (acts[i + 1] > 0)
        grads[f"dec_W{i}"] += acts[i].T @ d_pre
        grads[f"dec_b{i}"] += d_pre.sum(0, keepdims=True)
        d_h = d_pre @ params[f"dec_W{i}"].T
    return d_h


# ---------------------------------------------------------------------------
# public forward API
# ---------------------------------------------------------------------------

def draw_eps(rng: np.random.Generator, rows: int, latent_dim: int) -> np.ndarray:
    return rng.standard_normal((rows, latent_dim))


def encode(params, x, rng: Optional[np.random.Generator] = None, eps=None) -> EncoderOutput:
    """Posterior parameters plus one reparameterized sample per row.

    ``eps`` wins over ``rng``; with neither, the sample equals the mean.
    """
    x = np.asarray(x, dtype=np.float64)
    mu, var, _ = _encoder_forward(params, x)
    if eps is None:
        eps = draw_eps(rng, *mu.shape) if rng is not None else np.zeros_like(mu)
    eps = np.asarray(eps, dtype=np.float64)
    return EncoderOutput(mean=mu, var=var, eps=eps, z=mu + np.sqrt(var) * eps)


def encode_means(params, x) -> np.ndarray:
    return _encoder_forward(params, np.asarray(x, dtype=np.float64))[0]


def decode(params, z) -> np.ndarray:
    return _decoder_forward(params, np.asarray(z, dtype=np.float64))[0]


def hub_prior(params, hub_inputs) -> list[IsoGaussian]:
    means = encode_means(params, hub_inputs)
    var = float(np.exp(params["tau"][0, 0]))
    return [IsoGaussian(m, var) for m in means]


# ---------------------------------------------------------------------------
# loss terms (forward only)
# ---------------------------------------------------------------------------

def loss_recon(x, probs) -> float:
    x = np.asarray(x, dtype=np.float64)
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_row = -(x * np.log(p) + (1.0 - x) * np.log1p(-p)).sum(1)
    return float(per_row.mean())


def _mixture_log_terms(z, mean, var, hub_means, tau):
    d = z.shape[1]
    diff = z - mean
    log_q = -0.5 * (LOG_2PI + np.log(var) + diff * diff / var).sum(1)
    s2 = np.exp(tau)
    sq = (z * z).sum(1)[:, None] + (hub_means * hub_means).sum(1)[None, :] - 2.0 * z @ hub_means.T
    sq = np.maximum(sq, 0.0)
    log_r = -0.5 * (d * (LOG_2PI + tau) + sq / s2)
    return log_q, log_r, sq


def loss_kl_mixture(enc: EncoderOutput, hub_means, tau: float) -> float:
    """Single-sample estimate of KL(q || uniform mixture of hub components)."""
    hub_means = np.atleast_2d(np.asarray(hub_means, dtype=np.float64))
    m = hub_means.shape[0]
    if m == 0:
        raise ValueError("mixture prior needs at least one component")
    log_q, log_r, _ = _mixture_log_terms(enc.z, enc.mean, enc.var, hub_means, tau)
    return float((log_q - logsumexp(log_r, axis=1) + np.log(m)).mean())


def loss_kl_gaussian(enc: EncoderOutput) -> float:
    """Closed-form KL to the factored standard normal prior."""
    return float((0.5 * (enc.var + enc.mean ** 2 - 1.0 - np.log(enc.var))).sum(1).mean())


def _flatten_triplets(triplets: Sequence[Triplet]):
    a, p, n = [], [], []
    for t in triplets:
        for neg in t.negatives:
            a.append(t.anchor)
            p.append(t.positive)
            n.append(neg)
    return np.array(a, dtype=int), np.array(p, dtype=int), np.array(n, dtype=int)


def _pair_w(mean, std, i, j):
    dm = mean[i] - mean[j]
    ds = std[i] - std[j]
    return np.sqrt((dm * dm).sum(1) + (ds * ds).sum(1)), dm, ds


def loss_contrastive(triplets: Sequence[Triplet], mean, var, batch_size: Optional[int] = None) -> float:
    """Hinge on Wasserstein distances with margin 1, averaged over batch rows."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.sqrt(np.asarray(var, dtype=np.float64))
    rows = batch_size if batch_size is not None else mean.shape[0]
    a, p, n = _flatten_triplets(triplets)
    if a.size == 0:
        return 0.0
    w_ap = _pair_w(mean, std, a, p)[0]
    w_an = _pair_w(mean, std, a, n)[0]
    return float(np.maximum(w_ap - w_an + 1.0, 0.0).sum() / rows)


def _contrastive_backward(triplets, mu, std, scale):
    """Returns (loss sum, d/dmu, d/dstd) of the summed hinge times ``scale``."""
    d_mu = np.zeros_like(mu)
    d_std = np.zeros_like(std)
    a, p, n = _flatten_triplets(triplets)
    if a.size == 0:
        return 0.0, d_mu, d_std
    w_ap, dm_ap, ds_ap = _pair_w(mu, std, a, p)
    w_an, dm_an, ds_an = _pair_w(mu, std, a, n)
    hinge = w_ap - w_an + 1.0
    active = hinge > 0.0
    # zero distance: take the zero subgradient
    inv_ap = np.where(active & (w_ap > 0.0), scale / np.where(w_ap > 0.0, w_ap, 1.0), 0.0)[:, None]
    inv_an = np.where(active & (w_an > 0.0), scale / np.where(w_an > 0.0, w_an, 1.0), 0.0)[:, None]
    np.add.at(d_mu, a, dm_ap * inv_ap - dm_an * inv_an)
    np.add.at(d_mu, p, -dm_ap * inv_ap)
    np.add.at(d_mu, n, dm_an * inv_an)
    np.add.at(d_std, a, ds_ap * inv_ap - ds_an * inv_an)
    np.add.at(d_std, p, -ds_ap * inv_ap)
    np.add.at(d_std, n, ds_an * inv_an)
    return float(hinge[active].sum()), d_mu, d_std


# ---------------------------------------------------------------------------
# joint forward/backward
# ---------------------------------------------------------------------------

def forward_backward(
    params,
    x,
    spec: LossSpec,
    rng: Optional[np.random.Generator] = None,
    eps=None,
    hub_inputs=None,
    triplets: Sequence[Triplet] = (),
):
    """Loss and exact gradients w.r.t. every parameter, ``tau`` included.

    Triplet indices refer to rows of ``x``. ``hub_inputs`` are the raw inputs
    of the mixture components; they go through the same encoder, so the
    prior means carry gradient into the encoder weights.
    """
    x = np.asarray(x, dtype=np.float64)
    B = x.shape[0]
    grads = zeros_like_params(params)

    mu, var, enc_cache = _encoder_forward(params, x)
    if eps is None:
        eps = draw_eps(rng, *mu.shape) if rng is not None else np.zeros_like(mu)
    std = np.sqrt(var)
    z = mu + std * eps

    d_mu = np.zeros_like(mu)
    d_var = np.zeros_like(var)
    d_z = np.zeros_like(z)

    # reconstruction
    recon = 0.0
    if spec.recon_weight != 0.0:
        probs, dec_cache = _decoder_forward(params, z)
        recon = loss_recon(x, probs)
        if not np.isfinite(recon):
            raise NumericalError("non-finite reconstruction loss")
        d_logits = spec.recon_weight * (probs - x) * dec_cache["inside"] / B
        d_z += _decoder_backward(params, dec_cache, d_logits, grads)

    # KL term
    kl = 0.0
    if spec.kl_mode == "mixture":
        if hub_inputs is None or len(hub_inputs) == 0:
            raise ValueError("mixture prior needs at least one hub input")
        tau = float(params["tau"][0, 0])
        s2 = np.exp(tau)
        d = z.shape[1]
        hub_mu, _, hub_cache = _encoder_forward(params, np.asarray(hub_inputs, dtype=np.float64))
        m = hub_mu.shape[0]
        log_q, log_r, sq = _mixture_log_terms(z, mu, var, hub_mu, tau)
        lse = logsumexp(log_r, axis=1)
        kl = float((log_q - lse + np.log(m)).mean())
        if not np.isfinite(kl):
            raise NumericalError("non-finite KL loss")
        c = spec.beta / B
        if c != 0.0:
            w = np.exp(log_r - lse[:, None])  # responsibilities (B, m)
            diff = z - mu
            # log q partials
            d_z += c * (-diff / var)
            d_mu += c * (diff / var)
            d_var += c * (-0.5 / var + 0.5 * diff * diff / (var * var))
            # -logsumexp partials
            d_z += c * (z - w @ hub_mu) / s2
            d_hub_mu = -c * (w.T @ z - w.sum(0)[:, None] * hub_mu) / s2
            grads["tau"][0, 0] += -c * float((w * (-0.5 * d + 0.5 * sq / s2)).sum())
            _encoder_backward(params, hub_cache, d_hub_mu, None, grads)
    elif spec.kl_mode == "gaussian":
        kl = float((0.5 * (var + mu ** 2 - 1.0 - np.log(var))).sum(1).mean())
        if not np.isfinite(kl):
            raise NumericalError("non-finite KL loss")
        c = spec.beta / B
        d_mu += c * mu
        d_var += c * 0.5 * (1.0 - 1.0 / var)

    # contrastive term, on posterior parameters (no sampling)
    contrastive = 0.0
    if spec.contrastive_weight != 0.0 and triplets:
        hinge_sum, c_mu, c_std = _contrastive_backward(triplets, mu, std, spec.contrastive_weight / B)
        contrastive = hinge_sum / B
        d_mu += c_mu
        d_var += c_std / (2.0 * std)

    # reparameterization: z = mu + sqrt(var) * eps
    d_mu += d_z
    d_var += d_z * eps / (2.0 * std)
    _encoder_backward(params, enc_cache, d_mu, d_var, grads)

    total_value = spec.recon_weight * recon + spec.contrastive_weight * contrastive + spec.beta * kl
    breakdown = LossBreakdown(recon=recon, kl=kl, contrastive=contrastive, beta=spec.beta, total=total_value)
    return breakdown, grads


def total_loss(params, x, spec: LossSpec, eps, hub_inputs=None, triplets: Sequence[Triplet] = ()) -> LossBreakdown:
    return forward_backward(params, x, spec, eps=eps, hub_inputs=hub_inputs, triplets=triplets)[0]


def validation_loss(params, x_val, hub_inputs, beta: float, rng: np.random.Generator,
                    kl_mode: str = "mixture", chunk: int = 1000) -> float:
    """Reconstruction plus beta-weighted KL against the mixture of *all* pool
    hubs; never includes the contrastive term."""
    x_val = np.asarray(x_val, dtype=np.float64)
    if kl_mode == "mixture":
        if hub_inputs is None or len(hub_inputs) == 0:
            raise ValueError("validation loss needs a nonempty hub pool")
        hub_means = encode_means(params, hub_inputs)
    tau = float(params["tau"][0, 0])
    total = 0.0
    for start in range(0, len(x_val), chunk):
        xb = x_val[start:start + chunk]
        enc = encode(params, xb, rng=rng)
        value = loss_recon(xb, decode(params, enc.z))
        if kl_mode == "mixture":
            value += beta * loss_kl_mixture(enc, hub_means, tau)
        elif kl_mode == "gaussian":
            value += beta * loss_kl_gaussian(enc)
        total += value * len(xb)
    return total / len(x_val)


def generate(params, hub_inputs, hub_index: int, count: int, seed=0):
    """Sample ``count`` inputs conditioned on one pool hub.

    Returns ``(probabilities, bernoulli_samples)``, each ``(count, D)``.
    """
    hub_inputs = np.atleast_2d(np.asarray(hub_inputs, dtype=np.float64))
    if not 0 <= hub_index < len(hub_inputs):
        raise IndexError(f"hub index {hub_index} outside pool of size {len(hub_inputs)}")
    rng = np.random.default_rng(seed)
    center = encode_means(params, hub_inputs[hub_index:hub_index + 1])
    sd = float(np.exp(0.5 * params["tau"][0, 0]))
    z = center + sd * rng.standard_normal((count, center.shape[1]))
    probs = decode(params, z)
    samples = (rng.random(probs.shape) < probs).astype(np.float64)
    return probs, samples
