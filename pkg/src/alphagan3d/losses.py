"""Adversarial and reconstruction losses.

Six training objectives over the four networks, two Wasserstein gradient
penalties (volume space for D, latent space for C), and the gradient
difference loss.  Expectations are batch means; the L1/MSE reconstruction
terms are voxel means so the lambda weights are resolution-independent.

Discriminator/code-discriminator objectives treat generator outputs as
constants (their updates never flow into G); the generator/encoder
objectives keep the full graph.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .errors import ContractError, DimensionError, DomainError
from .networks import Network
from .rng import SeedStream


@dataclass(frozen=True)
class LossWeights:
    lambda1: float
    lambda2: float
    lambda3: float = 0.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ContractError("loss weights must be non-negative")

    @classmethod
    def for_preset(cls, preset: str) -> "LossWeights":
        if preset in ("adni_baseline", "sigmarat1"):
            return cls(lambda1=10.0, lambda2=10.0, lambda3=0.0)
        if preset == "sigmarat2":
            return cls(lambda1=100.0, lambda2=100.0, lambda3=0.01)
        raise ContractError(f"unknown preset {preset!r}")


def _call(f, x: DiffTensor, training: bool) -> DiffTensor:
    if isinstance(f, Network):
        return f.forward(x, training=training)
    return f(x)


def _check_latents(z_e: DiffTensor, z_r: DiffTensor) -> None:
    if z_e.ndim != 2 or z_r.ndim != 2 or z_e.shape != z_r.shape:
        raise ContractError(
            f"latent batches must share shape [B, latent]: {z_e.shape} vs {z_r.shape}")


# ---------------------------------------------------------------------------
# reconstruction terms
# ---------------------------------------------------------------------------

def l1_term(x: DiffTensor, y: DiffTensor) -> DiffTensor:
    """Mean absolute voxel difference."""
    if x.shape != y.shape:
        raise ContractError(f"reconstruction shape mismatch {x.shape} vs {y.shape}")
    return ad.mean(ad.abs_(ad.sub(x, y)))


def mse_term(x: DiffTensor, y: DiffTensor) -> DiffTensor:
    """Mean squared voxel difference."""
    if x.shape != y.shape:
        raise ContractError(f"reconstruction shape mismatch {x.shape} vs {y.shape}")
    return ad.mean(ad.square(ad.sub(x, y)))


def gdl(x: DiffTensor, y: DiffTensor, alpha: float = 1.0) -> DiffTensor:
    """Gradient difference loss: sum over the three spatial axes of the
    mean of ``| |forward-diff x| - |forward-diff y| | ** alpha``.

    Supported exponents: 1 (default) and 2.
    """
    if x.shape != y.shape:
        raise ContractError(f"gdl shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 5:
        raise DimensionError(f"gdl expects [N,C,D,H,W], got {x.shape}")
    if alpha not in (1.0, 2.0, 1, 2):
        raise ContractError(f"gdl exponent must be 1 or 2, got {alpha}")
    total = None
    for axis in (2, 3, 4):
        extent = x.shape[axis]
        if extent < 2:
            raise DomainError(f"gdl needs spatial extent >= 2 on axis {axis}")
        dx = ad.abs_(ad.sub(ad.narrow(x, axis, 1, extent - 1),
                            ad.narrow(x, axis, 0, extent - 1)))
        dy = ad.abs_(ad.sub(ad.narrow(y, axis, 1, extent - 1),
                            ad.narrow(y, axis, 0, extent - 1)))
        diff = ad.abs_(ad.sub(dx, dy))
        if alpha in (2, 2.0):
            diff = ad.square(diff)
        term = ad.mean(diff)
        total = term if total is None else ad.add(total, term)
    return total


# ---------------------------------------------------------------------------
# gradient penalty
# ---------------------------------------------------------------------------

def gradient_penalty(f, a: DiffTensor, b: DiffTensor, stream: SeedStream,
                     training: bool = True) -> DiffTensor:
    """E[(||grad_xhat f(xhat)||_2 - 1)^2] along per-sample random
    interpolates ``xhat = eps*a + (1-eps)*b``, eps ~ U(0,1).

    Differentiable with respect to f's parameters (second-order path)."""
    if a.shape != b.shape:
        raise ContractError(f"gradient_penalty endpoints differ: {a.shape} vs {b.shape}")
    eps = stream.uniform(0.0, 1.0, (a.shape[0],), dtype=np.float64)
    return gradient_penalty_at(f, a, b, eps, training=training)


def gradient_penalty_at(f, a: DiffTensor, b: DiffTensor, eps: np.ndarray,
                        training: bool = True) -> DiffTensor:
    """Gradient penalty at explicit per-sample interpolation weights."""
    if a.shape != b.shape:
        raise ContractError(f"gradient_penalty endpoints differ: {a.shape} vs {b.shape}")
    n = a.shape[0]
    eps = np.asarray(eps, dtype=np.float64).reshape((n,) + (1,) * (a.ndim - 1))
    xhat_data = (eps * a.numpy().astype(np.float64)
                 + (1.0 - eps) * b.numpy().astype(np.float64)).astype(a.dtype)
    xhat = ad.tensor(xhat_data, requires_grad=True)
    out = _call(f, xhat, training)
    if out.shape != (n,):
        raise ContractError(
            f"gradient_penalty critic must map [N,...] to [N], got {out.shape}")
    if out.requires_grad:
        (gx,) = ad.grad(ad.sum_(out), [xhat], higher_order=True)
    else:
        # critic constant in its input: zero gradient field
        gx = ad.constant(np.zeros_like(xhat.numpy()))
    norms = ad.l2_norm_per_sample(gx)
    return ad.mean(ad.square(ad.add_scalar(norms, -1.0)))


# ---------------------------------------------------------------------------
# the six objectives
# ---------------------------------------------------------------------------

def l_gd(d_net, g_net, z_e: DiffTensor, z_r: DiffTensor,
         training: bool = True) -> DiffTensor:
    """Discriminator feedback to the generator:
    -E[D(G(z_e))] - E[D(G(z_r))]."""
    _check_latents(z_e, z_r)
    fake_e = _call(g_net, z_e, training)
    fake_r = _call(g_net, z_r, training)
    return ad.neg(ad.add(ad.mean(_call(d_net, fake_e, training)),
                         ad.mean(_call(d_net, fake_r, training))))


def _generator_terms(d_net, g_net, c_net, e_net, x_real, z_r, training):
    z_e = _call(e_net, x_real, training)
    _check_latents(z_e, z_r)
    x_rec = _call(g_net, z_e, training)
    fake_r = _call(g_net, z_r, training)
    lgd = ad.neg(ad.add(ad.mean(_call(d_net, x_rec, training)),
                        ad.mean(_call(d_net, fake_r, training))))
    code = ad.neg(ad.mean(_call(c_net, z_e, training)))
    return z_e, x_rec, lgd, code


def l_g1(d_net, g_net, c_net, e_net, x_real: DiffTensor, z_r: DiffTensor,
         weights: LossWeights, training: bool = True) -> DiffTensor:
    """L_GD - E[C(z_e)] + lambda2 * L1(x_real, G(z_e))."""
    return l_g1_terms(d_net, g_net, c_net, e_net, x_real, z_r, weights,
                      training)["total"]


def l_g1_terms(d_net, g_net, c_net, e_net, x_real, z_r, weights, training=True):
    _, x_rec, lgd, code = _generator_terms(d_net, g_net, c_net, e_net,
                                           x_real, z_r, training)
    rec = l1_term(x_real, x_rec)
    total = ad.add(ad.add(lgd, code), ad.scale(rec, weights.lambda2))
    return {"lgd": lgd, "code": code, "l1": rec, "total": total}


def l_g2(d_net, g_net, c_net, e_net, x_real: DiffTensor, z_r: DiffTensor,
         weights: LossWeights, training: bool = True) -> DiffTensor:
    """L_GD - E[C(z_e)] + lambda1 * L1 + lambda1 * MSE."""
    return l_g2_terms(d_net, g_net, c_net, e_net, x_real, z_r, weights,
                      training)["total"]


def l_g2_terms(d_net, g_net, c_net, e_net, x_real, z_r, weights, training=True):
    _, x_rec, lgd, code = _generator_terms(d_net, g_net, c_net, e_net,
                                           x_real, z_r, training)
    rec1 = l1_term(x_real, x_rec)
    rec2 = mse_term(x_real, x_rec)
    total = ad.add(ad.add(lgd, code),
                   ad.add(ad.scale(rec1, weights.lambda1),
                          ad.scale(rec2, weights.lambda1)))
    return {"lgd": lgd, "code": code, "l1": rec1, "mse": rec2, "total": total}


def l_g3(d_net, g_net, c_net, e_net, x_real: DiffTensor, z_r: DiffTensor,
         weights: LossWeights, training: bool = True,
         gdl_alpha: float = 1.0) -> DiffTensor:
    """L_GD - E[C(z_e)] + lambda3 * GDL + lambda2 * MSE."""
    return l_g3_terms(d_net, g_net, c_net, e_net, x_real, z_r, weights,
                      training, gdl_alpha)["total"]


def l_g3_terms(d_net, g_net, c_net, e_net, x_real, z_r, weights, training=True,
               gdl_alpha=1.0):
    _, x_rec, lgd, code = _generator_terms(d_net, g_net, c_net, e_net,
                                           x_real, z_r, training)
    rec_gdl = gdl(x_real, x_rec, alpha=gdl_alpha)
    rec_mse = mse_term(x_real, x_rec)
    total = ad.add(ad.add(lgd, code),
                   ad.add(ad.scale(rec_gdl, weights.lambda3),
                          ad.scale(rec_mse, weights.lambda2)))
    return {"lgd": lgd, "code": code, "gdl": rec_gdl, "mse": rec_mse,
            "total": total}


def l_c(c_net, z_e: DiffTensor, z_r: DiffTensor, lambda1: float,
        stream: SeedStream, training: bool = True) -> DiffTensor:
    """E[C(z_e)] - E[C(z_r)] + lambda1 * GP_C, interpolating in latent
    space between z_e and z_r."""
    return l_c_terms(c_net, z_e, z_r, lambda1, stream, training)["total"]


def l_c_terms(c_net, z_e, z_r, lambda1, stream, training=True):
    _check_latents(z_e, z_r)
    wass = ad.sub(ad.mean(_call(c_net, z_e, training)),
                  ad.mean(_call(c_net, z_r, training)))
    gp = gradient_penalty(c_net, z_e, z_r, stream, training=training)
    total = ad.add(wass, ad.scale(gp, lambda1))
    return {"wasserstein": wass, "gp": gp, "total": total}


def l_d(d_net, g_net, x_real: DiffTensor, z_e: DiffTensor, z_r: DiffTensor,
        lambda1: float, stream: SeedStream, training: bool = True) -> DiffTensor:
    """-L_GD - 2 E[D(x_real)] + lambda1 * GP_D.

    Generator outputs are treated as constants; the penalty interpolates
    in volume space between x_real and G(z_r)."""
    return l_d_terms(d_net, g_net, x_real, z_e, z_r, lambda1, stream,
                     training)["total"]


def l_d_terms(d_net, g_net, x_real, z_e, z_r, lambda1, stream, training=True):
    _check_latents(z_e, z_r)
    with ad.no_grad():
        fake_e = _call(g_net, z_e.detach(), training)
        fake_r = _call(g_net, z_r, training)
    fake_e, fake_r = fake_e.detach(), fake_r.detach()
    if fake_e.shape != x_real.shape:
        raise ContractError(
            f"generated/real shape mismatch {fake_e.shape} vs {x_real.shape}")
    neg_lgd = ad.add(ad.mean(_call(d_net, fake_e, training)),
                     ad.mean(_call(d_net, fake_r, training)))
    real = ad.scale(ad.mean(_call(d_net, x_real, training)), -2.0)
    gp = gradient_penalty(d_net, x_real, fake_r, stream, training=training)
    total = ad.add(ad.add(neg_lgd, real), ad.scale(gp, lambda1))
    return {"neg_lgd": neg_lgd, "real": real, "gp": gp, "total": total}
