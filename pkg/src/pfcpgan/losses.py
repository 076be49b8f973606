"""Loss terms: contrastive coupling, conditional-GAN adversarial, pixel L2,
and perceptual feature distance, plus the weighted total objective.

Every function is pure and differentiable through the autodiff tape; hinge
points use the zero subgradient. Logarithm arguments are clamped below at
``LOG_FLOOR``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import networks
from .config import LossConfig
from .errors import ConfigError, DataError, DimensionError, NumericError

LOG_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    l_cpl: float
    l_gan_profile: float
    l_gan_frontal: float
    l_l2: float
    l_perceptual: float
    total: float
    d_loss_profile: float
    d_loss_frontal: float

    CSV_FIELDS = ("l_cpl", "l_gan_pr", "l_gan_fr", "l_l2", "l_perc", "total",
                  "d_loss_pr", "d_loss_fr")

    def values(self) -> tuple[float, ...]:
        return (self.l_cpl, self.l_gan_profile, self.l_gan_frontal, self.l_l2,
                self.l_perceptual, self.total, self.d_loss_profile, self.d_loss_frontal)

    def finite(self) -> bool:
        return all(np.isfinite(v) for v in self.values())


# ---------------------------------------------------------------------------
# coupling
# ---------------------------------------------------------------------------


def embedding_distance(z1, z2) -> ad.Tensor:
    """Euclidean distance between two embedding vectors."""
    z1, z2 = ad.as_tensor(z1), ad.as_tensor(z2)
    if z1.data.shape != z2.data.shape:
        raise DimensionError(f"embedding shapes differ: {z1.data.shape} vs {z2.data.shape}")
    return ad.sqrt(ad.sum_all(ad.square(ad.sub(z1, z2))))


def contrastive_loss(z1, z2, label_y: int, margin_m: float, form: str = "squared_hinge") -> ad.Tensor:
    """Distance loss for one pair: genuine pairs pay half the squared
    distance; impostor pairs pay a hinge around the margin."""
    if label_y not in (0, 1):
        raise ConfigError(f"label_y must be 0 or 1, got {label_y}")
    if margin_m <= 0:
        raise ConfigError("margin must be > 0")
    z1, z2 = ad.as_tensor(z1), ad.as_tensor(z2)
    if z1.data.shape != z2.data.shape:
        raise DimensionError(f"embedding shapes differ: {z1.data.shape} vs {z2.data.shape}")
    d2 = ad.sum_all(ad.square(ad.sub(z1, z2)))
    if label_y == 0:
        return ad.scale(d2, 0.5)
    if form == "squared_hinge":
        hinge = ad.relu(ad.add(ad.scale(ad.sqrt(d2), -1.0), ad.constant(np.asarray(margin_m, d2.dtype))))
        return ad.scale(ad.square(hinge), 0.5)
    if form == "hinge_of_square":
        hinge = ad.relu(ad.add(ad.scale(d2, -1.0), ad.constant(np.asarray(margin_m, d2.dtype))))
        return ad.scale(hinge, 0.5)
    raise ConfigError(f"unknown contrastive form {form!r}")


def coupling_loss(z1, z2, labels, margin_m: float, form: str = "squared_hinge") -> ad.Tensor:
    """Mini-batch mean of the contrastive loss over (z1[i], z2[i], y[i])."""
    z1, z2 = ad.as_tensor(z1), ad.as_tensor(z2)
    y = np.asarray(labels)
    if z1.data.ndim != 2 or z1.data.shape != z2.data.shape:
        raise DimensionError(
            f"expected matching (N, d) embeddings, got {z1.data.shape} vs {z2.data.shape}"
        )
    if z1.data.shape[0] == 0:
        raise DataError("coupling loss over an empty batch")
    if y.shape != (z1.data.shape[0],) or not np.isin(y, (0, 1)).all():
        raise ConfigError("labels must be a vector of 0/1 matching the batch")
    if form not in ("squared_hinge", "hinge_of_square"):
        raise ConfigError(f"unknown contrastive form {form!r}")
    d2 = ad.sum_axis(ad.square(ad.sub(z1, z2)), 1)
    genuine = ad.scale(d2, 0.5)
    m = np.asarray(margin_m, dtype=d2.dtype)
    if form == "squared_hinge":
        hinge = ad.relu(ad.add(ad.scale(ad.sqrt(d2), -1.0), ad.constant(np.full(d2.shape, m))))
        impostor = ad.scale(ad.square(hinge), 0.5)
    else:
        hinge = ad.relu(ad.add(ad.scale(d2, -1.0), ad.constant(np.full(d2.shape, m))))
        impostor = ad.scale(hinge, 0.5)
    per_pair = ad.add(ad.cmul(genuine, 1.0 - y), ad.cmul(impostor, y))
    return ad.mean_all(per_pair)


# ---------------------------------------------------------------------------
# adversarial
# ---------------------------------------------------------------------------


def _log_sigmoid_mean(logits: ad.Tensor) -> ad.Tensor:
    return ad.mean_all(ad.log_clamped(ad.sigmoid(logits), LOG_FLOOR))


def _log_one_minus_sigmoid_mean(logits: ad.Tensor) -> ad.Tensor:
    one = ad.constant(np.ones_like(logits.data))
    return ad.mean_all(ad.log_clamped(ad.sub(one, ad.sigmoid(logits)), LOG_FLOOR))


def generator_adversarial_loss(logits_fake, gan_form: str = "non_saturating") -> ad.Tensor:
    """The generator-side term alone (it never depends on the real pass)."""
    fake = ad.as_tensor(logits_fake)
    if not np.isfinite(fake.data).all():
        raise NumericError("non-finite discriminator logits")
    if gan_form == "non_saturating":
        return ad.scale(_log_sigmoid_mean(fake), -1.0)
    if gan_form == "minimax":
        return _log_one_minus_sigmoid_mean(fake)
    raise ConfigError(f"unknown gan form {gan_form!r}")


def adversarial_losses(logits_real, logits_fake, gan_form: str = "non_saturating"):
    """(d_loss, g_loss) over patch logit grids.

    d_loss = -mean(log s(real)) - mean(log(1 - s(fake)));
    g_loss under minimax keeps the literal log(1 - s(fake)) term, under
    non_saturating it is -mean(log s(fake)).
    """
    real, fake = ad.as_tensor(logits_real), ad.as_tensor(logits_fake)
    if not (np.isfinite(real.data).all() and np.isfinite(fake.data).all()):
        raise NumericError("non-finite discriminator logits")
    d_loss = ad.sub(
        ad.scale(_log_sigmoid_mean(real), -1.0), _log_one_minus_sigmoid_mean(fake)
    )
    if gan_form == "non_saturating":
        g_loss = ad.scale(_log_sigmoid_mean(fake), -1.0)
    elif gan_form == "minimax":
        g_loss = _log_one_minus_sigmoid_mean(fake)
    else:
        raise ConfigError(f"unknown gan form {gan_form!r}")
    return d_loss, g_loss


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------


def _as_image_batch(x) -> ad.Tensor:
    t = ad.as_tensor(x)
    if t.data.ndim == 3:
        return ad.reshape(t, (1,) + t.data.shape)
    if t.data.ndim != 4:
        raise DimensionError(f"expected image grid(s), got shape {t.data.shape}")
    return t


def l2_reconstruction_loss(output, target) -> ad.Tensor:
    """Squared pixel error normalized by pixel count, averaged over the batch."""
    o, t = _as_image_batch(output), _as_image_batch(target)
    if o.data.shape != t.data.shape:
        raise DimensionError(f"shape mismatch: {o.data.shape} vs {t.data.shape}")
    return ad.mean_all(ad.mean_over_last3(ad.square(ad.sub(o, t))))


def perceptual_loss(perc: networks.PerceptualFeatureParams, output, target) -> ad.Tensor:
    """Mean absolute feature difference under the frozen perceptual stack."""
    o, t = _as_image_batch(output), _as_image_batch(target)
    if o.data.shape != t.data.shape:
        raise DimensionError(f"shape mismatch: {o.data.shape} vs {t.data.shape}")
    fo = networks.perceptual_features_t(perc, o)
    ft = networks.perceptual_features_t(perc, t)
    return perceptual_loss_from_features(fo, ft)


def perceptual_loss_from_features(feat_out: ad.Tensor, feat_target: ad.Tensor) -> ad.Tensor:
    """Same as :func:`perceptual_loss` but over precomputed target features
    (the target side is constant during training, so callers may cache it)."""
    if feat_out.data.shape != feat_target.data.shape:
        raise DimensionError(
            f"feature shape mismatch: {feat_out.data.shape} vs {feat_target.data.shape}"
        )
    return ad.mean_all(ad.mean_over_last3(ad.absolute(ad.sub(feat_out, feat_target))))


# ---------------------------------------------------------------------------
# total objective
# ---------------------------------------------------------------------------


def combine_total(l_cpl: ad.Tensor, l_gan_profile: ad.Tensor, l_gan_frontal: ad.Tensor,
                  l_l2: ad.Tensor, l_perceptual: ad.Tensor, cfg: LossConfig) -> ad.Tensor:
    """Differentiable weighted sum; term order matches total_objective."""
    gan = ad.add(l_gan_profile, l_gan_frontal)
    return ad.add(
        ad.add(l_cpl, ad.scale(gan, cfg.lambda_1)),
        ad.add(ad.scale(l_perceptual, cfg.lambda_2), ad.scale(l_l2, cfg.lambda_3)),
    )


def total_objective(l_cpl: float, l_gan_profile: float, l_gan_frontal: float,
                    l_l2: float, l_perceptual: float, cfg: LossConfig,
                    d_loss_profile: float = 0.0, d_loss_frontal: float = 0.0) -> LossBreakdown:
    """Assemble the reported breakdown; the total satisfies the lambda-weighted
    sum identity exactly (computed in float64 from the reported terms)."""
    terms = (l_cpl, l_gan_profile, l_gan_frontal, l_l2, l_perceptual)
    if not all(np.isfinite(v) for v in terms):
        raise NumericError(f"non-finite loss terms: {terms}")
    total = (float(l_cpl)
             + cfg.lambda_1 * (float(l_gan_profile) + float(l_gan_frontal))
             + cfg.lambda_2 * float(l_perceptual)
             + cfg.lambda_3 * float(l_l2))
    return LossBreakdown(
        l_cpl=float(l_cpl),
        l_gan_profile=float(l_gan_profile),
        l_gan_frontal=float(l_gan_frontal),
        l_l2=float(l_l2),
        l_perceptual=float(l_perceptual),
        total=total,
        d_loss_profile=float(d_loss_profile),
        d_loss_frontal=float(d_loss_frontal),
    )
