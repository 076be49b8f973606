"""Network definitions: coupled U-Net generators, conditional patch
discriminators, and the frozen random perceptual feature stack.

Generators are strided-conv encoders with a pooled fully-connected bottleneck
(the embedding used for verification) and a transposed-conv decoder whose
stages consume the channel-concatenation of the upsampled signal and the
same-resolution encoder activation (skip connections). Both generators share
one topology so bottleneck vectors are interchangeable and cross-domain
decoding is well-formed.

Parameters live in plain name->ndarray dicts so the trainer, checkpoints and
tests can address them uniformly; forward passes wrap them in autodiff
Tensors on demand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import GeneratorConfig
from .errors import ConfigError, DimensionError

LEAKY_SLOPE = 0.3
PERCEPTUAL_WIDTHS = (16, 32, 64)


@dataclass
class GeneratorParams:
    config: GeneratorConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class DiscriminatorParams:
    config: GeneratorConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class PerceptualFeatureParams:
    config: GeneratorConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: bool = True


@dataclass
class ModelState:
    gen_profile: GeneratorParams
    gen_frontal: GeneratorParams
    disc_profile: DiscriminatorParams
    disc_frontal: DiscriminatorParams
    perceptual: PerceptualFeatureParams
    step: int = 0

    @property
    def config(self) -> GeneratorConfig:
        return self.gen_profile.config

    def named_arrays(self):
        for comp in ("gen_profile", "gen_frontal", "disc_profile", "disc_frontal", "perceptual"):
            for name, arr in getattr(self, comp).arrays.items():
                yield f"{comp}/{name}", arr


def _gaussian(rng: np.random.Generator, shape, fan_in: int, dtype, gain: float = 2.0) -> np.ndarray:
    # fan-in-scaled Gaussian; gain 2 keeps variance level through rectifiers
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)


def init_generator(config: GeneratorConfig, rng: np.random.Generator, dtype) -> GeneratorParams:
    config.validate()
    h, w, c = config.image_size
    chans = config.enc_channels
    n = config.n_down
    d = config.embedding_dim
    bh, bw = config.bottleneck_hw
    a: dict[str, np.ndarray] = {}
    cin = c
    for i, cout in enumerate(chans):
        a[f"enc{i}_w"] = _gaussian(rng, (3, 3, cin, cout), 9 * cin, dtype)
        a[f"enc{i}_b"] = np.zeros(cout, dtype)
        cin = cout
    c_top = chans[-1]
    a["fc_embed_w"] = _gaussian(rng, (c_top, d), c_top, dtype)
    a["fc_embed_b"] = np.zeros(d, dtype)
    a["fc_expand_w"] = _gaussian(rng, (d, c_top * bh * bw), d, dtype)
    a["fc_expand_b"] = np.zeros(c_top * bh * bw, dtype)
    # decoder stage i: concat doubles the channel count of the incoming signal
    for i in range(n):
        skip_ch = chans[n - 1 - i]
        in_ch = 2 * skip_ch
        out_ch = chans[n - 2 - i] if i < n - 1 else config.base_channels
        a[f"dec{i}_w"] = _gaussian(rng, (3, 3, out_ch, in_ch), 9 * in_ch, dtype)
        a[f"dec{i}_b"] = np.zeros(out_ch, dtype)
    a["head_w"] = _gaussian(rng, (1, 1, config.base_channels, c), config.base_channels, dtype)
    a["head_b"] = np.zeros(c, dtype)
    return GeneratorParams(config, a)


def init_discriminator(config: GeneratorConfig, rng: np.random.Generator, dtype) -> DiscriminatorParams:
    c = config.image_size[2]
    widths = [config.base_channels, 2 * config.base_channels, 4 * config.base_channels]
    a: dict[str, np.ndarray] = {}
    cin = 2 * c  # condition and candidate, channel-concatenated
    for i, cout in enumerate(widths):
        a[f"conv{i}_w"] = _gaussian(rng, (3, 3, cin, cout), 9 * cin, dtype)
        a[f"conv{i}_b"] = np.zeros(cout, dtype)
        cin = cout
    a["final_w"] = _gaussian(rng, (3, 3, cin, 1), 9 * cin, dtype)
    a["final_b"] = np.zeros(1, dtype)
    return DiscriminatorParams(config, a)


def init_perceptual(config: GeneratorConfig, rng: np.random.Generator, dtype) -> PerceptualFeatureParams:
    h, w, c = config.image_size
    if h < 8 or w < 8:
        raise ConfigError("perceptual stack needs images of at least 8x8")
    a: dict[str, np.ndarray] = {}
    cin = c
    for i, cout in enumerate(PERCEPTUAL_WIDTHS):
        a[f"conv{i}_w"] = _gaussian(rng, (3, 3, cin, cout), 9 * cin, dtype)
        a[f"conv{i}_b"] = np.zeros(cout, dtype)
        cin = cout
    return PerceptualFeatureParams(config, a, frozen=True)


def init_model(config: GeneratorConfig, seed: int, dtype=np.float32) -> ModelState:
    """Deterministic model init; the perceptual stack gets its own stream and
    never receives gradients."""
    config.validate()
    ss = np.random.SeedSequence(seed)
    kids = ss.spawn(5)
    return ModelState(
        gen_profile=init_generator(config, np.random.Generator(np.random.PCG64(kids[0])), dtype),
        gen_frontal=init_generator(config, np.random.Generator(np.random.PCG64(kids[1])), dtype),
        disc_profile=init_discriminator(config, np.random.Generator(np.random.PCG64(kids[2])), dtype),
        disc_frontal=init_discriminator(config, np.random.Generator(np.random.PCG64(kids[3])), dtype),
        perceptual=init_perceptual(config, np.random.Generator(np.random.PCG64(kids[4])), dtype),
        step=0,
    )


def n_parameters(state: ModelState) -> int:
    return sum(arr.size for _, arr in state.named_arrays())


# ---------------------------------------------------------------------------
# forward passes (autodiff Tensor in/out)
# ---------------------------------------------------------------------------

ParamView = dict[str, ad.Tensor]


def wrap_params(params, trainable: bool) -> ParamView:
    wrap = ad.parameter if trainable else ad.constant
    return {name: wrap(arr) for name, arr in params.arrays.items()}


def _check_image_batch(x: np.ndarray, config: GeneratorConfig, what: str) -> None:
    h, w, c = config.image_size
    if x.ndim != 4 or x.shape[1:] != (h, w, c):
        raise DimensionError(f"{what}: expected (N, {h}, {w}, {c}), got {x.shape}")


def encode_t(view: ParamView, config: GeneratorConfig, x: ad.Tensor):
    """Returns (embedding (N, d), skips coarse-to-fine).

    skips[i] is the encoder activation consumed by decoder stage i: the
    coarsest activation first, the finest (half-resolution) last.
    """
    _check_image_batch(x.data, config, "encode")
    acts = []
    cur = x
    for i in range(config.n_down):
        cur = ad.relu(ad.conv2d(cur, view[f"enc{i}_w"], view[f"enc{i}_b"], stride=2, pad=1))
        acts.append(cur)
    pooled = ad.global_avg_pool(cur)
    emb = ad.dense(pooled, view["fc_embed_w"], view["fc_embed_b"])
    return emb, acts[::-1]


def decode_t(view: ParamView, config: GeneratorConfig, emb: ad.Tensor, skips=None):
    """Decode an embedding back to an image grid in [0, 1].

    Absent skips are replaced by zero grids of the matching shapes.
    """
    n = emb.data.shape[0]
    if emb.data.ndim != 2 or emb.data.shape[1] != config.embedding_dim:
        raise DimensionError(
            f"decode: expected embedding (N, {config.embedding_dim}), got {emb.data.shape}"
        )
    bh, bw = config.bottleneck_hw
    chans = config.enc_channels
    c_top = chans[-1]
    cur = ad.relu(ad.dense(emb, view["fc_expand_w"], view["fc_expand_b"]))
    cur = ad.reshape(cur, (n, bh, bw, c_top))
    h_cur, w_cur = bh, bw
    for i in range(config.n_down):
        skip_ch = chans[config.n_down - 1 - i]
        if skips is None:
            skip = ad.constant(np.zeros((n, h_cur, w_cur, skip_ch), dtype=emb.data.dtype))
        else:
            skip = skips[i]
            if skip.data.shape != (n, h_cur, w_cur, skip_ch):
                raise DimensionError(
                    f"decode: skip {i} expected {(n, h_cur, w_cur, skip_ch)}, got {skip.data.shape}"
                )
        cur = ad.concat_last(cur, skip)
        h_cur, w_cur = 2 * h_cur, 2 * w_cur
        cur = ad.relu(
            ad.conv2d_transpose(cur, view[f"dec{i}_w"], view[f"dec{i}_b"], (h_cur, w_cur), 2, 1)
        )
    out = ad.conv2d(cur, view["head_w"], view["head_b"], stride=1, pad=0)
    return ad.sigmoid(out)


def generate_t(view: ParamView, config: GeneratorConfig, x: ad.Tensor):
    emb, skips = encode_t(view, config, x)
    return decode_t(view, config, emb, skips), emb, skips


def discriminate_t(view: ParamView, config: GeneratorConfig, condition: ad.Tensor, candidate: ad.Tensor):
    """Patch logits over the channel-concatenation of condition and candidate."""
    _check_image_batch(condition.data, config, "discriminate(condition)")
    _check_image_batch(candidate.data, config, "discriminate(candidate)")
    cur = ad.concat_last(condition, candidate)
    for i in range(3):
        cur = ad.leaky_relu(
            ad.conv2d(cur, view[f"conv{i}_w"], view[f"conv{i}_b"], stride=2, pad=1), LEAKY_SLOPE
        )
    logits = ad.conv2d(cur, view["final_w"], view["final_b"], stride=1, pad=1)
    n, hp, wp, _ = logits.data.shape
    return ad.reshape(logits, (n, hp, wp))


def perceptual_features_t(perc: PerceptualFeatureParams, x: ad.Tensor):
    """Frozen feature stack; gradients flow to the image, never the weights."""
    _check_image_batch(x.data, perc.config, "perceptual_features")
    view = wrap_params(perc, trainable=False)
    cur = x
    for i in range(len(PERCEPTUAL_WIDTHS)):
        cur = ad.relu(ad.conv2d(cur, view[f"conv{i}_w"], view[f"conv{i}_b"], stride=2, pad=1))
    return cur


def perceptual_feature_count(config: GeneratorConfig) -> int:
    h, w, _ = config.image_size
    return (h >> 3) * (w >> 3) * PERCEPTUAL_WIDTHS[-1]


# ---------------------------------------------------------------------------
# ndarray conveniences (no gradient tracking)
# ---------------------------------------------------------------------------


def _as_batch(pixels: np.ndarray) -> tuple[np.ndarray, bool]:
    if pixels.ndim == 3:
        return pixels[None], True
    return pixels, False


def encode(gen: GeneratorParams, pixels: np.ndarray):
    """Embed images; returns (embedding, skips) as plain arrays."""
    x, single = _as_batch(np.asarray(pixels))
    emb, skips = encode_t(wrap_params(gen, False), gen.config, ad.constant(x))
    if single:
        return emb.data[0], [s.data[0] for s in skips]
    return emb.data, [s.data for s in skips]


def decode(gen: GeneratorParams, embedding: np.ndarray, skips=None) -> np.ndarray:
    emb = np.asarray(embedding)
    single = emb.ndim == 1
    if single:
        emb = emb[None]
        skips = None if skips is None else [ad.constant(np.asarray(s)[None]) for s in skips]
    elif skips is not None:
        skips = [ad.constant(np.asarray(s)) for s in skips]
    out = decode_t(wrap_params(gen, False), gen.config, ad.constant(emb), skips)
    return out.data[0] if single else out.data


def generate(gen: GeneratorParams, pixels: np.ndarray) -> np.ndarray:
    x, single = _as_batch(np.asarray(pixels))
    out, _, _ = generate_t(wrap_params(gen, False), gen.config, ad.constant(x))
    return out.data[0] if single else out.data


def discriminate(disc: DiscriminatorParams, condition: np.ndarray, candidate: np.ndarray) -> np.ndarray:
    cond, single = _as_batch(np.asarray(condition))
    cand, _ = _as_batch(np.asarray(candidate))
    out = discriminate_t(
        wrap_params(disc, False), disc.config, ad.constant(cond), ad.constant(cand)
    )
    return out.data[0] if single else out.data


def perceptual_features(perc: PerceptualFeatureParams, pixels: np.ndarray) -> np.ndarray:
    x, single = _as_batch(np.asarray(pixels))
    out = perceptual_features_t(perc, ad.constant(x))
    return out.data[0] if single else out.data
