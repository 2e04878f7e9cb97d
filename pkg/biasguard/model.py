"""Network components: ATF fusion, encoder, generator, discriminators A and B."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np

from biasguard import config
from biasguard.diffcore import (
    Tensor, TensorLike, add, as_tensor, concat, exp, matmul, mul, relu, reshape, softplus,
)
from biasguard.errors import ContractViolation, DimensionError

logger = logging.getLogger(__name__)

FUSION_ATF = "ATF"
FUSION_CONCAT = "CONCAT"
FUSION_MODES = (FUSION_ATF, FUSION_CONCAT)

# Parameter groups by optimizer
CRITIC_GROUP: Tuple[str, ...] = ("disc_a.trunk.", "disc_a.critic.")
JOINT_GROUP: Tuple[str, ...] = ("alpha.", "theta.", "concat.", "enc.", "gen.", "disc_a.proj.", "disc_b.")

# softplus^-1(1), so the initial ATF scale is 1
_ALPHA_BIAS_INIT = float(np.log(np.e - 1.0))


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and architecture choices; hidden widths default to 2x the input width."""
    d_visual: int = config.DESK_D_VISUAL
    k_semantic: int = config.DESK_K_SEMANTIC
    d_latent: int = config.DESK_D_LATENT
    k_proj: int = config.DESK_K_PROJ
    hidden_fusion: Optional[int] = None
    hidden_encoder: Optional[int] = None
    hidden_generator: Optional[int] = None
    hidden_disc: Optional[int] = None
    fusion_mode: str = FUSION_ATF

    def __post_init__(self):
        for name in ("d_visual", "k_semantic", "d_latent", "k_proj"):
            if int(getattr(self, name)) < 1:
                raise ContractViolation(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("hidden_fusion", "hidden_encoder", "hidden_generator", "hidden_disc"):
            value = getattr(self, name)
            if value is not None and int(value) < 1:
                raise ContractViolation(f"{name} must be >= 1, got {value}")
        if self.fusion_mode not in FUSION_MODES:
            raise ContractViolation(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")

    @classmethod
    def full_scale(cls, d_visual: int, k_semantic: int) -> "ModelConfig":
        return cls(d_visual=d_visual, k_semantic=k_semantic,
                   d_latent=config.FULL_D_LATENT, k_proj=config.FULL_K_PROJ)

    @property
    def fusion_width(self) -> int:
        return self.hidden_fusion or 2 * self.k_semantic

    @property
    def encoder_width(self) -> int:
        return self.hidden_encoder or 2 * self.d_visual

    @property
    def generator_width(self) -> int:
        return self.hidden_generator or 2 * self.d_latent

    @property
    def disc_width(self) -> int:
        return self.hidden_disc or 2 * self.d_visual


def parameter_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """
    Ordered parameter layout for a config.

    Args:
        cfg: Model configuration

    Returns:
        Mapping of parameter name to shape, in storage order
    """
    d, k, dl, kp = cfg.d_visual, cfg.k_semantic, cfg.d_latent, cfg.k_proj
    shapes: Dict[str, Tuple[int, ...]] = {}
    if cfg.fusion_mode == FUSION_ATF:
        hf = cfg.fusion_width
        shapes.update({
            "alpha.w1": (k, hf), "alpha.b1": (hf,), "alpha.w2": (hf, 1), "alpha.b2": (1,),
            "theta.w1": (k, hf), "theta.b1": (hf,), "theta.w2": (hf, d), "theta.b2": (d,),
        })
    else:
        shapes.update({"concat.w": (d + k, d), "concat.b": (d,)})
    he, hg, hd = cfg.encoder_width, cfg.generator_width, cfg.disc_width
    shapes.update({
        "enc.w1": (d, he), "enc.b1": (he,),
        "enc.mu.w": (he, dl), "enc.mu.b": (dl,),
        "enc.logvar.w": (he, dl), "enc.logvar.b": (dl,),
        "gen.w1": (dl, hg), "gen.b1": (hg,), "gen.w2": (hg, d), "gen.b2": (d,),
        "disc_a.trunk.w": (d, hd), "disc_a.trunk.b": (hd,),
        "disc_a.proj.w": (hd, kp), "disc_a.proj.b": (kp,),
        "disc_a.critic.w": (hd, 1), "disc_a.critic.b": (1,),
        "disc_b.w1": (d, hd), "disc_b.b1": (hd,), "disc_b.w2": (hd, kp), "disc_b.b2": (kp,),
    })
    return shapes


# Weights feeding a ReLU get He scaling; output heads get 1/fan_in variance.
_RELU_INPUT_LAYERS = {"alpha.w1", "theta.w1", "enc.w1", "gen.w1", "disc_a.trunk.w", "disc_b.w1"}


@dataclass(frozen=True)
class ModelParameters:
    """All trainable weights, keyed by ``component.layer`` names."""
    config: ModelConfig
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self, prefixes: Iterable[str] = ("",)) -> List[str]:
        prefixes = tuple(prefixes)
        return [n for n in self.tensors if n.startswith(prefixes)]

    def group(self, prefixes: Iterable[str]) -> Dict[str, Tensor]:
        return {n: self.tensors[n] for n in self.names(prefixes)}

    def with_tensors(self, updates: Mapping[str, Tensor]) -> "ModelParameters":
        unknown = set(updates) - set(self.tensors)
        if unknown:
            raise ContractViolation(f"unknown parameters: {sorted(unknown)}")
        merged = dict(self.tensors)
        for name, value in updates.items():
            if value.shape != merged[name].shape:
                raise DimensionError(f"{name}: shape {value.shape} != {merged[name].shape}")
            merged[name] = value
        return ModelParameters(self.config, merged)

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


def init_parameters(cfg: ModelConfig, rng: np.random.Generator) -> ModelParameters:
    """Seeded initialisation: He-normal hidden layers, zero biases, alpha scale starting at 1."""
    tensors: Dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg).items():
        if len(shape) == 1:
            value = np.zeros(shape)
            if name == "alpha.b2":
                value = np.full(shape, _ALPHA_BIAS_INIT)
        else:
            fan_in = shape[0]
            gain = 2.0 if name in _RELU_INPUT_LAYERS else 1.0
            value = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
            if name == "enc.logvar.w":
                value *= 0.1
        tensors[name] = Tensor(value)
    logger.debug(f"[MODEL] initialised {len(tensors)} tensors for {cfg}")
    return ModelParameters(cfg, tensors)


class LatentSample(NamedTuple):
    mu: Tensor
    logvar: Tensor
    z: Tensor
    noise: Tensor


def _rows(value: TensorLike, width: int, what: str) -> Tuple[Tensor, bool]:
    t = as_tensor(value)
    if t.ndim == 1:
        if t.shape[0] != width:
            raise DimensionError(f"{what}: expected length {width}, got {t.shape[0]}")
        return reshape(t, (1, width)), True
    if t.ndim != 2 or t.shape[1] != width:
        raise DimensionError(f"{what}: expected rows of width {width}, got shape {t.shape}")
    return t, False


def _unrow(t: Tensor, single: bool) -> Tensor:
    return reshape(t, t.shape[1:]) if single else t


def _dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def _mlp(x: Tensor, params: ModelParameters, prefix: str) -> Tensor:
    hidden = relu(_dense(x, params[prefix + "w1"], params[prefix + "b1"]))
    return _dense(hidden, params[prefix + "w2"], params[prefix + "b2"])


def atf_fuse(x_bar: TensorLike, s_bar: TensorLike, params: ModelParameters) -> Tensor:
    """
    Fuse visual and semantic vectors.

    ATF predicts a positive scalar scale and a d-dimensional offset from the
    semantics and applies them to the visual vector; CONCAT runs a linear layer
    over the concatenation. Both keep the visual dimension.

    Args:
        x_bar: Visual feature(s), shape (d,) or (N, d)
        s_bar: Semantic vector(s), shape (k,) or (N, k)
        params: Model parameters

    Returns:
        Fused representation with the shape of ``x_bar``
    """
    cfg = params.config
    x, single = _rows(x_bar, cfg.d_visual, "atf_fuse visual")
    s, _ = _rows(s_bar, cfg.k_semantic, "atf_fuse semantic")
    if x.shape[0] != s.shape[0]:
        raise DimensionError(f"atf_fuse: {x.shape[0]} visual rows vs {s.shape[0]} semantic rows")
    if cfg.fusion_mode == FUSION_ATF:
        alpha = softplus(_mlp(s, params, "alpha."))
        theta = _mlp(s, params, "theta.")
        out = add(mul(alpha, x), theta)
    else:
        out = _dense(concat([x, s], axis=1), params["concat.w"], params["concat.b"])
    return _unrow(out, single)


def encode(x: TensorLike, noise: TensorLike, params: ModelParameters) -> LatentSample:
    """Encode to (mu, logvar) and reparameterise z = mu + exp(0.5 logvar) * noise."""
    cfg = params.config
    rows, single = _rows(x, cfg.d_visual, "encode input")
    eps, _ = _rows(noise, cfg.d_latent, "encode noise")
    if eps.shape[0] != rows.shape[0]:
        raise DimensionError(f"encode: {rows.shape[0]} inputs vs {eps.shape[0]} noise rows")
    hidden = relu(_dense(rows, params["enc.w1"], params["enc.b1"]))
    mu = _dense(hidden, params["enc.mu.w"], params["enc.mu.b"])
    logvar = _dense(hidden, params["enc.logvar.w"], params["enc.logvar.b"])
    z = add(mu, mul(exp(mul(logvar, 0.5)), eps))
    return LatentSample(_unrow(mu, single), _unrow(logvar, single), _unrow(z, single), _unrow(eps, single))


def generate(z: TensorLike, params: ModelParameters) -> Tensor:
    rows, single = _rows(z, params.config.d_latent, "generate latent")
    return _unrow(_mlp(rows, params, "gen."), single)


def _disc_a_trunk(x: Tensor, params: ModelParameters) -> Tensor:
    return relu(_dense(x, params["disc_a.trunk.w"], params["disc_a.trunk.b"]))


def discriminate_A(x_tilde: TensorLike, params: ModelParameters) -> Tuple[Tensor, Tensor]:
    """
    Dual-head discriminator A.

    Args:
        x_tilde: Generated (or fused) feature(s), shape (d,) or (N, d)
        params: Model parameters

    Returns:
        (projection X of width k_proj, critic value per row)
    """
    cfg = params.config
    rows, single = _rows(x_tilde, cfg.d_visual, "discriminate_A input")
    hidden = _disc_a_trunk(rows, params)
    projection = _dense(hidden, params["disc_a.proj.w"], params["disc_a.proj.b"])
    critic = _dense(hidden, params["disc_a.critic.w"], params["disc_a.critic.b"])
    critic = reshape(critic, () if single else (rows.shape[0],))
    return _unrow(projection, single), critic


def critic_value(x: TensorLike, params: ModelParameters) -> Tensor:
    """Critic head of discriminator A alone."""
    rows, single = _rows(x, params.config.d_visual, "critic input")
    critic = _dense(_disc_a_trunk(rows, params), params["disc_a.critic.w"], params["disc_a.critic.b"])
    return reshape(critic, () if single else (rows.shape[0],))


def project_A(x: TensorLike, params: ModelParameters) -> Tensor:
    """Projection head of discriminator A alone."""
    rows, single = _rows(x, params.config.d_visual, "projection input")
    projection = _dense(_disc_a_trunk(rows, params), params["disc_a.proj.w"], params["disc_a.proj.b"])
    return _unrow(projection, single)


def discriminate_B(x_bar: TensorLike, params: ModelParameters) -> Tensor:
    """Discriminator B: projection of the raw visual feature."""
    rows, single = _rows(x_bar, params.config.d_visual, "discriminate_B input")
    return _unrow(_mlp(rows, params, "disc_b."), single)
