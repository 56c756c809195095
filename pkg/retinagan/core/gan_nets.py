#!/usr/bin/env python3
"""
GAN Networks
U-Net generators, spectrally normalized patch discriminators, the
least-squares adversarial and cycle losses, and the combined objective.

G maps sim (X) to real (Y), F maps real to sim. D_x scores sim-looking
images, D_y real-looking ones.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .errors import CheckpointError, ShapeError
from .layers import ParameterStore, conv, conv_up
from .losses import LossParams, full_prcp_loss
from .optim import OptimState, SpectralState, power_iteration, spectral_normalize
from .tensor_engine import (Tensor, absolute, concat, detach, instance_norm, leaky_relu, mean, no_grad,
                            pad_reflect, relu, sigmoid)

logger = logging.getLogger(__name__)

SLOPE = 0.2


class Generator:
    """
    U-Net with three stride-2 encoder stages, three transposed-conv decoder
    stages with skip concatenation, and a sigmoid output in [0, 1].
    """

    def __init__(self, name: str, image_size: int = 64, base: int = 16, seed: int = 0,
                 zero_final: bool = False, dtype: str = "float32"):
        if image_size % 8:
            raise ShapeError(f"generator image size {image_size} must be divisible by 8")
        self.name = name
        self.image_size = image_size
        self.params = ParameterStore(prefix=f"{name}.", dtype=dtype)
        rng = np.random.default_rng(seed)
        b = base
        self.params.he_conv("e0", b, 3, 3, rng)
        self.params.he_conv("e1", 2 * b, b, 4, rng, bias=False)
        self.params.he_conv("e2", 4 * b, 2 * b, 4, rng, bias=False)
        self.params.he_conv("e3", 4 * b, 4 * b, 4, rng, bias=False)
        self.params.he_conv("d2", 4 * b, 4 * b, 4, rng, bias=False, transpose=True)
        self.params.he_conv("d1", 2 * b, 8 * b, 4, rng, bias=False, transpose=True)
        self.params.he_conv("d0", b, 4 * b, 4, rng, bias=False, transpose=True)
        if zero_final:
            self.params.zeros("out.w", (3, 2 * b, 3, 3))
            self.params.zeros("out.b", (3,))
        else:
            self.params.normal("out.w", (3, 2 * b, 3, 3), 0.02, rng)
            self.params.zeros("out.b", (3,))

    def forward(self, images: Tensor) -> Tensor:
        size = self.image_size
        if images.ndim != 4 or images.shape[1:] != (3, size, size):
            raise ShapeError(f"generator {self.name} expects N x 3 x {size} x {size}, got {images.shape}")
        p = self.params
        x = images * 2.0 - 1.0
        e0 = leaky_relu(conv(p, "e0", x, pad=1), SLOPE)
        e1 = leaky_relu(instance_norm(conv(p, "e1", e0, stride=2, pad=1)), SLOPE)
        e2 = leaky_relu(instance_norm(conv(p, "e2", e1, stride=2, pad=1)), SLOPE)
        e3 = leaky_relu(instance_norm(conv(p, "e3", e2, stride=2, pad=1)), SLOPE)
        d2 = relu(instance_norm(conv_up(p, "d2", e3)))
        d1 = relu(instance_norm(conv_up(p, "d1", concat([d2, e2], axis=1))))
        d0 = relu(instance_norm(conv_up(p, "d0", concat([d1, e1], axis=1))))
        out = conv(p, "out", pad_reflect(concat([d0, e0], axis=1), 1))
        return sigmoid(out)

    __call__ = forward


class IdentityGenerator:
    """Parameter-free generator returning its input unchanged."""

    def __init__(self, name: str = "identity", image_size: int = 64):
        self.name = name
        self.image_size = image_size
        self.params = ParameterStore(prefix=f"{name}.")

    def forward(self, images: Tensor) -> Tensor:
        return images

    __call__ = forward


class Discriminator:
    """Patch discriminator: four stride-2 convs and a 3x3 score conv, all spectrally normalized."""

    LAYERS = ("c0", "c1", "c2", "c3", "score")

    def __init__(self, name: str, base: int = 16, seed: int = 0, spectral_iters: int = 1,
                 dtype: str = "float32"):
        self.name = name
        self.spectral_iters = spectral_iters
        self.params = ParameterStore(prefix=f"{name}.", dtype=dtype)
        rng = np.random.default_rng(seed)
        channels = [3, base, 2 * base, 4 * base, 8 * base]
        for i in range(4):
            self.params.normal(f"c{i}.w", (channels[i + 1], channels[i], 4, 4), 0.02, rng)
            self.params.zeros(f"c{i}.b", (channels[i + 1],))
        self.params.normal("score.w", (1, 8 * base, 3, 3), 0.02, rng)
        self.params.zeros("score.b", (1,))
        self.spectral: Dict[str, SpectralState] = {
            layer: SpectralState.init(self.params[f"{layer}.w"].shape, rng, dtype) for layer in self.LAYERS}

    def power_iterate(self) -> None:
        """Refine every spectral estimate once per training step."""
        for layer in self.LAYERS:
            power_iteration(self.params[f"{layer}.w"].data, self.spectral[layer], self.spectral_iters)

    def normalized_weight(self, layer: str) -> Tensor:
        return spectral_normalize(self.params[f"{layer}.w"], self.spectral[layer], update=False)

    def forward(self, images: Tensor) -> Tensor:
        """N x 1 x H/16 x W/16 least-squares score map."""
        x = images * 2.0 - 1.0
        for i in range(4):
            layer = f"c{i}"
            x = leaky_relu(conv(self.params, layer, x, stride=2, pad=1, weight=self.normalized_weight(layer)), SLOPE)
        return conv(self.params, "score", x, pad=1, weight=self.normalized_weight("score"))

    __call__ = forward

    def spectral_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for layer, state in self.spectral.items():
            out[f"{layer}/u"] = state.u.astype(np.float32)
            out[f"{layer}/v"] = state.v.astype(np.float32)
        return out

    def load_spectral(self, arrays: Dict[str, np.ndarray], iterations: Dict[str, int]) -> None:
        for layer in self.LAYERS:
            try:
                self.spectral[layer] = SpectralState(u=np.array(arrays[f"{layer}/u"]), v=np.array(arrays[f"{layer}/v"]),
                                                     iterations=int(iterations.get(layer, 0)))
            except KeyError as e:
                raise CheckpointError(f"spectral state for {self.name}.{layer} missing") from e


def adversarial_losses(d_real: Tensor, d_fake: Tensor) -> Tuple[Tensor, Tensor]:
    """Least-squares: d = 1/2 mean((D_real-1)^2) + 1/2 mean(D_fake^2); g = mean((D_fake-1)^2)."""
    if d_real.shape != d_fake.shape:
        raise ShapeError(f"score maps differ: {d_real.shape} vs {d_fake.shape}")
    return discriminator_loss(d_real, d_fake), generator_adv_loss(d_fake)


def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    return 0.5 * mean((d_real - 1.0) ** 2) + 0.5 * mean(d_fake ** 2)


def generator_adv_loss(d_fake: Tensor) -> Tensor:
    return mean((d_fake - 1.0) ** 2)


def cycle_loss(x: Tensor, x_cycle: Tensor, y: Tensor, y_cycle: Tensor) -> Tensor:
    """Mean absolute reconstruction error of both cycles, summed."""
    if x.shape != x_cycle.shape or y.shape != y_cycle.shape:
        raise ShapeError(f"cycle pairs differ: {x.shape}/{x_cycle.shape}, {y.shape}/{y_cycle.shape}")
    return mean(absolute(x_cycle - x)) + mean(absolute(y_cycle - y))


@dataclass
class LossReport:
    """Named scalar losses of one training step."""
    step: int
    g_adv_xy: float
    g_adv_yx: float
    d_x: float
    d_y: float
    cycle: float
    prcp: float
    total_G: float
    total_D: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "LossReport":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__})


@dataclass
class Translations:
    x: Tensor
    x_trans: Tensor
    x_cycle: Tensor
    y: Tensor
    y_trans: Tensor
    y_cycle: Tensor


@dataclass
class GanBundle:
    """Both generators, both discriminators, their Adam states and the step counter."""
    G: Generator
    F: Generator
    D_x: Discriminator
    D_y: Discriminator
    opt_g: OptimState
    opt_d: OptimState
    step: int = 0
    config: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def create(cls, image_size: int = 64, generator_base: int = 16, discriminator_base: int = 16,
               seed: int = 0, lr: float = 1e-4, beta1: float = 0.1, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 7e-5, spectral_iters: int = 1, zero_final: bool = False,
               dtype: str = "float32") -> "GanBundle":
        def optim() -> OptimState:
            return OptimState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)

        return cls(
            G=Generator("G", image_size, generator_base, seed=seed * 4 + 0, zero_final=zero_final, dtype=dtype),
            F=Generator("F", image_size, generator_base, seed=seed * 4 + 1, zero_final=zero_final, dtype=dtype),
            D_x=Discriminator("D_x", discriminator_base, seed=seed * 4 + 2, spectral_iters=spectral_iters,
                              dtype=dtype),
            D_y=Discriminator("D_y", discriminator_base, seed=seed * 4 + 3, spectral_iters=spectral_iters,
                              dtype=dtype),
            opt_g=optim(), opt_d=optim())

    def generator_params(self) -> Dict[str, Tensor]:
        params = {f"G/{n}": t for n, t in self.G.params}
        params.update({f"F/{n}": t for n, t in self.F.params})
        return params

    def discriminator_params(self) -> Dict[str, Tensor]:
        params = {f"D_x/{n}": t for n, t in self.D_x.params}
        params.update({f"D_y/{n}": t for n, t in self.D_y.params})
        return params

    def parameter_hashes(self) -> Dict[str, str]:
        return {net.name: net.params.parameter_hash() for net in (self.G, self.F, self.D_x, self.D_y)}


def translate(bundle: GanBundle, x: Tensor, y: Tensor) -> Translations:
    """x' = G(x), x'' = F(x'), y' = F(y), y'' = G(y')."""
    x_trans = bundle.G(x)
    y_trans = bundle.F(y)
    return Translations(x=x, x_trans=x_trans, x_cycle=bundle.F(x_trans), y=y, y_trans=y_trans,
                        y_cycle=bundle.G(y_trans))


@dataclass
class Objective:
    total: Tensor
    parts: Dict[str, float] = field(default_factory=dict)


def discriminator_objective(bundle: GanBundle, t: Translations) -> Objective:
    """d_x + d_y with translated images detached from the generators."""
    d_x = discriminator_loss(bundle.D_x(t.x), bundle.D_x(detach(t.y_trans)))
    d_y = discriminator_loss(bundle.D_y(t.y), bundle.D_y(detach(t.x_trans)))
    total = d_x + d_y
    return Objective(total, {"d_x": d_x.item(), "d_y": d_y.item(), "total_D": total.item()})


def generator_objective(bundle: GanBundle, t: Translations, detector, params: LossParams) -> Objective:
    """
    lambda_GAN * (adv_xy + adv_yx) + lambda_cycle * cycle + lambda_prcp * prcp.

    With lambda_prcp = 0 (or no detector) the perception term is reported
    but kept off the graph.
    """
    g_adv_xy = generator_adv_loss(bundle.D_y(t.x_trans))
    g_adv_yx = generator_adv_loss(bundle.D_x(t.y_trans))
    cyc = cycle_loss(t.x, t.x_cycle, t.y, t.y_cycle)
    total = params.lambda_gan * (g_adv_xy + g_adv_yx) + params.lambda_cycle * cyc

    prcp_value = 0.0
    if detector is not None:
        if params.lambda_prcp > 0:
            prcp = full_prcp_loss(t.x, t.x_trans, t.x_cycle, t.y, t.y_trans, t.y_cycle, detector, params)
            total = total + params.lambda_prcp * prcp
            prcp_value = prcp.item()
        else:
            with no_grad():
                prcp_value = full_prcp_loss(t.x, t.x_trans, t.x_cycle, t.y, t.y_trans, t.y_cycle, detector,
                                            params).item()
    parts = {"g_adv_xy": g_adv_xy.item(), "g_adv_yx": g_adv_yx.item(), "cycle": cyc.item(),
             "prcp": prcp_value, "total_G": total.item()}
    return Objective(total, parts)


def retinagan_total(x: Tensor, y: Tensor, bundle: GanBundle, detector, params: LossParams,
                    step: Optional[int] = None) -> LossReport:
    """Every named loss term for one batch, all evaluated with the current discriminators."""
    t = translate(bundle, x, y)
    d = discriminator_objective(bundle, t)
    g = generator_objective(bundle, t, detector, params)
    return LossReport(step=bundle.step if step is None else step, **g.parts, **d.parts)
