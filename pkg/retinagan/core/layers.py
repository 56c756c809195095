#!/usr/bin/env python3
"""
Parameter storage and small layer helpers shared by the detector, the
generators and the discriminators.
"""

import hashlib
import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import FrozenModelError, ShapeError
from .tensor_engine import Tensor, conv2d, conv_transpose2d

logger = logging.getLogger(__name__)


class ParameterStore:
    """
    Ordered name -> Tensor registry for one network.

    Names are fixed at construction time; the registration order is the
    order parameters are serialized and hashed in.
    """

    def __init__(self, prefix: str = "", dtype: str = "float32"):
        self.prefix = prefix
        self.dtype = np.dtype(dtype)
        self._params: Dict[str, Tensor] = {}
        self.frozen = False

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def names(self) -> List[str]:
        return list(self._params)

    def tensors(self) -> List[Tensor]:
        return list(self._params.values())

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter '{name}' registered twice in store '{self.prefix}'")
        tensor = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=not self.frozen,
                        name=f"{self.prefix}{name}")
        self._params[name] = tensor
        return tensor

    def normal(self, name: str, shape: Tuple[int, ...], std: float, rng: np.random.Generator) -> Tensor:
        return self.add(name, rng.normal(0.0, std, size=shape))

    def he_conv(self, name: str, out_ch: int, in_ch: int, k: int, rng: np.random.Generator,
                bias: bool = True, transpose: bool = False) -> None:
        """Register `name.w` (and `name.b`) for a k x k convolution with He-normal init."""
        fan_in = in_ch * k * k
        shape = (in_ch, out_ch, k, k) if transpose else (out_ch, in_ch, k, k)
        self.normal(f"{name}.w", shape, float(np.sqrt(2.0 / fan_in)), rng)
        if bias:
            self.add(f"{name}.b", np.zeros(out_ch))

    def zeros(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))

    # Freezing
    def freeze(self) -> None:
        self.frozen = True
        for tensor in self._params.values():
            tensor.requires_grad = False
        logger.info(f"Froze {len(self._params)} parameters in '{self.prefix or 'store'}'")

    def check_trainable(self) -> None:
        if self.frozen:
            raise FrozenModelError(f"parameters of '{self.prefix or 'store'}' are frozen")

    # State
    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        missing = [n for n in self._params if n not in arrays]
        if missing:
            raise ShapeError(f"state for '{self.prefix}' is missing {missing[:5]}")
        for name, tensor in self._params.items():
            value = np.asarray(arrays[name])
            if value.shape != tensor.shape:
                raise ShapeError(f"parameter '{name}' expects {tensor.shape}, got {value.shape}")
            tensor.data = value.astype(tensor.dtype, copy=True)

    def parameter_hash(self) -> str:
        """sha256 over names, shapes and raw bytes in registration order."""
        digest = hashlib.sha256()
        for name, tensor in self._params.items():
            digest.update(name.encode("utf-8"))
            digest.update(str(tensor.shape).encode("utf-8"))
            digest.update(np.ascontiguousarray(tensor.data).tobytes())
        return digest.hexdigest()

    def astype(self, dtype: str) -> None:
        """Cast every parameter in place (float64 for gradient checks)."""
        self.dtype = np.dtype(dtype)
        for tensor in self._params.values():
            tensor.data = tensor.data.astype(self.dtype)


def conv(store: ParameterStore, name: str, x: Tensor, stride: int = 1, pad: int = 0,
         weight: Optional[Tensor] = None) -> Tensor:
    """Apply the convolution registered under `name`; `weight` overrides the stored one."""
    w = weight if weight is not None else store[f"{name}.w"]
    b = store[f"{name}.b"] if f"{name}.b" in store else None
    return conv2d(x, w, b, stride=stride, pad=pad)


def conv_up(store: ParameterStore, name: str, x: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    b = store[f"{name}.b"] if f"{name}.b" in store else None
    return conv_transpose2d(x, store[f"{name}.w"], b, stride=stride, pad=pad)


def to_nchw(pixels) -> np.ndarray:
    """Stack H x W x 3 images (or one N x H x W x 3 array) into an N x 3 x H x W batch."""
    batch = np.stack(list(pixels)) if not isinstance(pixels, np.ndarray) else pixels
    if batch.ndim == 3:
        batch = batch[None]
    if batch.ndim != 4 or batch.shape[-1] != 3:
        raise ShapeError(f"expected H x W x 3 images, got batch of shape {batch.shape}")
    return np.ascontiguousarray(batch.transpose(0, 3, 1, 2))


def to_nhwc(batch: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(batch).transpose(0, 2, 3, 1))
