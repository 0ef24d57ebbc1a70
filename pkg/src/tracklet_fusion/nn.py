"""Parameter containers and checkpoint persistence.

A ``Module`` is a thin namespace: any attribute that is a grad-requiring
``Tensor``, another ``Module``, or a list of either contributes to
``named_parameters``, whose dotted paths double as the checkpoint keys
(for example ``backbone.stage2.conv1.kernel``).

Checkpoints are NumPy ``.npz`` archives: one float64 row-major array per
parameter path. The format is stable; loading is strict in both
directions (missing and unexpected keys are errors).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, conv2d, matmul


class Module:
    """Base class whose attributes define the parameter tree."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Tensor):
                if value.requires_grad:
                    params[path] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(path))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{path}.{i}"))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        params[f"{path}.{i}"] = item
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


class Linear(Module):
    """Affine map ``x @ weight + bias`` for row-major batches."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 init_scale: float | None = None):
        std = init_scale if init_scale is not None else np.sqrt(2.0 / d_in)
        self.weight = Tensor(rng.standard_normal((d_in, d_out)) * std,
                             requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


class Conv3x3(Module):
    """3x3 convolution with padding 1 and per-channel bias."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / (c_in * 9))
        self.kernel = Tensor(rng.standard_normal((c_out, c_in, 3, 3)) * std,
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor, stride: int = 1) -> Tensor:
        return conv2d(x, self.kernel, bias=self.bias, stride=stride)


def save_checkpoint(path, named_params: dict[str, Tensor]) -> None:
    arrays = {name: t.data for name, t in named_params.items()}
    np.savez(path, **arrays)


def load_checkpoint(path, named_params: dict[str, Tensor]) -> None:
    """Restore parameter values in place; paths and shapes must match exactly."""
    with np.load(path) as archive:
        stored = set(archive.files)
        expected = set(named_params)
        missing = expected - stored
        extra = stored - expected
        if missing or extra:
            raise ValueError(
                f"checkpoint mismatch: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}")
        for name, tensor in named_params.items():
            value = archive[name]
            if value.shape != tensor.data.shape:
                raise ValueError(
                    f"checkpoint parameter '{name}' has shape {value.shape}, "
                    f"expected {tensor.data.shape}")
            tensor.data[...] = value
