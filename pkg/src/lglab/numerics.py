"""Dense kernels shared by the trained and the constructed transformer.

PyTorch tensors carry the data; its autograd graph is the operation record of a
Tape, so `backward` is a reverse traversal of that graph restricted to the
registered parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Dict, Iterator, List, Mapping, Tuple, Union

import torch
import torch.nn.functional as F

from lglab.errors import ContractError, DimensionError, DomainError

# 定数
DEFAULT_DTYPE = torch.float64
PRECISIONS: Mapping[str, torch.dtype] = MappingProxyType({
    "float64": torch.float64,
    "float32": torch.float32,
})
LAYER_NORM_GUARD = 1e-12
FD_STEP = 1e-5
FD_TOLERANCE = 1e-4

Temper = Union[float, torch.Tensor]


def resolve_dtype(precision: str) -> torch.dtype:
    """精度名から dtype を解決"""
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise DomainError(f"Unknown precision '{precision}', expected one of {sorted(PRECISIONS)}") from None


# ============================================
# Kernels
# ============================================

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """C = A·B with an explicit inner-extent check.

    Leading (batch) dimensions broadcast as in `torch.matmul`.
    """
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"Inner extents differ: {tuple(a.shape)} · {tuple(b.shape)}")
    return torch.matmul(a, b)


def causal_mask(length: int, device: Union[str, torch.device, None] = None) -> torch.Tensor:
    """j > i の位置が True になる上三角マスク"""
    return torch.ones(length, length, dtype=torch.bool, device=device).triu(diagonal=1)


def causal_tempered_softmax(scores: torch.Tensor, tau: Temper) -> torch.Tensor:
    """Row-wise softmax of τ·S over the keys j ≤ i.

    Args:
        scores: (..., T, T) score matrix
        tau: positive temper, a float or a tensor broadcastable against `scores`

    Returns:
        Weights of the same shape; rows sum to 1 and entries above the diagonal are 0.
    """
    if scores.dim() < 2 or scores.shape[-1] != scores.shape[-2]:
        raise DimensionError(f"Score matrix must be square, got {tuple(scores.shape)}")
    if isinstance(tau, torch.Tensor):
        if bool((tau <= 0).any()):
            raise DomainError("Temper τ must be positive")
    elif tau <= 0:
        raise DomainError(f"Temper τ must be positive, got {tau}")

    z = scores * tau
    z = z.masked_fill(causal_mask(z.shape[-1], z.device), float("-inf"))
    # 行最大値を引く（定数シフトなので値は変わらない）
    z = z - z.amax(dim=-1, keepdim=True).detach()
    weights = torch.exp(z)
    return weights / weights.sum(dim=-1, keepdim=True)


def layer_norm(x: torch.Tensor, guard: float = LAYER_NORM_GUARD) -> torch.Tensor:
    """Zero-mean, length-√d normalization over the last dimension (no affine terms)."""
    centered = x - x.mean(dim=-1, keepdim=True)
    rms = torch.sqrt(centered.pow(2).mean(dim=-1, keepdim=True) + guard)
    return centered / rms


ACTIVATIONS: Mapping[str, Callable[[torch.Tensor], torch.Tensor]] = MappingProxyType({
    "relu": F.relu,
    "gelu": F.gelu,
})


def mlp_apply(
    y: torch.Tensor,
    w1: torch.Tensor,
    b1: torch.Tensor,
    w2: torch.Tensor,
    b2: torch.Tensor,
    activation: str = "relu",
) -> torch.Tensor:
    """act(y·W1 + b1)·W2 + b2 in the row-vector convention.

    Args:
        y: (..., d_in) rows
        w1: (d_in, d_hidden)
        b1: (d_hidden,)
        w2: (d_hidden, d_out)
        b2: (d_out,)
        activation: "relu" or "gelu"
    """
    if activation not in ACTIVATIONS:
        raise DomainError(f"Unknown activation '{activation}'")
    if b1.shape[-1] != w1.shape[-1] or b2.shape[-1] != w2.shape[-1]:
        raise DimensionError(
            f"Bias shapes {tuple(b1.shape)}, {tuple(b2.shape)} do not match weights "
            f"{tuple(w1.shape)}, {tuple(w2.shape)}"
        )
    hidden = ACTIVATIONS[activation](matmul(y, w1) + b1)
    return matmul(hidden, w2) + b2


# ============================================
# Differentiation
# ============================================

class Tape:
    """勾配を求めるパラメータの登録簿（順序付き）"""

    def __init__(self) -> None:
        self._parameters: Dict[str, torch.Tensor] = {}

    def register(self, name: str, tensor: torch.Tensor) -> torch.Tensor:
        if name in self._parameters:
            raise ContractError(f"Parameter '{name}' is already registered")
        if not tensor.requires_grad:
            tensor.requires_grad_(True)
        self._parameters[name] = tensor
        return tensor

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "Tape":
        tape = cls()
        for name, parameter in module.named_parameters():
            tape.register(name, parameter)
        return tape

    def names(self) -> List[str]:
        return list(self._parameters)

    def items(self) -> List[Tuple[str, torch.Tensor]]:
        return list(self._parameters.items())  # 防御的コピー

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._parameters[name]

    def __iter__(self) -> Iterator[torch.Tensor]:
        return iter(list(self._parameters.values()))

    def __len__(self) -> int:
        return len(self._parameters)


def backward(tape: Tape, loss: torch.Tensor) -> Mapping[str, torch.Tensor]:
    """Gradient of a scalar loss with respect to every registered parameter.

    Parameters the loss does not depend on receive a zero gradient, so the map
    always has exactly one entry per registered parameter.

    Returns:
        Read-only mapping name → gradient
    """
    if loss.numel() != 1:
        raise ContractError(f"Loss must be a scalar, got shape {tuple(loss.shape)}")
    names = tape.names()
    parameters = [tape[name] for name in names]
    grads = torch.autograd.grad(loss.reshape(()), parameters, allow_unused=True)
    result = {
        name: (grad if grad is not None else torch.zeros_like(param)).detach()
        for name, param, grad in zip(names, parameters, grads)
    }
    return MappingProxyType(result)


@dataclass(frozen=True)
class GradReport:
    """解析勾配と中心差分の比較結果"""
    errors: Mapping[str, float]
    tolerance: float
    max_error: float = field(init=False)
    passed: bool = field(init=False)

    def __post_init__(self):
        max_error = max(self.errors.values(), default=0.0)
        object.__setattr__(self, "max_error", max_error)
        object.__setattr__(self, "passed", max_error < self.tolerance)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """‖a − n‖ / max(‖a‖, ‖n‖, 1e-6)"""
    scale = max(float(analytic.norm()), float(numeric.norm()), 1e-6)
    return float((analytic - numeric).norm()) / scale


def finite_difference_check(
    fn: Callable[[], torch.Tensor],
    tape: Tape,
    step: float = FD_STEP,
    tolerance: float = FD_TOLERANCE,
) -> GradReport:
    """Compare `backward` against central differences coordinate by coordinate.

    `fn` recomputes the scalar loss from the current values of the registered
    parameters; coordinates are perturbed in place and restored.
    """
    if step <= 0:
        raise DomainError(f"Finite-difference step must be positive, got {step}")
    analytic = backward(tape, fn())

    errors: Dict[str, float] = {}
    with torch.no_grad():
        for name, parameter in tape.items():
            numeric = torch.zeros_like(parameter)
            flat = parameter.view(-1)
            numeric_flat = numeric.view(-1)
            for k in range(flat.numel()):
                original = float(flat[k])
                flat[k] = original + step
                plus = float(fn())
                flat[k] = original - step
                minus = float(fn())
                flat[k] = original
                numeric_flat[k] = (plus - minus) / (2.0 * step)
            errors[name] = relative_error(analytic[name], numeric)
    return GradReport(errors=MappingProxyType(errors), tolerance=tolerance)
