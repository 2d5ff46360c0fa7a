"""
Dense numerics used by the model, trainer and probes.

Every op takes and returns ``torch.Tensor`` so reverse-mode gradients come from autograd. Ops
refuse to hand back NaN/Inf; a non-finite result raises :py:class:`TensorOpError` instead of
propagating silently. Training runs in float32, gradient checks and oracles in float64.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import torch
import torch.nn.functional as F

IGNORE_INDEX = -100
"""Target value skipped by :py:func:`cross_entropy`."""

DEFAULT_ROPE_THETA = 10000.0

Positions = Union[Sequence[int], torch.Tensor]


class TensorOpError(Exception):
    """Error with a numerics op"""


def _finite(out: torch.Tensor, op: str) -> torch.Tensor:
    if not bool(torch.isfinite(out).all()):
        raise TensorOpError(f"{op} produced non-finite values")
    return out


@dataclass
class RngState:
    """
    Seeded random stream.

    Wraps a ``torch.Generator`` (Mersenne Twister, mt19937, on CPU), so the same seed and the same
    sequence of draws gives bit-identical values across runs.
    """

    seed: int
    algorithm: str = "mt19937"
    _generator: Optional[torch.Generator] = field(default=None, init=False, repr=False)

    @property
    def generator(self) -> torch.Generator:
        """torch.Generator: The underlying generator, created on first use."""

        if self._generator is None:
            self._generator = torch.Generator(device="cpu")
            self._generator.manual_seed(self.seed)
        return self._generator


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    Matrix product of ``a [..., m, k]`` and ``b [..., k, n]``.

    Raises
    ------
    TensorOpError
        The inner extents do not agree.
    """

    if a.dim() < 2 or b.dim() < 2:
        raise TensorOpError(f"matmul needs at least 2-D inputs, got {a.dim()}-D and {b.dim()}-D")
    if a.shape[-1] != b.shape[-2]:
        raise TensorOpError(f"matmul inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")

    return _finite(torch.matmul(a, b), "matmul")


def silu(x: torch.Tensor) -> torch.Tensor:
    """Elementwise ``x * sigmoid(x)``."""

    return _finite(F.silu(x), "silu")


def rmsnorm(x: torch.Tensor, weight: torch.Tensor, eps: float) -> torch.Tensor:
    """
    Root-mean-square normalization over the last axis with a per-channel scale.

    ``y = weight * x / sqrt(mean(x**2) + eps)``. With ``eps = 0`` the result is invariant to any
    positive rescaling of ``x``.

    Parameters
    ----------
    x: torch.Tensor
        Input of shape ``[..., d]``.
    weight: torch.Tensor
        Scale of shape ``[d]``.
    eps: float
        Stabilizer added to the mean of squares, must not be negative.

    Raises
    ------
    TensorOpError
        ``d`` is 0, the weight does not match or the result is not finite (e.g. a zero vector
        with ``eps = 0``).
    """

    d = x.shape[-1] if x.dim() > 0 else 0
    if d == 0:
        raise TensorOpError("rmsnorm over an empty last axis")
    if weight.shape != (d,):
        raise TensorOpError(f"rmsnorm weight shape {tuple(weight.shape)} does not match d={d}")
    if eps < 0:
        raise TensorOpError(f"rmsnorm eps must not be negative, got {eps}")

    rms_inv = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    return _finite(x * rms_inv * weight, "rmsnorm")


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """
    Softmax over the last axis.

    The row max is subtracted before exponentiation, so ``-inf`` mask entries and large logits are
    both safe as long as every row holds at least one finite value.
    """

    return _finite(torch.softmax(x, dim=-1), "softmax_rows")


def rope_apply(x: torch.Tensor, positions: Positions, theta: float = DEFAULT_ROPE_THETA):
    """
    Rotary position embedding.

    Channel pair ``(2i, 2i + 1)`` of the row at position ``p`` is rotated by the angle
    ``p * theta ** (-2i / head_dim)``. Angles are computed in float64 before casting, so position
    0 is an exact identity and pair norms are preserved.

    Parameters
    ----------
    x: torch.Tensor
        Input of shape ``[..., T, head_dim]``.
    positions: list of int or torch.Tensor
        Absolute position of each of the ``T`` rows.
    theta: float
        Base frequency.

    Raises
    ------
    TensorOpError
        ``head_dim`` is odd or the positions do not match ``T``.
    """

    head_dim = x.shape[-1]
    if head_dim % 2 != 0:
        raise TensorOpError(f"rope needs an even head_dim, got {head_dim}")

    pos = torch.as_tensor(positions, dtype=torch.float64, device=x.device)
    if pos.dim() != 1 or pos.shape[0] != x.shape[-2]:
        raise TensorOpError(f"got {pos.numel()} positions for {x.shape[-2]} rows")

    exponents = torch.arange(0, head_dim, 2, dtype=torch.float64, device=x.device) / head_dim
    angles = pos[:, None] * theta ** (-exponents)[None, :]
    cos = torch.cos(angles).to(x.dtype)
    sin = torch.sin(angles).to(x.dtype)

    even = x[..., 0::2]
    odd = x[..., 1::2]
    rotated = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return _finite(rotated.flatten(-2), "rope_apply")


def cross_entropy(
    logits: torch.Tensor, targets: torch.Tensor, ignore_index: int = IGNORE_INDEX
) -> torch.Tensor:
    """
    Mean negative log-likelihood over the non-ignored positions.

    Parameters
    ----------
    logits: torch.Tensor
        Scores of shape ``[B, T, V]``.
    targets: torch.Tensor
        Integer targets of shape ``[B, T]``; ``ignore_index`` entries are skipped.
    ignore_index: int
        The sentinel for skipped positions.

    Raises
    ------
    TensorOpError
        A target is out of ``[0, V)``, shapes disagree or every position is ignored.

    Returns
    -------
    torch.Tensor
        Scalar loss; its gradient w.r.t. the logits is ``(softmax - onehot) / count``.
    """

    vocab = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise TensorOpError(
            f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}"
        )

    kept = targets != ignore_index
    if not bool(kept.any()):
        raise TensorOpError("every target position is ignored")
    bad = kept & ((targets < 0) | (targets >= vocab))
    if bool(bad.any()):
        raise TensorOpError(f"target {int(targets[bad][0])} out of range [0, {vocab})")

    loss = F.cross_entropy(
        logits.reshape(-1, vocab), targets.reshape(-1), ignore_index=ignore_index
    )
    return _finite(loss, "cross_entropy")


def normal_init(
    shape: Sequence[int],
    mean: float,
    std: float,
    rng: RngState,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """
    Draw a tensor from ``N(mean, std**2)``.

    Raises
    ------
    TensorOpError
        ``std`` is negative.
    """

    if std < 0:
        raise TensorOpError(f"std must not be negative, got {std}")

    out = torch.empty(tuple(shape), dtype=dtype)
    if std == 0:
        return out.fill_(mean)
    return out.normal_(mean, std, generator=rng.generator)


def finite_diff_grad(
    f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: Optional[float] = None
) -> torch.Tensor:
    """
    Central-difference gradient of a scalar function.

    Parameters
    ----------
    f: Callable[[torch.Tensor], torch.Tensor]
        Deterministic scalar function of ``x``.
    x: torch.Tensor
        Point to differentiate at; must be float64.
    h: float, optional
        Fixed step. When omitted each element uses ``max(1e-3 * |x_i|, 1e-5)``.

    Raises
    ------
    TensorOpError
        ``x`` is not float64.
    """

    if x.dtype != torch.float64:
        raise TensorOpError(f"finite differences need float64, got {x.dtype}")

    base = x.detach().clone()
    grad = torch.zeros_like(base)
    flat = base.view(-1)
    out = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            step = h if h is not None else max(1e-3 * abs(orig), 1e-5)
            flat[i] = orig + step
            plus = float(f(base))
            flat[i] = orig - step
            minus = float(f(base))
            flat[i] = orig
            out[i] = (plus - minus) / (2 * step)

    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> float:
    """``max|a - b| / max(max|a|, max|b|, floor)``, the gradient-check metric."""

    scale = max(float(a.abs().max()), float(b.abs().max()), floor)
    return float((a - b).abs().max()) / scale


def perplexity(loss: float) -> float:
    """``exp(loss)``, infinite when it overflows."""

    try:
        return math.exp(loss)
    except OverflowError:
        return math.inf
