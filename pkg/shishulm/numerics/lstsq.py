"""Least-squares fit of a linear map between two sets of row vectors."""

from dataclasses import dataclass

import torch
from loguru import logger

from .ops import TensorOpError

RIDGE_LAMBDA = 1e-8
COND_LIMIT = 1e12


@dataclass
class LstsqResult:
    """Result of :py:func:`lstsq`."""

    weight: torch.Tensor
    """Fitted map ``W`` of shape ``[d_out, d_in]`` with ``W @ x_j ~ z_j``."""
    mse: float
    """Mean of the squared residual entries over the fitted rows."""
    ridge: bool = False
    """The Gram matrix was near-singular and a ridge term was added."""
    degenerate: bool = False
    """``X`` had an all-zero column; the minimum-norm solution was returned."""


def lstsq(x: torch.Tensor, z: torch.Tensor) -> LstsqResult:
    """
    Find ``W`` minimizing ``sum_j ||W x_j - z_j||**2``.

    Solves the normal equations ``(X^T X) W^T = X^T Z``. When the Gram matrix condition estimate
    is above ``COND_LIMIT``, ``RIDGE_LAMBDA * I`` is added to it. When ``X`` has an all-zero
    column the pseudo-inverse (minimum-norm) solution is used instead.

    Parameters
    ----------
    x: torch.Tensor
        Inputs, one row per sample, shape ``[N, d_in]``.
    z: torch.Tensor
        Targets, shape ``[N, d_out]``.

    Raises
    ------
    TensorOpError
        Shapes are not 2-D, row counts differ or there are no rows.
    """

    if x.dim() != 2 or z.dim() != 2:
        raise TensorOpError(f"lstsq needs 2-D inputs, got {x.dim()}-D and {z.dim()}-D")
    if x.shape[0] != z.shape[0]:
        raise TensorOpError(f"lstsq row counts differ: {x.shape[0]} vs {z.shape[0]}")
    if x.shape[0] == 0:
        raise TensorOpError("lstsq needs at least one row")

    ridge = False
    degenerate = bool((x == 0).all(dim=0).any())
    if degenerate:
        logger.warning("lstsq input has an all-zero column, returning minimum-norm solution")
        weight_t = torch.linalg.pinv(x) @ z
    else:
        gram = x.T @ x
        rhs = x.T @ z
        cond = float(torch.linalg.cond(gram))
        if not cond < COND_LIMIT:  # also catches inf/nan
            logger.debug(f"lstsq gram condition {cond:.3e}, adding ridge {RIDGE_LAMBDA}")
            ridge = True
            gram = gram + RIDGE_LAMBDA * torch.eye(gram.shape[0], dtype=gram.dtype)
        weight_t = torch.linalg.solve(gram, rhs)

    residual = x @ weight_t - z
    mse = float(residual.pow(2).mean())

    return LstsqResult(weight=weight_t.T.contiguous(), mse=mse, ridge=ridge, degenerate=degenerate)
