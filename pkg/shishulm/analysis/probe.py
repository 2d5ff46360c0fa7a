"""
Attention linearity probe.

For every decoder layer ``i`` the probe records ``x_ij`` (the block input) and ``z_ij`` (the
output of input norm + self-attention, before the residual add) at each prompt position and each
greedily generated token. From those it fits

* a linear map ``W_i`` minimizing ``sum_j ||W_i x_ij - z_ij||**2``,
* the scalar multiple of identity ``alpha * I`` closest to ``W'_i = W_i + I``,

and measures how close the residual output ``x + z`` stays to the input direction.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
from loguru import logger

from ..model.transformer import ShishuLM
from ..numerics import ops
from ..numerics.lstsq import LstsqResult, lstsq
from ..protocols.csv_report import CsvReport

DEFAULT_PROMPT_LENGTHS = [54, 118, 246, 502]
DEFAULT_GENERATED = 10
SCALE_ALPHAS = [0.5, 2.0, 10.0, 100.0]

REPORT_COLUMNS = [
    "layer",
    "rows_fit",
    "linear_mse",
    "cosine_mean",
    "cosine_mode",
    "alpha",
    "scalar_mse",
]
NO_ATTENTION_MARKER = "no attention layers"


class ProbeError(Exception):
    """Error with a probe"""


class CosineMode(Enum):
    """What the input is compared against."""

    EMPIRICAL = "empirical"
    """The recorded residual output ``x + z``."""
    FITTED = "fitted"
    """``(W + I) x`` from the fitted map."""


class RowWindow(Enum):
    """Which captured rows an analysis uses."""

    PROMPT = "prompt"
    GENERATED = "generated"
    ALL = "all"


@dataclass
class IoCapture:
    """Captured rows of every decoder layer, float64, ``prompt_len + generated`` rows each."""

    prompt_len: int
    generated: int
    x: Dict[int, torch.Tensor] = field(default_factory=dict)
    """Block inputs per decoder layer."""
    z: Dict[int, torch.Tensor] = field(default_factory=dict)
    """Norm + attention outputs per decoder layer."""
    y: Dict[int, torch.Tensor] = field(default_factory=dict)
    """Post-residual activations (``x + z``) as seen by the post-attention norm."""
    tokens: List[int] = field(default_factory=list)
    """Generated tokens."""

    @property
    def layers(self) -> List[int]:
        """list: Captured decoder layer indices."""

        return sorted(self.x)

    def rows(self, layer: int, window: RowWindow) -> Tuple[torch.Tensor, torch.Tensor]:
        """Get the ``(X, Z)`` rows of a layer for a window."""

        if layer not in self.x:
            raise ProbeError(f"layer {layer} was not captured")
        if window == RowWindow.PROMPT:
            sl = slice(0, self.prompt_len)
        elif window == RowWindow.GENERATED:
            sl = slice(self.prompt_len, self.prompt_len + self.generated)
        else:
            sl = slice(0, self.prompt_len + self.generated)
        return self.x[layer][sl], self.z[layer][sl]


def collect_io_pairs(
    model: ShishuLM, prompt: Union[Sequence[int], torch.Tensor], generated: int
) -> IoCapture:
    """
    Prefill a prompt, then greedily decode ``generated`` tokens, recording each decoder layer.

    ShishuMLP layers have no attention sub-block and are not recorded. The model is only read.

    Raises
    ------
    ProbeError
        Empty prompt, negative ``generated`` or more positions than ``max_seq_len``.
    """

    tokens = torch.as_tensor(prompt, dtype=torch.long)
    if tokens.dim() != 1 or tokens.numel() == 0:
        raise ProbeError("the probe needs a non-empty 1-D prompt")
    if generated < 0:
        raise ProbeError(f"cannot generate {generated} tokens")
    if tokens.numel() + generated > model.config.max_seq_len:
        raise ProbeError(
            f"{tokens.numel()} prompt + {generated} generated tokens exceed max_seq_len "
            f"{model.config.max_seq_len}"
        )

    rows: Dict[str, Dict[int, List[torch.Tensor]]] = {"x": {}, "z": {}, "y": {}}

    def keep(kind: str, layer: int, value: torch.Tensor):
        # batch 1, rows pooled over positions
        rows[kind].setdefault(layer, []).append(value.detach()[0].to(torch.float64))

    handles = []
    for layer, block in model.decoder_blocks():
        handles.append(
            block.register_forward_pre_hook(lambda m, args, layer=layer: keep("x", layer, args[0]))
        )
        handles.append(
            block.attention.register_forward_hook(
                lambda m, args, out, layer=layer: keep("z", layer, out)
            )
        )
        handles.append(
            block.post_attn_norm.register_forward_pre_hook(
                lambda m, args, layer=layer: keep("y", layer, args[0])
            )
        )

    capture = IoCapture(tokens.numel(), generated)
    try:
        with torch.no_grad():
            cache = model.new_cache(1)
            logits = model(tokens[None, :], cache)[:, -1]
            for _ in range(generated):
                token = int(torch.argmax(logits[0]))
                capture.tokens.append(token)
                logits = model.decode_step(torch.tensor([token]), cache)
    finally:
        for handle in handles:
            handle.remove()

    for kind, target in (("x", capture.x), ("z", capture.z), ("y", capture.y)):
        for layer, parts in rows[kind].items():
            target[layer] = torch.cat(parts, dim=0)

    logger.debug(
        f"captured {len(capture.layers)} decoder layers, {capture.prompt_len} + "
        f"{capture.generated} rows"
    )
    return capture


def fit_linear(cap: IoCapture, layer: int, include_generated: bool = False) -> LstsqResult:
    """
    Fit ``W`` with ``W x_j ~ z_j`` over the prompt rows (and generated rows if asked).

    Raises
    ------
    ProbeError
        No rows to fit.
    """

    window = RowWindow.ALL if include_generated else RowWindow.PROMPT
    x, z = cap.rows(layer, window)
    if x.shape[0] == 0:
        raise ProbeError(f"no rows to fit for layer {layer}")
    return lstsq(x, z)


@dataclass
class CosineResult:
    """Mean cosine similarity between inputs and residual outputs."""

    mean: Optional[float]
    """``None`` when every row was skipped."""
    mode: CosineMode
    window: RowWindow
    rows: int
    skipped: int


def residual_cosine(
    cap: IoCapture,
    layer: int,
    weight: Optional[torch.Tensor] = None,
    window: RowWindow = RowWindow.GENERATED,
) -> CosineResult:
    """
    Average cosine similarity between each input ``x`` and its residual output.

    Without ``weight`` the output is the recorded ``x + z`` (empirical mode); with a fitted
    ``weight`` it is ``(weight + I) x`` (fitted mode). The generated-token window falls back to
    the prompt rows when nothing was generated. Rows where either vector has zero norm are skipped
    and counted.
    """

    if window == RowWindow.GENERATED and cap.generated == 0:
        window = RowWindow.PROMPT
    x, z = cap.rows(layer, window)
    if x.shape[0] == 0:
        raise ProbeError(f"no rows for layer {layer}")

    if weight is None:
        mode = CosineMode.EMPIRICAL
        out = x + z
    else:
        mode = CosineMode.FITTED
        out = x @ weight.to(x.dtype).T + x

    dots = (x * out).sum(dim=-1)
    norms = x.norm(dim=-1) * out.norm(dim=-1)
    ok = norms > 0
    skipped = int((~ok).sum())
    if skipped:
        logger.warning(f"layer {layer}: skipped {skipped} zero-norm rows")

    mean = None
    if bool(ok.any()):
        cosines = (dots[ok] / norms[ok]).clamp(-1.0, 1.0)
        mean = float(cosines.mean())
    return CosineResult(mean, mode, window, int(ok.sum()), skipped)


def fit_scalar_identity(w_prime: torch.Tensor) -> Tuple[float, float]:
    """
    Closest scalar multiple of identity to a square matrix, in Frobenius norm.

    Returns
    -------
    tuple
        ``(alpha, mse)`` with ``alpha = trace(W') / d`` and ``mse = ||alpha I - W'||_F**2 / d**2``.
    """

    if w_prime.dim() != 2 or w_prime.shape[0] != w_prime.shape[1] or w_prime.shape[0] == 0:
        raise ProbeError(f"need a non-empty square matrix, got shape {tuple(w_prime.shape)}")

    d = w_prime.shape[0]
    w = w_prime.to(torch.float64)
    alpha = float(torch.trace(w)) / d
    diff = alpha * torch.eye(d, dtype=torch.float64) - w
    return alpha, float(diff.pow(2).sum()) / (d * d)


def scale_invariance_report(x: torch.Tensor, alphas: Sequence[float], eps: float) -> float:
    """
    Largest ``max|rmsnorm(alpha x) - rmsnorm(x)|`` over the given scales (unit norm weight).

    Raises
    ------
    ProbeError
        An ``alpha`` is not positive.
    """

    if any(a <= 0 for a in alphas):
        raise ProbeError(f"scales must be positive, got {list(alphas)}")

    weight = torch.ones(x.shape[-1], dtype=x.dtype)
    base = ops.rmsnorm(x, weight, eps)
    deviation = 0.0
    for alpha in alphas:
        scaled = ops.rmsnorm(x * alpha, weight, eps)
        deviation = max(deviation, float((scaled - base).abs().max()))
    return deviation


@dataclass
class LayerProbe:
    """One report row."""

    layer: int
    rows_fit: int
    linear_mse: float
    cosine_mean: Optional[float]
    cosine_mode: CosineMode
    alpha: float
    scalar_mse: float

    def to_row(self) -> list:
        """Values in ``REPORT_COLUMNS`` order."""

        return [
            self.layer,
            self.rows_fit,
            self.linear_mse,
            self.cosine_mean,
            self.cosine_mode.value,
            self.alpha,
            self.scalar_mse,
        ]


@dataclass
class ProbeReport:
    """Per decoder layer probe results for one prompt."""

    prompt_len: int
    generated: int
    model_id: str
    layers: List[LayerProbe] = field(default_factory=list)
    cosine_window: RowWindow = RowWindow.GENERATED

    @property
    def no_attention(self) -> bool:
        """bool: The model has no decoder layer to probe."""

        return not self.layers

    def to_csv(self, header: Optional[Dict] = None) -> CsvReport:
        """Make the CSV report."""

        provenance = {
            "model": self.model_id,
            "prompt_len": str(self.prompt_len),
            "generated": str(self.generated),
            "cosine_window": self.cosine_window.value,
            "scalar_mse": "mean over d*d entries",
        }
        provenance.update(header or {})
        if self.no_attention:
            provenance["note"] = NO_ATTENTION_MARKER
        report = CsvReport(list(REPORT_COLUMNS), provenance=provenance)
        for layer in self.layers:
            report.add_row(layer.to_row())
        return report


def probe_model(
    model: ShishuLM,
    prompt: Union[Sequence[int], torch.Tensor],
    generated: int = DEFAULT_GENERATED,
    include_generated: bool = False,
    cosine_mode: CosineMode = CosineMode.EMPIRICAL,
    model_id: str = "model",
    capture: Optional[IoCapture] = None,
) -> ProbeReport:
    """Capture a prompt and build the report of every decoder layer."""

    if capture is None:
        capture = collect_io_pairs(model, prompt, generated)
    report = ProbeReport(capture.prompt_len, capture.generated, model_id)
    if not capture.layers:
        logger.warning(f"{model_id}: {NO_ATTENTION_MARKER}")
        return report

    for layer in capture.layers:
        fit = fit_linear(capture, layer, include_generated)
        weight = fit.weight if cosine_mode == CosineMode.FITTED else None
        cosine = residual_cosine(capture, layer, weight)
        report.cosine_window = cosine.window
        d = fit.weight.shape[0]
        alpha, scalar_mse = fit_scalar_identity(fit.weight + torch.eye(d, dtype=fit.weight.dtype))
        rows_fit = capture.prompt_len + (capture.generated if include_generated else 0)
        report.layers.append(
            LayerProbe(layer, rows_fit, fit.mse, cosine.mean, cosine.mode, alpha, scalar_mse)
        )

    return report


def scale_invariance_rows(
    cap: IoCapture, eps_values: Sequence[float], alphas: Sequence[float] = SCALE_ALPHAS
) -> List[list]:
    """``[layer, eps, max_deviation]`` rows over each layer's captured block inputs."""

    out = []
    for layer in cap.layers:
        x = cap.x[layer]
        x = x[x.norm(dim=-1) > 0]
        if x.shape[0] == 0:
            continue
        for eps in eps_values:
            out.append([layer, eps, scale_invariance_report(x, alphas, eps)])
    return out
