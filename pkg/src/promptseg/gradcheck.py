"""Gradient verification: analytic gradients against central finite
differences on scalar-valued functions.

Checks run in float64; float32 rounding alone can exceed the tolerance that
actually distinguishes a correct backward pass from a broken one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    num_probes: int
    passed: bool
    tolerance: float

    def to_json(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "name": self.name,
            "num_probes": self.num_probes,
            "passed": self.passed,
            "tolerance": self.tolerance,
        }


def central_difference(f, x: torch.Tensor, index: tuple, h: float = 1e-5) -> float:
    """(f(x+h e_i) - f(x-h e_i)) / 2h at the given flat-or-multi index."""
    x_plus = x.detach().clone()
    x_minus = x.detach().clone()
    x_plus[index] += h
    x_minus[index] -= h
    with torch.no_grad():
        return (float(f(x_plus)) - float(f(x_minus))) / (2.0 * h)


def relative_error(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric), 1e-12)
    return abs(analytic - numeric) / denom


def check_input_grad(
    f,
    x: torch.Tensor,
    num_probes: int = 10,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
    name: str = "grad",
) -> GradCheckResult:
    """Compare autograd d f/d x against central differences at randomly
    probed coordinates of x. f must map a tensor to a scalar tensor."""
    assert x.dtype == torch.float64, "gradient checks require float64 inputs"
    x = x.detach().clone().requires_grad_(True)
    y = f(x)
    y.backward()
    grad = x.grad.detach()

    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(x.numel(), size=min(num_probes, x.numel()), replace=False)
    worst = 0.0
    for fi in flat_idx:
        index = np.unravel_index(int(fi), x.shape)
        numeric = central_difference(f, x, index, h=h)
        analytic = float(grad[index])
        worst = max(worst, relative_error(analytic, numeric))
    return GradCheckResult(
        name=name,
        max_rel_error=worst,
        num_probes=len(flat_idx),
        passed=worst < tolerance,
        tolerance=tolerance,
    )


def _jitter_params(module: torch.nn.Module, scale: float = 0.05, seed: int = 7) -> None:
    """Move weights off their init point; some inits are gradient-degenerate
    (unit LayerNorm weights make channel sums constant)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def _check_total_loss(num_probes: int, h: float, tol: float) -> GradCheckResult:
    from promptseg.losses import LossConfig, total_loss

    gen = torch.Generator().manual_seed(1)
    # interior probabilities: away from the BCE clamp so the loss is smooth
    probs = 0.2 + 0.6 * torch.rand(9, 9, generator=gen, dtype=torch.float64)
    target = (torch.rand(9, 9, generator=gen) < 0.4).double()
    cfg = LossConfig()

    def f(x):
        return total_loss(x, target, cfg)

    return check_input_grad(f, probs, num_probes=num_probes, h=h,
                            tolerance=tol, name="total_loss")


def _check_encoder(num_probes: int, h: float, tol: float) -> GradCheckResult:
    from promptseg.encoder import EncoderConfig, ImageEncoder

    torch.manual_seed(2)
    enc = ImageEncoder(EncoderConfig(
        image_size=16, patch_size=8, embed_dim=32, depth=3, heads=2,
        neck_dim=16, num_tap_layers=2,
    )).double()
    _jitter_params(enc)
    gen = torch.Generator().manual_seed(2)
    x = torch.rand(1, 1, 16, 16, generator=gen, dtype=torch.float64)
    readout = torch.randn(1, 16, 2, 2, generator=gen, dtype=torch.float64)

    def f(inp):
        return (enc(inp).fused * readout).sum()

    return check_input_grad(f, x, num_probes=num_probes, h=h,
                            tolerance=tol, name="encoder")


def _check_cross_fuse(num_probes: int, h: float, tol: float) -> GradCheckResult:
    from promptseg.textfusion import ImageTextEncoder, TextFusionConfig

    torch.manual_seed(3)
    enc = ImageTextEncoder(TextFusionConfig()).double()
    _jitter_params(enc)
    gen = torch.Generator().manual_seed(3)
    text = torch.rand(4, 64, generator=gen, dtype=torch.float64)
    img = torch.rand(9, 64, generator=gen, dtype=torch.float64)
    readout = torch.randn(4, 32, generator=gen, dtype=torch.float64)

    def f(t):
        return (enc.cross_fuse(t, img).tokens * readout).sum()

    return check_input_grad(f, text, num_probes=num_probes, h=h,
                            tolerance=tol, name="cross_fuse")


def _check_decoder(num_probes: int, h: float, tol: float) -> GradCheckResult:
    from promptseg.decoder import DecoderConfig, MaskDecoder

    torch.manual_seed(4)
    dec = MaskDecoder(DecoderConfig(grid_size=4)).double()
    _jitter_params(dec)
    gen = torch.Generator().manual_seed(4)
    fused = torch.rand(32, 4, 4, generator=gen, dtype=torch.float64)
    tokens = torch.rand(3, 32, generator=gen, dtype=torch.float64)
    dense = torch.rand(32, 4, 4, generator=gen, dtype=torch.float64)
    readout = torch.randn(16, 16, generator=gen, dtype=torch.float64)

    def f(x):
        return (dec(x, tokens, dense) * readout).sum()

    return check_input_grad(f, fused, num_probes=num_probes, h=h,
                            tolerance=tol, name="decoder")


REGISTERED_CHECKS = {
    "total_loss": _check_total_loss,
    "encoder": _check_encoder,
    "cross_fuse": _check_cross_fuse,
    "decoder": _check_decoder,
}


def run_registered_checks(
    names: list[str] | None = None,
    num_probes: int = 10,
    h: float = 1e-5,
    tolerance: float = 1e-4,
) -> list[GradCheckResult]:
    """Run the named component checks (all four by default)."""
    names = names or sorted(REGISTERED_CHECKS)
    unknown = set(names) - set(REGISTERED_CHECKS)
    if unknown:
        raise KeyError(f"unregistered components: {sorted(unknown)}")
    return [REGISTERED_CHECKS[n](num_probes, h, tolerance) for n in names]


def check_param_grad(
    f,
    module: torch.nn.Module,
    num_probes: int = 10,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
    name: str = "grad",
) -> GradCheckResult:
    """Same as check_input_grad but probes module parameters: f() closes
    over the module and returns a scalar."""
    params = [p for p in module.parameters() if p.requires_grad]
    assert all(p.dtype == torch.float64 for p in params)
    module.zero_grad(set_to_none=True)
    y = f()
    y.backward()

    sizes = [p.numel() for p in params]
    total = int(sum(sizes))
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(total, size=min(num_probes, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for fi in flat_idx:
        pi = int(np.searchsorted(offsets, int(fi), side="right") - 1)
        local = int(fi) - int(offsets[pi])
        index = np.unravel_index(local, params[pi].shape)
        analytic = float(params[pi].grad[index]) if params[pi].grad is not None else 0.0

        with torch.no_grad():
            orig = float(params[pi][index])
            params[pi][index] = orig + h
            f_plus = float(f())
            params[pi][index] = orig - h
            f_minus = float(f())
            params[pi][index] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        worst = max(worst, relative_error(analytic, numeric))
    return GradCheckResult(
        name=name,
        max_rel_error=worst,
        num_probes=len(flat_idx),
        passed=worst < tolerance,
        tolerance=tolerance,
    )
