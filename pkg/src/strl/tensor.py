"""Dense float64 primitives on top of torch autograd.

The functions here are thin, shape-checked wrappers.  They exist so the
network code states its shape contracts in one place and so gradient checks
have a single entry point (:func:`finite_difference_check`), which uses only
forward evaluations and is therefore independent of autograd.
"""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

DTYPE = torch.float64


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE, requires_grad=requires_grad)


def _check(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check(a.dim() >= 1 and b.dim() >= 1 and a.shape[-1] == b.shape[-2 if b.dim() > 1 else 0],
           "matmul", a.shape, b.shape)
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # row/column vectors broadcast, nothing else does
    ok = a.shape == b.shape or b.dim() == 1 and a.shape[-1:] == b.shape or (
        b.dim() == a.dim() and all(x == y or y == 1 for x, y in zip(a.shape, b.shape))
    )
    _check(ok, "add", a.shape, b.shape)
    return a + b


def hadamard(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check(a.shape == b.shape, "hadamard", a.shape, b.shape)
    return a * b


def concat_rows(parts: Iterable[torch.Tensor]) -> torch.Tensor:
    parts = list(parts)
    _check(len({p.shape[1:] for p in parts}) == 1, "concat_rows", *[p.shape for p in parts])
    return torch.cat(parts, dim=0)


def concat_cols(parts: Iterable[torch.Tensor]) -> torch.Tensor:
    parts = list(parts)
    _check(len({p.shape[:-1] for p in parts}) == 1, "concat_cols", *[p.shape for p in parts])
    return torch.cat(parts, dim=-1)


sigmoid = torch.sigmoid
tanh = torch.tanh
relu = torch.relu


def leaky_relu(x: torch.Tensor, slope: float = 0.01) -> torch.Tensor:
    return torch.nn.functional.leaky_relu(x, negative_slope=slope)


def elu(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.elu(x)


def softmax_rows(x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Row softmax over the last axis; masked-out entries (mask False) are exactly 0."""
    if mask is None:
        z = x - x.detach().amax(dim=-1, keepdim=True)
        e = torch.exp(z)
        return e / e.sum(dim=-1, keepdim=True)
    mask = mask.to(torch.bool)
    _check(mask.shape == x.shape[-mask.dim():], "softmax_rows mask", x.shape, mask.shape)
    if not bool(mask.any(dim=-1).all()):
        raise ValueError("softmax_rows: every row needs at least one unmasked entry")
    filled = x.masked_fill(~mask, -math.inf)
    z = filled - filled.detach().amax(dim=-1, keepdim=True)
    e = torch.exp(z)  # exp(-inf) == 0 exactly
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Normalise the last axis to zero mean, unit (biased) variance; no affine terms."""
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps)


def dropout(x: torch.Tensor, rate: float, generator: torch.Generator | None = None,
            train: bool = False) -> torch.Tensor:
    """Inverted dropout; identity when ``train`` is false or ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def sum(x: torch.Tensor) -> torch.Tensor:  # noqa: A001 - mirrors the primitive name
    return x.sum()


def mean(x: torch.Tensor) -> torch.Tensor:
    return x.mean()


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check(pred.shape == target.shape, "mse", pred.shape, target.shape)
    return ((pred - target) ** 2).mean()


def backward(loss: torch.Tensor) -> None:
    """Reverse accumulation into ``.grad`` of every tracked leaf.

    Repeated calls without zeroing accumulate, as in torch.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


def finite_difference_check(
    f: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    h: float = 1e-5,
    deterministic_probe: bool = True,
) -> float:
    """Max over entries of |analytic - central difference| / max(1, |analytic|).

    ``f`` must be a pure closure over ``params`` returning a scalar.  It is
    evaluated twice up front; differing results (e.g. unseeded dropout) are
    rejected before any gradient is compared.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    if deterministic_probe:
        with torch.no_grad():
            if not torch.equal(f(), f()):
                raise ValueError("finite_difference_check: f is not deterministic")
    for p in params:
        p.grad = None
    out = f()
    if not torch.isfinite(out).all():
        raise NumericalError("non-finite output")
    backward(out)
    worst = 0.0
    with torch.no_grad():
        for p in params:
            analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            flat = p.data.view(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + h
                up = f().item()
                flat[idx] = orig - h
                down = f().item()
                flat[idx] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericalError("non-finite output under perturbation")
                numeric = (up - down) / (2 * h)
                a = analytic.view(-1)[idx].item()
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def xavier_uniform(shape: tuple[int, ...], seed: int) -> torch.Tensor:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) from its own generator."""
    fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(shape, generator=g, dtype=DTYPE) * 2.0 - 1.0) * bound


def derive_seed(master: int, name: str) -> int:
    """Stable per-parameter seed from a master seed and a parameter name."""
    digest = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor], manifest: Mapping) -> None:
    """Write named float64 arrays plus a JSON manifest to one ``.npz`` file."""
    path = Path(path)
    arrays = {f"t/{k}": v.detach().cpu().numpy().astype(np.float64) for k, v in tensors.items()}
    arrays["manifest"] = np.frombuffer(json.dumps(dict(manifest), sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        manifest = json.loads(bytes(data["manifest"]).decode())
        tensors = {k[2:]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("t/")}
    return tensors, manifest
