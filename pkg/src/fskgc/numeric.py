"""Tensor ops, reverse-mode gradients, optimizer and checkpoint container.

Tensors are ``torch.Tensor``; autograd supplies reverse-mode differentiation.
The ops here add the shape checks and masking semantics the encoders rely on.
Gradients are verified independently by :func:`finite_difference_check`.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def _require(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


# forward ops -------------------------------------------------------------


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _require(a.dim() >= 1 and b.dim() >= 1 and a.shape[-1] == b.shape[-2 if b.dim() > 1 else 0], "matmul", a.shape, b.shape)
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"add: incompatible shapes {tuple(a.shape)}, {tuple(b.shape)}") from None
    return a + b


def elementwise_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"elementwise_mul: incompatible shapes {tuple(a.shape)}, {tuple(b.shape)}") from None
    return a * b


def scale(x: torch.Tensor, c: float) -> torch.Tensor:
    return x * c


def concat(xs: Sequence[torch.Tensor], axis: int = -1) -> torch.Tensor:
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        _require(len(other) == len(ref), "concat", *[t.shape for t in xs])
        ax = axis % len(ref)
        _require(all(o == r for i, (o, r) in enumerate(zip(other, ref)) if i != ax), "concat", *[t.shape for t in xs])
    return torch.cat(list(xs), dim=axis)


def slice_rows(x: torch.Tensor, index, axis: int = 0) -> torch.Tensor:
    return x.index_select(axis, torch.as_tensor(index, dtype=torch.long).reshape(-1))


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    return F.embedding(ids, table)


def mean_over_axis(x: torch.Tensor, axis: int) -> torch.Tensor:
    return x.mean(dim=axis)


def total(x: torch.Tensor) -> torch.Tensor:
    return x.sum()


def softmax_masked(logits: torch.Tensor, mask: Optional[torch.Tensor] = None, axis: int = -1) -> torch.Tensor:
    """Softmax over ``axis`` giving exactly zero probability where ``mask`` is False."""
    if mask is None:
        return torch.softmax(logits, dim=axis)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    try:
        mask = mask.expand_as(logits)
    except RuntimeError:
        raise ShapeError(f"softmax_masked: incompatible shapes {tuple(logits.shape)}, {tuple(mask.shape)}") from None
    if not bool(mask.any(dim=axis).all()):
        raise NumericError("softmax_masked: fully masked axis")
    filled = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(filled, dim=axis).masked_fill(~mask, 0.0)


def softmax_masked_or_zero(logits: torch.Tensor, mask: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Like :func:`softmax_masked` but fully masked rows yield all zeros."""
    mask = torch.as_tensor(mask, dtype=torch.bool).expand_as(logits)
    any_real = mask.any(dim=axis, keepdim=True)
    safe = mask | ~any_real
    probs = torch.softmax(logits.masked_fill(~safe, float("-inf")), dim=axis)
    return probs.masked_fill(~mask, 0.0)


def layer_norm(x: torch.Tensor, gain: Optional[torch.Tensor] = None, bias: Optional[torch.Tensor] = None, eps: float = 1e-5) -> torch.Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply gain and bias."""
    if gain is not None:
        _require(gain.shape[-1] == x.shape[-1], "layer_norm", x.shape, gain.shape)
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def leaky_relu(x: torch.Tensor, slope: float = 0.01) -> torch.Tensor:
    return torch.where(x >= 0, x, x * slope)


def dropout(x: torch.Tensor, rate: float, generator: Optional[torch.Generator], train: bool) -> torch.Tensor:
    if not train or rate <= 0.0:
        return x
    if rate >= 1.0:
        return torch.zeros_like(x)
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood; zero rows give a zero loss."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    _require(logits.dim() == 2 and labels.shape == (logits.shape[0],), "cross_entropy", logits.shape, labels.shape)
    return F.cross_entropy(logits, labels)


# gradients ----------------------------------------------------------------


def backward(root: torch.Tensor) -> None:
    """Accumulate d(root)/d(param) into every reachable parameter's ``.grad``."""
    if root.numel() != 1 or root.dim() != 0:
        raise ShapeError(f"backward: root must be a scalar, got shape {tuple(root.shape)}")
    if not torch.isfinite(root):
        raise NumericError(f"backward: non-finite root {root.item()}")
    root.backward()


def finite_difference_check(
    fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    h: float = 1e-5,
    floor: float = 1e-8,
) -> Dict[str, float]:
    """Compare autograd gradients of scalar ``fn()`` with central differences.

    Returns, per parameter, ``max|analytic - numeric| / max(max|numeric|, floor)``.
    Parameters should be float64 for a meaningful check.
    """
    for p in params.values():
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}
    errors = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            numeric = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * h)
            a = analytic[name].view(-1)
            denom = max(numeric.abs().max().item() if numeric.numel() else 0.0, floor)
            errors[name] = (a - numeric).abs().max().item() / denom if numeric.numel() else 0.0
    for p in params.values():
        p.grad = None
    return errors


# optimizer ------------------------------------------------------------------


class Adam:
    """Adam with bias correction, decoupled weight decay and step-wise lr decay.

    Each step applies ``w <- w - lr * weight_decay * w`` before the Adam delta, then
    zeroes the gradients. Every ``decay_interval`` steps the lr is multiplied by
    ``decay_factor``.
    """

    def __init__(
        self,
        params: Iterable[torch.nn.Parameter],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decay_factor: float = 1.0,
        decay_interval: int = 0,
    ):
        self.params = [p for p in params if p.requires_grad]
        self.base_lr = lr
        self.decay_factor = decay_factor
        self.decay_interval = decay_interval
        self.opt = torch.optim.AdamW(self.params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        self.step_count = 0

    @property
    def lr(self) -> float:
        return self.opt.param_groups[0]["lr"]

    def step(self) -> None:
        self.opt.step()
        self.opt.zero_grad(set_to_none=False)
        self.step_count += 1
        if self.decay_interval and self.step_count % self.decay_interval == 0:
            for group in self.opt.param_groups:
                group["lr"] *= self.decay_factor

    def zero_grad(self) -> None:
        self.opt.zero_grad(set_to_none=False)

    def state_tensors(self, names: Mapping[int, str]) -> Dict[str, torch.Tensor]:
        """Flatten moment buffers to ``{"<param>.exp_avg": tensor, ...}`` for checkpoints."""
        out = {}
        for p in self.params:
            st = self.opt.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            out[f"{name}.exp_avg"] = st["exp_avg"]
            out[f"{name}.exp_avg_sq"] = st["exp_avg_sq"]
            out[f"{name}.step"] = torch.as_tensor(st["step"], dtype=torch.float64).reshape(1)
        return out

    def load_state_tensors(self, tensors: Mapping[str, torch.Tensor], names: Mapping[int, str]) -> None:
        for p in self.params:
            name = names[id(p)]
            if f"{name}.exp_avg" not in tensors:
                continue
            self.opt.state[p] = {
                "step": torch.tensor(float(tensors[f"{name}.step"][0])),
                "exp_avg": tensors[f"{name}.exp_avg"].to(p.dtype).clone(),
                "exp_avg_sq": tensors[f"{name}.exp_avg_sq"].to(p.dtype).clone(),
            }


# checkpoint container ------------------------------------------------------

_MAGIC = b"FSKGCKPT"
_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def write_tensors(path: str, tensors: Mapping[str, torch.Tensor], meta: Optional[dict] = None) -> None:
    """Write a versioned binary container: magic, version, JSON header, raw little-endian data.

    Output bytes depend only on the inputs, so identical states give identical files.
    """
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        code = _DTYPES.get(t.dtype)
        if code is None:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(code, copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_tensors(path: str) -> Tuple[Dict[str, torch.Tensor], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    out = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(data[start : start + e["nbytes"]], dtype=e["dtype"]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.copy())
    return out, header["meta"]
