from __future__ import annotations

import contextlib
import hashlib

import numpy as np
import torch
import torch.nn as nn


def kaiming_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@contextlib.contextmanager
def frozen(*modules: nn.Module):
    """Temporarily stop gradients from reaching the parameters of ``modules``.

    Parameters keep ``grad is None`` inside the block, which is how the
    adversarial losses treat the opposing network as fixed.
    """
    params = [p for m in modules if m is not None for p in m.parameters()]
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad_(flag)


def to_tensor(images) -> torch.Tensor:
    """Stack ``Image`` values (or HxWxC arrays) into an NxCxHxW float tensor."""
    arrays = [np.asarray(getattr(img, "values", img), dtype=np.float32) for img in images]
    return torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).contiguous()


def from_tensor(batch: torch.Tensor) -> list[np.ndarray]:
    return [x for x in batch.detach().permute(0, 2, 3, 1).cpu().numpy()]


def checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
