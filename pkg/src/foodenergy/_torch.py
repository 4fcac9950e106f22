"""Small torch helpers shared by the encoder and the regression decoders."""
from __future__ import annotations

import contextlib
import hashlib
import os
import zlib

import numpy as np
import torch

DEVICE_ENV = "FOODENERGY_DEVICE"


def resolve_device(device=None) -> torch.device:
    name = device or os.environ.get(DEVICE_ENV) or "cpu"
    return torch.device(name)


def derive_seed(seed: int, component: str) -> int:
    """Expand one top-level seed into an independent per-component seed."""
    state = np.random.SeedSequence([int(seed), zlib.crc32(component.encode())]).generate_state(1)
    return int(state[0])


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Single-threaded, deterministic kernels for the duration of the block."""
    if not enabled:
        yield
        return
    threads = torch.get_num_threads()
    was_deterministic = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(was_deterministic)


def state_checksum(module: torch.nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def cpu_state(module: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}
