"""Parameter import and export through NTF files."""
from __future__ import annotations

import numpy as np

from . import ntf
from .models import ParamStore


class WeightsError(ValueError):
    pass


def export_weights(params: ParamStore, path, names=None) -> list[str]:
    tensors = params.tensors()
    if names is not None:
        tensors = {k: tensors[k] for k in names}
    ntf.save(path, tensors)
    return list(tensors)


def backbone_names(params: ParamStore) -> list[str]:
    return [k for k, g in params.groups.items() if g == "backbone"]


def import_weights(path, params: ParamStore, policy: str = "partial") -> list[str]:
    """Copy every tensor in ``path`` into ``params``; returns the names set.

    ``strict`` requires the file to cover every stored tensor; ``partial``
    allows the store to hold extra entries (e.g. a multipath head on top of
    backbone-only weights). Nothing is modified unless the whole file checks out.
    """
    if policy not in ("partial", "strict"):
        raise ValueError(f"unknown import policy {policy!r}")
    tensors = ntf.load(path)
    current = params.tensors()
    for name, arr in tensors.items():
        if name not in current:
            raise WeightsError(f"tensor {name!r} in {path} has no counterpart in the model")
        if arr.shape != current[name].shape:
            raise WeightsError(f"tensor {name!r}: file shape {arr.shape} != model shape {current[name].shape}")
    if policy == "strict":
        missing = sorted(set(current) - set(tensors))
        if missing:
            raise WeightsError(f"strict import: {len(missing)} model tensors missing from file, e.g. {missing[:3]}")
    for name, arr in tensors.items():
        params.set_tensor(name, np.asarray(arr, dtype=np.float32))
    return list(tensors)
