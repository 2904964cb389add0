"""Harmonization methods and the name registry used by configs and the CLI.

A method is any object with a ``name`` and two methods::

    fit(dataset, design) -> fitted
    apply(fitted, dataset, design) -> N x V array

Fitted objects that should round-trip through ``model.json`` additionally
provide ``to_dict()`` and the method a ``load(dict)``. Methods may define
``configure(config)`` returning a copy tuned by a :class:`RunConfig`.
"""

from __future__ import annotations

from typing import Any, Protocol, runtime_checkable

import numpy as np

from ..core import DesignMatrix, HabenchError, VoxelDataset
from .combat import Combat, CombatFit, apply_combat, fit_combat
from .global_scaling import GlobalScaling, GlobalScalingFit, apply_global_scaling, fit_global_scaling

__all__ = [
    "Combat", "CombatFit", "GlobalScaling", "GlobalScalingFit", "HarmonizationMethod", "Identity",
    "MethodError", "apply_combat", "apply_global_scaling", "available_methods", "fit_combat",
    "fit_global_scaling", "get_method", "identity_method", "load_model", "register_method",
    "unregister_method",
]


class MethodError(HabenchError):
    pass


@runtime_checkable
class HarmonizationMethod(Protocol):
    name: str

    def fit(self, dataset: VoxelDataset, design: DesignMatrix) -> Any: ...

    def apply(self, fitted: Any, dataset: VoxelDataset, design: DesignMatrix) -> np.ndarray: ...


def identity_method(dataset: VoxelDataset) -> np.ndarray:
    return dataset.values.copy()


class Identity:
    name = "none"

    def fit(self, dataset, design):
        return {"method": self.name}

    def apply(self, fitted, dataset, design=None):
        return identity_method(dataset)

    def load(self, obj):
        return {"method": self.name}


_REGISTRY: dict[str, HarmonizationMethod] = {}


def register_method(name: str, method: HarmonizationMethod) -> None:
    if name in _REGISTRY:
        raise MethodError(f"harmonization method {name!r} is already registered")
    if not (callable(getattr(method, "fit", None)) and callable(getattr(method, "apply", None))):
        raise MethodError(f"method {name!r} must provide fit() and apply()")
    _REGISTRY[name] = method


def unregister_method(name: str) -> None:
    _REGISTRY.pop(name, None)


def available_methods() -> list[str]:
    return list(_REGISTRY)


def get_method(name: str, config=None) -> HarmonizationMethod:
    try:
        method = _REGISTRY[name]
    except KeyError:
        raise MethodError(f"unknown method {name!r}; available: {sorted(_REGISTRY)}") from None
    if config is not None and hasattr(method, "configure"):
        method = method.configure(config)
    return method


def load_model(obj: dict):
    """Rebuild ``(method, fitted)`` from a ``model.json`` document."""
    name = obj.get("method")
    method = get_method(name)
    if not hasattr(method, "load"):
        raise MethodError(f"method {name!r} cannot load saved models")
    return method, method.load(obj)


register_method("none", Identity())
register_method("global_scaling", GlobalScaling())
register_method("combat", Combat())
