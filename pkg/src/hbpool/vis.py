"""Activation and projection response maps.

For every tapped layer the head consumes, the *conv* map is the mean absolute
activation over channels. For every interaction pair the *project* map holds,
at each location, the dot product of that location's interaction vector with
the sum-pooled interaction vector; summed over locations it equals the squared
norm of the pooled vector.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import pooling
from . import tensor as T
from .data import save_pgm
from .tensor import ShapeError


def conv_map(feature_map: np.ndarray) -> np.ndarray:
    if feature_map.ndim != 3:
        raise ShapeError(f"expected an h x w x c map, got {feature_map.shape}")
    return np.abs(feature_map).mean(axis=-1)


def project_map(z: np.ndarray) -> np.ndarray:
    """Per-location response ``z[i, j] . sum(z)`` of an ``h x w x d`` interaction map."""
    if z.ndim != 3:
        raise ShapeError(f"expected an h x w x d interaction map, got {z.shape}")
    return z @ T.sum_over_spatial(z)


def response_maps(model, image: np.ndarray) -> dict[str, np.ndarray]:
    """Named ``h x w`` heatmaps for one image (or feature triple when the model has no backbone)."""
    taps = model.taps(image)
    first = 3 - pooling.n_layers(model.variant)
    used = list(range(first, 3))
    out = {f"conv_layer{i + 1}": conv_map(taps[i]) for i in used}
    for i, j, a, b in pooling.pair_layout(model.variant):
        li, lj = used[i], used[j]
        z = pooling.interaction(taps[li], taps[lj], model.head[a], model.head[b])
        name = f"project_layer{li + 1}" if li == lj else f"project_layer{li + 1}{lj + 1}"
        out[name] = project_map(z)
    return out


def export_maps(maps: dict[str, np.ndarray], outdir) -> list[Path]:
    """Write each map as a min-max scaled PGM; returns the written paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, heat in maps.items():
        path = outdir / f"{name}.pgm"
        save_pgm(path, heat)
        paths.append(path)
    return paths
