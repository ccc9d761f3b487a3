"""Population moment means by exact enumeration over outcomes and a finite fixed-effect support."""

import numpy as np

from dopl.model import PanelDataset
from dopl.oracle import all_paths, probability_matrix, AlphaGrid


def population_dataset(params, cells, support, weights, y0_mass=None):
    """Expanded panel with one row per (y0, cell, path) and the matching probabilities.

    ``weights[y0 - 1][c]`` is the law of the fixed effect on ``support``.
    Returns the dataset and a probability vector summing to 1.
    """
    Q = params.Q
    T = cells[0].shape[0]
    paths = all_paths(Q, T)
    S = paths.shape[0]
    grid = AlphaGrid(tuple(sorted(support)))
    order = np.argsort(support)
    y0_mass = np.full(Q, 1.0 / Q) if y0_mass is None else np.asarray(y0_mass)
    rows_y0, rows_y, rows_x, probs = [], [], [], []
    for y0 in range(1, Q + 1):
        for c, x in enumerate(cells):
            P = probability_matrix(y0, x, params, grid)
            w = np.asarray(weights[y0 - 1][c])[order]
            law = w @ P
            rows_y0.append(np.full(S, y0))
            rows_y.append(paths)
            rows_x.append(np.broadcast_to(x, (S,) + x.shape))
            probs.append(y0_mass[y0 - 1] / len(cells) * law)
    data = PanelDataset(np.concatenate(rows_y0), np.vstack(rows_y), np.vstack(rows_x), Q)
    return data, np.concatenate(probs)
