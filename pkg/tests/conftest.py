"""Shared builders for desk-scale model scenarios."""

from __future__ import annotations

import numpy as np
import pytest

from tulink.graphs import build_global_graph, build_grid_incidence, build_local_graph
from tulink.mobility import GridSequence, chronological_split
from tulink.model import ModelConfig, ModelParams, build_model_inputs
from tulink.config import seeded_rng


def make_sequence(user, interval, grids, states=None, windows=None, t0=None, step=600.0):
    """GridSequence with defaulted annotations for hand-built scenarios."""
    m = len(grids)
    if t0 is None:
        t0 = interval * 21_600.0
    return GridSequence(
        user_id=user,
        interval_index=interval,
        t=[t0 + i * step for i in range(m)],
        grid=list(grids),
        state=list(states) if states is not None else [0] * m,
        window=list(windows) if windows is not None else [i % 4 for i in range(m)],
    )


def inputs_from_sequences(sequences, n_grids, config, split=None):
    """Graphs, labels and normalized matrices for hand-built sequences."""
    sequences = sorted(sequences, key=lambda s: (s.user_id, s.interval_index))
    if split is None:
        split = chronological_split(sequences)
    local = build_local_graph(sequences, n_grids)
    incidence = build_grid_incidence(sequences, n_grids)
    by_id = {s.traj_id: s for s in sequences}
    labels = {tid: by_id[tid].user_id for tid in split.train}
    global_g = build_global_graph(incidence, [s.traj_id for s in sequences], labels)
    return build_model_inputs(sequences, local, global_g, config), split


def toy_nine_sequences(rng=None, n_grids=9, time_vocab=4):
    """Three users with three sub-trajectories each over a 3x3 grid strip.

    Each user circulates within their own three-grid column, with a little
    cross-user overlap so the global graph is connected.
    """
    rng = rng or np.random.default_rng(0)
    sequences = []
    for u in range(3):
        base = 3 * u
        for j in range(3):
            grids = [base, base + 1, (base + 2) % n_grids, base]
            states = [int(rng.integers(0, 9)) for _ in grids]
            windows = [int(rng.integers(0, time_vocab)) for _ in grids]
            sequences.append(
                make_sequence(f"u{u}", j, grids, states, windows)
            )
    return sequences


def small_config(**overrides):
    base = dict(
        embed_dim=8,
        heads=2,
        gcn_layers=2,
        attn_layers=1,
        dropout_rate=0.0,
        lambda_l2=5e-4,
        time_vocab=4,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def toy_model_setup():
    """(params, config, inputs, split) for a 3-user, 9-trajectory scenario."""
    config = small_config()
    inputs, split = inputs_from_sequences(toy_nine_sequences(), n_grids=9, config=config)
    params = ModelParams(
        config,
        n_grids=inputs.n_grids,
        n_users=inputs.n_users,
        max_seq_len=inputs.max_seq_len,
        rng=seeded_rng(123, "init"),
    )
    return params, config, inputs, split
