"""Benchmark graphs with analytically known scalar marginals.

Four small models exercise the samplers end to end: a single factor on a
scalar variable, a product of five copies of the factor on the same scalar,
a four-node loop of pairwise difference factors, and a 2x3 grid with seven
of them.  The loop and grid operators annihilate constants, so those models
are completed with one extra row before sampling; projections onto
difference directions do not depend on how that row is chosen.

Each model carries named marginal specs: the probe rows that measure the
marginal on chain states and the key of its analytic law.  Probes sharing a
label are exchangeable by symmetry, so their samples pool across chains.
"""

from dataclasses import dataclass

import numpy as np

from . import analysis, factors, glm, linops

TOPOLOGY_NAMES = ("factor", "product", "loop", "grid")
COMPLETION_NAMES = ("mean", "pin")

# 0-based (i, j) with i < j; each edge contributes the row x_j - x_i.
LOOP_EDGES = ((0, 1), (0, 2), (1, 3), (2, 3))
GRID_SHAPE = (2, 3)
GRID_OUTER_EDGES = ((0, 1), (1, 2), (3, 4), (4, 5), (0, 3), (2, 5))
GRID_INNER_EDGE = (1, 4)


@dataclass(frozen=True)
class MarginalSpec:
    """One named scalar marginal: probe rows and its analytic-law key."""

    label: str
    law: str
    probes: np.ndarray


@dataclass(frozen=True)
class BaselineCase:
    name: str
    model: glm.GlmModel
    factor: object
    marginals: tuple

    @property
    def labels(self):
        return tuple(m.label for m in self.marginals)

    def spec(self, label):
        for m in self.marginals:
            if m.label == label:
                return m
        raise ValueError(f"invalid-argument: unknown marginal label {label!r}")

    def probe_matrix(self):
        """All probe rows stacked, in marginal order."""
        return np.vstack([m.probes for m in self.marginals])

    def probe_slices(self):
        """Column ranges of probe_matrix / recorder values per label."""
        out, start = {}, 0
        for m in self.marginals:
            stop = start + m.probes.shape[0]
            out[m.label] = slice(start, stop)
            start = stop
        return out

    def recorder(self, callback=None, store=True):
        return glm.MarginalRecorder(self.probe_matrix(), callback=callback, store=store)

    def ground_truth(self, label, grid=None):
        return analysis.ground_truth_marginal(self.spec(label).law, self.factor, grid)


def difference_rows(n, edges):
    """Dense rows mapping x to (x_j - x_i) for each edge (i, j)."""
    rows = np.zeros((len(edges), n))
    for k, (i, j) in enumerate(edges):
        rows[k, i] = -1.0
        rows[k, j] = 1.0
    return rows


def _completed(rows, factor, completion, phi0):
    n = rows.shape[1]
    m = rows.shape[0]
    edge_block = glm.FactorBlock(factor, np.arange(m)[:, None])
    base = glm.GlmModel(linops.DenseSmall(rows), [edge_block])
    if completion == "mean":
        return glm.extend_improper(base, phi0)
    if completion == "pin":
        pin = np.zeros((1, n))
        pin[0, 0] = 1.0
        op = linops.Stacked([base.operator, linops.DenseSmall(pin)])
        phi0 = phi0 if phi0 is not None else factors.Normal(0.0, 1.0)
        blocks = [edge_block, glm.FactorBlock(phi0, np.array([[m]]))]
        return glm.GlmModel(op, blocks)
    raise ValueError(f"invalid-argument: unknown completion {completion!r}")


def build_baseline(name, factor, completion="mean", phi0=None):
    """Assemble one benchmark model around the given factor.

    completion picks the row that makes the loop/grid operators full rank:
    "mean" appends the average of the coordinates, "pin" selects the first
    coordinate.  phi0 is the factor on that row (standard normal default).
    Proper topologies ignore both.
    """
    if name == "factor":
        model = glm.GlmModel(
            linops.DenseSmall(np.ones((1, 1))),
            [glm.FactorBlock(factor, np.array([[0]]))],
        )
        marginals = (MarginalSpec("state", "factor", np.ones((1, 1))),)
    elif name == "product":
        model = glm.GlmModel(
            linops.DenseSmall(np.ones((5, 1))),
            [glm.FactorBlock(factor, np.arange(5)[:, None])],
        )
        marginals = (MarginalSpec("state", "product", np.ones((1, 1))),)
    elif name == "loop":
        rows = difference_rows(4, LOOP_EDGES)
        model = _completed(rows, factor, completion, phi0)
        marginals = (MarginalSpec("edge", "loop", rows),)
    elif name == "grid":
        n = GRID_SHAPE[0] * GRID_SHAPE[1]
        outer = difference_rows(n, GRID_OUTER_EDGES)
        inner = difference_rows(n, (GRID_INNER_EDGE,))
        rows = np.vstack([outer, inner])
        model = _completed(rows, factor, completion, phi0)
        marginals = (
            MarginalSpec("inner-edge", "grid-inner", inner),
            MarginalSpec("outer-edge", "grid-outer", outer),
        )
    else:
        raise ValueError(f"invalid-argument: unknown topology {name!r}")
    return BaselineCase(name=name, model=model, factor=factor, marginals=marginals)


def scaled_ones(n, norm):
    """The constant vector c*1 with the requested Euclidean norm."""
    if norm < 0:
        raise ValueError("invalid-argument: norm must be nonnegative")
    return np.full(n, norm / np.sqrt(n))


def pooled_marginal(values, sl):
    """Flatten recorder values (iterations, chains, P) to per-iteration pools.

    Probes under one label are exchangeable, so their columns count as extra
    chains; returns (iterations, chains * width) for the label's slice.
    """
    vals = values[..., sl]
    return vals.reshape(vals.shape[0], -1)
