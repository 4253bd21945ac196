"""Molecule generation by running the flow forward step by step.

Each step draws a base normal sample, pushes it through the current
step's affine transform and decodes the category by argmax. Bond
proposals that would push either endpoint past its valence are rejected
and the slot is resampled with fresh noise, up to a cap, after which the
slot deterministically falls back to no-edge. A rejected proposal never
mutates the graph. Generation stops at the size limit, or as soon as a
newly added node (other than the first) picks up no bond at all, in
which case that node is discarded.

Every kept decision is recorded in a trace together with the mu/alpha
rows that produced it, which is exactly what the reinforcement-learning
code needs to compute acting log-probabilities without re-encoding.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rgcn
from .autodiff import Tensor
from .flow import (
    FlowParams,
    ModelSpec,
    edge_conditional,
    forward_transform,
    graph_to_latent,
    latent_to_graph,
    node_conditional,
    validate_ordered,
)
from .graph import (
    GraphError,
    MolecularGraph,
    check_valency,
    dequantize,
    empty_categories,
)


@dataclass
class SamplerConfig:
    valency_check: bool = True
    max_resample: int = 100
    temperature: float = 1.0


@dataclass
class TraceStep:
    """One kept decision: which slot, what was chosen, and under what transform."""

    kind: str  # "node" or "edge"
    i: int
    j: int  # -1 for node steps
    action: int
    rejections: int
    mu: np.ndarray
    alpha: np.ndarray


@dataclass
class SampleTrace:
    steps: list = field(default_factory=list)
    termination: str = ""
    rejections: int = 0

    @property
    def num_steps(self) -> int:
        return len(self.steps)


def sample_molecule(
    params: FlowParams,
    spec: ModelSpec,
    cfg: SamplerConfig,
    rng,
    seed_graph: MolecularGraph | None = None,
):
    """Generate one molecule; returns (graph, trace).

    seed_graph, when given, is taken as the already-generated prefix (it
    must be in generation order) and sampling continues from there.
    """
    k = params.rgcn.width
    d = spec.node_dim
    c_dim = spec.edge_dim
    no_edge = spec.bonds.no_edge
    max_size = spec.max_size
    types = np.zeros(max_size, dtype=np.int64)
    cats = empty_categories(max_size, no_edge)
    if seed_graph is not None:
        if seed_graph.n > max_size:
            raise GraphError("seed graph larger than max_size")
        if seed_graph.no_edge != no_edge:
            raise GraphError("seed graph uses a different bond vocabulary")
        validate_ordered(seed_graph, spec.window)
        start = seed_graph.n
        types[:start] = seed_graph.node_types
        cats[:start, :start] = seed_graph.categories
    else:
        start = 0
    trace = SampleTrace()
    size = start
    termination = "max-size"
    for i in range(start, max_size):
        if i == 0:
            h = Tensor(np.zeros((1, k)))
        else:
            sub = MolecularGraph(types[:i], cats[:i, :i], no_edge)
            h = rgcn.encode(sub, params.rgcn, training=False).graph_embedding.reshape(1, k)
        mu, alpha = node_conditional(params, h)
        eps = rng.standard_normal(d) * cfg.temperature
        z = forward_transform(eps, mu.data[0], alpha.data[0])
        t = int(np.argmax(z))
        types[i] = t
        trace.steps.append(
            TraceStep("node", i, -1, t, 0, mu.data[0].copy(), alpha.data[0].copy())
        )
        got_bond = False
        for j in range(max(0, i - spec.window), i):
            sub = MolecularGraph(types[: i + 1], cats[: i + 1, : i + 1], no_edge)
            emb = rgcn.encode(sub, params.rgcn, training=False, undecided_row=(i, j))
            h = emb.graph_embedding.reshape(1, k)
            hi = Tensor(emb.H.data[i : i + 1])
            hj = Tensor(emb.H.data[j : j + 1])
            mu, alpha = edge_conditional(params, h, hi, hj)
            rejections = 0
            while True:
                eps = rng.standard_normal(c_dim) * cfg.temperature
                z = forward_transform(eps, mu.data[0], alpha.data[0])
                cat = int(np.argmax(z))
                if (
                    cfg.valency_check
                    and cat != no_edge
                    and not check_valency(sub, spec.vocab, spec.bonds, i, j, cat)
                ):
                    rejections += 1
                    if rejections >= cfg.max_resample:
                        cat = no_edge
                        break
                    continue
                break
            trace.rejections += rejections
            if cat != no_edge:
                cats[i, j] = cat
                cats[j, i] = cat
                got_bond = True
            trace.steps.append(
                TraceStep("edge", i, j, cat, rejections, mu.data[0].copy(), alpha.data[0].copy())
            )
        if i > 0 and not got_bond:
            # the new node would be disconnected: drop it and stop
            types[i] = 0
            termination = "no-bonds"
            break
        size = i + 1
    if size == 0:
        raise GraphError("cannot sample into a zero-size graph (seed required?)")
    trace.termination = termination
    g = MolecularGraph(types[:size], cats[:size, :size], no_edge)
    return g, trace


def sample_batch(
    params: FlowParams,
    spec: ModelSpec,
    cfg: SamplerConfig,
    count: int,
    seed: int,
    threads: int = 1,
):
    """Generate count molecules with per-sample independent seed streams.

    Results are indexed by sample number, so the output is identical for
    any thread count.
    """
    children = np.random.SeedSequence(seed).spawn(count)

    def one(idx: int):
        return sample_molecule(params, spec, cfg, np.random.default_rng(children[idx]))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(count)))
    else:
        results = [one(i) for i in range(count)]
    graphs = [g for g, _ in results]
    traces = [t for _, t in results]
    return graphs, traces


def reconstruct(
    g: MolecularGraph,
    params: FlowParams,
    spec: ModelSpec,
    rng,
) -> MolecularGraph:
    """Round-trip a graph through the flow: dequantize with fresh noise,
    invert to the latent sequence, run generation forward from those
    latents, and decode. For any parameters this reproduces the input."""
    z = dequantize(g, spec.vocab, spec.bonds, rng, window=spec.window)
    latent = graph_to_latent(g, params, spec, z=z, sequential=False)
    return latent_to_graph(latent, params, spec)
