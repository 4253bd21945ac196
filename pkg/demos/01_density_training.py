"""Train the density model on synthetic molecules and watch the exact
negative log-likelihood drop.

The model is an autoregressive flow over dequantized one-hot graph
tensors, so the numbers printed here are true log-densities, not bounds.
"""

import numpy as np

from graphflow import flow
from graphflow import graph as G

VOCAB = G.default_atom_vocab()
BONDS = G.default_bond_vocab()


def mean_nll(mols, params, spec, seed):
    rng = np.random.default_rng(seed)
    vals = []
    for g in mols:
        z = G.dequantize(g, VOCAB, BONDS, rng, window=spec.window)
        vals.append(-flow.log_likelihood_parallel(g, params, spec, z=z).total)
    return float(np.mean(vals))


def main():
    rng = np.random.default_rng(0)
    mols = [G.bfs_reorder(m, 0)[0] for m in G.gen_synthetic_molecules(350, 10, VOCAB, BONDS, rng)]
    train, held_out = mols[:300], mols[300:]
    print(f"dataset: {len(train)} training molecules, {len(held_out)} held out")

    spec = flow.ModelSpec(width=16, layers=2, window=12, max_size=12)
    params = flow.init_flow_params(spec, np.random.default_rng(42))
    before = mean_nll(held_out, params, spec, seed=99)

    print("training for 8 epochs ...")
    trace = flow.train(
        train, params, spec,
        flow.TrainConfig(epochs=8, batch_size=32, lr=1e-3),
        np.random.default_rng(7),
    )
    for epoch, nll in enumerate(trace):
        print(f"  epoch {epoch}: mean NLL {nll:8.2f}")

    after = mean_nll(held_out, params, spec, seed=99)
    print(f"held-out mean NLL: {before:.2f} untrained -> {after:.2f} trained")
    print("the model concentrates density on molecule-like graphs it never saw")


if __name__ == "__main__":
    main()
