"""Is the Hessian block diagonal across layers?

For quadratics with a tunable cross-block coupling the masked-probe test
should report zero error without coupling and grow with it. A small MLP is
then checked with one block per layer.

    python3 demos/block_structure.py
"""

import numpy as np

from shardhess.blockdiag import BlockPartition, block_diag_test
from shardhess.objectives import QuadraticObjective, block_coupled_matrix, make_mlp

part = BlockPartition.equal(24, 4)
print("coupling  rel_error  cosine")
for c in (0.0, 0.1, 0.3, 1.0):
    q = QuadraticObjective(block_coupled_matrix([6, 6, 6, 6], c, seed=5))
    rep = block_diag_test(q, np.zeros(24), part, method="exact").report()
    print(f"{c:8.1f}  {rep['rel_error']['mean']:9.3f}  {rep['cosine']['mean']:6.3f}")

net = make_mlp([4, 8, 8, 2], n_points=32, n_batches=4, seed=0)
rep = block_diag_test(net, net.initial_params(0), n_probes=20).report()
print(f"\nMLP, {rep['blocks']} layer blocks, {rep['probes']} probes")
for how, agg in rep["aggregations"].items():
    print(f"  {how:9s} rel_error {agg['rel_error']['mean']:.3f} +- {agg['rel_error']['std']:.3f}, "
          f"cosine {agg['cosine']['mean']:.3f} +- {agg['cosine']['std']:.3f}")
