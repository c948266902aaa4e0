"""Token trees, their attention masks, and tree attention on the target.

One target forward over a whole candidate tree gives, at every node, the same
logits as running that node's root-to-node path as an ordinary sequence.
"""

import numpy as np

from treespec import TargetConfig, TargetModel, TokenTree, build_mask, compress_mask, expand, leaf_paths
from treespec.tree import dump_mask, dump_tree

tree = TokenTree([10, 11, 12, 13, 14, 15], [-1, -1, 0, 0, 1, 4])
print(dump_tree(tree))
print()
print(dump_mask(build_mask(tree)))

c = compress_mask(tree)
print("\nintervals (enter, exit):", list(zip(c.enter.tolist(), c.exit.tolist())))
print("expanded == dense:", np.array_equal(expand(c, len(tree)), build_mask(tree)))
print("leaf paths:", leaf_paths(tree))

cfg = TargetConfig(vocab_size=16, hidden_size=16, num_heads=2, num_layers=2, max_seq_len=64, dtype="float64")
target = TargetModel.random(cfg, seed=0)
prefix = [1, 2, 3]
cache = target.new_cache()
target.forward(prefix, cache)
small = TokenTree([4, 5, 6, 7], [-1, -1, 0, 2])
logits, _ = target.forward(small.tokens, cache, mask=compress_mask(small))
for i in range(len(small)):
    chain = prefix + [int(small.tokens[j]) for j in small.path(i)]
    ref, _ = target.forward(chain)
    print(f"node {i} path {chain[3:]}: max |tree - chain| = {np.max(np.abs(logits[i] - ref[-1])):.1e}")
