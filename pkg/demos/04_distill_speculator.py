"""Distilling a speculator from a small pretrained target.

We pretrain a toy target on an order-2 Markov corpus, then train the draft
heads against the frozen target's distributions and final hidden states. The
benchmark report shows how many extra tokens each verification step yields
before and after training. Takes a couple of minutes on one core.
"""

import time

import numpy as np

from treespec import Speculator, SpeculatorConfig, TargetConfig, TargetModel
from treespec.bench import run_bench
from treespec.corpus import gen_corpus
from treespec.train import TrainConfig, train, train_target

V = 32
ids, source = gen_corpus("markov", 0, vocab_size=V, length=40_000, concentration=0.1)
prompts = source.sample(8 * 12, np.random.default_rng(99)).reshape(8, 12).tolist()

target = TargetModel.random(TargetConfig(vocab_size=V, hidden_size=64, num_heads=4, num_layers=2,
                                         max_seq_len=256), seed=0)
t0 = time.perf_counter()
curve = train_target(target, ids, TrainConfig(steps=600, batch_size=16, seq_len=32, warmup=50, lr=3e-3,
                                              min_lr=3e-4, weight_decay=0.0, log_every=200))
print(f"target: loss {curve[0].loss:.2f} -> {curve[-1].loss:.2f} in {time.perf_counter() - t0:.0f}s")

spec = Speculator.create(target, SpeculatorConfig(), seed=0)
before = run_bench(target, prompts, "spec", spec, max_new=48)

t0 = time.perf_counter()
curve = train(spec, ids, TrainConfig(steps=3000, batch_size=2, seq_len=32, warmup=300, log_every=1000))
for rec in curve:
    heads = " ".join(f"{c:.2f}" for c, _ in rec.heads)
    print(f"step {rec.step:5d} lr {rec.lr:.1e} loss {rec.loss:.3f}  per-head CE {heads}")
print(f"speculator trained in {time.perf_counter() - t0:.0f}s")

after = run_bench(target, prompts, "spec", spec, max_new=48)
print(f"extra tokens/step: untrained {before.extra_tokens_per_step:.2f} -> trained {after.extra_tokens_per_step:.2f}")
print(after.table())
