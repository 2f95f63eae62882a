"""Walk through the synthetic corpus and the two cascade members.

Generates a handful of examples per task, shows what each task asks for,
then greedy-decodes a few inputs with freshly initialized small and large
models to show the starting point every experiment shares.
"""

import numpy as np

from cascadekit.cascade import model_cost
from cascadekit.corpus import (
    default_task_specs,
    default_vocab,
    generate_corpus,
    inject_label_noise,
)
from cascadekit.model import ModelConfig, greedy_decode_batch, init_model

vocab = default_vocab()
print(f"vocab: {vocab.size} tokens "
      f"({len(vocab.label_ids)} labels, {len(vocab.generic_ids)} generic)")

specs = default_task_specs(noise_rate=0.15, base_seed=7000)
examples = generate_corpus(specs, sizes={"train": 4, "eval": 2}, vocab=vocab)
print(f"generated {len(examples)} examples across {len(specs)} tasks\n")

for spec in specs:
    first = next(e for e in examples if e.task_id == spec.task_id)
    print(f"  {spec.task_id:<12} [{spec.family:<14}] "
          f"x={list(first.x)} -> y={list(first.y)}")

noisy = inject_label_noise(examples, rho=0.5, seed=3, specs=specs, vocab=vocab)
flips = sum(a.y != b.y for a, b in zip(examples, noisy))
n_train = sum(e.split == "train" for e in examples)
print(f"\nlabel noise at rho 0.5 flipped {flips} of {n_train} train responses "
      "(eval is never touched)")

small = init_model(ModelConfig(n_layers=2, d_model=64, n_heads=4, d_ff=256,
                               vocab_size=vocab.size, max_seq_len=32, init_seed=100))
large = init_model(ModelConfig(n_layers=4, d_model=160, n_heads=4, d_ff=640,
                               vocab_size=vocab.size, max_seq_len=32, init_seed=200))
print(f"\nsmall model: {small.param_count:>9,} parameters, cost {model_cost(small):,.0f}")
print(f"large model: {large.param_count:>9,} parameters, cost {model_cost(large):,.0f}")

xs = [e.x for e in examples[:3]]
results = greedy_decode_batch(small, xs, max_new_tokens=6, bos_id=vocab.bos_id,
                              sep_id=vocab.sep_id, pad_id=vocab.pad_id,
                              eos_id=vocab.eos_id)
print("\nuntrained small model free-runs (greedy):")
for x, res in zip(xs, results):
    mean_lp = float(np.mean(res.token_logprobs))
    print(f"  x={list(x)} -> {list(res.y_hat)}  "
          f"mean token logprob {mean_lp:.3f}  stopped by {res.stopped_by}")
print("\nboth models start as noise; training turns the large one into a "
      "teacher and the small one into the always-on cascade member.")
