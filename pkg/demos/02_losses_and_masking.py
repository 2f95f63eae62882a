"""Show what token-level masking does to the training signal.

Builds one tiny batch of per-token log probabilities by hand, then walks
the loss family: plain cross entropy, the distillation blend, and the
masked variants that keep a token only when the target agrees with a
model's own greedy pick.  Masked tokens contribute exactly zero gradient,
which is the mechanism that lets noisy labels drop out of training.
"""

import numpy as np

from cascadekit.losses import LossSpec, batch_loss_and_grad, compute_alpha
from cascadekit.model import _log_softmax

rng = np.random.default_rng(42)
n_tokens, vocab = 8, 10

student_raw = rng.normal(0.0, 2.0, (n_tokens, vocab))
teacher_logp = _log_softmax(rng.normal(0.0, 2.0, (n_tokens, vocab)))
targets = rng.integers(0, vocab, n_tokens)
# make the student right on tokens 0 and 3 so every mask variant differs
for i in (0, 3):
    student_raw[i, targets[i]] = student_raw[i].max() + 1.0
student_logp = _log_softmax(student_raw)
student_am = np.argmax(student_logp, axis=1)
teacher_am = np.argmax(teacher_logp, axis=1)

print("token   target  student=target  teacher=target")
for i in range(n_tokens):
    print(f"  {i}       {targets[i]}        "
          f"{str(student_am[i] == targets[i]):<5}           "
          f"{teacher_am[i] == targets[i]}")

for variant in ("small_only", "large_only", "both"):
    alpha = compute_alpha(targets,
                          student_am if variant != "large_only" else None,
                          teacher_am if variant != "small_only" else None,
                          variant)
    print(f"alpha[{variant:<10}] = {alpha.astype(int)}")

print("\nloss and gradient mass per kind (same batch):")
for kind in ("xent", "dist", "cat_xent", "cat_dist", "cat_xent_s", "cat_xent_l"):
    spec = LossSpec(kind, w=0.5)
    loss, drows, alpha = batch_loss_and_grad(spec, student_logp, targets,
                                             student_am, teacher_am, teacher_logp)
    masked = int((alpha == 0).sum())
    grad_at_masked = np.abs(drows[alpha == 0]).max() if masked else 0.0
    print(f"  {kind:<10} loss {loss:7.4f}   kept {n_tokens - masked}/{n_tokens} tokens"
          f"   max |grad| at masked rows: {grad_at_masked}")

print("\nthe blend weight w slides the target from teacher (w=0) to gold (w=1):")
for w in (0.0, 0.5, 1.0):
    loss, _, _ = batch_loss_and_grad(LossSpec("dist", w=w), student_logp, targets,
                                     student_am, teacher_am, teacher_logp)
    print(f"  w={w:.1f}  dist loss {loss:.4f}")
loss_x, _, _ = batch_loss_and_grad(LossSpec("xent"), student_logp, targets,
                                   student_am, teacher_am, teacher_logp)
print(f"  plain cross entropy       {loss_x:.4f}  (equals dist at w=1.0)")
