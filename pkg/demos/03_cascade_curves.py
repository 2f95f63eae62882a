"""End-to-end miniature: train a cascade and trace its deferral curve.

Uses deliberately small models and short training so the whole script runs
in well under a minute.  The flow mirrors the full pipeline: generate a
noisy corpus, train a teacher, cache its token log probabilities, train a
masked student against the cache, then sweep the defer-or-keep threshold
and report area under the quality-vs-deferral-rate curve for three rules.
Artifacts land in demos/out/.
"""

from pathlib import Path

import numpy as np

from cascadekit.cascade import (
    DeferralRuleSpec,
    ScoreRow,
    deferral_score,
    model_cost,
)
from cascadekit.corpus import default_task_specs, default_vocab, generate_corpus, \
    inject_label_noise
from cascadekit.evaluation import audc, example_quality, render_curves_svg, sweep
from cascadekit.losses import LossSpec
from cascadekit.model import ModelConfig, greedy_decode_batch, init_model
from cascadekit.trainer import TrainConfig, build_teacher_cache, train

out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)
vocab = default_vocab()
specs = default_task_specs(noise_rate=0.15, base_seed=7000)
families = {s.task_id: s.family for s in specs}

corpus = generate_corpus(specs, sizes={"train": 60, "eval": 20}, vocab=vocab)
corpus = inject_label_noise(corpus, rho=0.15, seed=9000, specs=specs, vocab=vocab)
train_set = [e for e in corpus if e.split == "train"]
eval_set = [e for e in corpus if e.split == "eval"]
print(f"corpus: {len(train_set)} train / {len(eval_set)} eval examples")

small_cfg = ModelConfig(n_layers=1, d_model=32, n_heads=4, d_ff=128,
                        vocab_size=vocab.size, max_seq_len=32, init_seed=100)
large_cfg = ModelConfig(n_layers=2, d_model=64, n_heads=4, d_ff=256,
                        vocab_size=vocab.size, max_seq_len=32, init_seed=200)
tc = TrainConfig(steps=1200, batch_size=8, lr=0.003)

print("training teacher (plain cross entropy) ...")
teacher = train(init_model(large_cfg), train_set, LossSpec("xent"), tc,
                vocab, seed=500).model
cache = build_teacher_cache(teacher, train_set, vocab)
print("training masked student against the cached teacher ...")
student = train(init_model(small_cfg), train_set, LossSpec("cat_xent"), tc,
                vocab, seed=0, teacher_cache=cache).model

def decode(model):
    return greedy_decode_batch(model, [e.x for e in eval_set], max_new_tokens=12,
                               bos_id=vocab.bos_id, sep_id=vocab.sep_id,
                               pad_id=vocab.pad_id, eos_id=vocab.eos_id)

small_out, large_out = decode(student), decode(teacher)
rows_by_rule = {}
for rule_text in ("average", "sum", "maximum"):
    rule = DeferralRuleSpec.parse(rule_text)
    rows = []
    for i, (ex, s_res, l_res) in enumerate(zip(eval_set, small_out, large_out)):
        s_q = example_quality(families[ex.task_id], s_res.y_hat, ex.y, vocab.eos_id)
        l_q = example_quality(families[ex.task_id], l_res.y_hat, ex.y, vocab.eos_id)
        rows.append(ScoreRow(
            example_id=f"{ex.task_id}/{i}",
            score=deferral_score(s_res.token_logprobs, rule),
            small_correct=s_q == 1.0, large_correct=l_q == 1.0,
            small_quality=s_q, large_quality=l_q,
            n_tokens=len(s_res.token_logprobs)))
    rows_by_rule[rule_text] = rows

cost_s, cost_l = model_cost(student), model_cost(teacher)
series = []
print("\nrule      AUDC    quality: keep-all -> defer-all")
for rule_text, rows in rows_by_rule.items():
    points = sweep(rows, cost_s, cost_l, rule_text, "cat_xent_demo")
    series.append((rule_text, [p.deferral_rate for p in points],
                   [p.quality for p in points]))
    print(f"{rule_text:<8} {audc(points):7.4f}"
          f"    {points[0].quality:.3f} -> {points[-1].quality:.3f}")

svg_path = out_dir / "deferral_curves.svg"
render_curves_svg(series, svg_path, title="quality vs deferral rate",
                  xlabel="deferral rate", ylabel="mean quality")
print(f"\ncurve plot written to {svg_path}")
print("deferring the examples the student scores as risky buys back most of "
      "the teacher's quality at a fraction of its cost.")
