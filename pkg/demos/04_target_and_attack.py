"""One full attack, narrated: target-image retrieval, the dual loss,
sign-PGD under the budget, and what the victim says afterwards."""

import numpy as np

from attacklab.attack import AttackConfig, run_attack
from attacklab.evaluation import draw_benchmark_samples, perceptual_report
from attacklab.lab import build_lab

lab = build_lab(seed=0)
sample = draw_benchmark_samples(lab.victim, lab.gallery,
                                lab.real_instructions, lab.judge,
                                count=1, seed=0)[0]
print("target text:   ", sample.target_text)
print("real instruction (hidden from the attack):", sample.real_instruction)

# The attack "reverses" the target text into a target image by gallery
# retrieval, infers an instruction, and augments it to n paraphrases.
target_idx = lab.gallery.retrieve_index(sample.target_text)
print("retrieved target image:", lab.gallery.entries[target_idx].caption)

cfg = AttackConfig(epsilon=8.0, eta=1.0, iterations=60, n_instructions=10,
                   seed=0)
result = run_attack(sample.image, sample.target_text, lab.deps, cfg)

print("\ntrace (every 10th iteration):")
print(f"{'iter':>4}  {'j_ins':>10}  {'j_mf':>8}  {'total':>10}  {'linf':>8}")
for rec in result.trace[::10]:
    print(f"{rec.iteration:>4}  {rec.loss.j_ins:>10.4f}  "
          f"{rec.loss.j_mf:>8.4f}  {rec.loss.total:>10.4f}  {rec.linf:>8.5f}")

rep = perceptual_report(sample.image, result.adversarial)
print(f"\nperceptual proxies: linf {rep['linf']:.5f} "
      f"(budget {cfg.epsilon_pixels:.5f}), rmse {rep['rmse']:.5f}, "
      f"mean_abs {rep['mean_abs']:.5f}")

before = lab.victim.respond(sample.image, sample.real_instruction)
after = lab.victim.respond(result.adversarial, sample.real_instruction)
print("\nvictim on the clean image:      ", before)
print("victim on the adversarial image:", after)
print("targeted success:",
      lab.judge.judge(after, sample.target_text))
