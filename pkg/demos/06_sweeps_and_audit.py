"""Parameter sweeps and the instruction-similarity audit: budget and
augmentation-count grids, shuffled pairings, and the 2x2 table."""

from attacklab.assets import load_unrelated_controls
from attacklab.attack import AttackConfig
from attacklab.evaluation import (AuditFixture, build_audit_fixtures,
                                  draw_benchmark_samples, instruction_audit,
                                  run_benchmark, shuffle_instructions, sweep)
from attacklab.lab import build_lab

lab = build_lab(seed=0)
samples = draw_benchmark_samples(lab.victim, lab.gallery,
                                 lab.real_instructions, lab.judge,
                                 count=6, seed=0)
cfg = AttackConfig(iterations=40, seed=0)

print("=== budget sweep (epsilon in 1/255 units) ===")
for row in sweep("epsilon", [2.0, 4.0, 8.0, 16.0], samples,
                 lab.bench_context, cfg):
    print(f"  eps {row['value']:>4}: ensemble {row['ensemble']:.3f}  "
          f"NoS {row['nos']}/{row['total']}")

print("\n=== augmentation-count sweep ===")
for row in sweep("n", [1, 5, 10], samples, lab.bench_context, cfg):
    print(f"  n {row['value']:>3}: ensemble {row['ensemble']:.3f}  "
          f"NoS {row['nos']}/{row['total']}")

print("\n=== shuffled instruction pairing ===")
shuffled = shuffle_instructions(samples, seed=1)
normal = run_benchmark(samples, ["instructta"], lab.bench_context, cfg)
mixed = run_benchmark(shuffled, ["instructta"], lab.bench_context, cfg)
print(f"  matched pairing:  NoS {normal['instructta'].nos}/{len(samples)}")
print(f"  shuffled pairing: NoS {mixed['instructta'].nos}/{len(samples)}")

print("\n=== instruction audit ===")
fixtures = build_audit_fixtures(lab.provider, lab.captions[:6],
                                lab.real_instructions, n=6, seed=0)
table = instruction_audit(fixtures, lab.ensemble[0])
print(f"  {'':>10} {'rephrased':>10} {'real':>8}")
for row in table.rows():
    print(f"  {row['instruction']:>10} {row['rephrased']:>10.3f} "
          f"{row['real']:>8.3f}")
control = instruction_audit(
    [AuditFixture(fx.inferred, tuple(load_unrelated_controls()), fx.real)
     for fx in fixtures], lab.ensemble[0])
print(f"  control (inferred vs unrelated): "
      f"{control.inferred_vs_rephrased:.3f}")
