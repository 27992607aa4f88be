"""The benchmark harness: clean row, baselines, the full attack, and the
ensemble-scored report table."""

from attacklab.attack import AttackConfig
from attacklab.evaluation import draw_benchmark_samples, run_benchmark
from attacklab.lab import build_lab

lab = build_lab(seed=0)

# Samples pair a benign gallery image with a target text the victim can
# actually be steered to; the real instruction is never shown to the
# attack.
samples = draw_benchmark_samples(lab.victim, lab.gallery,
                                 lab.real_instructions, lab.judge,
                                 count=8, seed=0)
print(f"benchmark of {len(samples)} samples, "
      f"caption bank of {len(lab.captions)}")

cfg = AttackConfig(iterations=60, seed=0)
reports = run_benchmark(samples, ["instructta", "mfii", "mfit", "noise"],
                        lab.bench_context, cfg)

header = f"{'method':<22} " + " ".join(f"enc{i:<5}" for i in range(5)) \
    + f" {'ensemble':>8} {'NoS':>5} {'ASR':>6}"
print("\n" + header)
for name in ("clean", "noise", "mfit", "mfii", "instructta"):
    r = reports[name]
    scores = " ".join(f"{s:.3f} " for s in r.encoder_scores)
    print(f"{r.label:<22} {scores} {r.ensemble_score:>8.3f} "
          f"{r.nos:>3}/{r.total:<2} {r.asr:>5.3f}")

print("\nper-sample records for the full attack:")
for rec in reports["instructta"].samples:
    flag = "hit " if rec.success else "miss"
    print(f"  [{flag}] {rec.sample_id}: {rec.response[:48]!r}")
