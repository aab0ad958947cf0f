"""Does more inner ascent buy more robustness?

Trains the baseline and two adversarial settings (2 and 10 ascent steps per
batch) on the same 4-shot task, three seeds each, and prints the averages.
Takes about half a minute.
"""

from advlora.evaluation import harmonic_mean
from advlora.experiments import tau_trend

results = tau_trend()
print(f"{'setting':>10} {'clean':>7} {'robust':>7} {'hm':>7}")
for tau, r in results.items():
    label = "baseline" if tau is None else f"tau={tau}"
    print(f"{label:>10} {r['clean']:7.3f} {r['robust']:7.3f} {harmonic_mean(r['clean'], r['robust']):7.3f}")

# Per-seed spread, to see how much of the gap is noise.
for tau, r in results.items():
    print(tau, [round(m.robust_acc, 3) for m in r["per_seed"]])
