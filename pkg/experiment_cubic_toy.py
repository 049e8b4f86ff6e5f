"""
Cubic Toy Uncertainty Check
Run this to see the ensemble separate the two kinds of uncertainty on
y = x^3 + noise, with noise growing in |x| and training data on |x| <= 2.

Expected shape of the table: u_ale tracks the noise variance everywhere,
u_epi stays near 1 (normalized) inside the training range and grows
quickly outside it.
"""

import sys

from diagengine import DiagnosisExperiment, load_config

out = sys.argv[1] if len(sys.argv) > 1 else "runs/cubic_toy"
cfg = load_config(overrides={"system": "cubic_toy", "output_dir": out})

exp = DiagnosisExperiment(cfg)
exp.simulate()
exp.train()
table = exp.evaluate()

inside = table[table["bin"].isin(["0.0-0.5", "0.5-1.0", "1.0-1.5", "1.5-2.0"])]
outside = table[~table.index.isin(inside.index)]

print(f"\n{'='*55}")
print("  SUMMARY")
print(f"{'='*55}")
if len(inside) and len(outside):
    ratio = outside["u_epi_normalized"].mean() / max(inside["u_epi_normalized"].mean(), 1e-12)
    print(f"  Mean normalized u_epi inside training range:   {inside['u_epi_normalized'].mean():.3f}")
    print(f"  Mean normalized u_epi outside training range:  {outside['u_epi_normalized'].mean():.3f}")
    print(f"  Outside / inside ratio:                        {ratio:.1f}x")
print(f"  Results written to {out}/results/toy_uncertainty.csv")
