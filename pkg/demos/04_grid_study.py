"""
Grid variance study
===================

Training the same small network three times gives three different
accuracies. Before trusting that a heterogeneous width beats the
homogeneous curve, compare the gap to this run-to-run spread. This script
drives the study from ``configs/prune_grid.json``, the same file the
``filtnas grid`` command accepts.
"""

from pathlib import Path

from filtnas.harness import emit_results, load_experiment, plot_data, run_grid_study

here = Path(__file__).resolve().parent
spec = load_experiment(here / "configs" / "prune_grid.json")

############################################################
# Train every listed configuration three times
# --------------------------------------------

results = run_grid_study(spec, repeats=spec.repeats, seed=0)
for r in sorted(results, key=lambda r: r.z):
    kind = "homogeneous" if r.homogeneous else "mixed"
    print(f"{r.config_id:>4} {kind:>11}  z = {r.z:>7.0f}  acc = {r.mean:.3f} +- {r.ci_half:.3f}")

############################################################
# Plot data
# ---------
# The baseline polyline joins homogeneous widths in order of complexity;
# mixed widths are scatter points around it.

plot = plot_data(results)
print(len(plot["baseline"]), "baseline points,", len(plot["scatter"]), "scatter points")
for path in emit_results(results, spec.output or here / "runs" / "grid"):
    print("wrote", path)
