"""The full pipeline on a pocket-sized experiment, end to end.

Runs benchmark generation, training, per-step belief tracing, analysis, and
figure rendering through the same orchestration the CLI uses, then prints
the headline statistics: how often the model backtracks, whether backtracking
helps, how answer-set difficulty changes exploration length, and what happens
to final-step entropy when no correct option exists.

Run:  python3 demos/variant_effects_pipeline.py
Writes:  demo_out/ with JSONL, CSV, SVG outputs and a content-hash manifest
"""

from loopscope import ExperimentConfig, TrainConfig, run_experiment, verify

config = ExperimentConfig(
    n_categories=4, entities_per_category=8, n_values=6,
    n_stems=40, n_permutations=6, holdout_stems=6,
    d_model=16, n_heads=2, prelude_layers=1, recurrent_layers=2,
    coda_layers=1, k=10,
    train=TrainConfig(epochs=48, batch_size=32, lr=2e-3, warmup_steps=30,
                      lr_decay="cosine"),
    n_resamples=2000, output_dir="demo_out", seed=11)

print("running all stages (a few minutes on one CPU core) ...")
report = run_experiment(config)
print(f"wrote {len(report.manifest['files'])} files to {config.output_dir}/\n")

LABELS = [
    ("backtrack_prevalence_Base",
     "fraction of Base deliberations with a backtrack"),
    ("accuracy_uplift_Base",
     "accuracy(backtracked) - accuracy(did not)"),
    ("exploration_length_Base", "mean exploration steps, Base"),
    ("exploration_length_Easy", "mean exploration steps, Easy"),
    ("exploration_diff_Base_minus_Easy", "exploration difference"),
    ("final_entropy_Base", "final-step entropy, Base (nats)"),
    ("final_entropy_NoCorrect", "final-step entropy, NoCorrect (nats)"),
    ("final_entropy_diff_NoCorrect_minus_Base", "final entropy difference"),
    ("abandoned_most_similar_fraction",
     "abandoned answers that were the most stem-similar distractor"),
    ("adopted_correct_fraction", "backtracks that landed on the answer"),
]

print(f"{'statistic':55s} {'value':>8s}  95% CI")
for key, label in LABELS:
    s = report.summary.get(key)
    if s is None:
        print(f"{label:55s} {'absent':>8s}  (no qualifying instances)")
    else:
        print(f"{label:55s} {s.value:8.3f}  [{s.ci_low:.3f}, {s.ci_high:.3f}]")

print("\nself-consistency check (recomputes statistics from the "
      "trajectory file and re-hashes every output):")
problems = verify(config.output_dir)
print("  OK" if not problems else "\n".join(f"  FAIL {p}" for p in problems))
print(f"\nfigures: {config.output_dir}/fig_trajectory.svg, "
      f"{config.output_dir}/fig_entropy.svg")
