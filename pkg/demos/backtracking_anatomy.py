"""Anatomy of the trajectory metrics, on hand-made belief sequences.

No training involved: this walks through what the analysis layer measures —
exploration phases in the step-KL series, backtracking events in the argmax
series, and similarity attribution of abandoned answers — using small
distributions you can check by eye.

Run:  python3 demos/backtracking_anatomy.py
"""

import numpy as np

from loopscope import (
    StepDistribution,
    belief_trajectory,
    detect_backtracks,
    entropy,
    exploration_end,
    similarity_rank,
    step_kl,
)

rng = np.random.default_rng(0)

print("=== 1. a belief sequence that changes its mind ===\n")

# A 10-step deliberation over a 12-token vocabulary. The four answer options
# live at token ids 2, 5, 8, 11. The model first commits to option 0, then
# switches to option 2 and stays there.
OPTION_IDS = [2, 5, 8, 11]
favored = [0, 0, 0, 0, 2, 2, 2, 2, 2, 2]

dists = []
for step, fav in enumerate(favored, start=1):
    logits = rng.normal(0, 2.0 / step, size=12)   # early steps are noisy
    logits[OPTION_IDS[fav]] += 2.0 + 0.4 * step   # commitment hardens
    p = np.exp(logits) / np.exp(logits).sum()
    dists.append(StepDistribution(probs=p, step=step))

traj = belief_trajectory(
    dists, OPTION_IDS, item_id="demo", variant="Base",
    correct_index=2, similarities=[0.9, 0.6, 1.0, 0.4],
    options=["opt_a", "opt_b", "opt_c", "opt_d"])

print("step  argmax  P(best)  entropy(nats)  KL to prev")
for i in range(traj.k):
    kl = f"{traj.step_kl_series[i - 1]:.4f}" if i else "   -  "
    print(f"{i + 1:4d}  {traj.argmax_series[i]:6d}"
          f"  {traj.option_probs[i].max():7.3f}"
          f"  {traj.full_entropy[i]:13.3f}  {kl}")

print("\n=== 2. what the detectors see ===\n")

end = exploration_end(traj.step_kl_series, tol=0.05, window=3)
print(f"exploration ends (KL <= 0.05 for 3 consecutive steps) at index: {end}")

events = detect_backtracks(traj.argmax_series, min_run=3)
for e in events:
    print(f"backtrack: abandoned option {e.abandoned} "
          f"(steps {e.a_start + 1}-{e.a_end + 1}), adopted option {e.adopted} "
          f"(steps {e.b_start + 1}-{e.b_end + 1}), final answer {e.final_answer}")
    rank = similarity_rank(traj, e.abandoned)
    print(f"  the abandoned option was distractor-similarity rank {rank} "
          f"(1 = most stem-similar distractor)")
    print(f"  the adopted option was "
          f"{'correct' if e.adopted == traj.correct_index else 'wrong'}")

print("\n=== 3. entropy and step-KL on paper-sized examples ===\n")

print(f"entropy([0.5, 0.25, 0.125, 0.125]) = "
      f"{entropy([0.5, 0.25, 0.125, 0.125]):.4f} nats (= 1.75 ln 2)")
print(f"KL([0.75,0.25] || [0.5,0.5]) = {step_kl([0.75, 0.25], [0.5, 0.5]):.5f}")
print(f"KL([0.5,0.5] || [0.75,0.25]) = {step_kl([0.5, 0.5], [0.75, 0.25]):.5f}"
      f"  (asymmetric, as KL should be)")

print("\n=== 4. a trajectory that never settles ===\n")

wobble = []
for step in range(1, 9):
    logits = rng.normal(0, 1.5, size=12)  # fresh noise every step
    p = np.exp(logits) / np.exp(logits).sum()
    wobble.append(StepDistribution(probs=p, step=step))
t2 = belief_trajectory(wobble, OPTION_IDS)
end2 = exploration_end(t2.step_kl_series, tol=0.05, window=3)
print(f"argmax series: {[int(x) for x in t2.argmax_series]}")
print(f"exploration end: {end2} "
      f"(None = the no-correct-answer signature: beliefs keep moving)")
