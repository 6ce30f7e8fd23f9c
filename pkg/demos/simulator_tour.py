"""A walk through the rule-based student simulator.

Shows one student's learning target, a few recommended questions, the
per-step reward, and that the rewards add up to the episode's learning effect.

    python3 demos/simulator_tour.py --seed 7 --steps 12
"""
import argparse

import numpy as np

from rarlab.simulator import RuleBasedEnv


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=7, help="student seed")
    parser.add_argument("--steps", type=int, default=12)
    args = parser.parse_args()

    env = RuleBasedEnv()
    student = env.reset(args.seed)
    target = env.observe_target(student)
    print(f"{env.num_questions} questions over {env.graph.num_concepts} concepts")
    print(f"student {args.seed}: target questions {sorted(target)}")
    print(f"target mastery at start: {env.target_mastery(student):.4f}\n")

    # a naive tutor: ask target questions in order, mixed with random picks
    order = sorted(target)
    rng = np.random.default_rng(args.seed)
    total = 0.0
    print(f"{'step':>4}  {'q':>3}  {'correct':>7}  {'reward':>9}  {'target mastery':>14}")
    for t in range(args.steps):
        q = order[t % len(order)] if rng.random() < 0.7 else int(rng.integers(env.num_questions))
        out = env.step(student, q)
        total += out.reward
        print(f"{t + 1:>4}  {q:>3}  {out.correctness:>7}  {out.reward:>9.5f}  "
              f"{env.target_mastery(student):>14.4f}")

    print(f"\nsum of rewards : {total:.12f}")
    print(f"learning effect: {env.learning_effect(student):.12f}")


if __name__ == "__main__":
    main()
