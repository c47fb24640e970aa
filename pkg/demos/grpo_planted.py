"""Recover a hidden 4-token sequence using only a scalar reward.

The reward gives 2 for the exact sequence and a little credit per matching
prefix token. Group-relative advantages turn those scores into a learning
signal without any value network.

Run: python demos/grpo_planted.py
"""

import numpy as np

from lutgen.grpo import GrpoConfig, PlantedReward, train_grpo
from lutgen.policy import PolicyConfig, PolicyModel, Prompt

target = [3, 1, 6, 2]
ref = PolicyModel(PolicyConfig(vocab=8, seq_len=4, cond_dim=4, width=32, heads=2, blocks=2), seed=0)
prompt = Prompt("planted", "transfer", np.random.default_rng(0).random(4), np.zeros((1, 1, 3)),
                np.zeros((1, 1, 3)), "planted")
policy = ref.copy()


def show(row):
    if row["step"] % 10 == 0:
        print(f"step {row['step']:3d}  mean reward {row['mean_reward']:.3f}  greedy {policy.greedy(prompt.condition).tolist()}")


train_grpo(policy, ref, [prompt], GrpoConfig(group_size=8, kl_beta=0.0, lr=1e-3, steps=60, seed=0),
           PlantedReward(target), on_step=show)
# sampled groups still explore at temperature 1, so the mean reward stays
# low even once the greedy sequence is right
print("target", target, "greedy", policy.greedy(prompt.condition).tolist())
