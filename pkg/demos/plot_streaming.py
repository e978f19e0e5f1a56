"""
Streaming a conversation turn by turn
=====================================

The streamer tokenizes one second of both speakers' audio plus the user's head
motion per turn, then samples the agent's head for that turn. Past turns enter
the context with their agent slots still masked, so the model never reads its
own predictions back.
"""

import numpy as np

from timar.config import ModelConfig
from timar.datagen import gen_sample
from timar.model import TimarModel
from timar.normalize import compute_norm_stats
from timar.streamer import conversation_turns, run_conversation

cfg = ModelConfig(d_t=32, d_e=32, encoder_layers=2, encoder_heads=2, d_m=32, K_blocks=2, diff_sample_steps=20)
model = TimarModel(cfg, seed=0).eval()

# %%
# An eight-second synthetic dialogue gives eight one-second turns
dialogue = gen_sample(seed=3)
turns = conversation_turns(dialogue, cfg)
norm = compute_norm_stats(dialogue.agent_head[None])
print(len(turns), "turns;", "user head per turn:", turns[0][2].shape)

# %%
# Generation with no history and with three turns of history
for n in (0, 3):
    head = run_conversation(model, norm, turns, n, omega=1.0, seed=0, conversation="demo")
    again = run_conversation(model, norm, turns, n, omega=1.0, seed=0, conversation="demo")
    print(f"n={n}: output {head.shape}, deterministic replay: {np.array_equal(head, again)}")
