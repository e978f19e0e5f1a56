"""
Training and evaluating a small model
=====================================

Generate a few synthetic dialogues, run a short training loop, sample the agent
head for held-out dialogues and score it with the evaluation metrics. The model
is far too small and too briefly trained to be good; the point is the workflow.
"""

import numpy as np

from timar.config import ModelConfig
from timar.datagen import generate_split
from timar.metrics import evaluate
from timar.streamer import conversation_turns, run_conversation
from timar.trainer import fit_norm, init_state, prepare, train

cfg = ModelConfig(d_t=32, d_e=32, encoder_layers=2, encoder_heads=2, d_m=32, K_blocks=2, batch_size=4,
                  warmup_steps=5, lr=1e-3, r=1.0, diff_sample_steps=20)

# %%
# Features are extracted once; training then runs on cached arrays
data = prepare(generate_split(8, seed=0, split="train"), cfg)
state = init_state(cfg, fit_norm(data), seed=0)
records = train(state, data, 30)
print("loss, first vs last 5 steps:", np.mean([r["total"] for r in records[:5]]),
      np.mean([r["total"] for r in records[-5:]]))

# %%
# Sample two held-out dialogues with one turn of history, then score them
test = generate_split(2, seed=0, split="test")
model = state.model.eval()
generated = [run_conversation(model, state.norm, conversation_turns(s, cfg), 1, seed=0, conversation=s.sample_id)
             for s in test]
report = evaluate(generated, [s.agent_head for s in test], [s.user_head for s in test])
for component in ("exp", "jaw", "pose"):
    print(component, {k: round(v, 4) for k, v in report[component].items()})
