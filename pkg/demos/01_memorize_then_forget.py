"""
Memorize a sentence, then forget it
===================================

A small transformer is fine-tuned on twenty short sentences about "Dave"
until it can recite them. We then pick one sentence and push the weights
uphill along the gradient that was recorded for it during training, and
watch the model lose that sentence while keeping the rest.

Run from the repository root::

    python demos/01_memorize_then_forget.py
"""

from gradunlearn import (UnlearnConfig, complete, init_model, load_fixture, perplexity,
                         prompt_ids, train, unlearn_iterative)
from gradunlearn.experiment import DESK_TRAIN, ExperimentConfig

# %%
# The fixture and the default desk-scale model (64 wide, 4 blocks).
dave = load_fixture("dave")
cfg = ExperimentConfig()
p0 = init_model(cfg.model_config(dave.tokenizer.vocab_size))
print(f"{p0.num_params:,} parameters, {len(dave)} sentences")

# %%
# Fifteen epochs of Adam. Along the way the trainer keeps two gradient
# stores per sentence: one summed over the first epoch, one over all epochs.
result = train(p0, dave, DESK_TRAIN)
print("loss per epoch:", " ".join(f"{x:.3f}" for x in result.loss_curve))
print(f"perplexity {perplexity(p0, dave):.1f} -> {perplexity(result.params, dave):.3f}")

# %%
# The model now completes each sentence from its first two words.
target = dave.get("dp-15")
prompt = prompt_ids(dave, target.dp_id)
print("before:", complete(result.params, dave, prompt))

# %%
# Gradient ascent on the stored all-epoch gradient of dp-15. Every ten
# iterations the run records the perplexity on the other nineteen
# sentences and the mean ROUGE over the whole set.
forgotten, run = unlearn_iterative(result.params, result.stores, dave, target.text,
                                   UnlearnConfig(eta=5e-4, max_iters=200, eval_every=10))
for row in run.series[::4]:
    print(f"iter {row.iteration:3d}  retained ppl {row.perplexity:.3f}  rougeL {row.rougeL:.3f}")
print("after: ", complete(forgotten, dave, prompt))
print(f"verified forgotten: {run.verified} (first at iteration {run.first_verified_iteration})")

# %%
# Two hundred steps is well past the point where dp-15 is gone, and the
# other sentences pay for it. Stopping at the first verified check is gentler.
early, early_run = unlearn_iterative(result.params, result.stores, dave, target.text,
                                     UnlearnConfig(eta=5e-4, max_iters=200, stop_on_verify=True))
print(f"early stop at iteration {early_run.stop_iteration}")
for dp in ("dp-3", "dp-10", "dp-20"):
    print(f"{dp}  early: {complete(early, dave, prompt_ids(dave, dp))}")
    print(f"{dp}  full:  {complete(forgotten, dave, prompt_ids(dave, dp))}")
