"""
Forgetting whatever the model says
==================================

Sometimes the sentence to remove is not known in advance, only a prompt
that makes the model reproduce something it should not. Here we generate
from "Dave is", find the training sentence the output resembles most, push
that sentence's gradient uphill, and repeat until the generation no longer
looks like anything in the training set.

Run from the repository root::

    python demos/03_fuzzy_forgetting.py
"""

from collections import Counter

from gradunlearn import (UnlearnConfig, find_closest_match, init_model, load_fixture, train,
                         unlearn_fuzzy)
from gradunlearn.evaluation import complete
from gradunlearn.experiment import DESK_TRAIN, ExperimentConfig

dave = load_fixture("dave")
p0 = init_model(ExperimentConfig().model_config(dave.tokenizer.vocab_size))
result = train(p0, dave, DESK_TRAIN)

tok = dave.tokenizer
prompt = [tok.bos_id] + tok.encode("Dave is", frame=False)

# %%
said = complete(result.params, dave, prompt)
print("model says:", said)
print("closest training sentence:", find_closest_match(dave, said, 0.6))

# %%
# Gestalt similarity of at least 0.6 counts as a match.
params, run = unlearn_fuzzy(result.params, result.stores, dave, "Dave is",
                            UnlearnConfig(eta=1e-3, max_iters=200, eval_every=20))
print(f"stopped after {run.stop_iteration} steps with status {run.status!r}")

# Once dp-15 is pushed away, "Dave is" gets finished with the endings of
# neighbouring sentences, so the loop cycles through those before it runs dry.
counts = Counter(m for m in run.matches if m)
print("steps spent per sentence:", dict(sorted(counts.items())))
for dp in sorted(counts):
    print(f"  {dp}: {dave.get(dp).text}")
print("model now says:", complete(params, dave, prompt))
