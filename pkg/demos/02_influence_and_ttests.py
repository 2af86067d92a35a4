"""
Which sentences does the model lean on?
=======================================

Two ways of scoring how much each training sentence matters:

* a cheap cosine between a sentence's mean activation and its stored gradient
* an inverse-Hessian score, ``-grad(sentence) . H^-1 grad(test loss)``, with the
  inverse approximated by a short normalised iteration

We score the twenty sentences before and after fine-tuning, compare the
two samples with a paired t-test, and check how much smaller an
embedding-only gradient store is.

Run from the repository root::

    python demos/02_influence_and_ttests.py
"""

import numpy as np

from gradunlearn import (IhvpConfig, LayerScope, hvp_influence, init_model, lissa_ihvp,
                         load_fixture, paired_ttest, train)
from gradunlearn.experiment import DESK_TRAIN, ExperimentConfig
from gradunlearn.gradstore import serialized_size
from gradunlearn.influence import cosine_report, eval_gradient

dave = load_fixture("dave")
p0 = init_model(ExperimentConfig().model_config(dave.tokenizer.vocab_size))
result = train(p0, dave, DESK_TRAIN)
seqs = [it.token_ids for it in dave]


def scores(params):
    # the "test loss" is the mean loss over the same twenty sentences
    v = eval_gradient(params, seqs)
    ihvp = lissa_ihvp(params, seqs, v, IhvpConfig(iterations=20))
    return hvp_influence(params, dave, ihvp)


# %%
before, after = scores(p0), scores(result.params)
print("dp      before     after")
for dp in dave.ids[:6]:
    print(f"{dp:6s} {before.scores[dp]:+.4f}  {after.scores[dp]:+.4f}")

# %%
# Paired over sentences: did fine-tuning shift the whole distribution?
t = paired_ttest(before.values(dave.ids), after.values(dave.ids))
print(f"t = {t.t_statistic:.3f}, p = {t.p_value:.3g}, d = {t.cohens_d:.2f}, "
      f"95% CI {t.ci95[0]:+.3f} .. {t.ci95[1]:+.3f}")

# %%
# Cosine scores come straight from the stored gradients, no Hessian needed.
cos = cosine_report(result.params, dave, result.stores["all_epochs"])
top = sorted(cos.scores, key=cos.scores.get, reverse=True)[:3]
print("largest cosine influence:", ", ".join(f"{dp} ({cos.scores[dp]:.3f})" for dp in top))

# %%
# Keeping only the embedding layer's gradients costs a fraction of the space.
store = result.stores["all_epochs"]
small = store.project(LayerScope.embedding_only())
print(f"whole-model store {serialized_size(store) / 1e6:.1f} MB, "
      f"embedding-only {serialized_size(small) / 1e6:.2f} MB "
      f"({serialized_size(small) / serialized_size(store):.0%})")
print("norm of dp-15's embedding gradient:",
      f"{np.linalg.norm(small.entries[('dp-15', 'embedding')]):.3f}")
