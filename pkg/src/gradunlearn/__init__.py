"""Machine unlearning by gradient ascent on stored per-datapoint gradients.

A tiny numpy decoder-only transformer is fine-tuned while the loss gradient
of every training sentence is summed per layer. Forgetting a sentence then
means pushing the parameters back along its stored gradient, optionally
restricted to a subset of layers or to the first epoch's gradients.
"""

from .data import Dataset, DataPoint, Tokenizer, build_vocab, load_dataset, load_fixture
from .evaluation import (complete, generate_greedy, perplexity, prompt_ids, rouge_all, rouge_l,
                         rouge_n)
from .gradstore import GradientStore, LayerScope
from .influence import (IhvpConfig, InfluenceReport, cosine_influence, hvp_influence,
                        lissa, lissa_ihvp)
from .model import ModelConfig, ModelParams, backward, forward, hvp, init_model
from .stats import PairedTestResult, paired_ttest, student_t_cdf
from .train import TrainConfig, adam_step, train
from .unlearn import (UnlearnConfig, UnlearnRun, apply_ascent, detect_inflection,
                      find_closest_match, unlearn_fuzzy, unlearn_iterative, verify_unlearned)

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DataPoint", "Tokenizer", "build_vocab", "load_dataset", "load_fixture",
    "complete", "generate_greedy", "perplexity", "prompt_ids", "rouge_all", "rouge_l", "rouge_n",
    "GradientStore", "LayerScope",
    "IhvpConfig", "InfluenceReport", "cosine_influence", "hvp_influence", "lissa", "lissa_ihvp",
    "ModelConfig", "ModelParams", "backward", "forward", "hvp", "init_model",
    "PairedTestResult", "paired_ttest", "student_t_cdf",
    "TrainConfig", "adam_step", "train",
    "UnlearnConfig", "UnlearnRun", "apply_ascent", "detect_inflection", "find_closest_match",
    "unlearn_fuzzy", "unlearn_iterative", "verify_unlearned",
]
