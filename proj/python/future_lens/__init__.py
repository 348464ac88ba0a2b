"""Python access to the future-lens workbench core.

The heavy lifting lives in the compiled ``_core`` module; this package adds
thin conveniences such as returning lens grids as dictionaries.
"""

import json

from ._core import (
    FlnsError,
    Model,
    ModelConfig,
    RunConfig,
    Tokenizer,
    bigram_counts,
    evaluate,
    kl_divergence,
    lens_json,
    load_model,
    precision_at_k,
    surprisal,
    train_model,
    train_probes,
    train_prompts,
)

__all__ = [
    "FlnsError",
    "Model",
    "ModelConfig",
    "RunConfig",
    "Tokenizer",
    "bigram_counts",
    "evaluate",
    "kl_divergence",
    "lens",
    "lens_json",
    "load_model",
    "precision_at_k",
    "surprisal",
    "train_model",
    "train_probes",
    "train_prompts",
]


def lens(config, prompt, method="learned", horizon=4):
    """Future-lens grid for ``prompt`` as a dict (same schema as POST /lens)."""
    return json.loads(lens_json(config, prompt, method, horizon))
