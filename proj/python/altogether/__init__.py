"""Alt-text re-alignment toolkit."""

from ._core import (
    Error,
    Model,
    Vocab,
    World,
    edit_distance,
    evaluate,
    lr_schedule,
    mix,
    noun_phrases,
    np_prf,
    round_stats,
    starting_prompt_check,
    train,
)

__all__ = [
    "Error",
    "Model",
    "Vocab",
    "World",
    "edit_distance",
    "evaluate",
    "lr_schedule",
    "mix",
    "noun_phrases",
    "np_prf",
    "round_stats",
    "starting_prompt_check",
    "train",
]
