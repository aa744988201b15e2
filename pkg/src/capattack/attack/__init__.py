from .box import from_tanh_space, to_tanh_space
from .keywords import STOPWORDS, check_keywords, content_words, count_keywords, pick_keywords
from .losses import (
    GATE_A,
    loss_logits_caption,
    loss_logits_keywords,
    loss_logprob_caption,
    loss_logprob_keywords,
)
from .optimize import (
    MODES,
    AttackConfig,
    AttackResult,
    RunOutcome,
    attack_batch,
    attack_fixed_c,
    binary_search_c,
    next_c,
    run_attack,
)
