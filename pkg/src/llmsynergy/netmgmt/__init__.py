"""Network-management harnesses: content popularity prediction and intent extraction."""

from .intent import IntentSample, extract_intent_rules, score_intents
from .popularity import (
    FrequencyBaseline,
    IntervalDataset,
    Markov1Baseline,
    ViewingRecord,
    bucketize,
    parse_template,
    predict_baseline,
    render_template,
    score,
    split_train_test,
)

__all__ = [
    "FrequencyBaseline",
    "IntentSample",
    "IntervalDataset",
    "Markov1Baseline",
    "ViewingRecord",
    "bucketize",
    "extract_intent_rules",
    "parse_template",
    "predict_baseline",
    "render_template",
    "score",
    "score_intents",
    "split_train_test",
]
