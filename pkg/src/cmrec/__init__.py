"""Cross-market recommendation pipeline.

Two stages: a battery of memory-, embedding- and graph-based scorers run
over market combinations to produce pre-ranking features, then a bagged
gradient-boosted ranker trained on feature-selected columns re-ranks the
candidate lists. Evaluated by NDCG@10, averaged over target markets with
fitted weights.
"""

__version__ = "0.1.0"
