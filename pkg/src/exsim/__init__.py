"""exsim: a three-stage similar-exercise retrieval engine.

Recall pulls a few hundred candidates per query from the bank through two
complementary channels (BM25 text matching and embedding cosine search),
ranking re-scores them with a multi-task pair model, and re-rank applies
education-specific filters (variant promotion, difficulty and learning-stage
rules). All models are small numpy implementations with hand-written,
finite-difference-checked gradients.
"""

__version__ = "0.1.0"
