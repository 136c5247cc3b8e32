"""Bi-directional image/text generation on a synthetic shapes world.

One parameter-shared transformer captions images (autoregressive over words,
dense grid features in) and synthesizes images from captions (mask-predict
over discrete visual tokens, centroid features in), trained token-level then
sequence-level (self-critical caption reward; contrastive image-text
consistency through a Gumbel-Softmax straight-through estimator), evaluated
with BLEU/ROUGE-L/consensus caption scores and Fréchet/R-precision/
clamped-cosine image scores against a locally trained dual-encoder.
"""

__version__ = "0.1.0"
