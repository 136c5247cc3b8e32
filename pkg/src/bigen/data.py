"""Tensor views of a generated dataset for training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import toyworld, viscodec


@dataclass
class SplitTensors:
    """Precomputed per-split tensors; feature rows are float32."""
    ids: list                     # example ids, aligned with rows
    dense: torch.Tensor           # N x M x D dense grid features
    discrete: torch.Tensor        # N x M x D centroid rows of the true tokens
    tokens: torch.Tensor          # N x M visual token grid (int64)
    boxes: torch.Tensor           # N x M x 4 canonical grid boxes
    captions: torch.Tensor        # N x L caption ids with BOS/EOS/PAD
    caption_mask: torch.Tensor    # N x L bool, True on real tokens
    references: list              # list of reference word-lists per example

    def __len__(self) -> int:
        return len(self.ids)

    def scorer_view(self, features: str = "dense") -> dict:
        feats = self.dense if features == "dense" else self.discrete
        return {"features": feats, "boxes": self.boxes,
                "ids": self.captions, "mask": self.caption_mask}


def split_tensors(examples: list, vocab: toyworld.TextVocabulary,
                  visual_vocab: viscodec.VisualVocabulary,
                  include_discrete: bool = True) -> SplitTensors:
    """`include_discrete=False` skips quantization and the centroid rows
    (scorer corpora only need the dense view; halves memory)."""
    n = len(examples)
    m, d = viscodec.M, viscodec.D
    dense = np.empty((n, m, d), dtype=np.float32)
    tokens = np.zeros((n, m), dtype=np.int64)
    captions = np.empty((n, toyworld.CAPTION_LEN), dtype=np.int64)
    refs = []
    for i, ex in enumerate(examples):
        gf = viscodec.extract_grid_features(ex.image)
        dense[i] = gf.features
        if include_discrete:
            tokens[i] = viscodec.quantize(gf, visual_vocab)
        captions[i] = np.asarray(ex.caption_tokens)
        refs.append(ex.references)
    if include_discrete:
        discrete = torch.from_numpy(visual_vocab.centroids[tokens].astype(np.float32))
    else:
        discrete = torch.empty(0)
    boxes = np.broadcast_to(viscodec.grid_positions().astype(np.float32), (n, m, 4)).copy()
    cap_t = torch.from_numpy(captions)
    return SplitTensors(
        ids=[ex.id for ex in examples],
        dense=torch.from_numpy(dense),
        discrete=discrete,
        tokens=torch.from_numpy(tokens),
        boxes=torch.from_numpy(boxes),
        captions=cap_t,
        caption_mask=cap_t != vocab.pad_id,
        references=refs,
    )
