"""Query-based decoder and prediction heads.

A fixed set of learned query embeddings self-attends, cross-attends into the
encoder memory through deformable attention at per-query reference points
(predicted once from the embeddings), and feeds classification / box heads.
All intermediate layer outputs are kept for auxiliary supervision. Boxes are
sigmoid-bounded normalized (cx, cy, w, h); postprocessing is a pure sort +
threshold, no NMS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ConfigError, Tensor
from .fusion import DeformableAttention, FeedForward
from .layers import LayerNorm, Linear, Mlp, Module, trunc_normal_param


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head query/key/value maps."""

    def __init__(self, dim, heads, rng):
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng.split("q"))
        self.k_proj = Linear(dim, dim, rng.split("k"))
        self.v_proj = Linear(dim, dim, rng.split("v"))
        self.out_proj = Linear(dim, dim, rng.split("out"))

    def __call__(self, q, k, v):
        nq, d = q.shape
        nk = k.shape[0]
        m = self.heads
        cv = d // m
        qh = ag.transpose(ag.reshape(self.q_proj(q), (nq, m, cv)), (1, 0, 2))
        kh = ag.transpose(ag.reshape(self.k_proj(k), (nk, m, cv)), (1, 0, 2))
        vh = ag.transpose(ag.reshape(self.v_proj(v), (nk, m, cv)), (1, 0, 2))
        logits = ag.mul(ag.matmul(qh, ag.transpose(kh, (0, 2, 1))),
                        1.0 / math.sqrt(cv))
        attn = ag.softmax(logits, axis=-1)
        mixed = ag.matmul(attn, vh)                       # [m,nq,cv]
        out = ag.reshape(ag.transpose(mixed, (1, 0, 2)), (nq, d))
        return self.out_proj(out)

    def attention_weights(self, q, k):
        """Forward-only attention matrix [heads, Nq, Nk] (no tape use)."""
        nq, d = q.shape
        nk = k.shape[0]
        m = self.heads
        cv = d // m
        qh = ag.transpose(ag.reshape(self.q_proj(q), (nq, m, cv)), (1, 0, 2))
        kh = ag.transpose(ag.reshape(self.k_proj(k), (nk, m, cv)), (1, 0, 2))
        logits = ag.mul(ag.matmul(qh, ag.transpose(kh, (0, 2, 1))),
                        1.0 / math.sqrt(cv))
        return ag.softmax(logits, axis=-1)


class QueryEmbedding(Module):
    """Learned query content vectors plus a reference-point projection."""

    def __init__(self, num_queries, dim, rng):
        self.weight = trunc_normal_param((num_queries, dim), rng.split("embed"))
        self.ref_head = Linear(dim, 2, rng.split("ref"))

    def reference_points(self, num_levels):
        refs = ag.sigmoid(self.ref_head(self.weight))     # [Q,2] in (0,1)
        q = refs.shape[0]
        return ag.broadcast_to(ag.reshape(refs, (q, 1, 2)), (q, num_levels, 2))


class DecoderLayer(Module):
    def __init__(self, dim, heads, points, levels, rng):
        self.self_attn = MultiHeadAttention(dim, heads, rng.split("self"))
        self.norm1 = LayerNorm(dim)
        self.cross_attn = DeformableAttention(dim, heads, points, levels,
                                              rng.split("cross"))
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, rng.split("ffn"))
        self.norm3 = LayerNorm(dim)

    def __call__(self, x, refs, memory, level_shapes):
        x = self.norm1(ag.add(x, self.self_attn(x, x, x)))
        x = self.norm2(ag.add(x, self.cross_attn(x, refs, memory, level_shapes)))
        x = self.norm3(ag.add(x, self.ffn(x)))
        return x


class Decoder(Module):
    """Stack of decoder layers; returns every layer's query embeddings."""

    def __init__(self, dim, heads, points, levels, num_layers, rng):
        self.layers = [DecoderLayer(dim, heads, points, levels,
                                    rng.split(f"layer{i}"))
                       for i in range(num_layers)]

    def __call__(self, memory, level_shapes, queries, refs):
        x = queries
        outputs = []
        for layer in self.layers:
            x = layer(x, refs, memory, level_shapes)
            outputs.append(x)
        return outputs


class PredictionHeads(Module):
    """Class logits (no background class) and sigmoid-bounded boxes."""

    def __init__(self, dim, num_classes, rng):
        self.class_head = Linear(dim, num_classes, rng.split("cls"))
        self.box_head = Mlp([dim, dim, dim, 4], rng.split("box"))

    def __call__(self, embeddings):
        logits = self.class_head(embeddings)
        boxes = ag.sigmoid(self.box_head(embeddings))
        return logits, boxes


@dataclass
class DetectionSet:
    """Per-image detections: parallel arrays sorted by descending score."""

    class_ids: np.ndarray
    scores: np.ndarray
    boxes: np.ndarray  # normalized cxcywh

    def __len__(self):
        return len(self.scores)

    @staticmethod
    def empty():
        return DetectionSet(np.zeros(0, dtype=np.int64), np.zeros(0),
                            np.zeros((0, 4)))


def postprocess(logits, boxes, score_threshold=0.0, max_dets=100):
    """Flatten per-(query, class) sigmoid scores into a ranked DetectionSet.

    Ordering is the total order (score desc, query asc, class asc); entries
    below the threshold are dropped, then the list is cut at max_dets.
    """
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    boxes = boxes.data if isinstance(boxes, Tensor) else np.asarray(boxes)
    nq, nc = logits.shape
    scores = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    qidx, cidx = np.meshgrid(np.arange(nq), np.arange(nc), indexing="ij")
    flat_scores = scores.ravel()
    order = np.lexsort((cidx.ravel(), qidx.ravel(), -flat_scores))
    keep = flat_scores[order] >= score_threshold
    order = order[keep][:max_dets]
    return DetectionSet(
        class_ids=cidx.ravel()[order].astype(np.int64),
        scores=flat_scores[order],
        boxes=boxes[qidx.ravel()[order]].astype(np.float64),
    )
