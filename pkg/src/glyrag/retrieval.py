"""Exact cosine retrieval over fused embeddings and the cross-attention adapter."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from glyrag import autodiff as ad
from glyrag import io, nn
from glyrag.autodiff import Tensor
from glyrag.config import AdapterConfig
from glyrag.data import ProvenanceError


class EmptyIndexError(ValueError):
    pass


@dataclass(frozen=True)
class NeighborSet:
    indices: np.ndarray
    similarities: np.ndarray
    refs: tuple[str, ...]


@dataclass
class RetrievalIndex:
    z: np.ndarray  # (n, d)
    y: np.ndarray  # (n, 12), normalised units
    refs: list[str]
    encoder_checksum: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.z.ndim != 2 or len(self.z) != len(self.y) or len(self.z) != len(self.refs):
            raise ValueError("index arrays and refs disagree in length")
        norms = np.linalg.norm(self.z, axis=1)
        if not np.all(np.isfinite(self.z)) or np.any(norms == 0.0):
            raise ValueError("index embeddings must be finite and non-zero")
        self._unit = self.z / norms[:, None]
        self._row = {r: i for i, r in enumerate(self.refs)}

    def __len__(self) -> int:
        return len(self.refs)

    def similarities(self, z_query) -> np.ndarray:
        q = np.asarray(z_query, dtype=np.float64)
        nq = np.linalg.norm(q, axis=-1, keepdims=True)
        if np.any(nq == 0.0):
            raise ValueError("zero query vector")
        return (q / nq) @ self._unit.T

    def save(self, path) -> None:
        meta = {**self.meta, "count": len(self), "dim": int(self.z.shape[1]),
                "encoder_checksum": self.encoder_checksum, "refs": list(self.refs)}
        io.save_index_arrays(path, self.z, self.y, meta)

    @classmethod
    def load(cls, path, expect_checksum: str | None = None) -> "RetrievalIndex":
        z, y, meta = io.load_index_arrays(path)
        if expect_checksum is not None and meta.get("encoder_checksum") != expect_checksum:
            raise io.HashMismatchError("index was built from a different encoder checkpoint")
        refs = meta.pop("refs")
        checksum = meta.pop("encoder_checksum", "")
        meta.pop("count", None)
        meta.pop("dim", None)
        return cls(z, y, refs, checksum, meta)


def embed_inputs(encoder, x, ctx_raw=None, batch: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(x), batch):
        c = None if ctx_raw is None else ctx_raw[s: s + batch]
        out.append(encoder.embed_windows(x[s: s + batch], c))
    return np.concatenate(out) if out else np.zeros((0, encoder.cfg.encoder.d_model))


def build_index(encoder, x, ctx_raw, y, refs, splits, batch: int = 256) -> RetrievalIndex:
    """Embed training windows with the frozen encoder; entry ``j`` is window ``j``.

    ``x``/``y`` are normalised inputs/targets, ``ctx_raw`` the summary
    embeddings (ignored for BGL-only models) and ``splits`` the split tag of
    every window; anything other than ``"train"`` is refused.
    """
    bad = [r for r, s in zip(refs, splits) if s != "train"]
    if bad:
        raise ProvenanceError(f"index accepts training windows only; got {bad[0]}")
    if len(x) == 0:
        raise EmptyIndexError("no windows to index")
    z = embed_inputs(encoder, np.asarray(x), ctx_raw if encoder.cfg.use_context else None, batch)
    return RetrievalIndex(z, np.asarray(y), list(refs), encoder.checksum())


def query_top_k(index: RetrievalIndex, z_query, k: int = 3, exclude_ref: str | None = None) -> NeighborSet:
    """Exact top-``k`` by cosine similarity; ties go to the lower insertion index."""
    if len(index) == 0:
        raise EmptyIndexError("empty index")
    sims = index.similarities(z_query)
    order = np.argsort(-sims, kind="stable")
    if exclude_ref is not None:
        order = order[np.asarray(index.refs, dtype=object)[order] != exclude_ref]
    top = order[:k]
    return NeighborSet(top, sims[top], tuple(index.refs[i] for i in top))


def query_batch(index: RetrievalIndex, z_queries, k: int, exclude_refs=None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`query_top_k`; returns ``(indices, similarities)`` of shape ``(B, k')``."""
    if len(index) == 0:
        raise EmptyIndexError("empty index")
    sims = index.similarities(np.atleast_2d(z_queries))
    if exclude_refs is not None:
        for b, ref in enumerate(exclude_refs):
            j = index._row.get(ref)
            if j is not None:
                sims[b, j] = -np.inf
    kk = min(k, len(index) - (1 if exclude_refs is not None and len(index) > 1 else 0))
    kk = max(kk, 1)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :kk]
    return order, np.take_along_axis(sims, order, axis=1)


def cross_attention_branch(z_query: Tensor, z_j, branch: nn.MultiHeadAttention) -> Tensor:
    """Query attends to a single neighbour: per head the weight is exactly one."""
    q = ad.as_tensor(z_query)
    kv = ad.as_tensor(z_j)
    squeeze = q.ndim == 1
    q3 = ad.reshape(q, (-1, 1, q.shape[-1]))
    kv3 = ad.reshape(kv, (-1, 1, kv.shape[-1]))
    out = branch(q3, kv3)
    return ad.reshape(out, (q.shape[-1],) if squeeze else (q.shape[0], out.shape[-1]))


def aggregate_mean(branches: list[Tensor]) -> Tensor:
    return ad.mean(ad.stack(branches, axis=0), axis=0)


class RetrievalAdapter(nn.Module):
    """``K`` cross-attention branches, an aggregator and the MLP forecast head."""

    def __init__(self, d: int, cfg: AdapterConfig, horizon: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        if d % cfg.heads:
            raise ValueError(f"width {d} not divisible by {cfg.heads} adapter heads")
        self.branches = [self.add_module(f"branch{i}", nn.MultiHeadAttention(d, cfg.heads, rng))
                         for i in range(cfg.k)]
        if cfg.aggregation == "learned":
            self.agg_logits = self.add_param("agg_logits", Tensor(np.zeros(cfg.k)))
        elif cfg.aggregation == "lstm":
            self.agg_lstm = self.add_module("agg_lstm", nn.LSTM(d, cfg.agg_lstm_hidden, 1, rng))
            self.agg_proj = self.add_module("agg_proj", nn.Linear(cfg.agg_lstm_hidden, d, rng))
        self.head = self.add_module("head", nn.MLP([2 * d, *cfg.head_hidden, horizon], rng))

    def aggregate(self, branch_out: list[Tensor]) -> Tensor:
        if self.cfg.aggregation == "mean" or len(branch_out) == 1 and self.cfg.aggregation != "lstm":
            return aggregate_mean(branch_out)
        if self.cfg.aggregation == "learned":
            w = ad.softmax(self.agg_logits[: len(branch_out)], axis=-1)
            terms = [ad.mul(h, w[i]) for i, h in enumerate(branch_out)]
            out = terms[0]
            for t in terms[1:]:
                out = ad.add(out, t)
            return out
        _, finals = self.agg_lstm(ad.stack(branch_out, axis=-2))  # (B, K, d) in similarity order
        return self.agg_proj(finals[-1][0])

    def __call__(self, z_query, neighbors, anchor=None) -> Tensor:
        """``z_query``: ``(B, d)``; ``neighbors``: ``(B, K', d)`` constants in similarity order.

        ``anchor`` (``(B, horizon)``), when given, is added to the head output.
        """
        zq = ad.as_tensor(z_query)
        nb = np.asarray(neighbors, dtype=np.float64)
        outs = [cross_attention_branch(zq, nb[:, i, :], self.branches[i]) for i in range(nb.shape[1])]
        y = rag_forecast(zq, self.aggregate(outs), self.head)
        return y if anchor is None else ad.add(y, anchor)


def rag_forecast(z_query: Tensor, z_rag: Tensor, head: nn.MLP) -> Tensor:
    return head(ad.concat([ad.as_tensor(z_query), z_rag], axis=-1))
