"""Next-character prediction with a small feed-forward network.

The corpus is a list of ``(source, text)`` lines. Each character position is
one sample: the preceding ``context`` characters (left-padded) predict the
character itself. Parameters live in one flat vector; forward and backward
passes are written out with numpy.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.config import ShardMode
from src.params import ParamVector, check_finite
from src.workloads.base import Shard, Workload, worker_rng

logger = logging.getLogger(__name__)

PAD = "\x00"
_EVAL_CHUNK = 4096
_SYNTHETIC_ALPHABET = "abcdefghijklmnopqrstuvwxyz"


def load_corpus(path: str | Path) -> List[Tuple[str, str]]:
    """Read ``source<TAB>text`` lines; blank lines are skipped."""
    lines: List[Tuple[str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.rstrip("\n")
            if not raw.strip():
                continue
            if "\t" not in raw:
                raise ValueError(f"{path}:{lineno}: expected 'source<TAB>text'")
            source, text = raw.split("\t", 1)
            if text:
                lines.append((source, text))
    if not lines:
        raise ValueError(f"{path}: corpus is empty")
    return lines


def synthetic_corpus(
    num_sources: int, lines_per_source: int, line_length: int, seed: int
) -> List[Tuple[str, str]]:
    """Each source speaks its own small Markov 'dialect' over a letter subset."""
    rng = np.random.default_rng(seed)
    corpus: List[Tuple[str, str]] = []
    for k in range(num_sources):
        letters = rng.choice(list(_SYNTHETIC_ALPHABET), size=6, replace=False).tolist() + [" "]
        transition = rng.dirichlet(np.full(len(letters), 0.3), size=len(letters))
        for _ in range(lines_per_source):
            state = int(rng.integers(len(letters)))
            chars = []
            for _ in range(line_length):
                chars.append(letters[state])
                state = int(rng.choice(len(letters), p=transition[state]))
            corpus.append((f"source-{k:02d}", "".join(chars)))
    return corpus


class CharLmSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["char_lm"] = "char_lm"
    corpus: Optional[str] = None
    synthetic_sources: int = Field(default=8, ge=1)
    synthetic_lines: int = Field(default=40, ge=1)
    synthetic_line_length: int = Field(default=60, ge=2)
    context: int = Field(default=80, ge=1)
    embed_dim: int = Field(default=8, ge=1)
    hidden: List[int] = Field(default_factory=lambda: [64, 64])
    batch_size: int = Field(default=16, ge=1)
    seed: int = 0

    def build(self) -> "CharLmTask":
        if self.corpus is not None:
            lines = load_corpus(self.corpus)
        else:
            lines = synthetic_corpus(
                self.synthetic_sources, self.synthetic_lines, self.synthetic_line_length, self.seed
            )
        return CharLmTask(
            lines,
            context=self.context,
            embed_dim=self.embed_dim,
            hidden=self.hidden,
            batch_size=self.batch_size,
            seed=self.seed,
        )


class CharLmTask(Workload):
    def __init__(
        self,
        lines: List[Tuple[str, str]],
        context: int = 80,
        embed_dim: int = 8,
        hidden: Optional[List[int]] = None,
        batch_size: int = 16,
        seed: int = 0,
    ) -> None:
        if not lines:
            raise ValueError("corpus is empty")
        self.context = context
        self.embed_dim = embed_dim
        self.hidden = list(hidden) if hidden is not None else [64, 64]
        if any(width < 1 for width in self.hidden):
            raise ValueError("hidden layer widths must be positive")
        self.batch_size = batch_size
        self.samples_per_step = batch_size
        self.seed = seed

        self.sources = sorted({source for source, _ in lines})
        chars = sorted({c for _, text in lines for c in text} - {PAD})
        self.vocab = [PAD] + chars
        self._char_id = {c: i for i, c in enumerate(self.vocab)}
        self.inputs, self.targets, self.source_ids = self._encode(lines)

        self._layout = self._build_layout()
        self.dim = sum(int(np.prod(shape)) for _, shape in self._layout)
        logger.debug(
            "char-lm: %d samples, %d sources, vocab %d, %d parameters",
            len(self.targets), len(self.sources), len(self.vocab), self.dim,
        )

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    # ----- data -----

    def _encode(self, lines: List[Tuple[str, str]]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        source_index = {source: i for i, source in enumerate(self.sources)}
        xs, ys, srcs = [], [], []
        for source, text in lines:
            ids = [0] * self.context + [self._char_id[c] for c in text]
            for p in range(len(text)):
                xs.append(ids[p:p + self.context])
                ys.append(ids[p + self.context])
                srcs.append(source_index[source])
        return (
            np.asarray(xs, dtype=np.int64).reshape(-1, self.context),
            np.asarray(ys, dtype=np.int64),
            np.asarray(srcs, dtype=np.int64),
        )

    def shard(self, num_workers: int, mode: ShardMode, seed: int) -> List[Shard]:
        """non_iid deals whole sources out round robin.

        With more sources than workers, worker *w* owns every source whose
        index is congruent to *w*, so a worker may hold several sources but
        no source is ever split across workers.
        """
        if num_workers < 1:
            raise ValueError("need at least one worker")
        if ShardMode(mode) is ShardMode.NON_IID:
            if num_workers > len(self.sources):
                raise ValueError(f"more workers ({num_workers}) than sources ({len(self.sources)})")
            return [
                Shard(w, np.flatnonzero(self.source_ids % num_workers == w).astype(np.int64), seed)
                for w in range(num_workers)
            ]
        order = np.random.default_rng(seed).permutation(len(self.targets)).astype(np.int64)
        return [Shard(w, order[w::num_workers], seed) for w in range(num_workers)]

    # ----- parameters -----

    def _build_layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        layout: List[Tuple[str, Tuple[int, ...]]] = [("embed", (self.vocab_size, self.embed_dim))]
        fan_in = self.context * self.embed_dim
        for k, width in enumerate(self.hidden):
            layout.append((f"w{k}", (fan_in, width)))
            layout.append((f"b{k}", (width,)))
            fan_in = width
        layout.append(("w_out", (fan_in, self.vocab_size)))
        layout.append(("b_out", (self.vocab_size,)))
        return layout

    def _unpack(self, theta: np.ndarray) -> Dict[str, np.ndarray]:
        views: Dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self._layout:
            size = int(np.prod(shape))
            views[name] = theta[offset:offset + size].reshape(shape)
            offset += size
        return views

    def init_params(self) -> ParamVector:
        rng = np.random.default_rng(self.seed)
        theta = np.zeros(self.dim)
        views = self._unpack(theta)
        views["embed"][...] = 0.1 * rng.standard_normal(views["embed"].shape)
        for name, shape in self._layout:
            if name.startswith("w"):
                views[name][...] = rng.standard_normal(shape) / np.sqrt(shape[0])
        return theta

    # ----- forward / backward -----

    def _forward(self, theta: ParamVector, x: np.ndarray) -> Tuple[Dict[str, np.ndarray], List[np.ndarray], np.ndarray]:
        p = self._unpack(theta)
        h = p["embed"][x].reshape(len(x), -1)
        acts = [h]
        for k in range(len(self.hidden)):
            h = np.tanh(h @ p[f"w{k}"] + p[f"b{k}"])
            acts.append(h)
        logits = h @ p["w_out"] + p["b_out"]
        logits = logits - logits.max(axis=1, keepdims=True)
        log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return p, acts, log_probs

    def loss_and_grad(self, theta: ParamVector, x: np.ndarray, y: np.ndarray) -> Tuple[ParamVector, float]:
        n = len(y)
        p, acts, log_probs = self._forward(theta, x)
        loss = -float(np.mean(log_probs[np.arange(n), y]))

        grad = np.zeros(self.dim)
        g = self._unpack(grad)
        d = np.exp(log_probs)
        d[np.arange(n), y] -= 1.0
        d /= n
        g["w_out"][...] = acts[-1].T @ d
        g["b_out"][...] = d.sum(axis=0)
        dh = d @ p["w_out"].T
        for k in reversed(range(len(self.hidden))):
            dz = dh * (1.0 - acts[k + 1] ** 2)
            g[f"w{k}"][...] = acts[k].T @ dz
            g[f"b{k}"][...] = dz.sum(axis=0)
            dh = dz @ p[f"w{k}"].T
        np.add.at(g["embed"], x, dh.reshape(n, self.context, self.embed_dim))
        return grad, loss

    def grad(self, theta: ParamVector, shard: Shard, step: int) -> Tuple[ParamVector, float]:
        check_finite(theta, "parameters", step=step)
        rng = worker_rng(shard.seed, shard.worker, step)
        batch = shard.indices[rng.integers(0, len(shard), size=self.batch_size)]
        return self.loss_and_grad(theta, self.inputs[batch], self.targets[batch])

    def full_loss(self, theta: ParamVector) -> float:
        check_finite(theta, "parameters")
        total = 0.0
        n = len(self.targets)
        for start in range(0, n, _EVAL_CHUNK):
            x = self.inputs[start:start + _EVAL_CHUNK]
            y = self.targets[start:start + _EVAL_CHUNK]
            _, _, log_probs = self._forward(theta, x)
            total -= float(log_probs[np.arange(len(y)), y].sum())
        return total / n

    def accuracy(self, theta: ParamVector) -> float:
        """Top-1 next-character accuracy over the whole corpus."""
        hits = 0
        for start in range(0, len(self.targets), _EVAL_CHUNK):
            x = self.inputs[start:start + _EVAL_CHUNK]
            y = self.targets[start:start + _EVAL_CHUNK]
            _, _, log_probs = self._forward(theta, x)
            hits += int(np.sum(np.argmax(log_probs, axis=1) == y))
        return hits / len(self.targets)
