"""Byte-level tokenizer, synthetic tasks, and batch encoding.

Vocabulary is the 256 byte values plus four specials (pad, bos, eos, sep).
A sample is an (instruction, answer) pair laid out as

    bos  instruction-bytes  sep  answer-bytes  eos  pad...

and the loss mask covers exactly the answer bytes, so the mask of a batch
sums to the total answer-token count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .numerics import ConfigError, InputError, ParseError, Rng

PAD, BOS, EOS, SEP = 256, 257, 258, 259
VOCAB_SIZE = 260


class ByteTokenizer:
    """Bytes are their own ids; four specials sit above 255."""

    vocab_size = VOCAB_SIZE
    pad, bos, eos, sep = PAD, BOS, EOS, SEP

    def encode(self, text: str | bytes) -> list[int]:
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return list(raw)

    def decode(self, ids: Iterable[int]) -> str:
        keep = bytes(i for i in ids if 0 <= i < 256)
        return keep.decode("utf-8", errors="replace")


@dataclass
class Sample:
    instruction: str
    answer: str


@dataclass
class TaskSpec:
    """Synthetic task family, fully determined by its fields and seed.

    kind: copy | reverse | modular_add | markov_text
    min_len/max_len bound the string (or sequence) length; modulus applies to
    modular_add; order and alphabet_size shape the markov_text chain.
    """

    kind: str
    min_len: int = 4
    max_len: int = 8
    modulus: int = 97
    order: int = 2
    alphabet_size: int = 12
    seed: int = 0

    def __post_init__(self):
        kinds = ("copy", "reverse", "modular_add", "markov_text")
        if self.kind not in kinds:
            raise ConfigError(f"task kind must be one of {kinds}, got {self.kind!r}")
        if not (1 <= self.min_len <= self.max_len):
            raise ConfigError(f"need 1 <= min_len <= max_len, got [{self.min_len}, {self.max_len}]")
        if self.kind == "modular_add" and self.modulus < 2:
            raise ConfigError(f"modulus must be >= 2, got {self.modulus}")
        if self.kind == "markov_text":
            if self.order < 1:
                raise ConfigError(f"markov order must be >= 1, got {self.order}")
            if not (2 <= self.alphabet_size <= 26):
                raise ConfigError(f"alphabet_size must lie in [2, 26], got {self.alphabet_size}")


_LOWER = "abcdefghijklmnopqrstuvwxyz"


def _markov_tables(spec: TaskSpec, rng: Rng) -> np.ndarray:
    """Transition table, shape (alphabet^order, alphabet). Peaked rows so the
    chain has learnable structure well below uniform entropy."""
    a = spec.alphabet_size
    states = a**spec.order
    logits = rng.normal((states, a), 1.0) * 2.5
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def generate_samples(spec: TaskSpec, n: int) -> list[Sample]:
    """n deterministic samples for the task; same spec, same list."""
    if n < 1:
        raise ConfigError(f"need n >= 1 samples, got {n}")
    rng = Rng(spec.seed)
    out: list[Sample] = []
    if spec.kind in ("copy", "reverse"):
        for _ in range(n):
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            s = "".join(_LOWER[int(c)] for c in rng.integers(0, 26, size=length))
            out.append(Sample(s, s if spec.kind == "copy" else s[::-1]))
    elif spec.kind == "modular_add":
        hi = 10 ** max(1, spec.max_len // 2)
        for _ in range(n):
            x = int(rng.integers(0, hi))
            y = int(rng.integers(0, hi))
            out.append(Sample(f"{x}+{y}", str((x + y) % spec.modulus)))
    else:  # markov_text
        table = _markov_tables(spec, rng.child(0))
        walk = rng.child(1)
        a = spec.alphabet_size
        for _ in range(n):
            length = int(walk.integers(spec.min_len, spec.max_len + 1))
            state = [int(c) for c in walk.integers(0, a, size=spec.order)]
            chars = list(state)
            while len(chars) < length:
                idx = 0
                for s in state:
                    idx = idx * a + s
                nxt = int(np.searchsorted(np.cumsum(table[idx]), walk.uniform()))
                nxt = min(nxt, a - 1)
                chars.append(nxt)
                state = state[1:] + [nxt]
            out.append(Sample("", "".join(_LOWER[c] for c in chars[:length])))
    return out


def encode_batch(samples: list[Sample], tok: ByteTokenizer,
                 t_max: Optional[int] = None) -> dict:
    """Pack samples into next-token-prediction arrays.

    Returns tokens/targets of shape (B, T) and a float mask that is 1 exactly
    where the target is an answer byte. T is the longest sequence in the
    batch minus one (inputs are the sequence without its last element,
    targets without its first). Sequences longer than t_max are an error.
    """
    if not samples:
        raise InputError("cannot encode an empty batch")
    seqs = []
    spans = []
    for s in samples:
        instr = tok.encode(s.instruction)
        ans = tok.encode(s.answer)
        if not ans:
            raise InputError(f"sample has an empty answer: {s!r}")
        seq = [tok.bos] + instr + [tok.sep] + ans + [tok.eos]
        if t_max is not None and len(seq) > t_max + 1:
            raise InputError(
                f"encoded sample length {len(seq)} exceeds t_max+1 = {t_max + 1}"
            )
        seqs.append(seq)
        a0 = 2 + len(instr)  # index of the first answer byte in seq
        spans.append((a0, a0 + len(ans)))
    t = max(len(q) for q in seqs) - 1
    b = len(seqs)
    tokens = np.full((b, t), PAD, dtype=np.int64)
    targets = np.full((b, t), PAD, dtype=np.int64)
    mask = np.zeros((b, t), dtype=np.float64)
    for i, (seq, (a0, a1)) in enumerate(zip(seqs, spans)):
        arr = np.asarray(seq, dtype=np.int64)
        tokens[i, : len(seq) - 1] = arr[:-1]
        targets[i, : len(seq) - 1] = arr[1:]
        mask[i, a0 - 1 : a1 - 1] = 1.0  # target position t predicts seq[t+1]
    return {"tokens": tokens, "targets": targets, "mask": mask}


def save_jsonl(path, samples: list[Sample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"instruction": s.instruction, "answer": s.answer}) + "\n")


def load_jsonl(path) -> list[Sample]:
    """Read instruction/answer pairs; parse failures name the line."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(obj, dict) or not isinstance(obj.get("instruction"), str) \
                    or not isinstance(obj.get("answer"), str):
                raise ParseError(
                    f"{path}:{lineno}: expected an object with string "
                    f"'instruction' and 'answer'"
                )
            if obj["answer"] == "":
                raise ParseError(f"{path}:{lineno}: answer must be non-empty")
            out.append(Sample(obj["instruction"], obj["answer"]))
    return out
