"""Word-level tokenizer, task-description encoder, and autoregressive
text decoder whose vocabulary logits are dot products against linearly
transformed encoder word embeddings.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor, TensorError

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = [PAD, BOS, EOS, UNK]

_WORD_RE = re.compile(r"[^\w\s]")


def word_tokens(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _WORD_RE.sub(" ", text.lower()).split()


class Vocabulary:
    """Dense token ids; specials occupy the first four slots."""

    def __init__(self, tokens):
        self.tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self):
        return self.index[PAD]

    @property
    def bos_id(self):
        return self.index[BOS]

    @property
    def eos_id(self):
        return self.index[EOS]

    @property
    def unk_id(self):
        return self.index[UNK]

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in word_tokens(text)]

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            tok = self.tokens[int(i)]
            if tok in (PAD, BOS, EOS):
                continue
            words.append(tok)
        return " ".join(words)

    def save(self, path):
        with open(path, "w") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @staticmethod
    def load(path) -> "Vocabulary":
        with open(path) as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        if tokens[:4] != SPECIALS:
            raise ValueError("vocabulary file must start with the four specials")
        return Vocabulary(tokens[4:])


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(text)


def detokenize(ids, vocab: Vocabulary) -> str:
    return vocab.decode(ids)


@dataclass
class LanguageConfig:
    d_model: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    d_ff: int = 128
    max_len: int = 20        # decoder budget; matches caption length cap
    max_prompt_len: int = 16

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")


class TaskEncoder(nn.Module):
    """Bidirectional transformer over prompt tokens with learned positions."""

    def __init__(self, rng, vocab_size, cfg: LanguageConfig):
        self.cfg = cfg
        self.embed = nn.Embedding(rng, vocab_size, cfg.d_model)
        self.pos = nn.Embedding(rng, cfg.max_prompt_len, cfg.d_model)
        self.layers = [nn.EncoderLayer(rng, cfg.d_model, cfg.heads, cfg.d_ff)
                       for _ in range(cfg.encoder_layers)]

    def __call__(self, ids: np.ndarray, lengths):
        """ids: (B, T) padded token ids. Returns (B, T, d)."""
        b, t = ids.shape
        if t == 0 or min(lengths) == 0:
            raise TensorError("encode_task: empty prompt (every task has a description)")
        if t > self.cfg.max_prompt_len:
            raise TensorError(f"encode_task: prompt length {t} exceeds "
                              f"{self.cfg.max_prompt_len}")
        x = T.add(self.embed(ids), self.pos(np.arange(t)))
        mask = nn.padding_mask(lengths, t)
        for layer in self.layers:
            x = layer(x, mask)
        return x


class TextDecoder(nn.Module):
    """Causal decoder over its own trainable input embeddings; output
    logits are dot products with a linear transform of the task encoder's
    word-embedding table."""

    def __init__(self, rng, vocab_size, cfg: LanguageConfig):
        self.cfg = cfg
        self.embed = nn.Embedding(rng, vocab_size, cfg.d_model)  # decoder-side table
        self.pos = nn.Embedding(rng, cfg.max_len + 1, cfg.d_model)
        self.layers = [nn.DecoderLayer(rng, cfg.d_model, cfg.heads, cfg.d_ff)
                       for _ in range(cfg.decoder_layers)]
        # bias-free so the logit is the pure bilinear form <hidden, W enc(w)>
        self.word_transform = nn.param(rng, cfg.d_model, cfg.d_model)

    def hidden_states(self, prefix_ids: np.ndarray, memory, memory_mask=None):
        """prefix_ids: (B, L) beginning with BOS. Returns (B, L, d)."""
        b, l = prefix_ids.shape
        if l > self.cfg.max_len + 1:
            raise TensorError(f"decode: prefix length {l} exceeds L_max {self.cfg.max_len}")
        x = T.add(self.embed(prefix_ids), self.pos(np.arange(l)))
        self_mask = nn.causal_mask(l)
        for layer in self.layers:
            x = layer(x, memory, self_mask=self_mask, cross_mask=memory_mask)
        return x

    def logits_from_hidden(self, hidden, encoder_table: Tensor):
        """logit[., w] = <hidden, W @ enc(w)>; computed as (h W) enc^T."""
        projected = T.matmul(hidden, self.word_transform)
        return T.matmul(projected, T.swap_last2(encoder_table))

    def step_logits(self, prefix_ids, memory, encoder_table, memory_mask=None):
        """Teacher-forcing logits for every position: (B, L, V)."""
        hidden = self.hidden_states(prefix_ids, memory, memory_mask)
        return self.logits_from_hidden(hidden, encoder_table)


def greedy_generate(decoder: TextDecoder, memory, encoder_table, vocab: Vocabulary,
                    memory_mask=None, max_len=None):
    """Greedy decode for a batch of memories; returns list of id lists
    (EOS-terminated unless the length cap hits first)."""
    b = memory.shape[0]
    max_len = max_len or decoder.cfg.max_len
    prefix = np.full((b, 1), vocab.bos_id, dtype=np.int64)
    finished = np.zeros(b, dtype=bool)
    outputs = [[] for _ in range(b)]
    for _ in range(max_len):
        logits = decoder.step_logits(prefix, memory, encoder_table, memory_mask)
        next_ids = np.argmax(logits.data[:, -1, :], axis=-1)
        for i in range(b):
            if not finished[i]:
                if next_ids[i] == vocab.eos_id:
                    finished[i] = True
                else:
                    outputs[i].append(int(next_ids[i]))
        if finished.all():
            break
        prefix = np.concatenate([prefix, next_ids[:, None]], axis=1)
    return outputs
