"""Synthetic corpora for desk-scale experiments.

The lexical corpus copies each description's content words into the code
body, so a model that learns soft term matching can retrieve the right code.
"""
from __future__ import annotations

import numpy as np

from .corpus import CodeRecord, LengthConfig, build_vocab, encode_corpus

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"]
_VOWELS = ["a", "e", "i", "o", "u"]

DESC_FILLERS = ["returns", "given", "using", "all", "new", "current", "each", "from", "into", "value"]
API_WORDS = ["get", "put", "add", "size", "append", "remove", "contains", "format", "parse",
             "close", "open", "read", "write", "length", "equals", "toString"]


def pseudo_words(count, seed=0, syllables=3):
    """``count`` distinct pronounceable lowercase words, seeded."""
    rng = np.random.default_rng(seed)
    words, seen = [], set()
    while len(words) < count:
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(syllables))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def lexical_records(n, seed=0, vocab_size=None, content=(3, 5), body_noise=(2, 5),
                    noise_vocab=60):
    """``n`` records whose description content words all occur in the body tokens.

    Method names are built from two of the content words, API sequences from
    a small shared pool of library calls.
    """
    rng = np.random.default_rng(seed)
    vocab_size = vocab_size or max(40, 2 * n)
    words = pseudo_words(vocab_size + noise_vocab, seed=seed + 1)
    content_words, noise_words = words[:vocab_size], words[vocab_size:]
    records = []
    for i in range(n):
        k = int(rng.integers(content[0], content[1] + 1))
        chosen = [content_words[j] for j in rng.choice(vocab_size, size=k, replace=False)]
        fillers = list(rng.choice(DESC_FILLERS, size=int(rng.integers(1, 4)), replace=False))
        desc = chosen + fillers
        desc = [desc[j] for j in rng.permutation(len(desc))]
        noise = list(rng.choice(noise_words, size=int(rng.integers(body_noise[0], body_noise[1] + 1)),
                                replace=False))
        body = chosen + noise
        body = [body[j] for j in rng.permutation(len(body))]
        name = [chosen[0], chosen[1]]
        api = list(rng.choice(API_WORDS, size=int(rng.integers(1, 4)), replace=False))
        method = name[0] + "".join(w.capitalize() for w in name[1:])
        source = f"public void {method}() {{ /* {' '.join(body)} */ }}"
        records.append(CodeRecord(id=f"syn{i:04d}", method_name_tokens=name,
                                  api_sequence_tokens=api, body_tokens=body,
                                  description_tokens=desc, raw_source=source))
    return records


def lexical_corpus(n, seed=0, lengths=LengthConfig(), **kw):
    """Records, vocabularies and the encoded corpus in one call."""
    records = lexical_records(n, seed=seed, **kw)
    code_vocab, desc_vocab = build_vocab(records)
    corpus = encode_corpus(records, code_vocab, desc_vocab, lengths)
    return records, code_vocab, desc_vocab, corpus
