"""
Train and query a small code-search model
=========================================

Ingest a line-delimited corpus, train for a few epochs, rank each
description's code among ten distractors, then run a free-text search.
"""
from pathlib import Path

import numpy as np

from csrs.corpus import LengthConfig, build_vocab, encode_corpus, encode_query, read_corpus
from csrs.evaluation import evaluate, search
from csrs.trainer import TrainConfig, model_config_from, train

corpus_path = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "corpus.jsonl"

# Each line carries a method name, its API calls, body tokens and a one-line
# description. Lines that fail to parse are dropped and counted.
records, report = read_corpus(corpus_path)
print(report)

# One vocabulary for the three code fields, another for descriptions.
code_vocab, desc_vocab = build_vocab(records)
lengths = LengthConfig()
corpus = encode_corpus(records, code_vocab, desc_vocab, lengths)
print(f"{len(corpus)} pairs, code vocab {len(code_vocab)}, description vocab {len(desc_vocab)}")

# A larger learning rate than the default so a handful of epochs is enough.
config = TrainConfig(epochs=30, lr=1e-3, val_fraction=0.0, seed=0)
model_config = model_config_from(config, len(code_vocab), len(desc_vocab), lengths)
result = train(corpus, config, model_config=model_config)
print("loss per epoch:", np.round(result.epoch_losses[::5], 3))

# Each description is ranked against its own code plus ten random others.
ev = evaluate(result.model, corpus, pool_size=11, seed=0)
print(ev.table())

# Free text goes through the same tokeniser as the training descriptions.
query = " ".join(records[3].description_tokens)
rows, scores = search(result.model, corpus, encode_query(query, desc_vocab, lengths), top_k=3)
print(f"query: {query!r}")
for rank, (row, score) in enumerate(zip(rows, scores), 1):
    rec = records[row]
    print(f"  {rank}. {rec.id} {'_'.join(rec.method_name_tokens)} p={score:.3f}")
