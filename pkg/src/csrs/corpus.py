"""Corpus ingestion: feature extraction, vocabularies and fixed-length encoding.

A method is represented by three code features (method name, API sequence,
body tokens) plus the natural-language description taken from its comment.
"""
from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

PAD, UNK = 0, 1
PAD_WORD, UNK_WORD = "<pad>", "<unk>"

CODE_FIELDS = ("tokens", "name", "api")


class ExtractionError(ValueError):
    """Raised when a raw method cannot be turned into a usable record."""


def _load_word_list(filename):
    text = resources.files("csrs.data").joinpath(filename).read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


JAVA_KEYWORDS = _load_word_list("java_keywords.txt")
STOPWORDS = _load_word_list("stopwords.txt")


def load_word_file(path):
    with open(path, encoding="utf-8") as fh:
        return frozenset(w.strip().lower() for w in fh if w.strip())


# ---------------------------------------------------------------------------
# tokenisation
# ---------------------------------------------------------------------------

_CAMEL = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|\d+")


def split_camel(identifier):
    """Split an identifier on camel-case, digit and underscore boundaries.

    >>> split_camel("parseHTTPResponse2Json")
    ['parse', 'http', 'response', '2', 'json']
    """
    words = []
    for chunk in re.split(r"[^A-Za-z0-9]+", identifier):
        words.extend(w.lower() for w in _CAMEL.findall(chunk))
    if not words:
        stripped = identifier.strip().lower()
        return [stripped] if stripped else []
    return words


def filter_body_tokens(words, keywords=JAVA_KEYWORDS, stopwords=STOPWORDS):
    """Deduplicate (first occurrence wins) and drop keywords/stopwords."""
    seen = set()
    out = []
    for w in words:
        if w in seen or w in keywords or w in stopwords:
            continue
        seen.add(w)
        out.append(w)
    return out


_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def normalize_description(text):
    """Lowercase, replace punctuation with blanks and split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


def first_sentence(comment):
    """First sentence of a doc comment with comment markers and tags removed."""
    lines = []
    for line in comment.splitlines():
        line = line.strip()
        line = re.sub(r"^(/\*\*|/\*|\*/|\*|//)", "", line).strip()
        line = re.sub(r"\*/$", "", line).strip()
        if line.startswith("@"):
            break
        if line:
            lines.append(line)
    text = " ".join(lines)
    text = re.sub(r"<[^>]+>", " ", text)
    text = re.sub(r"\{@\w+\s+([^}]*)\}", r"\1", text)
    match = re.search(r"[.!?](\s|$)", text)
    return text[:match.start()] if match else text


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass
class CodeRecord:
    id: str
    method_name_tokens: list
    api_sequence_tokens: list
    body_tokens: list
    description_tokens: list
    raw_source: str = ""

    def field_tokens(self, name):
        return {
            "tokens": self.body_tokens,
            "name": self.method_name_tokens,
            "api": self.api_sequence_tokens,
            "description": self.description_tokens,
        }[name]

    def to_json(self):
        return {
            "id": self.id,
            "method_name": " ".join(self.method_name_tokens),
            "api_sequence": " ".join(self.api_sequence_tokens),
            "tokens": " ".join(self.body_tokens),
            "description": " ".join(self.description_tokens),
            "raw_source": self.raw_source,
        }


def _validate(record):
    for name in ("name", "api", "tokens", "description"):
        if not record.field_tokens(name):
            raise ExtractionError(f"record {record.id!r}: empty {name} after filtering")
    return record


_IDENT = re.compile(r"[A-Za-z_$][A-Za-z0-9_$]*")
_SIGNATURE = re.compile(r"([A-Za-z_$][A-Za-z0-9_$]*)\s*\([^()]*\)\s*(?:throws\s+[\w.,\s]+)?\{")
_STRING_OR_COMMENT = re.compile(r'"(?:\\.|[^"\\])*"|\'(?:\\.|[^\'\\])*\'|//[^\n]*|/\*.*?\*/', re.S)


def _method_body(source):
    match = _SIGNATURE.search(source)
    if match is None:
        raise ExtractionError("no method signature found")
    name = match.group(1)
    start = match.end()
    depth = 1
    for pos in range(start, len(source)):
        ch = source[pos]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return name, source[start:pos]
    raise ExtractionError(f"unbalanced braces in method {name!r}")


def extract_api_sequence(body, own_name, keywords=JAVA_KEYWORDS):
    """Heuristic API calls in source order.

    Every identifier directly followed by ``(`` is a call (keywords such as
    ``if``/``while`` and recursive calls are skipped). A capitalised receiver
    in ``Type.call(`` and the class in ``new Type(`` are emitted too.
    """
    api = []
    tokens = re.findall(r"[A-Za-z_$][A-Za-z0-9_$]*|\S", body)
    for i, tok in enumerate(tokens):
        if not _IDENT.fullmatch(tok) or tok in keywords:
            continue
        nxt = tokens[i + 1] if i + 1 < len(tokens) else ""
        if nxt == "<":
            # generic constructor: new Foo<Bar>(
            depth, j = 0, i + 1
            while j < len(tokens):
                depth += tokens[j] == "<"
                depth -= tokens[j] == ">"
                j += 1
                if depth == 0:
                    break
            nxt = tokens[j] if j < len(tokens) else ""
        if nxt != "(":
            continue
        if tok == own_name:
            continue
        prev = tokens[i - 1] if i > 0 else ""
        if prev == "." and i >= 2 and _IDENT.fullmatch(tokens[i - 2]) and tokens[i - 2][0].isupper():
            api.append(tokens[i - 2])
        api.append(tok)
    return api


def extract_features(raw_method, raw_comment, keywords=JAVA_KEYWORDS, stopwords=STOPWORDS,
                     record_id=""):
    """Build a :class:`CodeRecord` from raw Java-like source and its comment."""
    clean = _STRING_OR_COMMENT.sub(" ", raw_method)
    name, body = _method_body(clean)
    body_words = []
    for ident in _IDENT.findall(body):
        if ident in keywords:
            continue
        body_words.extend(split_camel(ident))
    record = CodeRecord(
        id=record_id or name,
        method_name_tokens=split_camel(name),
        api_sequence_tokens=extract_api_sequence(body, name, keywords),
        body_tokens=filter_body_tokens(body_words, keywords, stopwords),
        description_tokens=normalize_description(first_sentence(raw_comment)),
        raw_source=raw_method,
    )
    return _validate(record)


def record_from_json(obj, keywords=JAVA_KEYWORDS, stopwords=STOPWORDS):
    """Build a record from one line of the line-delimited corpus format."""
    try:
        rid = str(obj["id"])
        name_words = []
        for part in str(obj["method_name"]).split():
            name_words.extend(split_camel(part))
        api = str(obj["api_sequence"]).split()
        body = []
        for part in str(obj["tokens"]).split():
            body.extend(split_camel(part))
        desc = normalize_description(str(obj["description"]))
    except (KeyError, TypeError) as exc:
        raise ExtractionError(f"malformed record: {exc}") from exc
    record = CodeRecord(
        id=rid,
        method_name_tokens=name_words,
        api_sequence_tokens=api,
        body_tokens=filter_body_tokens(body, keywords, stopwords),
        description_tokens=desc,
        raw_source=str(obj.get("raw_source", "") or ""),
    )
    return _validate(record)


@dataclass
class IngestReport:
    kept: int = 0
    dropped: int = 0
    reasons: Counter = field(default_factory=Counter)
    truncated: Counter = field(default_factory=Counter)

    def truncation_rates(self):
        return {k: (self.truncated[k] / self.kept if self.kept else 0.0)
                for k in ("description",) + CODE_FIELDS}

    def lines(self):
        """Line-delimited summary records."""
        out = [{"kind": "counts", "kept": self.kept, "dropped": self.dropped}]
        for reason, count in sorted(self.reasons.items()):
            out.append({"kind": "drop_reason", "reason": reason, "count": count})
        for name, rate in self.truncation_rates().items():
            out.append({"kind": "truncation", "field": name, "rate": round(rate, 6)})
        return out

    def __str__(self):
        rates = ", ".join(f"{k}={v:.3f}" for k, v in self.truncation_rates().items())
        return f"kept {self.kept}, dropped {self.dropped}; truncation rates: {rates}"


def read_corpus(path, keywords=JAVA_KEYWORDS, stopwords=STOPWORDS, report=None):
    """Read a line-delimited corpus, skipping and counting bad lines.

    Each line holds either pre-split fields (``method_name``, ``api_sequence``,
    ``tokens``, ``description``) or a raw method under ``source`` with its
    documentation comment under ``comment``.
    """
    report = report if report is not None else IngestReport()
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ExtractionError("line is not an object")
                if "source" in obj and "method_name" not in obj:
                    # raw method + comment: run the feature extractor
                    records.append(extract_features(str(obj["source"]), str(obj.get("comment", "")),
                                                    keywords, stopwords, str(obj.get("id", lineno))))
                else:
                    records.append(record_from_json(obj, keywords, stopwords))
            except json.JSONDecodeError:
                report.dropped += 1
                report.reasons["invalid_json"] += 1
            except ExtractionError as exc:
                report.dropped += 1
                report.reasons["empty_field" if "empty" in str(exc) else "malformed"] += 1
    report.kept = len(records)
    return records, report


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Dense word <-> id table; ids 0 and 1 are reserved for PAD and UNK."""

    def __init__(self, words=()):
        self.itos = [PAD_WORD, UNK_WORD]
        self.stoi = {PAD_WORD: PAD, UNK_WORD: UNK}
        for w in words:
            if w not in self.stoi:
                self.stoi[w] = len(self.itos)
                self.itos.append(w)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, word):
        return word in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, word):
        return self.stoi.get(word, UNK)

    def word(self, idx):
        return self.itos[idx]

    def encode(self, words):
        return [self.stoi.get(w, UNK) for w in words]

    def decode(self, ids):
        return [self.itos[i] for i in ids if i != PAD]

    @classmethod
    def from_counts(cls, counts, min_frequency=1, max_size=None):
        """Most frequent first, ties broken lexicographically.

        ``max_size`` caps the total size including PAD and UNK.
        """
        ranked = sorted((w for w, c in counts.items() if c >= min_frequency and w not in (PAD_WORD, UNK_WORD)),
                        key=lambda w: (-counts[w], w))
        if max_size is not None:
            ranked = ranked[:max(0, max_size - 2)]
        return cls(ranked)

    def save(self, path):
        Path(path).write_text("".join(w + "\n" for w in self.itos[2:]), encoding="utf-8")

    @classmethod
    def load(cls, path):
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.splitlines())


def build_vocab(records, min_frequency=1, max_size=None):
    """Return ``(code_vocab, desc_vocab)``.

    The code vocabulary is shared by name, API and body tokens; descriptions
    get their own table.
    """
    if not records:
        raise ValueError("cannot build a vocabulary from zero records")
    code_counts, desc_counts = Counter(), Counter()
    for r in records:
        code_counts.update(r.method_name_tokens)
        code_counts.update(r.api_sequence_tokens)
        code_counts.update(r.body_tokens)
        desc_counts.update(r.description_tokens)
    return (Vocabulary.from_counts(code_counts, min_frequency, max_size),
            Vocabulary.from_counts(desc_counts, min_frequency, max_size))


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LengthConfig:
    description: int = 30
    name: int = 6
    api: int = 30
    tokens: int = 50

    def __post_init__(self):
        for k in ("description", "name", "api", "tokens"):
            if getattr(self, k) < 1:
                raise ValueError(f"sequence length for {k} must be positive")

    def of(self, field_name):
        return getattr(self, field_name)


def pad_ids(ids, length):
    """Right-truncate / right-PAD to ``length``; returns (array, truncated)."""
    out = np.full(length, PAD, dtype=np.int64)
    n = min(len(ids), length)
    out[:n] = ids[:n]
    return out, len(ids) > length


@dataclass
class EncodedPair:
    desc_ids: np.ndarray
    name_ids: np.ndarray
    api_ids: np.ndarray
    tok_ids: np.ndarray
    label: int = 1

    @property
    def masks(self):
        return {
            "description": self.desc_ids != PAD,
            "name": self.name_ids != PAD,
            "api": self.api_ids != PAD,
            "tokens": self.tok_ids != PAD,
        }


def encode_pair(record, code_vocab, desc_vocab, lengths=LengthConfig(), label=1, report=None):
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    fields = {}
    for name, vocab in (("description", desc_vocab), ("name", code_vocab),
                        ("api", code_vocab), ("tokens", code_vocab)):
        ids, cut = pad_ids(vocab.encode(record.field_tokens(name)), lengths.of(name))
        if cut and report is not None:
            report.truncated[name] += 1
        fields[name] = ids
    return EncodedPair(fields["description"], fields["name"], fields["api"], fields["tokens"], label)


@dataclass
class EncodedCorpus:
    """Row-aligned id matrices for a set of records.

    Row ``i`` of ``desc`` is the ground-truth description of the code in row
    ``i`` of ``name``/``api``/``tokens``.
    """
    ids: list
    desc: np.ndarray
    name: np.ndarray
    api: np.ndarray
    tokens: np.ndarray

    def __len__(self):
        return len(self.ids)

    def code(self, field_name):
        return getattr(self, field_name)

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return EncodedCorpus([self.ids[i] for i in rows], self.desc[rows], self.name[rows],
                             self.api[rows], self.tokens[rows])

    def pair(self, desc_row, code_row, label=1):
        return EncodedPair(self.desc[desc_row], self.name[code_row], self.api[code_row],
                           self.tokens[code_row], label)

    def to_lines(self):
        for i, rid in enumerate(self.ids):
            yield json.dumps({
                "id": rid,
                "description": self.desc[i].tolist(),
                "name": self.name[i].tolist(),
                "api": self.api[i].tolist(),
                "tokens": self.tokens[i].tolist(),
            }, separators=(",", ":"))

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in self.to_lines():
                fh.write(line + "\n")

    @classmethod
    def load(cls, path):
        ids, cols = [], {"description": [], "name": [], "api": [], "tokens": []}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                ids.append(obj["id"])
                for k in cols:
                    cols[k].append(obj[k])
        if not ids:
            raise ValueError(f"{path}: no encoded records")
        arr = {k: np.asarray(v, dtype=np.int64) for k, v in cols.items()}
        return cls(ids, arr["description"], arr["name"], arr["api"], arr["tokens"])


def encode_corpus(records, code_vocab, desc_vocab, lengths=LengthConfig(), report=None):
    pairs = [encode_pair(r, code_vocab, desc_vocab, lengths, report=report) for r in records]
    if not pairs:
        raise ValueError("no records to encode")
    return EncodedCorpus(
        ids=[r.id for r in records],
        desc=np.stack([p.desc_ids for p in pairs]),
        name=np.stack([p.name_ids for p in pairs]),
        api=np.stack([p.api_ids for p in pairs]),
        tokens=np.stack([p.tok_ids for p in pairs]),
    )


def encode_query(text, desc_vocab, lengths=LengthConfig()):
    """Tokenise free text through the description pipeline."""
    words = normalize_description(text)
    ids, _ = pad_ids(desc_vocab.encode(words), lengths.description)
    return ids
