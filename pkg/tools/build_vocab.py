"""Regenerate src/tagleak/data/vocab.txt, the bundled 2,000-token desk vocabulary.

Order: reserved tokens, punctuation, words of the short/medium/long corpora
(in first-appearance order, so a 200-token prefix still covers the short
corpus), a set of "##" suffix pieces, then frequent lowercase words from the
interpreter's own pydoc topic text until the size is reached.
"""

import re
import sys
from collections import Counter
from pathlib import Path

from pydoc_data.topics import topics

SIZE = 2000
RESERVED = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
PUNCT = list(".,!?;:'\"()-")
SUFFIXES = ["s", "es", "ed", "ing", "ly", "er", "est", "ment", "ness", "ful", "less", "able", "ion", "al", "y", "en", "ize", "ity", "ous", "ive"]

data = Path(__file__).resolve().parents[1] / "src" / "tagleak" / "data"
tokens = RESERVED + PUNCT
seen = set(tokens)


def push(tok):
    if tok not in seen:
        seen.add(tok)
        tokens.append(tok)


for name in ("short", "medium", "long"):
    for line in (data / f"{name}.tsv").read_text(encoding="utf-8").splitlines():
        for word in re.findall(r"\w+|[^\w\s]", line.split("\t", 1)[1].lower()):
            push(word)
for s in SUFFIXES:
    push("##" + s)

counts = Counter(w for text in topics.values() for w in re.findall(r"\b[a-z]{2,12}\b", text))
for word, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
    if len(tokens) >= SIZE:
        break
    push(word)
if len(tokens) < SIZE:
    sys.exit(f"only {len(tokens)} tokens available")
(data / "vocab.txt").write_text("\n".join(tokens) + "\n", encoding="utf-8")
print(f"wrote {len(tokens)} tokens")
