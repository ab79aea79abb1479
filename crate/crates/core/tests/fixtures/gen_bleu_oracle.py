"""Regenerates bleu_oracle.json with sacrebleu (pip install sacrebleu)."""
import json
import random

import sacrebleu
from sacrebleu.tokenizers.tokenizer_13a import Tokenizer13a

rng = random.Random(7)
words = ["the", "cat", "Dog", "sat", "on", "a", "mat", "3.14", "1,000", "10-12",
         "well-known", "it's", "(x)", "end.", "hi,", "&amp;", "&quot;q&quot;",
         "$5", "50%", "e-mail", "U.S.", "x/y", "a:b", "é", "über", "word!", "?"]


def sentence():
    return " ".join(rng.choice(words) for _ in range(rng.randint(0, 12)))


tok = Tokenizer13a()
lines = [sentence() for _ in range(60)]
tokenized = [{"text": l, "tokens": tok(l).split()} for l in lines]

corpora = []
for _ in range(8):
    n = rng.randint(1, 30)
    refs = [sentence() or "a" for _ in range(n)]
    hyps = []
    for r in refs:
        ws = r.split()
        ws = [w if rng.random() < 0.7 else rng.choice(words) for w in ws]
        if ws and rng.random() < 0.3:
            ws.pop()
        hyps.append(" ".join(ws))
    b = sacrebleu.corpus_bleu(hyps, [refs])
    corpora.append({"hyps": hyps, "refs": refs, "score": b.score,
                    "precisions": [p / 100 for p in b.precisions], "bp": b.bp,
                    "hyp_len": b.sys_len, "ref_len": b.ref_len})

sentences = []
for _ in range(30):
    r = sentence() or "a"
    h = " ".join(w for w in r.split() if rng.random() < 0.8) or "a"
    s = sacrebleu.sentence_bleu(h, [r], smooth_method="exp")
    sentences.append({"hyp": h, "ref": r, "score": s.score})

with open("bleu_oracle.json", "w") as f:
    json.dump({"tokenize": tokenized, "corpora": corpora, "sentences": sentences}, f, indent=1, ensure_ascii=False)
