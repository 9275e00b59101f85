"""Regenerate the bundled toy corpus (src/pld/data/tiny_corpus.txt).

A small stochastic grammar of short English sentences. Output is fixed by
the seed, so re-running reproduces the committed file byte for byte.

    python tools/make_corpus.py
"""

import random
from pathlib import Path

SEED = 20201026
N_PARAGRAPHS = 900

NOUNS = ["fox", "dog", "cat", "bird", "farmer", "child", "river", "tree", "horse", "king",
         "queen", "miller", "sailor", "wolf", "owl", "baker", "girl", "boy", "goat", "crow",
         "stone", "ship", "garden", "village", "mountain", "lamp", "letter", "window"]
PLURAL = {n: n + "s" for n in NOUNS}
PLURAL.update({"fox": "foxes", "child": "children", "wolf": "wolves", "miller": "millers",
               "queen": "queens", "lamp": "lamps"})
ADJS = ["small", "old", "quiet", "red", "brave", "tired", "clever", "green", "cold", "bright",
        "dark", "young", "gentle", "proud", "hungry", "silver", "wild", "happy"]
VERBS_T = [("saw", "sees"), ("found", "finds"), ("followed", "follows"), ("helped", "helps"),
           ("carried", "carries"), ("watched", "watches"), ("loved", "loves"), ("called", "calls"),
           ("painted", "paints"), ("visited", "visits")]
VERBS_I = [("slept", "sleeps"), ("waited", "waits"), ("laughed", "laughs"), ("sang", "sings"),
           ("walked", "walks"), ("rested", "rests"), ("listened", "listens")]
PREPS = ["near", "under", "behind", "beside", "across", "over", "inside"]
PLACES = ["the river", "the old bridge", "the tall tree", "the village", "the green hill",
          "the mill", "the dark forest", "the stone wall", "the harbour", "the garden"]
TIMES = ["in the morning", "at night", "every day", "after the rain", "before dawn",
         "in the winter", "at noon", "once upon a time"]
CONJ = ["and", "but", "so", "because", "while"]


def noun_phrase(r, plural=False):
    n = r.choice(NOUNS)
    word = PLURAL[n] if plural else n
    det = r.choice(["the", "the", "a", "my", "one"]) if not plural else r.choice(["the", "some", "two", "many"])
    if det == "a" and not plural:
        det = "a"
    parts = [det]
    if r.random() < 0.55:
        adj = r.choice(ADJS)
        if det == "a" and adj[0] in "aeiou":
            det = "an"
            parts[0] = det
        parts.append(adj)
    parts.append(word)
    return " ".join(parts)


def clause(r, tense):
    plural = r.random() < 0.3
    subj = noun_phrase(r, plural)
    idx = 0 if tense == "past" else 1
    if r.random() < 0.6:
        v = r.choice(VERBS_T)[idx]
        if tense == "present" and plural:
            v = v[:-2] + "y" if v.endswith("ies") else (v[:-2] if v.endswith("es") and v[-3] in "hsx" else v[:-1])
        out = f"{subj} {v} {noun_phrase(r, r.random() < 0.3)}"
    else:
        v = r.choice(VERBS_I)[idx]
        if tense == "present" and plural:
            v = v[:-1]
        out = f"{subj} {v}"
    if r.random() < 0.45:
        out += f" {r.choice(PREPS)} {r.choice(PLACES)}"
    return out


def sentence(r):
    tense = "past" if r.random() < 0.7 else "present"
    s = clause(r, tense)
    if r.random() < 0.35:
        s += f" {r.choice(CONJ)} {clause(r, tense)}"
    if r.random() < 0.3:
        t = r.choice(TIMES)
        s = f"{t}, {s}" if r.random() < 0.5 else f"{s} {t}"
    s = s[0].upper() + s[1:]
    if r.random() < 0.12:
        return f'"{s}," said {noun_phrase(r)}.'
    return s + ("?" if r.random() < 0.05 else ".")


def main():
    r = random.Random(SEED)
    paras = [" ".join(sentence(r) for _ in range(r.randint(3, 7))) for _ in range(N_PARAGRAPHS)]
    out = Path(__file__).resolve().parents[1] / "src" / "pld" / "data" / "tiny_corpus.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n\n".join(paras) + "\n", encoding="utf-8")
    print(f"wrote {out} ({out.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
