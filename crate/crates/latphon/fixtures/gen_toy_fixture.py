#!/usr/bin/env python3
"""Regenerate the bundled toy lexicon under toy-ipa-dict/.

Six files in ipa-dict format (word<TAB>/pron/), 2,100 entries each.

en and es share one word list but map every letter to a different phoneme,
so the pair is unresolvable without the language-ID token: a model denied
the token can at best satisfy one language of the pair. The other four
languages use independent word lists and ciphers that exercise multi-symbol
phonemes (tie-bar affricates, nasalized vowels, stress marks, non-ASCII
graphemes), plus a few real dictionary lines each for texture.

Deterministic: a fixed seed reproduces the committed files byte for byte.
"""

import itertools
import random
from pathlib import Path

OUT = Path(__file__).parent / "toy-ipa-dict"
WORDS_PER_LANG = 2100
SEED = 20250819

# Conflict pair: same letters, disjoint phoneme images.
EN_MAP = {
    "a": "æ", "e": "ɛ", "i": "ɪ", "o": "oʊ", "u": "ʌ",
    "b": "b", "d": "d", "n": "n", "s": "s", "t": "t",
}
ES_MAP = {
    "a": "a", "e": "e", "i": "i", "o": "o", "u": "u",
    "b": "β", "d": "ð", "n": "ɲ", "s": "z", "t": "θ",
}

FR_MAP = {
    "a": "a", "e": "ə", "i": "i", "o": "ɔ", "u": "y",
    "l": "l", "m": "m", "n": "n", "p": "p", "r": "ʁ", "v": "v",
}
FR_DIGRAPHS = {"an": "ɑ̃", "on": "ɔ̃"}

IT_MAP = {
    "a": "a", "e": "e", "i": "i", "o": "ɔ", "u": "u",
    "c": "t͡ʃ", "z": "d͡z", "g": "ɡ", "l": "l", "r": "r",
}

PT_MAP = {
    "a": "ɐ", "e": "e", "i": "i", "o": "ɔ", "u": "u",
    "f": "f", "m": "m", "s": "ʃ", "v": "v",
}
PT_DIGRAPHS = {"ao": "ɐ̃"}

RO_MAP = {
    "a": "a", "e": "e", "i": "i", "o": "o", "u": "u", "ă": "ə",
    "c": "k", "d": "d", "g": "ɡ", "l": "l", "n": "n", "r": "r",
    "t": "t", "ț": "t͡s",
}

# Real dictionary lines mixed into the four non-conflict languages.
EXCERPTS = {
    "fr": [
        ("bonjour", "bɔ̃ʒuʁ"), ("chat", "ʃa"), ("eau", "o"),
        ("roi", "ʁwa"), ("nuit", "nɥi"), ("pain", "pɛ̃"),
        ("fleur", "flœʁ"), ("homme", "ɔm"), ("temps", "tɑ̃"),
        ("monde", "mɔ̃d"), ("vingt", "vɛ̃"), ("jour", "ʒuʁ"),
    ],
    "it": [
        ("petto", "ˈpɛtto"), ("casa", "ˈkaza"), ("gatto", "ˈɡatto"),
        ("cielo", "ˈt͡ʃɛlo"), ("giorno", "ˈd͡ʒorno"),
        ("notte", "ˈnɔtte"), ("pane", "ˈpane"), ("vino", "ˈvino"),
        ("mare", "ˈmare"), ("sole", "ˈsole"), ("cuore", "ˈkwɔre"),
        ("pizza", "ˈpit͡tsa"),
    ],
    "pt": [
        ("mofo", "ˈmofu"), ("pão", "ˈpɐ̃w̃"),
        ("mão", "ˈmɐ̃w̃"), ("vinho", "ˈviɲu"),
        ("fogo", "ˈfoɡu"), ("tempo", "ˈtẽpu"), ("sol", "ˈsɔl"),
        ("lua", "ˈluɐ"), ("terra", "ˈtɛʁɐ"), ("água", "ˈaɡwɐ"),
        ("noite", "ˈnojtɨ"), ("fado", "ˈfaðu"),
    ],
    "ro": [
        ("apă", "ˈapə"), ("casă", "ˈkasə"), ("lung", "ˈluŋɡ"),
        ("noapte", "ˈno̯apte"), ("soare", "ˈso̯are"),
        ("vin", "ˈvin"), ("munte", "ˈmunte"), ("carte", "ˈkarte"),
        ("timp", "ˈtimp"), ("drum", "ˈdrum"), ("foc", "ˈfok"),
        ("lapte", "ˈlapte"),
    ],
}


def words_for(consonants, vowels, n, rng, excluded=()):
    """Deterministic CV-pattern words: CVCV, CVCVC, CVCVCV as needed."""
    pool = []
    for pattern in ("cvcv", "cvcvc", "cvcvcv"):
        sets = [consonants if p == "c" else vowels for p in pattern]
        pool.extend("".join(w) for w in itertools.product(*sets))
        if len(pool) >= 4 * n:
            break
    pool = [w for w in pool if w not in excluded]
    assert len(pool) >= n, f"only {len(pool)} candidates for {n} words"
    rng.shuffle(pool)
    return pool[:n]


def apply_cipher(word, letter_map, digraphs=None, stress=False):
    out = []
    i = 0
    while i < len(word):
        pair = word[i : i + 2]
        if digraphs and pair in digraphs:
            out.append(digraphs[pair])
            i += 2
        else:
            out.append(letter_map[word[i]])
            i += 1
    return ("ˈ" if stress else "") + "".join(out)


def write_lang(code, rows, comment):
    lines = [f"# {comment}"]
    lines.extend(f"{w}\t/{p}/" for w, p in rows)
    path = OUT / f"{code}.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"{path}: {len(rows)} entries")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = random.Random(SEED)

    shared = words_for("bdnst", "aeiou", WORDS_PER_LANG, rng)
    write_lang(
        "en",
        [(w, apply_cipher(w, EN_MAP)) for w in shared],
        "synthetic toy lexicon; letter cipher conflicting with es.txt",
    )
    write_lang(
        "es",
        [(w, apply_cipher(w, ES_MAP)) for w in shared],
        "synthetic toy lexicon; letter cipher conflicting with en.txt",
    )

    def mixed(code, consonants, vowels, letter_map, digraphs=None, stress=False):
        excerpts = EXCERPTS[code]
        taken = {w for w, _ in excerpts}
        synth = words_for(
            consonants, vowels, WORDS_PER_LANG - len(excerpts), rng, excluded=taken
        )
        rows = [(w, apply_cipher(w, letter_map, digraphs, stress)) for w in synth]
        rows.extend(excerpts)
        rng.shuffle(rows)
        write_lang(code, rows, "synthetic toy lexicon with a few real entries")

    mixed("fr", "lmnprv", "aeiou", FR_MAP, FR_DIGRAPHS)
    mixed("it", "czglr", "aeiou", IT_MAP)
    mixed("pt", "fmsv", "aeiou", PT_MAP, PT_DIGRAPHS)
    mixed("ro", "cdglnrtț", "aeiouă", RO_MAP, stress=True)


if __name__ == "__main__":
    main()
