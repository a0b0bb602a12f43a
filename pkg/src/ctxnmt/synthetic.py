"""Synthetic gendered toy language for anaphora experiments.

Every example is a context sentence naming a subject noun (optionally
followed by a distractor noun phrase), a source sentence whose pronoun "it"
refers back to the subject noun, and a target whose pronoun and verb forms
inflect with the subject noun's gender class. Translating the pronoun
correctly therefore requires reading the context; without it the best any
model can do is the gender prior (0.25 under the uniform class rule).

Each word is a single vocabulary token (no subword segmentation), so gold
annotation positions line up one-to-one with model token positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluation import CorefAnnotation

GENDERS = ("masc", "fem", "neut", "plur")
PRONOUN_FORMS = {"masc": "on", "fem": "ona", "neut": "ono", "plur": "oni"}
VERB_FORMS = {"masc": "upal", "fem": "upala", "neut": "upalo", "plur": "upali"}


class SyntheticError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    noun_inventory: int
    distractor_prob: float
    size: int
    seed: int

    def validate(self) -> "SyntheticSpec":
        if self.noun_inventory < 4:
            raise SyntheticError(
                f"noun inventory must cover all four genders, got {self.noun_inventory}")
        if not 0.0 <= self.distractor_prob <= 1.0:
            raise SyntheticError(f"distractor_prob must be in [0, 1], got {self.distractor_prob}")
        if self.size <= 0:
            raise SyntheticError(f"size must be positive, got {self.size}")
        return self


def noun_gender(k: int) -> str:
    return GENDERS[k % 4]


def noun_word(k: int) -> str:
    return f"noun{k}"


def generate(spec: SyntheticSpec) -> tuple[list[tuple[str, str, str]], list[CorefAnnotation]]:
    """Deterministic (context, source, target) triples plus gold annotations.

    Annotation positions are in model context coordinates, where position 0
    is the role token prepended to every context row; the subject noun phrase
    "the noun_k" occupies positions 1..2.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    triples = []
    annotations = []
    for i in range(spec.size):
        k = int(rng.integers(spec.noun_inventory))
        gender = noun_gender(k)
        ctx_words = ["the", noun_word(k), "is", "here", "."]
        noun_positions = [2]
        if rng.random() < spec.distractor_prob:
            j = int(rng.integers(spec.noun_inventory - 1))
            if j >= k:
                j += 1
            ctx_words += ["near", "the", noun_word(j), "."]
            noun_positions.append(8)
        src_words = ["it", "fell", "."]
        tgt_words = [PRONOUN_FORMS[gender], VERB_FORMS[gender], "."]
        triples.append((" ".join(ctx_words), " ".join(src_words), " ".join(tgt_words)))
        annotations.append(CorefAnnotation(
            example_id=str(i),
            pronoun="it",
            pronoun_index=0,
            antecedent_span=(1, 2),
            antecedent_has_noun=True,
            context_noun_count=len(noun_positions),
            gender_label=gender,
            noun_positions=list(noun_positions),
        ))
    return triples, annotations


def vocabulary_words(spec: SyntheticSpec) -> tuple[list[str], list[str]]:
    """All source-side and target-side word types the generator can emit."""
    src = ["the", "is", "here", ".", "near", "it", "fell"]
    src += [noun_word(k) for k in range(spec.noun_inventory)]
    tgt = [".", *PRONOUN_FORMS.values(), *VERB_FORMS.values()]
    return src, tgt
