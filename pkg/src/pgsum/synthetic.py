"""Template-generated corpora standing in for news articles and meeting transcripts.

The real corpora cannot be shipped, so experiments and tests draw from these
generators instead. News pairs are lead-style: the summary restates the
opening sentences. Meeting pairs interleave disfluent content turns with
filler turns, and the summary rewrites each content turn in third person.
"""
from __future__ import annotations

import numpy as np

ROLES = ["project manager", "marketing expert", "industrial designer", "interface designer"]
MEETING_OBJECTS = ["remote control", "prototype", "budget", "battery", "button layout", "case material",
                   "colour scheme", "target group", "market research", "speech recognition",
                   "energy source", "production cost", "logo", "trend report", "scroll wheel", "display"]
FILLERS = ["uh yeah .", "mm-hmm .", "okay .", "right .", "um so yeah .", "uh well yeah .", "yeah yeah ."]
HEDGES = ["uh", "um", "so", "uh so", "well", "um well"]

NEWS_SUBJECTS = ["the mayor", "police officials", "the company", "the president", "researchers",
                 "the council", "the government", "local residents", "the minister", "the union"]
NEWS_OBJECTS = ["new policy", "annual report", "stadium plan", "tax increase", "health study", "trade deal",
                "election results", "rescue effort", "school reform", "water project", "bank merger",
                "housing law"]
DAYS = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"]
NEWS_VERBS = ["announced", "approved", "rejected", "reviewed", "launched", "defended"]


def _pick(rng: np.random.Generator, items):
    return items[int(rng.integers(len(items)))]


def meeting_pair(rng: np.random.Generator, n_content: int = 3, n_filler: int = 2) -> dict:
    turns, summary = [], []
    objects = list(rng.permutation(MEETING_OBJECTS)[:n_content])
    for obj in objects:
        role = _pick(rng, ROLES)
        hedge = _pick(rng, HEDGES)
        form = int(rng.integers(3))
        if form == 0:
            turns.append(f"{hedge} the {role} presented the {obj} .")
            summary.append(f"the {role} presented the {obj} .")
        elif form == 1:
            turns.append(f"{hedge} we should discuss the {obj} .")
            summary.append(f"the team discussed the {obj} .")
        else:
            turns.append(f"{hedge} i think we decided on the {obj} .")
            summary.append(f"the group decided on the {obj} .")
    fillers = [_pick(rng, FILLERS) for _ in range(n_filler)]
    # fillers go between content turns, content order is preserved
    slots = sorted(int(rng.integers(len(turns) + 1)) for _ in fillers)
    for offset, (slot, filler) in enumerate(zip(slots, fillers)):
        turns.insert(slot + offset, filler)
    return {"article": " ".join(turns), "summary": " ".join(summary)}


def news_pair(rng: np.random.Generator, n_sentences: int = 4) -> dict:
    subj, other = rng.permutation(NEWS_SUBJECTS)[:2]
    obj = _pick(rng, NEWS_OBJECTS)
    verb = _pick(rng, NEWS_VERBS)
    day = _pick(rng, DAYS)
    lead = f"{subj} {verb} the {obj} on {day} ."
    second = f"{other} said the {obj} will change the city ."
    extra = [f"the {_pick(rng, NEWS_OBJECTS)} was discussed by {_pick(rng, NEWS_SUBJECTS)} last year .",
             f"critics warned that the {obj} could cost millions .",
             f"officials expect a decision before {_pick(rng, DAYS)} ."]
    body = [lead, second] + list(rng.permutation(extra)[: max(0, n_sentences - 2)])
    return {"article": " ".join(body), "summary": f"{subj} {verb} the {obj} . {other} said it will change the city ."}


def meeting_corpus(n: int, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    return [meeting_pair(rng) for _ in range(n)]


def news_corpus(n: int, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    return [news_pair(rng) for _ in range(n)]


def overfit_corpus(n: int = 8, seed: int = 0, article_len: int = 12, summary_len: int = 5) -> list[dict]:
    """Random-word articles whose summaries are a contiguous article span plus one fixed word."""
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(40)]
    out = []
    for _ in range(n):
        art = [_pick(rng, words) for _ in range(article_len)]
        start = int(rng.integers(article_len - summary_len + 2))
        summ = art[start:start + summary_len - 1] + ["end"]
        out.append({"article": " ".join(art), "summary": " ".join(summ)})
    return out
