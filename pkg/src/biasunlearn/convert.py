"""Converters from the upstream StereoSet / CrowS-Pairs releases to the JSON-lines schema.

StereoSet ships one JSON document (``{"data": {"intrasentence": [...],
"intersentence": [...]}}``); CrowS-Pairs ships a CSV. Both are flattened
into records the loaders in :mod:`biasunlearn.corpus` accept.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .corpus import ContrastPair, StereoInstance, write_crows_pairs, write_stereoset

_BLANK = "BLANK"

CROWS_TYPE_ALIASES = {"race-color": "race"}


def _split_intrasentence(context: str, sentence: str) -> tuple[str, str]:
    # "Girls tend to be more BLANK than boys." + filled sentence -> (prefix, filled remainder)
    prefix = context.split(_BLANK, 1)[0].rstrip()
    if prefix and sentence.startswith(prefix):
        return prefix, sentence[len(prefix) :].lstrip()
    return "", sentence


def stereoset_records(document: dict) -> list[StereoInstance]:
    out: list[StereoInstance] = []
    data = document.get("data", document)
    for kind in ("intrasentence", "intersentence"):
        for ex in data.get(kind, []):
            by_label = {s["gold_label"]: s["sentence"] for s in ex["sentences"]}
            if kind == "intrasentence":
                ctx, stereo = _split_intrasentence(ex["context"], by_label["stereotype"])
                ctx_a, anti = _split_intrasentence(ex["context"], by_label["anti-stereotype"])
                ctx_u, unrel = _split_intrasentence(ex["context"], by_label["unrelated"])
                if not (ctx == ctx_a == ctx_u):
                    ctx, stereo, anti, unrel = "", by_label["stereotype"], by_label["anti-stereotype"], by_label["unrelated"]
            else:
                ctx = ex["context"]
                stereo, anti, unrel = by_label["stereotype"], by_label["anti-stereotype"], by_label["unrelated"]
            out.append(StereoInstance(ex["id"], ex["bias_type"], ctx, stereo, anti, unrel))
    return out


def convert_stereoset(src: str | Path, dst: str | Path) -> int:
    with open(src, encoding="utf-8") as fh:
        records = stereoset_records(json.load(fh))
    write_stereoset(dst, records)
    return len(records)


def crows_pairs_records(rows) -> list[ContrastPair]:
    pairs = []
    for i, row in enumerate(rows):
        pair_id = (row.get("") or row.get("id") or str(i)).strip()
        bias = row["bias_type"].strip()
        pairs.append(
            ContrastPair(pair_id, CROWS_TYPE_ALIASES.get(bias, bias), row["sent_more"], row["sent_less"])
        )
    return pairs


def convert_crows_pairs(src: str | Path, dst: str | Path) -> int:
    with open(src, encoding="utf-8", newline="") as fh:
        pairs = crows_pairs_records(csv.DictReader(fh))
    write_crows_pairs(dst, pairs)
    return len(pairs)
