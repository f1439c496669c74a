#!/usr/bin/env python3
# Copyright 2026 The cvlm Authors
# SPDX-License-Identifier: Apache-2.0
"""Regenerates the toy tokenizer, manifest and benchmark fixtures."""

import json
import pathlib

HERE = pathlib.Path(__file__).resolve().parent


def bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + \
        list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return {b: chr(c) for b, c in zip(bs, cs)}


MERGES = [
    ("<", "/"), ("</", "s"), ("</s", ">"),
    ("e", "s"), ("Ġ", "y"), ("Ġy", "es"),
    ("Ġ", "n"), ("Ġn", "o"),
    ("t", "h"), ("Ġ", "th"), ("Ġth", "e"),
    ("i", "n"), ("a", "t"), ("o", "n"), ("e", "r"),
    ("Ġ", "a"), ("Ġ", "i"), ("Ġ", "c"), ("Ġc", "at"),
    ("U", "S"), ("US", "E"), ("USE", "R"),
    ("A", "S"), ("AS", "S"), ("ASS", "I"), ("ASSI", "S"), ("ASSIS", "T"),
    ("ASSIST", "A"), ("ASSISTA", "N"), ("ASSISTAN", "T"),
]

TOY_REGEX = (r"</s>|'s|'t|'re|'ve|'m|'ll|'d| ?\p{Letter}+| ?\p{Number}+"
             r"| ?[^\s\p{Letter}\p{Number}]+|\s+(?!\S)|\s+")


def write_toy():
    table = bytes_to_unicode()
    vocab = {table[b]: b for b in range(256)}
    for a, b in MERGES:
        vocab[a + b] = len(vocab)
    toy = HERE / "toy"
    toy.mkdir(exist_ok=True)
    (toy / "vocab.json").write_text(json.dumps(vocab, ensure_ascii=False, indent=0) + "\n",
                                    encoding="utf-8")
    (toy / "merges.txt").write_text(
        "#version: 0.2\n" + "".join(f"{a} {b}\n" for a, b in MERGES), encoding="utf-8")
    manifest = {
        "format_version": 1,
        "provenance": "toy fixture",
        "vision": {"image_size": 32, "patch_size": 8, "hidden": 32, "layers": 3,
                   "heads": 2, "mlp_inner": 64, "feature_layer": -2},
        "projector": {"inner": 32},
        "decoder": {"layers": 2, "hidden": 32, "heads": 4, "rotary_dim": 4,
                    "mlp_inner": 128, "vocab": 320, "max_seq": 512},
        "tokenizer": {
            "vocab": "vocab.json",
            "merges": "merges.txt",
            "pretokenize": TOY_REGEX,
            "specials": {
                "END_OF_TEXT": {"text": "<|endoftext|>"},
                "IMAGE_PLACEHOLDER": {"text": "<image>"},
            },
        },
        "preprocessing": {"resize": "square"},
        "activation": "gelu_tanh",
    }
    (toy / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def write_benchmarks():
    bench = HERE / "bench"
    bench.mkdir(exist_ok=True)
    yesno = [("q1", "yes"), ("q2", "no"), ("q3", "yes"), ("q4", "no")]
    with open(bench / "pope_toy.jsonl", "w") as f:
        for rid, ans in yesno:
            f.write(json.dumps({"id": rid, "question": f"Is there a cat? ({rid})",
                                "answer": ans, "category": "adversarial"}) + "\n")
    exact = [("e1", "The Cat.", ["cat"]), ("e2", "two", ["2", "two"]),
             ("e3", "red", ["red"]), ("e4", "dog", ["cat"])]
    with open(bench / "vqa_toy.jsonl", "w") as f:
        for rid, _, refs in exact:
            f.write(json.dumps({"id": rid, "question": "What is shown?",
                                "answers": refs}) + "\n")
    # Two pairs in one category; predictions in tests make 3 of 4 correct.
    paired = [("m1", "p1", "yes"), ("m2", "p1", "no"), ("m3", "p2", "yes"), ("m4", "p2", "no")]
    with open(bench / "mme_toy.jsonl", "w") as f:
        for rid, pid, ans in paired:
            f.write(json.dumps({"id": rid, "question": "Is this a cat?", "answer": ans,
                                "category": "existence", "pair_id": pid}) + "\n")


if __name__ == "__main__":
    write_toy()
    write_benchmarks()
