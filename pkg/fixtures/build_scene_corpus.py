"""Regenerate scene_corpus.json: 54 short dialogs, six per seeded scene topic.

Each dialog's caption, questions and answers draw content words from one
topic's (unambiguous) seed list, mixed with topic-neutral filler.
Run: python3 fixtures/build_scene_corpus.py
"""

import json
from pathlib import Path

import numpy as np

from scenedialog.topics import load_seed_file

HERE = Path(__file__).parent
FILLER = ["person", "man", "woman", "looks", "around", "near", "the", "a", "then", "slowly"]


def main():
    seeds, _ = load_seed_file(HERE / "seeds_9topics.txt")
    rng = np.random.default_rng(7)
    dialogs = []
    for k, words in enumerate(seeds.seeds):
        for j in range(6):
            pick = lambda n: list(rng.choice(words, size=n))
            filler = lambda n: list(rng.choice(FILLER, size=n))
            caption = " ".join(filler(2) + pick(3) + filler(1) + pick(2)) + " ."
            turns = []
            for _ in range(3):
                q = " ".join(["is", "there", "a"] + pick(2)) + " ?"
                a = " ".join(["yes", "the"] + pick(2) + filler(1) + pick(1)) + " ."
                turns.append({"question": q, "answer": a})
            dialogs.append({"image_id": f"S{k}{j}", "caption": caption, "dialog": turns})
    (HERE / "scene_corpus.json").write_text(json.dumps({"dialogs": dialogs}, indent=1) + "\n")


if __name__ == "__main__":
    main()
