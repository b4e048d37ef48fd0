"""Write rubric annotation fixtures whose per-behavior counts match fixed reference frequencies.

Usage: python3 scripts/make_rubric_fixtures.py [out_dir]

Each model gets 452 annotations. Behavior k is switched on for exactly
counts[k] traces, chosen by a seeded permutation so flags are spread out
rather than stacked on the first rows.
"""

import json
import sys
from pathlib import Path

import numpy as np

from supplycast.judge import BEHAVIORS

N = 452

# present-counts per behavior, in BEHAVIORS order
COUNTS = {
    "pretrained": (41, 217, 113, 303, 425, 149),
    "fine_tuned": (228, 452, 435, 318, 452, 452),
}


def annotations(model: str, counts, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    flags = np.zeros((N, len(BEHAVIORS)), dtype=int)
    for k, c in enumerate(counts):
        flags[rng.permutation(N)[:c], k] = 1
    return [
        {"question_id": f"fixture:{i:04d}", "backend": model, **{b: int(flags[i, k]) for k, b in enumerate(BEHAVIORS)}}
        for i in range(N)
    ]


def main(out_dir: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed, (model, counts) in enumerate(COUNTS.items()):
        rows = annotations(model, counts, seed)
        with open(out / f"rubric_{model}.jsonl", "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        print(model, {b: round(c / N, 4) for b, c in zip(BEHAVIORS, counts)}, "mean", round(sum(counts) / N, 4))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else str(Path(__file__).resolve().parents[1] / "tests" / "fixtures"))
