"""Recompute derived headline metrics from reported primitives.

Skill scores follow from Brier values and the baseline Brier; precision
values follow from hit counts over ceil(0.1 * n) forecasts; the baseline
Brier follows from the training rate and the test event rate.
"""

from supplycast.metrics import brier_skill, relative_change, top_k

N_TEST = 452
TRAIN_RATE, TEST_RATE = 0.149, 0.104
BASELINE_BRIER = 0.0952
MODELS = {
    # name: (brier, ece, top-decile hits)
    "trained": (0.0791, 0.0525, 16),
    "frontier": (0.1203, 0.1304, 4),
    "pretrained": (0.1433, 0.1740, 6),
}


def main() -> None:
    implied = TEST_RATE * (1 - TRAIN_RATE) ** 2 + (1 - TEST_RATE) * TRAIN_RATE**2
    print(f"baseline Brier implied by rates: {implied:.4f} (reported {BASELINE_BRIER})")
    k = top_k(0.1, N_TEST)
    print(f"top-decile size: {k}")
    for name, (b, e, hits) in MODELS.items():
        print(f"{name:>10}: BSS {100 * brier_skill(b, BASELINE_BRIER):+.1f}%  precision {hits / k:.4f}")
    trained_ece = MODELS["trained"][1]
    for name in ("pretrained", "frontier"):
        print(f"ECE change trained vs {name}: {100 * relative_change(trained_ece, MODELS[name][1]):+.1f}%")


if __name__ == "__main__":
    main()
