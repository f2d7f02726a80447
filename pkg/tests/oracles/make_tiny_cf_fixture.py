"""Generate tests/fixtures/tiny_cf.json from the standalone oracle.

Run from the repository root:  python3 tests/oracles/make_tiny_cf_fixture.py
"""

import json
from pathlib import Path

import numpy as np

from cf_oracle import reference_forward

DIM_I = 2
DIM_O = 2
N_BLOCKS = 2
HIDDEN = 3
M = 2
SLOPE = 0.01
SEED = 2024


def main():
    rng = np.random.default_rng(SEED)

    def mat(rows, cols):
        return rng.uniform(-0.9, 0.9, size=(rows, cols))

    weights = {
        "wq": [mat(DIM_I, DIM_I) for _ in range(N_BLOCKS)],
        "wk": [mat(DIM_I, DIM_I) for _ in range(N_BLOCKS)],
        "wv": [mat(DIM_I, DIM_I) for _ in range(N_BLOCKS)],
        "wo": [mat(DIM_I, DIM_I) for _ in range(N_BLOCKS)],
        "wp1": mat(DIM_I, HIDDEN),
        "wp2": mat(HIDDEN, DIM_O),
    }
    C = mat(1, DIM_I)
    N = mat(M, DIM_I)
    E = mat(M, DIM_I)
    output, attention = reference_forward(weights, C, N, E, SLOPE)

    fixture = {
        "dim_i": DIM_I,
        "dim_o": DIM_O,
        "n_blocks": N_BLOCKS,
        "hidden": HIDDEN,
        "m": M,
        "slope": SLOPE,
        "weights": {
            "wq": [w.tolist() for w in weights["wq"]],
            "wk": [w.tolist() for w in weights["wk"]],
            "wv": [w.tolist() for w in weights["wv"]],
            "wo": [w.tolist() for w in weights["wo"]],
            "wp1": weights["wp1"].tolist(),
            "wp2": weights["wp2"].tolist(),
        },
        "inputs": {"C": C.tolist(), "N": N.tolist(), "E": E.tolist()},
        "expected": {
            "output": output.tolist(),
            "attention": attention.tolist(),
        },
    }
    out = Path(__file__).parent.parent / "fixtures" / "tiny_cf.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(fixture, fh, indent=2)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
