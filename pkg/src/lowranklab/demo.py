"""Deterministic demo inputs: a small weight bundle and a synthetic observation CSV.

The CSV's relative accuracy degradation is an exact linear function of the
compression ratio (and the log perplexity ratio likewise), written at full
float precision so fits recover the planted structure exactly.

Run ``python -m lowranklab.demo <dir>`` to (re)generate the shipped files.
"""

from __future__ import annotations

import math
import sys
from pathlib import Path

import numpy as np

from .bundleio import ModelBundle, WeightMatrix, save_bundle
from .records import ObservationRecord, write_observations

_MODELS = (
    # (log_n, bits, rho_s_bar, rho_eff_bar, entropy, k95, k99, ppl0, acc0)
    (math.log(6.0e8), 10.6, 22.0, 160.0, 3.8, 96.0, 150.0, 9.5, 0.75),
    (math.log(1.7e9), 10.9, 31.0, 240.0, 4.1, 120.0, 180.0, 8.4, 0.75),
    (math.log(4.0e9), 11.3, 45.0, 330.0, 4.4, 150.0, 220.0, 7.6, 0.75),
)

_GAMMAS = (0.1, 0.2, 0.3, 0.45, 0.6, 0.75, 0.9, 1.0)


def build_demo_bundle(seed: int = 0) -> ModelBundle:
    """Three BF16 matrices at trained-weight scale."""
    rng = np.random.default_rng(seed)

    def gaussian(rows, cols):
        return rng.normal(0.0, 0.02, size=(rows, cols)).astype(np.float32)

    matrices = [
        WeightMatrix.from_values("blk0.attn_v", "attn_v", 0, gaussian(48, 48), "bf16"),
        WeightMatrix.from_values("blk0.attn_o", "attn_o", 0, gaussian(48, 48), "bf16"),
        WeightMatrix.from_values("blk0.mlp_up", "mlp_up", 0, gaussian(48, 96), "bf16"),
    ]
    return ModelBundle(matrices, {"origin": "lowranklab demo", "seed": str(seed)})


def build_demo_observations() -> list[ObservationRecord]:
    """24 records whose degradation is exactly linear in the compression ratio."""
    records = []
    for log_n, bits, rho_s, rho_eff, entropy, k95, k99, ppl0, acc0 in _MODELS:
        for gamma in _GAMMAS:
            rel = 0.45 - 0.4 * gamma
            log_ratio = 0.5 * (1.0 - gamma)
            records.append(ObservationRecord(
                gamma=gamma,
                log_n=log_n,
                log_n_comp=log_n + math.log(gamma),
                bits=bits,
                rho_s_bar=rho_s,
                rho_eff_bar=rho_eff,
                svd_rank=float(round(gamma * 512)),
                entropy=entropy,
                k95_bar=k95,
                k99_bar=k99,
                gamma_attn=gamma,
                gamma_mlp=1.0,
                ppl=ppl0 * math.exp(log_ratio),
                ppl0=ppl0,
                acc=acc0 * (1.0 - rel),
                acc0=acc0,
                task="demo",
                layer="attn",
                method="vanilla",
            ))
    return records


def write_demo_tree(root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_bundle(build_demo_bundle(), root / "bundle")
    write_observations(build_demo_observations(), root / "observations.csv")


if __name__ == "__main__":
    write_demo_tree(sys.argv[1] if len(sys.argv) > 1 else "demo")
