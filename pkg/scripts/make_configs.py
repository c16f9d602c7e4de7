"""Write the desk-scale experiment configs into configs/.

One JSON file per (example, N, solver). Hyperparameters follow the reference
per-example tables. The activation comparison reuses ex2_flat3d_N4096_nn.json;
its GD step sizes live in dmpde.bench.ACTIVATION_VARIANTS.
"""

import argparse
import json
from pathlib import Path

# (N, epsilon, k, T, m, gamma)
EX1 = [(625, 0.1166, 128, 2000, 50, 1e-3), (1225, 0.0508, 128, 3000, 71, 1e-3),
       (2500, 0.0237, 128, 4000, 100, 1e-3), (5041, 0.0118, 256, 4000, 141, 1e-3)]
EX2 = [(512, 0.43, 128, 1000, 100, 1e-3), (1331, 0.23, 128, 2000, 150, 1e-3),
       (4096, 0.12, 256, 2000, 250, 5e-3)]
# (N, epsilon, k, T, m)
EX3 = [(1024, 0.0221, 128, 2000, 100), (2025, 0.0096, 128, 3000, 100), (4096, 0.0048, 128, 4000, 150)]
EX3_LAMBDA = 5.0
ADAM_LR = 0.01


def _direct(manifold, N, eps, k, gamma=1e-3):
    cfg = {"manifold": manifold, "N": N, "epsilon": eps, "k": k, "solver": "direct", "layout": "grid"}
    if gamma is not None:
        cfg["gamma"] = gamma
    return cfg


def _nn(base, T, m, gamma=0.0, lam=0.0):
    cfg = dict(base, solver="nn")
    cfg["nn"] = {"m": m, "depth": 3, "activation": "polysine", "optimizer": "adam", "T": T,
                 "lr0": ADAM_LR, "gamma": gamma, "lam": lam, "n_seeds": 5}
    return cfg


def configs():
    out = {}
    for N, eps, k, T, m, g in EX1:
        base = _direct("Torus2D", N, eps, k, g)
        out[f"ex1_torus_N{N}_direct"] = base
        out[f"ex1_torus_N{N}_nn"] = _nn(base, T, m, gamma=g)
    for N, eps, k, T, m, g in EX2:
        base = _direct("Flat3DinR12", N, eps, k, 1e-3)
        out[f"ex2_flat3d_N{N}_direct"] = base
        out[f"ex2_flat3d_N{N}_nn"] = _nn(base, T, m, gamma=g)
    for N, eps, k, T, m in EX3:
        base = _direct("SemiTorus2D", N, eps, k, None)
        base["gamma"] = 0.0
        out[f"ex3_semitorus_N{N}_direct"] = base
        out[f"ex3_semitorus_N{N}_nn"] = _nn(base, T, m, lam=EX3_LAMBDA)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dir", default=str(Path(__file__).resolve().parent.parent / "configs"))
    args = ap.parse_args()
    d = Path(args.dir)
    d.mkdir(parents=True, exist_ok=True)
    for name, cfg in configs().items():
        with open(d / f"{name}.json", "w") as fh:
            json.dump(cfg, fh, indent=2)
            fh.write("\n")
    print(f"wrote {len(configs())} configs to {d}")


if __name__ == "__main__":
    main()
