"""Dense vs clustered op/byte reduction on the embedded VGG16 conv stack.

Sweeps the pattern-group size at fixed G and prints the total reductions,
followed by the per-layer table at full sharing.

    python3 scripts/run_costs.py --G 16 --group-sizes 1,2,4,8,16,64,full
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass

from fslhdnn.harness import cost_table, vgg16_specs


@dataclass
class CostSweep:
    G: int = 16
    group_sizes: tuple = (1, 2, 4, 8, 16, 64, None)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--G", type=int, default=16)
    p.add_argument("--group-sizes", default="1,2,4,8,16,64,full")
    a = p.parse_args()
    cfg = CostSweep(a.G, tuple(None if s == "full" else int(s) for s in a.group_sizes.split(",")))

    specs = vgg16_specs()
    print(f"G={cfg.G}")
    print(f"{'group size':>10} {'ops x':>9} {'bytes x':>9}")
    for gs in cfg.group_sizes:
        total = cost_table(specs, cfg.G, gs)[-1]
        print(f"{'full' if gs is None else gs:>10} {total['ops_reduction']:>9.2f} {total['params_reduction']:>9.2f}")

    print("\nper layer, full sharing")
    for r in cost_table(specs, cfg.G):
        print(f"{r['layer']:>6} {r['shape']:>18} ops x {r['ops_reduction']:>8.2f}  bytes x {r['params_reduction']:>8.2f}")


if __name__ == "__main__":
    main()
