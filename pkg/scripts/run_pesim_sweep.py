"""Cycle, traffic and utilization sweep of the PE-array model.

Runs the first VGG16 block shapes (at reduced resolution so the sweep is
quick) for a few G and group sizes and writes one CSV row per point.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import asdict, dataclass

from fslhdnn.pesim import ArrayConfig, schedule_layer, simulate
from fslhdnn.tensorcore import ConvLayerSpec


@dataclass
class SweepConfig:
    size: int = 28
    Gs: tuple = (1, 4, 8, 16)
    group_sizes: tuple = (1, 4, 16)
    rows: int = 4
    cols: int = 16


LAYERS = [(3, 64), (64, 64), (64, 128), (128, 128), (128, 256)]


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=28, help="input height and width")
    p.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    a = p.parse_args()
    cfg = SweepConfig(size=a.size)
    arr = ArrayConfig(cfg.rows, cfg.cols)

    fh = sys.stdout if a.out == "-" else open(a.out, "w", newline="")
    w = None
    for cin, cout in LAYERS:
        spec = ConvLayerSpec(cin, cout, 3, 1, 1, cfg.size, cfg.size)
        for G in cfg.Gs:
            for gs in cfg.group_sizes:
                rep = simulate(schedule_layer(spec, G, arr, group_size=gs))
                row = {"cin": cin, "cout": cout, "G": G, "group_size": gs} | rep.to_dict()
                if w is None:
                    w = csv.DictWriter(fh, list(row))
                    w.writeheader()
                w.writerow(row)
    if fh is not sys.stdout:
        fh.close()
    print(f"# config {asdict(cfg)}", file=sys.stderr)


if __name__ == "__main__":
    main()
