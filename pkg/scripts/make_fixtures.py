"""Regenerate the quarterly factor fixtures in data/.

The series mimic the public BEIS quarterly-energy-prices shape for 2012-2021:
gas prices driven by production, imports, storage and coal; electricity
prices driven by gas, carbon (ETS) and offshore wind share. Both targets are
generated from linear relationships with small observation noise so the
regression DLMs are well specified on the fixtures.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
SEED = 20120401
QUARTERS = [f"{year}-Q{q}" for year in range(2012, 2022) for q in range(1, 5)]


def main() -> None:
    rng = np.random.default_rng(SEED)
    n = len(QUARTERS)
    t = np.arange(n)
    season = np.array([q % 4 for q in range(n)])  # 0 = Q1

    # supply-side volumes (GWh, raw units; ingested with a 1e-5 rescale)
    prod = 110_000 - 900 * t + rng.normal(0, 2_500, n)
    imports = 55_000 + 650 * t + 6_000 * (season == 0) + rng.normal(0, 2_000, n)
    storage = (
        42_000
        + np.array([-9_000, 2_000, 9_000, -2_000])[season]
        + rng.normal(0, 1_500, n)
    )
    coal = 1.05 + 0.004 * t + 0.08 * np.sin(2 * np.pi * t / 8) + rng.normal(0, 0.03, n)

    # gas price (p/kWh) from scaled volumes plus coal
    prod_s, imports_s, storage_s = prod * 1e-5, imports * 1e-5, storage * 1e-5
    gas = (
        2.35
        - 0.55 * prod_s
        + 0.95 * imports_s
        - 0.80 * storage_s
        + 0.90 * coal
        + rng.normal(0, 0.05, n)
    )

    # electricity drivers
    ets = 7.0 + 0.9 * t + 4.0 * np.sin(2 * np.pi * t / 16) + rng.normal(0, 1.0, n)
    offshore = 2.0 + 0.28 * t + rng.normal(0, 0.4, n)
    elec = (
        3.0
        + 2.10 * gas
        + 0.055 * ets
        + 0.10 * offshore
        + rng.normal(0, 0.18, n)
    )

    data_dir = ROOT / "data"
    data_dir.mkdir(exist_ok=True)
    with open(data_dir / "gas_factors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "gas_price", "prod", "imports", "storage", "coal"])
        for i, quarter in enumerate(QUARTERS):
            w.writerow(
                [
                    quarter,
                    f"{gas[i]:.4f}",
                    f"{prod[i]:.1f}",
                    f"{imports[i]:.1f}",
                    f"{storage[i]:.1f}",
                    f"{coal[i]:.4f}",
                ]
            )
    with open(data_dir / "elec_factors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "elec_price", "gas_price", "ets", "offshore_wind"])
        for i, quarter in enumerate(QUARTERS):
            w.writerow(
                [
                    quarter,
                    f"{elec[i]:.4f}",
                    f"{gas[i]:.4f}",
                    f"{ets[i]:.4f}",
                    f"{offshore[i]:.4f}",
                ]
            )
    print(f"gas price range {gas.min():.2f}..{gas.max():.2f} p/kWh")
    print(f"elec price range {elec.min():.2f}..{elec.max():.2f} p/kWh")
    print(f"wrote {n} quarters to {data_dir}")


if __name__ == "__main__":
    main()
