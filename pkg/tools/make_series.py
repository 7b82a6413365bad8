"""Regenerate the bundled hourly series (committed outputs).

Writes a day-ahead wholesale price shape typical of PJM-style markets
(overnight trough 3:00-6:00, midday ridge 11:00-17:00), a clear-day solar
radiation curve (daylight 6:00-20:00), and a 60-day synthetic solar energy
history around that curve for transition-matrix estimation.

Run from the repository root:  python3 tools/make_series.py
"""

import pathlib

import numpy as np

DATA = pathlib.Path(__file__).resolve().parents[1] / "src" / "chargeopt" / "data"

# $/MWh, hours 1..24 (hour 1 = midnight-1am)
PJM_DAY = [25.1, 23.4, 21.8, 20.5, 20.1, 21.0, 24.5, 29.8, 33.2, 36.0, 38.5, 40.2,
           41.0, 41.8, 42.5, 41.2, 39.0, 36.5, 34.8, 33.0, 31.5, 29.0, 27.2, 25.8]

# kW/m^2, zero outside the 6:00-20:00 daylight window
SOLAR_DAY = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.05, 0.15, 0.30, 0.45, 0.60, 0.75,
             0.85, 0.90, 0.85, 0.75, 0.60, 0.40, 0.25, 0.10, 0.0, 0.0, 0.0, 0.0]

PANEL_AREA_M2 = 200_000.0
EFFICIENCY = 0.20
HISTORY_DAYS = 60
HISTORY_SEED = 20240817


def write_series(path, values):
    with open(path, "w") as fh:
        fh.write("horizon,value\n")
        for k, v in enumerate(values, start=1):
            fh.write(f"{k},{v}\n")


def main():
    write_series(DATA / "pjm_day.csv", PJM_DAY)
    write_series(DATA / "solar_day.csv", SOLAR_DAY)

    rng = np.random.default_rng(HISTORY_SEED)
    base = np.array(SOLAR_DAY) * PANEL_AREA_M2 * EFFICIENCY / 1000.0   # MWh
    rows = []
    for day in range(1, HISTORY_DAYS + 1):
        cloud = rng.beta(6.0, 2.0)                    # daily clearness factor
        jitter = rng.normal(1.0, 0.08, size=len(base))
        energy = np.clip(base * cloud * jitter, 0.0, None)
        energy[np.array(SOLAR_DAY) == 0.0] = 0.0
        for k, v in enumerate(energy, start=1):
            rows.append((day, k, round(float(v), 4)))
    with open(DATA / "solar_history.csv", "w") as fh:
        fh.write("day,horizon,value\n")
        for day, k, v in rows:
            fh.write(f"{day},{k},{v}\n")
    print(f"wrote pjm_day.csv, solar_day.csv, solar_history.csv under {DATA}")


if __name__ == "__main__":
    main()
