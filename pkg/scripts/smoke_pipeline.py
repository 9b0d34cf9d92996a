"""Perturb, roll out, verify and test a synthetic analysis through the CLI.

    python3 scripts/smoke_pipeline.py --workdir /tmp/ensphere-smoke

Defaults are sized for a quick run; ``--n-lat 91 --n-lon 180 --inits 32
--steps 30`` matches the acceptance setting.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from ensphere import cli
from ensphere.grid import LatLonGrid
from ensphere.io import FieldContainer, read_container, write_container


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--workdir", type=Path, default=Path("smoke-run"))
    p.add_argument("--n-lat", type=int, default=37)
    p.add_argument("--n-lon", type=int, default=72)
    p.add_argument("--inits", type=int, default=32, help="at least 32 for block-length selection")
    p.add_argument("--members", type=int, default=8)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    return p.parse_args(argv)


def run(cmd):
    t0 = time.perf_counter()
    code = cli.main(cmd)
    print(f"{cmd[0]:>8s}  exit {code}  {time.perf_counter() - t0:6.1f} s")
    if code:
        sys.exit(code)


def main(argv=None):
    a = parse_args(argv)
    a.workdir.mkdir(parents=True, exist_ok=True)
    grid = LatLonGrid(a.n_lat, a.n_lon)
    rng = np.random.default_rng(a.seed)
    inits = np.datetime64("2019-01-01T00:00", "m") + np.arange(a.inits) * np.timedelta64(720, "m")
    shape = (1, a.inits, 2, 1) + grid.shape
    det = FieldContainer(grid, inits, [-12.0, 0.0], {"2t": 280 + rng.normal(size=shape), "z": 50_000 + rng.normal(size=shape)},
                         {"2t": None, "z": [500]})
    f = {k: str(a.workdir / f"{k}.ensf") for k in ("det", "pert", "fc", "truth", "base")}
    write_container(f["det"], det)
    table = a.workdir / "std_table.json"
    table.write_text(json.dumps([{"variable": "2t", "level": None, "std_6h_diff": 1.0},
                                 {"variable": "z", "level": 500, "std_6h_diff": 1.0}]))
    m, s, seed = str(a.members), str(a.steps), str(a.seed)
    run(["perturb", "--forecast", f["det"], "--std-table", str(table), "--members", m, "--seed", seed, "--out", f["pert"]])
    run(["sample", "--forecast", f["pert"], "--members", m, "--steps", s, "--seed", seed, "--out", f["fc"]])
    run(["sample", "--forecast", f["det"], "--members", "1", "--steps", s, "--seed", str(a.seed + 1000), "--out", f["truth"]])
    fc = read_container(f["fc"])
    write_container(f["base"], FieldContainer(grid, fc.init_times, fc.lead_hours, {k: v + 1.0 for k, v in fc.fields.items()}, dict(fc.levels)))
    run(["verify", "--forecast", f["fc"], "--truth", f["truth"], "--out", str(a.workdir / "verify.json")])
    run(["sigtest", "--forecast", f["fc"], "--baseline", f["base"], "--truth", f["truth"], "--out", str(a.workdir / "sigtest.json")])

    verify = json.loads((a.workdir / "verify.json").read_text())["records"]
    sig = json.loads((a.workdir / "sigtest.json").read_text())["records"]
    print("\nvariable  lead_h    crps  spread/skill  diff vs biased baseline  reject")
    vals = {(r["variable"], r["lead_time_h"], r["metric"]): r["value"] for r in verify}
    for r in sig:
        key = (r["variable"], r["lead_time"])
        print(f"{r['variable']:>8s}  {r['lead_time']:6.0f}  {vals[key + ('crps',)]:6.3f}  {vals[key + ('spread_skill',)]:12.3f}"
              f"  {r['diff']:23.4f}  {r['reject']}")


if __name__ == "__main__":
    main()
