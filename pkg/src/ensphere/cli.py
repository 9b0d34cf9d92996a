"""Command-line pipelines over field containers.

Every subcommand writes a JSON report that embeds the tool version and a hash
of the effective configuration. Failures exit with status 1 and a JSON error
object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import cyclones, diffusion, metrics, perturbations, pooling, significance, windpower
from .io import FieldContainer, RunConfig, read_container, write_container

STEP_HOURS = 12.0
PRECIP_VARIABLES = ("tp",)


def tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def _floats(text: str) -> list:
    return [float(x) for x in text.split(",") if x]


class _Parser(argparse.ArgumentParser):
    """Usage errors (unknown flags, bad values) are reported as JSON with exit status 2."""

    def error(self, message):
        json.dump({"command": self.prog, "module": "cli", "error": message, "type": "UsageError"}, sys.stderr)
        sys.stderr.write("\n")
        self.exit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ensphere", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, *flags):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="RunConfig JSON; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it")
        p.add_argument("--out", required=True, help="report (or container) path to write")
        for flag, kw in flags:
            p.add_argument(flag, **kw)
        return p

    fc = ("--forecast", {"required": True})
    tr = ("--truth", {"required": True})
    add("verify", "CRPS, RMSE, spread/skill and bias per variable, level and lead", fc, tr,
        ("--metrics", {"help": "comma-separated metric names"}))
    add("pool", "pooled CRPS over geodesic discs", fc, tr,
        ("--pool-level", {"type": int, "action": "append", "help": "mesh refinement 2..7 (repeatable)"}))
    add("rev", "REV* of extreme-exceedance forecasts", fc, tr,
        ("--percentile", {"type": float, "action": "append"}), ("--cost-loss", {"type": _floats}))
    add("cyclone", "cyclone tracks, strike probabilities and REV*", fc, tr, ("--cost-loss", {"type": _floats}))
    add("windpower", "regional wind-power CRPS", fc, tr, ("--farms", {"required": True}),
        ("--curve", {"help": "power-curve CSV; a parametric ramp is used when omitted"}))
    add("sample", "roll out an ensemble with the Gaussian toy denoiser", fc,
        ("--members", {"type": int}), ("--steps", {"type": int}))
    add("perturb", "GP-perturbed initial conditions", fc, ("--std-table", {"required": True}),
        ("--members", {"type": int}))
    add("sigtest", "paired bootstrap test of CRPS differences", fc, tr, ("--baseline", {"required": True}))
    return parser


def _config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    overrides = {
        "seed": args.seed,
        "metrics": args.metrics.split(",") if getattr(args, "metrics", None) else None,
        "pool_levels": getattr(args, "pool_level", None),
        "percentiles": getattr(args, "percentile", None),
        "cost_loss": getattr(args, "cost_loss", None),
        "members": getattr(args, "members", None),
        "rollout_steps": getattr(args, "steps", None),
    }
    data = cfg.to_dict()
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**data)


def _paired(forecast: FieldContainer, truth: FieldContainer):
    if forecast.grid != truth.grid:
        raise ValueError(f"forecast grid {forecast.grid.shape} != truth grid {truth.grid.shape}")
    if not np.array_equal(forecast.init_times, truth.init_times) or not np.array_equal(forecast.lead_hours, truth.lead_hours):
        raise ValueError("forecast and truth disagree on init or lead times")
    for name, level in forecast.variable_levels():
        if name not in truth.fields:
            continue
        ens = forecast.get(name, level)
        tgt = truth.get(name, level)[0]
        for j, lead in enumerate(forecast.lead_hours):
            yield name, level, float(lead), ens[:, :, j], tgt[:, j]


def run_verify(args, cfg: RunConfig) -> list:
    fc = read_container(args.forecast, cfg.fill_values)
    tr = read_container(args.truth, cfg.fill_values)
    w = metrics.weights_for(fc.grid)
    records = []
    for name, level, lead, ens, tgt in _paired(fc, tr):
        for m in cfg.metrics:
            if m == "crps":
                value = metrics.crps(ens, tgt, w)
            elif m == "rmse":
                value = metrics.ensemble_mean_rmse(ens, tgt, w)
            elif m == "spread_skill":
                mse = metrics.time_mean(metrics.mse_series(ens, tgt, w))
                value = None if mse == 0 or len(ens) < 2 else metrics.spread_skill_ratio(ens, tgt, w)
            elif m == "bias":
                value = metrics.bias(ens, tgt, w)
            else:
                continue
            records.append(metrics.metric_record(name, level, lead, m, value))
    return records


def run_pool(args, cfg: RunConfig) -> list:
    fc = read_container(args.forecast, cfg.fill_values)
    tr = read_container(args.truth, cfg.fill_values)
    records = []
    for k in cfg.pool_levels:
        regions = pooling.build_pool_regions(fc.grid, k)
        for name, level, lead, ens, tgt in _paired(fc, tr):
            for mode in ("avg", "max"):
                rec = metrics.metric_record(name, level, lead, f"pooled_crps_{mode}", pooling.pooled_crps(ens, tgt, regions, mode))
                rec.update(pool_level=k, diameter_km=regions.diameter_km)
                records.append(rec)
    return records


def run_rev(args, cfg: RunConfig) -> list:
    fc = read_container(args.forecast, cfg.fill_values)
    tr = read_container(args.truth, cfg.fill_values)
    w = metrics.weights_for(fc.grid)
    records = []
    for name, level, lead, ens, tgt in _paired(fc, tr):
        clim = metrics.climatology_percentiles(tgt, cfg.percentiles)
        for pct in cfg.percentiles:
            thr = clim.threshold(pct)
            try:
                value = metrics.rev_curve(metrics.exceedance_binarize(ens, thr), metrics.exceedance_binarize(tgt, thr), w, cfg.cost_loss)
            except ValueError as err:
                value, note = None, str(err)
            else:
                note = None
            rec = metrics.metric_record(name, level, lead, f"rev_star_p{pct:g}", value)
            rec.update(cost_loss=cfg.cost_loss, note=note)
            records.append(rec)
    return records


def _cyclone_states(c: FieldContainer, member: int, init: int):
    zs = c.get("zs")[member, init, 0]
    return [
        {
            "msl": c.get("msl")[member, init, j],
            "z500": c.get("z", 500)[member, init, j],
            "z300": c.get("z", 300)[member, init, j],
            "10u": c.get("10u")[member, init, j],
            "10v": c.get("10v")[member, init, j],
            "zs": zs,
        }
        for j in range(len(c.lead_hours))
    ]


def run_cyclone(args, cfg: RunConfig) -> list:
    fc = read_container(args.forecast, cfg.fill_values)
    tr = read_container(args.truth, cfg.fill_values)
    grid = cyclones.LatLonGrid(181, 360)
    heat, truth, records, all_tracks = [], [], [], []
    for k, t0 in enumerate(fc.init_times):
        times = t0 + (fc.lead_hours * 60).astype("timedelta64[m]")
        members = [cyclones.track_cyclones(_cyclone_states(fc, m, k), fc.grid, times) for m in range(fc.n_members)]
        observed = cyclones.track_cyclones(_cyclone_states(tr, 0, k), tr.grid, times)
        all_tracks.extend(members)
        for t in times:
            heat.append(cyclones.strike_heatmap(members, t, grid))
            truth.append(cyclones.truth_map(observed, t, grid))
        records.append({"init_time": str(t0), "member_tracks": [len(m) for m in members], "truth_tracks": len(observed)})
    try:
        rev = cyclones.cyclone_rev(np.array(heat), np.array(truth), fc.n_members, cfg.cost_loss, grid).tolist()
    except ValueError as err:
        rev = None
        records.append({"note": str(err)})
    records.append({"metric": "cyclone_rev_star", "cost_loss": cfg.cost_loss, "value": rev})
    cyclones.write_tracks_csv(Path(args.out).with_suffix(".tracks.csv"), all_tracks)
    return records


def run_windpower(args, cfg: RunConfig) -> list:
    fc = read_container(args.forecast, cfg.fill_values)
    tr = read_container(args.truth, cfg.fill_values)
    farms = windpower.WindFarms.from_csv(args.farms)
    curve = windpower.PowerCurve.from_csv(args.curve) if args.curve else windpower.PowerCurve.parametric()
    ens = windpower.farm_speeds(fc.get("10u"), fc.get("10v"), fc.grid, farms)  # (M, K, L, F)
    tgt = windpower.farm_speeds(tr.get("10u"), tr.get("10v"), tr.grid, farms)[0]
    records = []
    for d in windpower.GROUP_DIAMETERS_KM:
        groups = windpower.mesh_farm_groups(farms, d)
        for j, lead in enumerate(fc.lead_hours):
            value = windpower.regional_power_crps(ens[:, :, j], tgt[:, j], farms, groups, curve)
            rec = metrics.metric_record("wind_power", None, float(lead), "regional_power_crps", value)
            rec.update(diameter_km=d, n_groups=len(groups.membership))
            records.append(rec)
    return records


def _stack(c: FieldContainer, member: int, init: int, lead: int):
    keys = list(c.variable_levels())
    return keys, np.stack([c.get(n, lev)[member, init, lead] for n, lev in keys])


def run_sample(args, cfg: RunConfig) -> list:
    ic = read_container(args.forecast, cfg.fill_values)
    if len(ic.lead_hours) < 2:
        raise ValueError("initial-condition container needs two states (previous and current) on the lead axis")
    s = cfg.sampler
    schedule = diffusion.NoiseSchedule(s.sigma_max, s.sigma_min, s.rho, s.n_steps)
    churn = diffusion.ChurnConfig(s.s_churn, s.s_tmin, s.s_tmax, s.s_noise)
    noise = diffusion.SphericalNoise(ic.grid)
    keys, _ = _stack(ic, 0, 0, 0)
    precip = np.array([n in PRECIP_VARIABLES for n, _ in keys])
    stats = diffusion.NormalizationStats(np.ones(len(keys)))
    T, M = cfg.rollout_steps, cfg.members
    out = np.empty((M, len(ic.init_times), T, len(keys)) + ic.grid.shape, dtype=np.float32)  # stored dtype
    for k in range(len(ic.init_times)):
        for m in range(M):
            src = m % ic.n_members
            _, x_prev = _stack(ic, src, k, -2)
            _, x0 = _stack(ic, src, k, -1)
            den = diffusion.ToyDenoiser(0.0, 1.0)
            out[m, k] = diffusion.rollout(x0, x_prev, T, stats, den, schedule, churn, noise, cfg.seed, member=m, precip_channels=precip)
    fields, levels = {}, {}
    for i, (name, level) in enumerate(keys):
        levels[name] = ic.levels[name]
    for name in levels:
        idx = [i for i, (n, _) in enumerate(keys) if n == name]
        fields[name] = out[:, :, :, idx]
    leads = ic.lead_hours[-1] + STEP_HOURS * np.arange(1, T + 1)
    write_container(args.out, FieldContainer(ic.grid, ic.init_times, leads, fields, levels))
    return [{"written": str(args.out), "members": M, "steps": T, "channels": len(keys)}]


def run_perturb(args, cfg: RunConfig) -> list:
    det = read_container(args.forecast, cfg.fill_values)
    table = perturbations.load_std_table(args.std_table)["std_6h_diff"]
    present = [v for v in perturbations.GP_VARIABLES if v in det.fields]
    target = {}
    for v in present:
        levels = det.levels[v] if det.levels[v] is not None else [None]
        missing = [lev for lev in levels if lev not in table.get(v, {})]
        if missing:
            raise KeyError(f"std table has no entry for {v} at levels {missing}")
        target[v] = {lev: table[v][lev] for lev in levels}
    spec = perturbations.GPPerturbSpec(target, variables=tuple(present))
    M = cfg.members
    fields = {n: np.repeat(a[:1], M, axis=0).astype(float) for n, a in det.fields.items()}
    for m in range(M):
        pert = perturbations.gp_perturbation(spec, det.grid, np.random.SeedSequence(cfg.seed, spawn_key=(m,)))
        for v, p in pert.items():
            fields[v][m] += p[None, None]  # same field at every init and input timestep
    write_container(args.out, FieldContainer(det.grid, det.init_times, det.lead_hours, fields, dict(det.levels)))
    return [{"written": str(args.out), "members": M, "variables": present}]


def run_sigtest(args, cfg: RunConfig) -> list:
    a = read_container(args.forecast, cfg.fill_values)
    b = read_container(args.baseline, cfg.fill_values)
    tr = read_container(args.truth, cfg.fill_values)
    w = metrics.weights_for(a.grid)
    base = {(n, lev, lead): (ens, tgt) for n, lev, lead, ens, tgt in _paired(b, tr)}
    records = []
    for name, level, lead, ens, tgt in _paired(a, tr):
        series_a = metrics.crps_series(ens, tgt, w)
        series_b = metrics.crps_series(base[(name, level, lead)][0], tgt, w)
        res = significance.paired_metric_test(series_a, series_b, significance.CRPS, cfg.alpha, cfg.n_resamples, cfg.seed)
        rec = res.record(lead, level)
        rec["variable"] = name
        records.append(rec)
    return records


COMMANDS = {
    "verify": run_verify,
    "pool": run_pool,
    "rev": run_rev,
    "cyclone": run_cyclone,
    "windpower": run_windpower,
    "sample": run_sample,
    "perturb": run_perturb,
    "sigtest": run_sigtest,
}

MODULES = {
    "verify": "metrics",
    "pool": "pooling",
    "rev": "metrics",
    "cyclone": "cyclones",
    "windpower": "windpower",
    "sample": "diffusion",
    "perturb": "perturbations",
    "sigtest": "significance",
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        records = COMMANDS[args.command](args, cfg)
    except Exception as err:  # surfaced as a machine-readable error
        json.dump(
            {
                "command": args.command,
                "module": MODULES[args.command],
                "error": str(err),
                "type": type(err).__name__,
                "parameters": {k: v for k, v in vars(args).items() if k != "command"},
            },
            sys.stderr,
            default=str,
        )
        sys.stderr.write("\n")
        return 1
    report = {
        "tool": "ensphere",
        "version": tool_version(),
        "command": args.command,
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "records": records,
    }
    out = Path(args.out)
    if args.command in ("sample", "perturb"):
        out = out.with_suffix(".json")
    out.write_text(json.dumps(report, indent=2, default=_jsonable))
    return 0


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


if __name__ == "__main__":
    sys.exit(main())
