"""Command-line entry point: ``stbr {train,forecast,transfer,ablate,robustness,embed}``.

Exit codes: 0 success, 1 internal error, 2 configuration/input error,
3 artifact-compatibility error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import downstream as dsm
from .data import CtsDataset, NormStats, SplitSpec, load_adjacency, load_dataset
from .errors import CheckpointError, ConfigError, DataError, STBRError
from .model import EncoderConfig, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, check_alpha, train_loop, write_loss_curve

log = logging.getLogger("stbr")

DEFAULTS = {
    "data": {"dataset": "", "adjacency": "", "period": "48", "train_frac": "0.7", "val_frac": "0.1",
             "normalize": "true"},
    "sampler": {"L1": "200", "l": "100", "mask_ratio": "0.15", "mask_mean_seg_len": "5",
                "neighbor_sampling": "weighted"},
    "encoder": {"latent_dim": "64", "repr_dim": "64", "n_blocks": "10", "kernel_size": "3",
                "predictor_hidden": "128", "mask_mode": "latent", "projection": "duplicated"},
    "trainer": {"alpha": "0.5", "tau": "0.99", "lr": "0.001", "beta1": "0.9", "beta2": "0.999",
                "adam_eps": "1e-8", "batch_size": "8", "steps": "2000", "loss_mode": "positionwise",
                "temporal_region": "full", "strict_coverage": "false"},
    "downstream": {"horizons": "3,6,12", "lambdas": ",".join(repr(v) for v in dsm.DEFAULT_LAMBDAS),
                   "robustness_rates": "0.2,0.4,0.6", "robustness_seeds": "0,1,2"},
    "run": {"seed": "0", "out": "runs/default"},
}

PATH_KEYS = ("dataset", "adjacency")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_COMPAT = 0, 1, 2, 3


@dataclass
class RunConfig:
    """Fully resolved configuration: defaults, then config file, then flags."""

    parser: configparser.ConfigParser

    def get(self, section: str, key: str) -> str:
        return self.parser.get(section, key)

    def _typed(self, section, key, fn):
        raw = self.get(section, key)
        try:
            return fn(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from None

    def getint(self, section, key) -> int:
        return self._typed(section, key, int)

    def getfloat(self, section, key) -> float:
        return self._typed(section, key, float)

    def getbool(self, section, key) -> bool:
        try:
            return self.parser.getboolean(section, key)
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected a boolean, got {self.get(section, key)!r}") from None

    def getlist(self, section, key, fn=float) -> list:
        raw = self.get(section, key)
        try:
            return [fn(v) for v in raw.replace(" ", "").split(",") if v]
        except ValueError:
            raise ConfigError(f"{section}.{key}: cannot parse list {raw!r}") from None

    def path(self, section, key) -> Path:
        raw = self.get(section, key).strip()
        if not raw:
            raise ConfigError(f"missing required setting {section}.{key}")
        p = Path(raw)
        if not p.exists():
            raise ConfigError(f"{section}.{key}: file not found: {p}")
        return p

    @property
    def seed(self) -> int:
        return self.getint("run", "seed")

    @property
    def out(self) -> Path:
        return Path(self.get("run", "out"))

    def encoder(self) -> EncoderConfig:
        s = "encoder"
        return EncoderConfig(latent_dim=self.getint(s, "latent_dim"), repr_dim=self.getint(s, "repr_dim"),
                             n_blocks=self.getint(s, "n_blocks"), kernel_size=self.getint(s, "kernel_size"),
                             predictor_hidden=self.getint(s, "predictor_hidden"),
                             mask_mode=self.get(s, "mask_mode"), projection=self.get(s, "projection"))

    def trainer(self, alpha: float | None = None) -> TrainConfig:
        t, s = "trainer", "sampler"
        return TrainConfig(
            alpha=self.getfloat(t, "alpha") if alpha is None else alpha, tau=self.getfloat(t, "tau"),
            lr=self.getfloat(t, "lr"), beta1=self.getfloat(t, "beta1"), beta2=self.getfloat(t, "beta2"),
            adam_eps=self.getfloat(t, "adam_eps"), batch_size=self.getint(t, "batch_size"),
            steps=self.getint(t, "steps"), seed=self.seed, L1=self.getint(s, "L1"), l=self.getint(s, "l"),
            mask_ratio=self.getfloat(s, "mask_ratio"), mask_mean_seg_len=self.getfloat(s, "mask_mean_seg_len"),
            neighbor_sampling=self.get(s, "neighbor_sampling"), loss_mode=self.get(t, "loss_mode"),
            temporal_region=self.get(t, "temporal_region"), normalize=self.getbool("data", "normalize"),
            strict_coverage=self.getbool(t, "strict_coverage"), encoder=self.encoder())

    def split(self, T: int) -> SplitSpec:
        return SplitSpec.from_fractions(T, self.getfloat("data", "train_frac"), self.getfloat("data", "val_frac"))

    def horizons(self) -> list[int]:
        hs = self.getlist("downstream", "horizons", int)
        if not hs or any(h < 1 for h in hs):
            raise ConfigError(f"downstream.horizons must be positive integers, got {hs}")
        return hs

    def write(self, path: Path) -> None:
        with open(path, "w") as fh:
            self.parser.write(fh)


def load_run_config(config_path: str | None, overrides: dict[str, str]) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_dict(DEFAULTS)
    if config_path:
        if not Path(config_path).exists():
            raise ConfigError(f"config file not found: {config_path}")
        try:
            with open(config_path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {config_path}: {exc}") from None
        # data paths written in a config file are relative to that file
        base = Path(config_path).resolve().parent
        for key in PATH_KEYS:
            raw = cp.get("data", key).strip()
            if raw and not Path(raw).is_absolute():
                cp.set("data", key, str(base / raw))
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        if not key or section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown setting {dotted!r}")
        cp.set(section, key, str(value))
    for section in cp.sections():
        unknown = set(cp[section]) - set(DEFAULTS.get(section, {}))
        if unknown:
            raise ConfigError(f"unknown setting(s) in [{section}]: {sorted(unknown)}")
    return RunConfig(cp)


@contextmanager
def owned_outdir(out: Path):
    """Create ``out`` and hold an exclusive lockfile in it for the duration."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".stbr.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"output directory {out} is in use (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


# ----------------------------------------------------------------------------
# shared helpers


def _load_data(cfg: RunConfig, key: str = "dataset") -> CtsDataset:
    return load_dataset(cfg.path("data", key))


def _norm_stats(path: Path) -> NormStats:
    if not path.exists():
        raise CheckpointError(f"normalization statistics not found: {path}")
    return NormStats.from_dict(json.loads(path.read_text()))


def _load_model(cfg: RunConfig, checkpoint: str):
    model = load_checkpoint(checkpoint, expected_config=cfg.encoder())
    stats = _norm_stats(Path(checkpoint).with_name("norm_stats.json"))
    return model, stats


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_report(out: Path, stem: str, reports) -> None:
    (out / f"{stem}.json").write_text(json.dumps([r.to_dict() for r in reports], indent=1) + "\n")
    (out / f"{stem}.txt").write_text(dsm.format_reports(reports))


def _train(cfg: RunConfig, ds: CtsDataset, out: Path, alpha: float | None = None):
    graph = load_adjacency(cfg.path("data", "adjacency"), ds)
    split = cfg.split(ds.length)
    tcfg = cfg.trainer(alpha)
    res = train_loop(ds, graph, tcfg, split, progress_every=100)
    save_checkpoint(res.model, out / "checkpoint.stbr")
    write_loss_curve(res.curve, out / "loss_curve.csv")
    stats = res.norm_stats
    if stats is None:
        n = ds.n_instances
        stats = NormStats(ds.instance_ids, np.zeros(n), np.ones(n))
    (out / "norm_stats.json").write_text(json.dumps(stats.to_dict(), indent=1) + "\n")
    return res, stats, split


def _forecast_rows(results) -> list[tuple]:
    rows = []
    for r in results:
        m, h = r.probe.overall, r.ha.overall
        rows.append((r.horizon, m.rmse, m.mae, m.mape, h.rmse, h.mae, h.mape))
    return rows


# ----------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig, args) -> None:
    ds = _load_data(cfg)
    with owned_outdir(cfg.out) as out:
        cfg.write(out / "run_config.ini")
        res, _, _ = _train(cfg, ds, out)
        log.info("trained %d steps; final loss %.5f; artifacts in %s", len(res.curve), res.curve[-1].total, out)


def cmd_forecast(cfg: RunConfig, args) -> None:
    ds = _load_data(cfg)
    horizons = cfg.horizons()
    model, stats = _load_model(cfg, args.checkpoint)
    split = cfg.split(ds.length)
    results = dsm.forecast(model, ds, stats, split, horizons, cfg.getint("data", "period"),
                           cfg.getlist("downstream", "lambdas"))
    with owned_outdir(cfg.out) as out:
        cfg.write(out / "run_config.ini")
        for r in results:
            _write_report(out, f"report_h{r.horizon}", [r.probe, r.ha])
            r.ridge.save(out / f"ridge_h{r.horizon}.json")
            ids = ds.instance_ids
            rows = [(ids[i], int(t), h + 1, float(p[h]), float(y[h]))
                    for i, t, p, y in zip(r.test_pairs.instance, r.test_pairs.origin, r.test_pred,
                                          r.test_pairs.targets) for h in range(r.horizon)]
            _write_rows(out / f"predictions_h{r.horizon}.csv", ("instance", "t", "horizon", "pred", "truth"), rows)
        print(dsm.format_reports([rep for r in results for rep in (r.probe, r.ha)]), end="")


def cmd_transfer(cfg: RunConfig, args) -> None:
    model, stats = _load_model(cfg, args.checkpoint)
    ridge = dsm.RidgeModel.load(args.ridge)
    ds_new = load_dataset(args.new_data)
    graph_new = load_adjacency(args.new_adjacency, ds_new) if args.new_adjacency else None
    split = cfg.split(ds_new.length)
    instances = args.instances.split(",") if args.instances else None
    report = dsm.cold_start_transfer(model, ridge, ds_new, stats, split, graph_new, instances)
    evaluated = list(report.per_instance)
    ha = dsm.ha_report(ds_new, split, cfg.getint("data", "period"), ridge.horizon, evaluated)
    with owned_outdir(cfg.out) as out:
        cfg.write(out / "run_config.ini")
        _write_report(out, f"transfer_h{ridge.horizon}", [report, ha])
        print(dsm.format_reports([report, ha]), end="")
        for iid in report.skipped:
            print(f"skipped {iid}: no observed data")


def cmd_ablate(cfg: RunConfig, args) -> None:
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else [0.0, 0.25, 0.5, 0.75, 1.0]
    for a in alphas:
        check_alpha(a)
    ds = _load_data(cfg)
    horizons = cfg.horizons()
    period = cfg.getint("data", "period")
    rows = []
    with owned_outdir(cfg.out) as out:
        cfg.write(out / "run_config.ini")
        for a in alphas:
            sub = out / f"alpha_{a:g}"
            sub.mkdir(exist_ok=True)
            res, stats, split = _train(cfg, ds, sub, alpha=a)
            results = dsm.forecast(res.model, ds, stats, split, horizons, period,
                                   cfg.getlist("downstream", "lambdas"))
            rows += [(a, *row) for row in _forecast_rows(results)]
        header = ("alpha", "horizon", "rmse", "mae", "mape", "ha_rmse", "ha_mae", "ha_mape")
        _write_rows(out / "ablation.csv", header, [(a, h, *map(_num, rest)) for a, h, *rest in rows])
        best = {h: min((r for r in rows if r[1] == h), key=lambda r: r[3])[0] for h in horizons}
        for h, a in best.items():
            print(f"horizon {h}: lowest MAE at alpha = {a:g}")


def _num(v) -> str:
    return "nan" if v is None else repr(float(v))


def cmd_robustness(cfg: RunConfig, args) -> None:
    ds = _load_data(cfg)
    model, stats = _load_model(cfg, args.checkpoint)
    ridge = dsm.RidgeModel.load(args.ridge)
    rates = cfg.getlist("downstream", "robustness_rates")
    seeds = cfg.getlist("downstream", "robustness_seeds", int)
    rows = dsm.robustness_eval(model, ridge, ds, stats, cfg.split(ds.length), rates, seeds)
    with owned_outdir(cfg.out) as out:
        cfg.write(out / "run_config.ini")
        _write_rows(out / "robustness.csv", dsm.ROBUSTNESS_HEADER,
                    [(r["rate"], r["seed"], r["horizon"], *map(_num, (r["rmse"], r["mae"], r["mape"])))
                     for r in rows])


def cmd_embed(cfg: RunConfig, args) -> None:
    ds = _load_data(cfg)
    model, stats = _load_model(cfg, args.checkpoint)
    reprs = dsm.infer_representations(model, stats.apply(ds))
    K = reprs.shape[2]
    with owned_outdir(cfg.out) as out:
        cfg.write(out / "run_config.ini")
        with open(out / "embeddings.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["instance", "t", *(f"r{k}" for k in range(K))])
            for i, iid in enumerate(ds.instance_ids):
                for t in range(ds.length):
                    w.writerow([iid, t, *(repr(float(v)) for v in reprs[i, t])])


COMMANDS = {"train": cmd_train, "forecast": cmd_forecast, "transfer": cmd_transfer,
            "ablate": cmd_ablate, "robustness": cmd_robustness, "embed": cmd_embed}


def bundled(name: str) -> Path:
    """Path of a file shipped in ``stbr/resources`` (toy dataset, desk config)."""
    return Path(str(resources.files("stbr") / "resources" / name))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="run seed (run.seed)")
    common.add_argument("--out", help="output directory (run.out)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config setting; repeatable")
    common.add_argument("--dataset", help="dataset CSV (data.dataset)")
    common.add_argument("--adjacency", help="adjacency CSV (data.adjacency)")

    p = argparse.ArgumentParser(prog="stbr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train an encoder")
    f = sub.add_parser("forecast", parents=[common], help="linear-probe forecasting + HA baseline")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--horizons", help="comma-separated horizons (downstream.horizons)")
    t = sub.add_parser("transfer", parents=[common], help="cold-start transfer with frozen encoder and ridge")
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--ridge", required=True)
    t.add_argument("--new-data", required=True)
    t.add_argument("--new-adjacency")
    t.add_argument("--instances", help="comma-separated ids to evaluate (default: all)")
    a = sub.add_parser("ablate", parents=[common], help="alpha sweep")
    a.add_argument("--alphas", help="comma-separated alpha values (default 0,0.25,0.5,0.75,1)")
    a.add_argument("--horizons")
    r = sub.add_parser("robustness", parents=[common], help="missing-data degradation curve")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--ridge", required=True)
    r.add_argument("--rates", help="comma-separated missing rates")
    r.add_argument("--seeds", help="comma-separated seeds")
    e = sub.add_parser("embed", parents=[common], help="dump representations to CSV")
    e.add_argument("--checkpoint", required=True)
    return p


def _overrides(args) -> dict[str, str]:
    ov = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        ov[key.strip()] = value.strip()
    for flag, key in (("seed", "run.seed"), ("out", "run.out"), ("dataset", "data.dataset"),
                      ("adjacency", "data.adjacency"), ("horizons", "downstream.horizons"),
                      ("rates", "downstream.robustness_rates"), ("seeds", "downstream.robustness_seeds")):
        v = getattr(args, flag, None)
        if v is not None:
            ov[key] = str(v)
    return ov


def _log_level() -> int:
    name = os.environ.get("STBR_LOG", "INFO").strip().upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        print(f"stbr: ignoring unknown STBR_LOG level {name!r}", file=sys.stderr)
        return logging.INFO
    return level


def main(argv=None) -> int:
    logging.basicConfig(level=_log_level(), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config, _overrides(args))
        COMMANDS[args.command](cfg, args)
    except CheckpointError as exc:
        print(f"stbr: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (ConfigError, DataError) as exc:
        print(f"stbr: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except STBRError as exc:
        print(f"stbr: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
