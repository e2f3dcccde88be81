"""Experiment orchestration: configs, end-to-end pipelines and sweeps."""
from __future__ import annotations

import configparser
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import bounds as B
from .datasets import GENERATORS, Dataset, generate, holdout_test_set, make_rng
from .exceptions import ConfigError, ParseError
from .losses import LOSS_IDS, default_cap, per_sample_loss
from .numerics import CovSpec, c_n
from .oracle import DEFAULT_SAMPLES, mc_cmi, mc_floo_cmi
from .reporting import (
    SUMMARY_COLUMNS,
    BoundReport,
    fmt_real,
    write_predictions_csv,
    write_rows_csv,
    write_weights_csv,
)
from .trainers import (
    LooPredictions,
    LooWeights,
    TrainConfig,
    default_damping,
    get_model,
    hessian,
    influence_loo,
    predict_all,
    train_loo,
)

__all__ = [
    "ExperimentConfig",
    "LooArtifacts",
    "SweepResult",
    "load_config",
    "prepare",
    "evaluate",
    "run_experiment",
    "run_sweep",
    "collect_reports",
    "write_report_tables",
    "write_point",
]

log = logging.getLogger(__name__)

STREAM_SUBSET = 7
STREAM_PRED_NOISE = 6
PROBE_SIZE = 200
INVERSION_TOL = 0.01


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment or sweep."""

    name: str = "experiment"
    generator: str = "gaussian-blobs"
    seeds: tuple = (0, 1, 2)
    n: tuple = (50, 100, 200)
    p: int = 5
    test_size: int = 10000
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        model="logistic", lam=0.05, optimizer="full-batch-gd", lr=1.0, steps=200))
    sigmas: tuple = (0.1,)
    weight_noise: str = "hessian"
    weight_sigma: float = 1.0
    loss_id: str = "zero-one"
    loss_cap: Optional[float] = None
    loo_mode: str = "full"
    subset_size: int = 10
    subset_seed: int = 0
    oracle: bool = False
    oracle_samples: int = DEFAULT_SAMPLES
    noise_draws: int = 20
    local_bound: bool = True
    lipschitz: float = 1.0
    write_loo: bool = True

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.n or any(int(v) < 2 for v in self.n):
            raise ConfigError("every n must be >= 2")
        if not self.sigmas or any(s <= 0 for s in self.sigmas):
            raise ConfigError("sigmas must be positive")
        if self.weight_noise not in ("isotropic", "hessian"):
            raise ConfigError("weight_noise must be 'isotropic' or 'hessian'")
        if self.weight_sigma <= 0:
            raise ConfigError("weight_sigma must be positive")
        if self.loss_id not in LOSS_IDS:
            raise ConfigError(f"unknown loss {self.loss_id!r}")
        if self.loo_mode not in ("full", "subset"):
            raise ConfigError("loo_mode must be 'full' or 'subset'")
        if self.loo_mode == "subset":
            if self.subset_size < 2 or self.subset_size > min(self.n):
                raise ConfigError("subset size must satisfy 2 <= s <= n")
        if self.oracle_samples < 1000:
            raise ConfigError("oracle_samples must be >= 1000")
        if self.noise_draws < 1 or self.test_size < 1:
            raise ConfigError("noise_draws and test_size must be positive")


def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.replace(";", ",").split(",") if v.strip())


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in s.replace(";", ",").split(",") if v.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


_TRAIN_KEYS = {
    "model": str, "lam": float, "hidden": int, "optimizer": str, "lr": float,
    "steps": int, "batch": int, "step_clip": float, "momentum": float,
    "init_seed": int, "sgd_order_seed": int,
}
_EXP_KEYS = {
    "name": str, "generator": str, "seeds": _ints, "n": _ints, "p": int,
    "test_size": int, "sigma": _floats, "weight_noise": str, "weight_sigma": float,
    "loss": str, "loss_cap": float, "loo_mode": str, "subset_size": int,
    "subset_seed": int, "oracle": _bool, "oracle_samples": int, "noise_draws": int,
    "local_bound": _bool, "lipschitz": float, "write_loo": _bool,
}
_RENAME = {"sigma": "sigmas", "loss": "loss_id"}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse the key-value experiment format (one ``[experiment]`` section)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ParseError(str(exc), path=source) from None
    if not cp.has_section("experiment"):
        raise ConfigError(f"{source}: missing [experiment] section")
    sec = cp["experiment"]
    exp, tr = {}, {}
    for key, raw in sec.items():
        try:
            if key in _TRAIN_KEYS:
                tr[key] = _TRAIN_KEYS[key](raw.strip())
            elif key in _EXP_KEYS:
                exp[_RENAME.get(key, key)] = _EXP_KEYS[key](raw.strip())
            else:
                raise ConfigError(f"{source}: unknown key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from None
    if tr:
        exp["train"] = TrainConfig(**tr)
    return ExperimentConfig(**exp)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


# --------------------------------------------------------------------------
# pipeline


@dataclass
class LooArtifacts:
    """Trained leave-one-out outputs for one (n, seed); reused across sigmas."""

    config: ExperimentConfig
    ds: Dataset
    test: Dataset
    train_config: TrainConfig
    loo: LooWeights
    preds: LooPredictions
    test_preds: np.ndarray
    probe_preds: np.ndarray
    hessian: Optional[np.ndarray] = None
    damping: Optional[float] = None
    influence: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.ds.n


def _subset_rows(config: ExperimentConfig, n: int) -> Optional[List[int]]:
    if config.loo_mode == "full":
        return None
    rng = make_rng(config.subset_seed, STREAM_SUBSET, n)
    return sorted(int(i) for i in rng.choice(n, size=config.subset_size, replace=False))


def prepare(config: ExperimentConfig, n: int, seed: int, threads: int = 1) -> LooArtifacts:
    """Generate data, retrain on every leave-one-out view and predict."""
    ds = generate(config.generator, seed, n, config.p)
    test = holdout_test_set(config.generator, seed, config.test_size, config.p)
    # dataset and init seeds move together
    tc = replace(config.train, init_seed=seed)
    loo = train_loo(ds, tc, _subset_rows(config, n), threads=threads)
    preds = predict_all(ds, loo)
    model = get_model(tc, ds.p, max(ds.n_classes, 2))
    test_preds = model.predict(loo.full_weights, test.features)
    probe = test.features[:PROBE_SIZE]
    probe_preds = np.stack([model.predict(loo.weights[i], probe) for i in loo.indices])
    art = LooArtifacts(config, ds, test, tc, loo, preds, test_preds, probe_preds)
    if config.local_bound or config.weight_noise == "hessian":
        H = hessian(loo.full_weights, ds, tc)
        art.hessian = H
        art.damping = default_damping(H)
        if config.local_bound:
            art.influence = influence_loo(loo.full_weights, ds, tc, art.damping, H)
    return art


def weight_cov(art: LooArtifacts) -> CovSpec:
    cfg = art.config
    if cfg.weight_noise == "isotropic":
        return CovSpec.isotropic(cfg.weight_sigma)
    Hd = art.hessian + art.damping * np.eye(art.hessian.shape[0])
    return CovSpec.full_inverse(Hd / cfg.weight_sigma ** 2)


def noisy_test_error(art: LooArtifacts, sigma: float, seed: int) -> dict:
    """Test loss of ``h_sigma``: full-model test predictions plus N(0, sigma^2 I).

    The standard-normal draws are shared across sigma values so a sweep
    compares the same noise realisations.
    """
    P = art.test_preds
    draws = art.config.noise_draws
    rng = make_rng(seed, STREAM_PRED_NOISE)
    errs = np.empty(draws)
    loss_id = "zero-one" if P.shape[1] > 1 else "clipped-squared"
    for k in range(draws):
        Z = rng.standard_normal(P.shape)
        errs[k] = per_sample_loss(P + sigma * Z, art.test.labels, loss_id).mean()
    value = float(errs.mean())
    m = P.shape[0] * draws
    if loss_id == "zero-one":
        se = math.sqrt(max(value * (1.0 - value), 0.0) / m)
    else:
        se = float(errs.std(ddof=1) / math.sqrt(draws)) if draws > 1 else 0.0
    return {"value": value, "std_err": se, "draws": draws, "loss_id": loss_id}


def evaluate(art: LooArtifacts, sigma: float, seed: int, oracle_samples: Optional[int] = None) -> BoundReport:
    """All bounds for trained artifacts at prediction noise ``sigma``."""
    cfg = art.config
    ds, loo, preds = art.ds, art.loo, art.preds
    n = ds.n
    cov = weight_cov(art)
    cap = cfg.loss_cap if cfg.loss_cap is not None else default_cap(cfg.loss_id, max(ds.n_classes, 2))
    rep = BoundReport(n=n, experiment=cfg.name, generator=cfg.generator, seed=int(seed), p=ds.p,
                      model=art.train_config.model, optimizer=art.train_config.optimizer,
                      loss_id=cfg.loss_id, loss_cap=cap,
                      loss_clipped=cfg.loss_id != "zero-one", loo_mode=cfg.loo_mode,
                      rows_used=int(loo.indices.size), ln_s_substituted=loo.is_subset,
                      sigma_or_cov=_cov_summary(cov, cfg), prediction_sigma=float(sigma))
    if loo.is_subset:
        rep.notes.append(f"subset LOO: ln({loo.indices.size}) replaces ln({n}); unbiasedness unproven")
    rep.loo_cmi_upper = B.loo_cmi_upper(loo, cov)
    rep.floo_cmi_upper = B.floo_cmi_upper(preds, sigma)
    rep.jensen_upper = B.jensen_cmi_upper(loo, cov)
    rep.jensen_floo_upper = B.jensen_cmi_upper(preds, CovSpec.isotropic(sigma))
    rep.gen_bound_weights = B.gen_bound_from_cmi(rep.loo_cmi_upper, n)
    rep.gen_bound_predictions = B.gen_bound_from_cmi(rep.floo_cmi_upper, n)

    eps = B.measure_stability(loo, cov, lipschitz_L=cfg.lipschitz)
    fun = B.measure_stability(preds, probe_preds=art.probe_preds, lipschitz_L=cfg.lipschitz)
    tc = art.train_config
    T = tc.steps if tc.optimizer != "closed-form" else 0
    prof = B.StabilityProfile(epsilon=eps.epsilon, beta=fun.beta, beta1=fun.beta1,
                              lipschitz_L=cfg.lipschitz, gamma=tc.gamma or 0.0, T=T,
                              d=preds.d, empirical=True)
    sb = B.stability_bounds(prof, cov, n, K=loo.K)
    lemma5 = None
    if tc.step_clip is not None and tc.optimizer == "sgd":
        if cfg.weight_noise == "isotropic":
            lemma5 = sb.lemma5(cfg.weight_sigma)
        else:
            rep.notes.append("lemma5 needs isotropic weight noise; not reported")
    rep.stability_bounds = {"epsilon": prof.epsilon, "beta": prof.beta, "beta1": prof.beta1,
                            "lipschitz_L": prof.lipschitz_L, "thm5": sb.thm5, "thm6": sb.thm6,
                            "lemma5": lemma5, "empirical": True}
    if art.influence is not None:
        Hd = art.hessian + art.damping * np.eye(art.hessian.shape[0])
        g = art.influence[loo.indices]
        rep.local_bound = B.local_bound(g, Hd / cfg.weight_sigma ** 2)

    gap = B.measured_gap(loo, ds, art.test, cfg.loss_id, cap)
    rep.measured_gap = gap.loo_gap
    rep.gap = {"loo_gap": gap.loo_gap, "loo_std_err": gap.loo_std_err,
               "heldout_gap": gap.heldout_gap, "heldout_std_err": gap.heldout_std_err}
    err_id = "zero-one" if get_model(tc, ds.p).is_classifier else cfg.loss_id
    model = get_model(tc, ds.p, max(ds.n_classes, 2))
    rep.train_error = float(per_sample_loss(model.predict(loo.full_weights, ds.features),
                                            ds.labels, err_id, cap).mean())
    rep.test_error = float(per_sample_loss(art.test_preds, art.test.labels, err_id, cap).mean())
    rep.noisy_test_error = noisy_test_error(art, sigma, seed)

    samples = oracle_samples if oracle_samples is not None else cfg.oracle_samples
    if cfg.oracle:
        Y = loo.rows()
        loo_mc = mc_cmi(Y, cov, samples, seed)
        floo_mc = mc_floo_cmi(preds, sigma, samples, seed)
        rep.oracle = {"loo_mc": loo_mc.to_dict(), "floo_mc": floo_mc.to_dict(),
                      "sandwich_holds": bool(loo_mc.value - 3 * loo_mc.std_err <= rep.loo_cmi_upper
                                             and floo_mc.value - 3 * floo_mc.std_err <= rep.floo_cmi_upper)}
    return rep


def _cov_summary(cov: CovSpec, cfg: ExperimentConfig) -> dict:
    if cov.kind == "isotropic":
        return {"kind": "isotropic", "sigma": cov.sigma}
    return {"kind": cov.kind, "source": "hessian", "weight_sigma": cfg.weight_sigma,
            "trace": cov.trace()}


def write_point(art: LooArtifacts, rep: BoundReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rep.write(out / "report.json")
    if art.config.write_loo:
        write_weights_csv(art.loo, out / "loo_weights.csv")
        write_predictions_csv(art.preds, out / "loo_predictions.csv")


def run_experiment(config: ExperimentConfig, n: int, seed: int, sigma: float,
                   out: Optional[Path] = None, threads: int = 1,
                   oracle_samples: Optional[int] = None) -> BoundReport:
    """Train, bound and (optionally) write one experiment."""
    art = prepare(config, n, seed, threads)
    rep = evaluate(art, sigma, seed, oracle_samples)
    if out is not None:
        write_point(art, rep, Path(out))
    return rep


# --------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    """Per-point reports, seed-aggregated series and trend verdicts."""

    axis: str
    values: list
    reports: dict
    aggregate: dict
    verdicts: dict

    def to_dict(self) -> dict:
        return {"axis": self.axis, "values": self.values, "aggregate": self.aggregate,
                "verdicts": self.verdicts}


def _non_increasing(vals, tol=INVERSION_TOL, max_inversions=1) -> bool:
    inversions = [b - a for a, b in zip(vals, vals[1:]) if b > a]
    return len(inversions) <= max_inversions and all(d <= tol for d in inversions)


def _aggregate_gen(reports, key, n):
    roots = [math.sqrt(getattr(r, key)) for r in reports]
    return c_n(n) / math.sqrt(2.0) * (math.fsum(roots) / len(roots))


def _point_label(axis, v) -> str:
    return f"n_{int(v)}" if axis == "size" else f"sigma_{float(v)!r}"


def run_sweep(config: ExperimentConfig, axis: str, out: Optional[Path] = None,
              threads: int = 1, oracle_samples: Optional[int] = None) -> SweepResult:
    """Sweep dataset size or prediction noise over every seed.

    Aggregation averages ``sqrt(cmi)`` over seeds before scaling by
    ``c_n / sqrt(2)``.
    """
    if axis not in ("size", "sigma"):
        raise ConfigError("axis must be 'size' or 'sigma'")
    values = list(config.n) if axis == "size" else list(config.sigmas)
    if len(values) < 3:
        raise ConfigError(f"a {axis} sweep needs at least 3 axis points")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigError(f"{axis} values must be strictly increasing")
    if len(config.seeds) < 2:
        raise ConfigError("a sweep needs at least 2 seeds")
    out = Path(out) if out is not None else None
    reports = {v: [] for v in values}
    try:
        if axis == "size":
            for v in values:
                for seed in config.seeds:
                    art = prepare(config, int(v), seed, threads)
                    rep = evaluate(art, config.sigmas[0], seed, oracle_samples)
                    reports[v].append(rep)
                    if out is not None:
                        write_point(art, rep, out / axis / _point_label(axis, v) / f"seed_{seed}")
        else:
            n = int(config.n[0])
            for seed in config.seeds:
                art = prepare(config, n, seed, threads)
                for v in values:
                    rep = evaluate(art, v, seed, oracle_samples)
                    reports[v].append(rep)
                    if out is not None:
                        write_point(art, rep, out / axis / _point_label(axis, v) / f"seed_{seed}")
    except Exception:
        log.error("sweep aborted; %d completed points kept under %s",
                  sum(len(r) for r in reports.values()), out)
        raise

    agg = {"floo_gen_bound": [], "loo_gen_bound": [], "floo_cmi_upper": [], "loo_cmi_upper": [],
           "measured_gap": [], "noisy_test_error": [], "noisy_test_error_std_err": []}
    for v in values:
        reps = reports[v]
        n = reps[0].n
        agg["floo_gen_bound"].append(_aggregate_gen(reps, "floo_cmi_upper", n))
        agg["loo_gen_bound"].append(_aggregate_gen(reps, "loo_cmi_upper", n))
        agg["floo_cmi_upper"].append(math.fsum(r.floo_cmi_upper for r in reps) / len(reps))
        agg["loo_cmi_upper"].append(math.fsum(r.loo_cmi_upper for r in reps) / len(reps))
        agg["measured_gap"].append(math.fsum(r.measured_gap for r in reps) / len(reps))
        agg["noisy_test_error"].append(math.fsum(r.noisy_test_error["value"] for r in reps) / len(reps))
        ses = [r.noisy_test_error["std_err"] for r in reps]
        agg["noisy_test_error_std_err"].append(math.sqrt(math.fsum(s * s for s in ses)) / len(reps))

    verdicts = {}
    cap_ok = all(r.gen_bound_predictions <= c_n(r.n) / math.sqrt(2) * math.sqrt(math.log(r.n)) + 1e-9
                 and r.gen_bound_weights <= c_n(r.n) / math.sqrt(2) * math.sqrt(math.log(r.n)) + 1e-9
                 for reps in reports.values() for r in reps)
    verdicts["gen_bound_within_ln_n_cap"] = cap_ok
    if axis == "size":
        verdicts["floo_gen_bound_non_increasing"] = _non_increasing(agg["floo_gen_bound"])
    else:
        f = agg["floo_cmi_upper"]
        verdicts["floo_cmi_strictly_decreasing"] = all(b < a for a, b in zip(f, f[1:]))
        e, se = agg["noisy_test_error"], agg["noisy_test_error_std_err"]
        verdicts["noisy_test_error_non_decreasing"] = all(
            e[k + 1] >= e[k] - 3.0 * math.sqrt(se[k] ** 2 + se[k + 1] ** 2) for k in range(len(e) - 1))
    result = SweepResult(axis, values, reports, agg, verdicts)

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"sweep_{axis}.json").write_text(
            json.dumps(_json_real(result.to_dict()), indent=2) + "\n", encoding="utf-8")
        rows = []
        for v in values:
            for r in reports[v]:
                rows.append({"axis_value": v, **_summary_row(r)})
        write_rows_csv(out / f"sweep_{axis}.csv", ["axis_value"] + SUMMARY_COLUMNS, rows)
    return result


def _json_real(v):
    if isinstance(v, bool) or v is None or isinstance(v, (str, int)):
        return v
    if isinstance(v, float):
        return fmt_real(v)
    if isinstance(v, dict):
        return {k: _json_real(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_real(x) for x in v]
    return v


# --------------------------------------------------------------------------
# reports


def _summary_row(r: BoundReport) -> dict:
    return {
        "experiment": r.experiment, "generator": r.generator, "n": r.n, "seed": r.seed,
        "sigma": r.prediction_sigma, "model": r.model,
        "train_error": r.train_error, "test_error": r.test_error,
        "loo_cmi": r.loo_cmi_upper, "floo_cmi": r.floo_cmi_upper,
        "loo_gen_bound": r.gen_bound_weights, "floo_gen_bound": r.gen_bound_predictions,
        "measured_gap": r.measured_gap,
    }


def collect_reports(results_dir) -> List[tuple]:
    """All ``report.json`` files under ``results_dir``, in sorted path order."""
    root = Path(results_dir)
    paths = sorted(root.rglob("report.json"), key=lambda p: p.relative_to(root).as_posix())
    return [(p, BoundReport.read(p)) for p in paths]


def write_report_tables(results_dir, out_dir=None) -> tuple:
    """Write ``summary.csv`` (one row per experiment) and ``plot_data.csv`` (x, y, series)."""
    results_dir = Path(results_dir)
    out_dir = Path(out_dir) if out_dir is not None else results_dir
    found = collect_reports(results_dir)
    if not found:
        raise ConfigError(f"no report.json found under {results_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for path, r in found:
        row = _summary_row(r)
        row["path"] = path.parent.relative_to(results_dir).as_posix()
        rows.append(row)
    write_rows_csv(out_dir / "summary.csv", ["path"] + SUMMARY_COLUMNS, rows)

    # seed-averaged series keyed by (series, x)
    acc = {}

    def add(series, x, y):
        if x is None or y is None:
            return
        acc.setdefault((series, float(x)), []).append(float(y))

    for _, r in found:
        add(f"floo_gen_bound_vs_n|sigma={fmt_real(r.prediction_sigma)}", r.n, r.gen_bound_predictions)
        add(f"loo_gen_bound_vs_n|sigma={fmt_real(r.prediction_sigma)}", r.n, r.gen_bound_weights)
        add(f"measured_gap_vs_n|sigma={fmt_real(r.prediction_sigma)}", r.n, r.measured_gap)
        add(f"floo_cmi_vs_sigma|n={r.n}", r.prediction_sigma, r.floo_cmi_upper)
        if r.noisy_test_error is not None:
            add(f"noisy_test_error_vs_sigma|n={r.n}", r.prediction_sigma, r.noisy_test_error.get("value"))
    plot_rows = [{"x": x, "y": math.fsum(ys) / len(ys), "series": s}
                 for (s, x), ys in sorted(acc.items())]
    write_rows_csv(out_dir / "plot_data.csv", ["x", "y", "series"], plot_rows)
    return out_dir / "summary.csv", out_dir / "plot_data.csv"
