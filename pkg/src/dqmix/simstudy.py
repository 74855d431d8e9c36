"""Monte Carlo benchmark harness for mixed logit estimation.

A study crosses dimensions, covariance structures and integration methods,
fits every resampled dataset with every method, and aggregates five metrics
per cell: mean negative loglikelihood, mean absolute percentage bias of the
identified parameter ratios, mean estimation time, mean loglikelihood
evaluation count and mean absolute t-statistic.

Fits are cached one JSON file per (cell, resample) under ``<out>/fits`` keyed
by a content hash, so an interrupted study resumes where it stopped.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dqgen import InfeasibleRuleError, RuleFileError, cached_rule
from .mmnl import ChoiceDataset, MmnlParams, fit, parameter_names
from .multiindex import tensor_rule
from .qmc import Generator, make_draws

log = logging.getLogger(__name__)

COVARIANCES = ("diagonal", "full")
NUMERAIRE = "alpha_1"
DENOMINATOR_TOL = 1e-8


def build_full_cov(d: int) -> np.ndarray:
    """Off-diagonals 0.5, unit diagonal except 1.5 in the first and last entries."""
    if d < 2:
        raise ValueError("full covariance needs d >= 2")
    delta = np.full((d, d), 0.5)
    np.fill_diagonal(delta, 1.0)
    delta[0, 0] = delta[-1, -1] = 1.5
    return delta


def true_gamma(d: int) -> np.ndarray:
    return np.array([1.0 if k % 2 == 0 else -1.0 for k in range(d)])


@dataclass(frozen=True)
class DgpSpec:
    d: int
    covariance: str = "diagonal"
    N: int = 1000
    J: int = 5
    T: int = 5
    alpha: tuple = (1.0,)
    gamma: tuple | None = None
    delta_override: tuple | None = None
    covariate_scale: float = 1.0

    def __post_init__(self):
        if self.covariance not in COVARIANCES:
            raise ValueError(f"covariance must be one of {COVARIANCES}, got {self.covariance!r}")
        if self.gamma is None:
            object.__setattr__(self, "gamma", tuple(true_gamma(self.d)))
        if len(self.gamma) != self.d:
            raise ValueError("gamma length must equal d")

    @property
    def delta(self) -> np.ndarray:
        if self.delta_override is not None:
            return np.array(self.delta_override, dtype=float).reshape(self.d, self.d)
        if self.d == 1:
            return np.array([[1.5]])
        full = build_full_cov(self.d)
        return full if self.covariance == "full" else np.diag(np.diag(full))

    @property
    def structure(self) -> str:
        return self.covariance

    def truth(self) -> MmnlParams:
        delta = self.delta
        chol = np.linalg.cholesky(delta) if np.any(delta) else np.zeros_like(delta)
        return MmnlParams(np.array(self.alpha), np.array(self.gamma), chol)


def generate_dataset(spec: DgpSpec, seed, shocks: bool = True) -> ChoiceDataset:
    """Simulate choices with ``beta_i ~ N(gamma, Delta)`` and Gumbel shocks.

    Covariates are i.i.d. uniform on ``(-s, s)`` with ``s = spec.covariate_scale``.
    ``shocks=False`` drops the error term so choices are the deterministic
    utility argmax.
    """
    rng = np.random.default_rng(seed)
    p = len(spec.alpha)
    s = spec.covariate_scale
    X = s * rng.uniform(-1.0, 1.0, size=(spec.N, spec.T, spec.J, p))
    Z = s * rng.uniform(-1.0, 1.0, size=(spec.N, spec.T, spec.J, spec.d))
    truth = spec.truth()
    beta = truth.gamma + rng.standard_normal((spec.N, spec.d)) @ truth.chol.T
    eps = rng.gumbel(size=(spec.N, spec.T, spec.J))
    u = X @ truth.alpha + np.einsum("ntjk,nk->ntj", Z, beta)
    if shocks:
        u = u + eps
    return ChoiceDataset(X, Z, np.argmax(u, axis=2))


# ---------------------------------------------------------------------------
# metrics


def apb(estimate: float, truth: float) -> float:
    """Absolute percentage bias; NaN when the truth is zero."""
    if truth == 0:
        return math.nan
    return abs((estimate - truth) / truth) * 100.0


@dataclass(frozen=True)
class TStat:
    value: float
    fsse: float
    zero_fsse: bool


def t_stat(estimates, truth: float) -> TStat:
    """``(mean - truth) / FSSE`` with FSSE the sample standard deviation across resamples."""
    est = np.asarray(estimates, dtype=float)
    if est.size < 2:
        raise ValueError("t-statistic needs at least 2 resamples")
    fsse = float(np.std(est, ddof=1))
    diff = float(np.mean(est)) - truth
    if fsse == 0.0:
        log.warning("zero finite-sample standard error")
        return TStat(0.0 if diff == 0 else math.copysign(math.inf, diff), 0.0, True)
    return TStat(diff / fsse, fsse, False)


class RatioError(ValueError):
    """The numeraire coefficient is too close to zero."""


def ratio_names(p: int, d: int) -> list[str]:
    return [f"alpha_{k + 1}" for k in range(1, p)] + [f"gamma_{k + 1}" for k in range(d)] + [
        f"sd_{k + 1}" for k in range(d)
    ]


def parameter_ratios(params: MmnlParams) -> np.ndarray:
    """Means and standard deviations divided by the first fixed coefficient."""
    denom = float(params.alpha[0])
    if abs(denom) < DENOMINATOR_TOL:
        raise RatioError(f"numeraire {denom!r} too close to zero")
    return np.concatenate([params.alpha[1:], params.gamma, params.std_devs]) / denom


# ---------------------------------------------------------------------------
# methods

_METHOD_RE = re.compile(r"^(?:(halton|halton-scrambled|mlhs)@(\d+)|dq@r(\d+)-n(\d+)|tensor@n(\d+))$")


@dataclass(frozen=True)
class Method:
    kind: str
    draws: int
    order: int | None = None
    n_1d: int | None = None

    @classmethod
    def parse(cls, text: str) -> "Method":
        m = _METHOD_RE.match(text.strip())
        if not m:
            raise ValueError(
                f"bad method {text!r}; expected halton@R, halton-scrambled@R, mlhs@R, dq@r<order>-n<nodes> or tensor@n<points>"
            )
        if m.group(1):
            return cls(m.group(1), int(m.group(2)))
        if m.group(3):
            return cls("dq", int(m.group(4)), order=int(m.group(3)))
        return cls("tensor", 0, n_1d=int(m.group(5)))

    @property
    def label(self) -> str:
        if self.kind == "dq":
            return f"dq@r{self.order}-n{self.draws}"
        if self.kind == "tensor":
            return f"tensor@n{self.n_1d}"
        return f"{self.kind}@{self.draws}"

    @property
    def family(self) -> str:
        """Methods in the same family form a grid ordered by accuracy."""
        return self.kind

    def sort_key(self):
        return (self.order or 0, self.draws, self.n_1d or 0)


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


_KIND_CODE = {"halton": 1, "halton-scrambled": 2, "mlhs": 3, "dq": 4, "tensor": 5}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class StudyConfig:
    dims: list
    covs: list
    methods: object  # list of labels, or mapping dim -> list
    resamples: int = 10
    seed: int = 2024
    N: int = 500
    J: int = 5
    T: int = 5
    rule_cache: str | None = None
    generate_rules: bool = True
    dq_seed: int = 0
    max_iter: int = 500

    @classmethod
    def from_dict(cls, data: dict) -> "StudyConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        missing = {"dims", "covs", "methods"} - set(data)
        if missing:
            raise ValueError(f"missing config keys: {', '.join(sorted(missing))}")
        cfg = cls(**data)
        for cov in cfg.covs:
            if cov not in COVARIANCES:
                raise ValueError(f"unknown covariance {cov!r}")
        if cfg.resamples < 1:
            raise ValueError("resamples must be at least 1")
        for d in cfg.dims:
            for m in cfg.methods_for(d):
                Method.parse(m)
        return cfg

    @classmethod
    def load(cls, path) -> "StudyConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def methods_for(self, d: int) -> list[str]:
        if isinstance(self.methods, dict):
            return list(self.methods.get(str(d), self.methods.get(d, [])))
        return list(self.methods)


# ---------------------------------------------------------------------------
# study


@dataclass
class CellResult:
    dim: int
    cov: str
    method: str
    draws: int
    order: int | None
    resamples_ok: int = 0
    resamples_failed: int = 0
    mean_neg_loglik: float = math.nan
    mean_apb: float = math.nan
    mean_seconds: float = math.nan
    mean_evaluations: float = math.nan
    mean_abs_t: float = math.nan
    zero_fsse: list = field(default_factory=list)
    per_resample: list = field(default_factory=list)
    failures: list = field(default_factory=list)


@dataclass
class StudyReport:
    cells: list
    config: dict
    positivity_violations: int = 0
    clamped_probabilities: int = 0

    def cell(self, dim, cov, method) -> CellResult:
        for c in self.cells:
            if (c.dim, c.cov, c.method) == (dim, cov, method):
                return c
        raise KeyError((dim, cov, method))

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["dim", "cov", "method", "draws", "order", "resamples_ok", "resamples_failed",
                    "mean_neg_loglik", "mean_apb_pct", "mean_loglik_evaluations", "mean_abs_t"])
        for c in self.cells:
            w.writerow([c.dim, c.cov, c.method, c.draws, "" if c.order is None else c.order,
                        c.resamples_ok, c.resamples_failed, _fmt(c.mean_neg_loglik, 4), _fmt(c.mean_apb, 4),
                        _fmt(c.mean_evaluations, 2), _fmt(c.mean_abs_t, 4)])
        return out.getvalue()

    def timing_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["dim", "cov", "method", "mean_estimation_seconds"])
        for c in self.cells:
            w.writerow([c.dim, c.cov, c.method, _fmt(c.mean_seconds, 3)])
        return out.getvalue()

    def to_json(self) -> str:
        cells = []
        for c in self.cells:
            item = asdict(c)
            item.pop("mean_seconds")
            item["per_resample"] = [{k: v for k, v in r.items() if k != "seconds"} for r in c.per_resample]
            cells.append(item)
        doc = {
            "numeraire": NUMERAIRE,
            "config": self.config,
            "positivity_violations": self.positivity_violations,
            "clamped_probabilities": self.clamped_probabilities,
            "cells": cells,
        }
        return json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.csv").write_text(self.to_csv(), encoding="utf-8")
        (out_dir / "report.json").write_text(self.to_json(), encoding="utf-8")
        (out_dir / "timing.csv").write_text(self.timing_csv(), encoding="utf-8")


def _fmt(x: float, digits: int) -> str:
    return "nan" if not math.isfinite(x) else f"{x:.{digits}f}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def _fit_key(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:24]


def _integration(method: Method, d: int, N: int, seed: int, cfg: StudyConfig):
    if method.kind == "dq":
        return cached_rule("normal", d, method.order, method.draws, cfg.rule_cache,
                           generate=cfg.generate_rules, seed=cfg.dq_seed)
    if method.kind == "tensor":
        return tensor_rule("normal", d, method.n_1d)
    return make_draws(Generator(method.kind).value, d, N, method.draws, seed)


def _fit_one(data, truth_ratios, integ, structure, max_iter) -> dict:
    res = fit(data, integ, structure=structure, max_iter=max_iter)
    record = {
        "converged": bool(res.converged),
        "message": res.message,
        "loglik": res.loglik,
        "evaluations": res.loglik_evaluations,
        "seconds": res.wall_time,
        "clamped": res.clamped,
        "min_probability": res.min_probability,
        "estimates": [float(v) for v in res.estimates],
    }
    try:
        ratios = parameter_ratios(res.params)
        record["ratios"] = [float(v) for v in ratios]
        apbs = [apb(e, t) for e, t in zip(ratios, truth_ratios)]
        record["apb"] = float(np.mean([a for a in apbs if not math.isnan(a)]))
    except RatioError as exc:
        record["ratio_error"] = str(exc)
    return record


def run_study(config: StudyConfig, out_dir=None, progress=None) -> StudyReport:
    """Run (or resume) every cell of the study; returns the aggregated report.

    With ``out_dir`` set, each fit is cached under ``out_dir/fits`` and the
    report files are written at the end.  Failures of one cell (an
    ungenerable rule, a failed fit) are recorded and the study continues.
    """
    cache = Path(out_dir) / "fits" if out_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    cells = []
    violations = 0
    clamped = 0
    for d in config.dims:
        for cov in config.covs:
            spec = DgpSpec(d=d, covariance=cov, N=config.N, J=config.J, T=config.T)
            truth_ratios = parameter_ratios(spec.truth())
            methods = sorted((Method.parse(m) for m in config.methods_for(d)), key=lambda m: (m.kind, m.sort_key()))
            for method in methods:
                cell = CellResult(d, cov, method.label, method.draws, method.order)
                cells.append(cell)
                rule, rule_error, rule_digest = None, None, None
                if method.kind in ("dq", "tensor"):
                    try:
                        rule = _integration(method, d, config.N, 0, config)
                        rule_digest = hashlib.sha256(rule.nodes.tobytes() + rule.weights.tobytes()).hexdigest()[:16]
                    except (InfeasibleRuleError, RuleFileError, FileNotFoundError) as exc:
                        rule_error = f"{type(exc).__name__}: {exc}"
                        log.warning("cell d=%d %s %s failed: %s", d, cov, method.label, rule_error)
                for k in range(config.resamples):
                    if rule_error is not None:
                        record = {"error": rule_error, "resample": k}
                    else:
                        record = _resample(config, spec, method, k, rule, rule_digest, truth_ratios, cache)
                    if progress is not None:
                        progress(d, cov, method.label, k, record)
                    cell.per_resample.append(record)
                    if "error" not in record:
                        clamped += record["clamped"]
                        if not (math.isfinite(record["loglik"]) and record["min_probability"] > 0):
                            violations += 1
                _aggregate(cell, truth_ratios, spec)
    report = StudyReport(cells, _jsonable(asdict(config)), violations, clamped)
    if out_dir is not None:
        report.write(out_dir)
    return report


def _resample(config, spec, method, k, rule, rule_digest, truth_ratios, cache) -> dict:
    d, cov = spec.d, spec.covariance
    data_seed = _seed(config.seed, d, COVARIANCES.index(cov), k)
    draw_seed = _seed(config.seed, d, COVARIANCES.index(cov), k, _KIND_CODE[method.kind], method.draws)
    payload = {
        "version": __version__, "spec": asdict(spec), "resample": k, "data_seed": data_seed,
        "method": method.label, "draw_seed": draw_seed, "rule": rule_digest, "max_iter": config.max_iter,
    }
    path = cache / f"{_fit_key(payload)}.json" if cache is not None else None
    if path is not None and path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    data = generate_dataset(spec, data_seed)
    integ = rule if rule is not None else _integration(method, d, config.N, draw_seed, config)
    record = _fit_one(data, truth_ratios, integ, spec.structure, config.max_iter)
    record["resample"] = k
    if path is not None:
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(record, sort_keys=True), encoding="utf-8")
        tmp.replace(path)
    return record


def _aggregate(cell: CellResult, truth_ratios: np.ndarray, spec: DgpSpec) -> None:
    ok = []
    for r in cell.per_resample:
        if "error" in r:
            cell.failures.append({"resample": r["resample"], "reason": r["error"]})
        elif not r["converged"]:
            cell.failures.append({"resample": r["resample"], "reason": f"not converged: {r['message']}"})
        elif "ratio_error" in r:
            cell.failures.append({"resample": r["resample"], "reason": r["ratio_error"]})
        else:
            ok.append(r)
    cell.resamples_ok = len(ok)
    cell.resamples_failed = len(cell.failures)
    if not ok:
        return
    cell.mean_neg_loglik = float(np.mean([-r["loglik"] for r in ok]))
    cell.mean_apb = float(np.mean([r["apb"] for r in ok]))
    cell.mean_seconds = float(np.mean([r["seconds"] for r in ok]))
    cell.mean_evaluations = float(np.mean([r["evaluations"] for r in ok]))
    if len(ok) >= 2:
        ratios = np.array([r["ratios"] for r in ok])
        ts = []
        names = ratio_names(len(spec.alpha), spec.d)
        for j, truth in enumerate(truth_ratios):
            t = t_stat(ratios[:, j], truth)
            if t.zero_fsse:
                cell.zero_fsse.append(names[j])
            ts.append(abs(t.value))
        cell.mean_abs_t = float(np.mean(ts))


def desk_config(**overrides) -> StudyConfig:
    """The desk-scale benchmark: d=5, both covariances, 10 resamples of N=500."""
    base = dict(
        dims=[5],
        covs=["diagonal", "full"],
        methods=["halton@100", "halton@200", "halton@500", "halton@1000", "dq@r5-n50", "dq@r6-n100", "dq@r7-n200"],
        resamples=10,
        seed=2024,
        N=500,
    )
    base.update(overrides)
    return StudyConfig.from_dict(base)


__all__ = [
    "CellResult", "DgpSpec", "Method", "RatioError", "StudyConfig", "StudyReport", "TStat", "apb",
    "build_full_cov", "desk_config", "generate_dataset", "parameter_names", "parameter_ratios",
    "run_study", "t_stat",
]
