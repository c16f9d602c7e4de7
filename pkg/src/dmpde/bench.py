"""Config-driven experiment runs, error metrics, persistence and report tables.

A run directory holds everything needed to recompute its metrics:

    config.json     the experiment config
    cloud.csv       training points (ambient + intrinsic + boundary flag)
    operator.txt    the estimator the solver used (L, or the interior rows of L~)
    ghosts.csv      ghost points (boundary problems only)
    solution.csv    direct solution            | params_seed<s>.json, history_seed<s>.csv
    solve.json      direct solver summary      | (per seed, NN runs)
    report.json     metrics (deterministic content only)
    report.txt      the same as an aligned table
    timing.json     wall times and memory high-water mark (not reproducible)
"""

from __future__ import annotations

import json
import math
import resource
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import direct, gpdm, manifolds, nn, operator
from .errors import ConfigError, NumericalFailure

DEFAULT_TEST_RESOLUTION = {"Torus2D": 300, "Flat3DinR12": 80, "SemiTorus2D": 300}
DEFAULT_GAMMA = 1e-3
DEFAULT_NN_SEEDS = 5
SOLVER_ALIASES = {"DirectDM": "direct", "NN": "nn", "direct": "direct", "nn": "nn"}


@dataclass(frozen=True)
class NNSettings:
    m: int  # hidden width
    depth: int = 3
    activation: str = "polysine"
    power: int = 1
    optimizer: str = "adam"
    T: int = 2000
    lr0: float = 0.01
    cosine_decay: bool = True
    gamma: float = 0.0
    lam: float = 0.0
    batch_rows: int | None = None
    repeats: int = 1
    n_seeds: int = DEFAULT_NN_SEEDS
    init: str = "auto"  # auto | he | shifted, see nn.init_params
    backtrack: bool = False  # GD only

    @classmethod
    def from_dict(cls, blob: dict) -> "NNSettings":
        blob = dict(blob)
        if "lambda" in blob:
            blob["lam"] = blob.pop("lambda")
        try:
            return cls(**blob)
        except TypeError as exc:
            raise ConfigError(f"bad nn block: {exc}") from exc

    def __post_init__(self):
        nn.Architecture(1, self.m, self.depth, self.activation, self.power)
        if self.optimizer not in {o.value for o in nn.Optimizer}:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in nn.INIT_SCHEMES:
            raise ConfigError(f"unknown init scheme {self.init!r}")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")


@dataclass(frozen=True)
class GpdmSettings:
    K: int | None = None
    P: int = 10
    normal_method: str = "kernel"
    interior: str = "chord"


@dataclass(frozen=True)
class ExperimentConfig:
    manifold: str
    N: int
    epsilon: float
    k: int
    solver: str = "direct"  # direct | nn
    name: str = ""
    N_b: int | None = None
    layout: str = "grid"
    convention: str = operator.DEFAULT_CONVENTION
    form: str | None = None  # None: row form on closed manifolds, graph form with ghosts
    a: float = 0.0
    gamma: float = DEFAULT_GAMMA  # direct solver regularisation (closed manifolds)
    nn: NNSettings | None = None
    gpdm: GpdmSettings = field(default_factory=GpdmSettings)
    test_resolution: int | None = None
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        spec = manifolds.get_spec(self.manifold)
        object.__setattr__(self, "manifold", spec.id.value)
        object.__setattr__(self, "solver", SOLVER_ALIASES.get(self.solver, self.solver))
        if self.solver not in ("direct", "nn"):
            raise ConfigError(f"unknown solver {self.solver!r}")
        if self.solver == "nn" and self.nn is None:
            raise ConfigError("solver 'nn' needs an 'nn' block")
        if isinstance(self.nn, dict):
            object.__setattr__(self, "nn", NNSettings.from_dict(self.nn))
        if isinstance(self.gpdm, dict):
            object.__setattr__(self, "gpdm", GpdmSettings(**self.gpdm))
        if self.N < 2 or not 1 <= self.k < self.N:
            raise ConfigError("need N >= 2 and 1 <= k < N")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.form is not None and self.form not in operator.FORMS:
            raise ConfigError(f"unknown form {self.form!r}")
        if self.convention not in operator.BANDWIDTH_CONVENTIONS:
            raise ConfigError(f"unknown bandwidth convention {self.convention!r}")
        if spec.closed and self.N_b:
            raise ConfigError(f"{spec.id.value} is closed; N_b must be 0")
        if spec.closed and self.a == 0 and self.solver == "direct" and not self.gamma > 0:
            raise ConfigError("gamma > 0 is required when a == 0")

    @property
    def closed(self) -> bool:
        return manifolds.get_spec(self.manifold).closed

    @property
    def operator_form(self) -> str:
        if self.form is not None:
            return self.form
        return operator.DEFAULT_FORM if self.closed else gpdm.GPDM_FORM

    @property
    def resolution(self) -> int:
        return self.test_resolution or DEFAULT_TEST_RESOLUTION[self.manifold]

    def to_dict(self) -> dict:
        out = asdict(self)
        return out

    @classmethod
    def from_dict(cls, blob: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(blob) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        blob = dict(blob)
        blob["solver"] = SOLVER_ALIASES.get(blob.get("solver", "direct"), blob.get("solver"))
        if blob.get("nn") is not None:
            blob["nn"] = NNSettings.from_dict(blob["nn"])
        if blob.get("gpdm") is not None:
            try:
                blob["gpdm"] = GpdmSettings(**blob["gpdm"])
            except TypeError as exc:
                raise ConfigError(f"bad gpdm block: {exc}") from exc
        try:
            return cls(**blob)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                blob = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(blob)

    def save(self, path) -> None:
        _write_json(path, self.to_dict())

    def replace(self, **changes) -> "ExperimentConfig":
        blob = self.to_dict()
        blob.update(changes)
        return ExperimentConfig.from_dict(blob)


@dataclass
class ExperimentReport:
    config: dict
    forward_error_inf: float
    inverse_error_inf: float | None = None
    training_error_inf: float | None = None
    testing_error_inf: float | None = None
    per_seed: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    n_boundary: int = 0
    wall_time_ms: dict = field(default_factory=dict)
    peak_memory_mb: float | None = None  # approximate (process high-water mark)

    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in
                ("forward_error_inf", "inverse_error_inf", "training_error_inf", "testing_error_inf")}

    def deterministic_dict(self) -> dict:
        out = asdict(self)
        out.pop("wall_time_ms")
        out.pop("peak_memory_mb")
        return out


# ---------------------------------------------------------------------------
# helpers

def _write_json(path, blob) -> None:
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


class _Timer:
    def __init__(self):
        self.phases = {}
        self.t0 = time.perf_counter()

    def phase(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                timer.phases[name] = timer.phases.get(name, 0.0) + (time.perf_counter() - self.start) * 1e3

        return _Ctx()

    def total(self) -> float:
        return (time.perf_counter() - self.t0) * 1e3


def _peak_memory_mb() -> float:
    # ru_maxrss is in kilobytes on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def _kappa_fn(manifold):
    return lambda x: manifolds.diffusion_kappa(manifold, manifolds.project_to_intrinsic(manifold, x))


@dataclass
class Problem:
    """Everything a solver needs, built from a config."""

    config: ExperimentConfig
    cloud: manifolds.PointCloud
    op: operator.SparseOperator  # closed: L (N x N); boundary: interior rows of L~
    f_rows: np.ndarray
    u_exact: np.ndarray
    gp: gpdm.GpdmOperator | None = None

    @property
    def boundary(self) -> bool:
        return self.gp is not None


def sample(cfg: ExperimentConfig) -> manifolds.PointCloud:
    return manifolds.sample_cloud(cfg.manifold, cfg.N, cfg.N_b, cfg.seed, layout=cfg.layout)


def build_problem(cfg: ExperimentConfig, cloud=None, timer: _Timer | None = None) -> Problem:
    timer = timer or _Timer()
    with timer.phase("sample"):
        cloud = sample(cfg) if cloud is None else cloud
    u = manifolds.exact_solution(cfg.manifold, cloud.intrinsic)
    f = manifolds.rhs_f(cfg.manifold, cloud.intrinsic)
    with timer.phase("operator"):
        if cfg.closed:
            kap = manifolds.diffusion_kappa(cfg.manifold, cloud.intrinsic)
            L = operator.assemble_L(cloud, kap, cfg.epsilon, k=cfg.k, convention=cfg.convention,
                                    form=cfg.operator_form)
            return Problem(cfg, cloud, L, f, u)
        g = cfg.gpdm
        gp = gpdm.assemble_gpdm(cloud, _kappa_fn(cfg.manifold), cfg.epsilon, cfg.k, K=g.K, P=g.P,
                                normal_method=g.normal_method, interior=g.interior, manifold=cfg.manifold,
                                convention=cfg.convention, form=cfg.operator_form)
    if gp.n_points != len(cloud):
        raise ConfigError("metrics need the ghost-augmented cloud to coincide with the samples; "
                          "use interior='chord' or 'snap'")
    return Problem(cfg, cloud, gp.L_interior, f[gp.interior_index], u, gp)


def forward_error(op, u_exact, f_rows, a=0.0, row_points=None) -> float:
    A = op.matrix if isinstance(op, operator.SparseOperator) else op
    r = A @ u_exact - f_rows
    if np.any(np.asarray(a) != 0):
        rp = np.arange(A.shape[0]) if row_points is None else row_points
        r = r - np.asarray(a) * u_exact[rp]
    return float(np.abs(r).max())


def _row_points(prob: Problem):
    return prob.gp.interior_index if prob.boundary else None


def _test_data(cfg: ExperimentConfig):
    grid = manifolds.test_grid(cfg.manifold, cfg.resolution)
    return grid, manifolds.exact_solution(cfg.manifold, grid.intrinsic)


def _nn_seeds(cfg: ExperimentConfig):
    return [cfg.seed + s for s in range(cfg.nn.n_seeds)]


def nn_context(prob: Problem) -> nn.LossContext:
    cfg = prob.config
    s = cfg.nn
    if prob.boundary:
        b = prob.gp.boundary_index
        return nn.LossContext.dirichlet(prob.gp, prob.f_rows, prob.u_exact[b], s.lam, a=cfg.a)
    return nn.LossContext.closed(prob.op, prob.cloud.points, prob.f_rows, s.gamma, a=cfg.a)


def train_nn(prob: Problem, seed: int):
    s = prob.config.nn
    arch = nn.Architecture(prob.cloud.points.shape[1], s.m, s.depth, s.activation, s.power)
    params = nn.init_params(arch, seed, X=prob.cloud.points, scheme=s.init)
    tc = nn.TrainConfig(s.optimizer, s.lr0, s.T, s.cosine_decay, s.batch_rows, s.repeats, seed, s.backtrack)
    return nn.train(params, nn_context(prob), tc)


def solve_direct(prob: Problem) -> direct.LinearSolveReport:
    cfg = prob.config
    if prob.boundary:
        b = prob.gp.boundary_index
        return direct.solve_dirichlet(prob.gp, cfg.a, prob.f_rows, prob.u_exact[b])
    return direct.solve_closed(prob.op, cfg.a, prob.f_rows, cfg.gamma)


# ---------------------------------------------------------------------------
# run / metrics / verify

def _persist_problem(prob: Problem, out: Path) -> None:
    prob.config.save(out / "config.json")
    manifolds.write_cloud_csv(prob.cloud, out / "cloud.csv")
    prob.op.save(out / "operator.txt")
    if prob.boundary:
        gpdm.write_ghosts_csv(prob.gp.ghosts, out / "ghosts.csv")


def run(cfg: ExperimentConfig, out_dir=None) -> ExperimentReport:
    """sample -> operator -> solve -> metrics, persisting artifacts when ``out_dir`` is set."""
    out_dir = out_dir if out_dir is not None else cfg.output_dir
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    timer = _Timer()
    prob = build_problem(cfg, timer=timer)
    if out is not None:
        with timer.phase("persist"):
            _persist_problem(prob, out)
    with timer.phase("metrics"):
        fwd = forward_error(prob.op, prob.u_exact, prob.f_rows, cfg.a, _row_points(prob))
    rep = ExperimentReport(cfg.to_dict(), fwd, n_boundary=prob.cloud.n_boundary)

    if cfg.solver == "direct":
        with timer.phase("solve"):
            sol = solve_direct(prob)
        rep.inverse_error_inf = float(np.abs(sol.solution - prob.u_exact).max())
        rep.seeds = [cfg.seed]
        if out is not None:
            with timer.phase("persist"):
                sol.write_solution_csv(out / "solution.csv")
                summary = sol.summary()
                summary.pop("wall_time_ms")
                _write_json(out / "solve.json", summary)
    else:
        with timer.phase("metrics"):
            grid, u_grid = _test_data(cfg)
        for seed in _nn_seeds(cfg):
            with timer.phase("solve"):
                params, hist = train_nn(prob, seed)
            with timer.phase("metrics"):
                train_err = float(np.abs(nn.batch_forward(params, prob.cloud.points) - prob.u_exact).max())
                test_err = float(np.abs(nn.batch_forward(params, grid.points) - u_grid).max())
            rep.per_seed.append({"seed": seed, "training_error_inf": train_err, "testing_error_inf": test_err,
                                 "final_loss": hist.loss[-1]})
            rep.seeds.append(seed)
            if out is not None:
                with timer.phase("persist"):
                    params.save(out / f"params_seed{seed}.json")
                    hist.write_csv(out / f"history_seed{seed}.csv")
        rep.training_error_inf = float(np.mean([r["training_error_inf"] for r in rep.per_seed]))
        rep.testing_error_inf = float(np.mean([r["testing_error_inf"] for r in rep.per_seed]))

    rep.wall_time_ms = dict(timer.phases, total=timer.total())
    rep.peak_memory_mb = _peak_memory_mb()
    if out is not None:
        write_report(rep, out)
    return rep


def write_report(rep: ExperimentReport, out: Path) -> None:
    _write_json(out / "report.json", rep.deterministic_dict())
    (out / "report.txt").write_text(format_table([rep]))
    _write_json(out / "timing.json", {"wall_time_ms": rep.wall_time_ms,
                                      "peak_memory_mb_approx": rep.peak_memory_mb})


def compute_metrics(cloud, op, cfg: ExperimentConfig, solution=None, params=None, gp_index=None) -> dict:
    """Error metrics from artifacts.

    ``op`` is the operator the solver used; ``gp_index`` gives (interior
    rows, boundary points) for boundary problems. Pass a direct ``solution``
    or NN ``params`` (or neither for the forward error alone).
    """
    u = manifolds.exact_solution(cfg.manifold, cloud.intrinsic)
    f = manifolds.rhs_f(cfg.manifold, cloud.intrinsic)
    rows = None
    if gp_index is not None:
        rows = gp_index[0]
        f = f[rows]
    out = {"forward_error_inf": forward_error(op, u, f, cfg.a, rows)}
    if solution is not None:
        out["inverse_error_inf"] = float(np.abs(np.asarray(solution) - u).max())
    if params is not None:
        grid, u_grid = _test_data(cfg)
        out["training_error_inf"] = float(np.abs(nn.batch_forward(params, cloud.points) - u).max())
        out["testing_error_inf"] = float(np.abs(nn.batch_forward(params, grid.points) - u_grid).max())
    return out


def recompute_from_disk(run_dir) -> dict:
    """Metrics recomputed only from the files in ``run_dir``."""
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.json")
    cloud = manifolds.read_cloud_csv(run_dir / "cloud.csv")
    op = operator.SparseOperator.load(run_dir / "operator.txt")
    gp_index = None
    if not cfg.closed:
        b = cloud.boundary_indices
        gp_index = (np.setdiff1d(np.arange(len(cloud)), b), b)
    out = {}
    if cfg.solver == "direct":
        sol = direct.read_solution_csv(run_dir / "solution.csv")
        out = compute_metrics(cloud, op, cfg, solution=sol, gp_index=gp_index)
    else:
        per_seed = []
        for seed in _nn_seeds(cfg):
            params = nn.NetworkParams.load(run_dir / f"params_seed{seed}.json")
            m = compute_metrics(cloud, op, cfg, params=params, gp_index=gp_index)
            out["forward_error_inf"] = m["forward_error_inf"]
            per_seed.append(m)
        out["training_error_inf"] = float(np.mean([m["training_error_inf"] for m in per_seed]))
        out["testing_error_inf"] = float(np.mean([m["testing_error_inf"] for m in per_seed]))
    return out


def verify(run_dir, tol: float = 1e-12) -> dict:
    """Compare report.json with metrics recomputed from disk; {'ok', 'diffs'}."""
    run_dir = Path(run_dir)
    rep = _read_json(run_dir / "report.json")
    fresh = recompute_from_disk(run_dir)
    diffs = {}
    for key, val in fresh.items():
        old = rep.get(key)
        if old is None:
            diffs[key] = math.inf
            continue
        diffs[key] = abs(val - old) / max(1.0, abs(old))
    return {"ok": all(d <= tol for d in diffs.values()), "diffs": diffs, "recomputed": fresh}


# ---------------------------------------------------------------------------
# activation comparison

# GD step sizes were tuned on N=4096: the largest values that stay stable for the
# whole run (ReLU^3 with the shifted init, ReLU with He init).
ACTIVATION_VARIANTS = (
    ("PolynomialSine", "Adam", {"activation": "polysine", "power": 1, "optimizer": "adam"}),
    ("ReLU^3", "GD", {"activation": "relupow", "power": 3, "optimizer": "gd", "cosine_decay": False,
                      "lr0": 0.01}),
    ("ReLU", "GD", {"activation": "relu", "power": 1, "optimizer": "gd", "cosine_decay": False,
                    "lr0": 0.5}),
)


def compare_activations(base: ExperimentConfig, N_list=None, gd_lr: float | None = None,
                        rows_per_N=None, out_dir=None, variants=None) -> list:
    """Train/test errors for the activation-optimiser pairs over N.

    ``rows_per_N`` maps N to (epsilon, k, nn overrides); by default the base
    config is reused with only N changed. ``variants`` restricts the run to
    the named activations. Returns a list of row dicts.
    """
    if base.manifold != manifolds.ManifoldId.FLAT3D_R12.value:
        raise ConfigError("the activation comparison is defined on Flat3DinR12")
    if base.nn is None:
        raise ConfigError("base config needs an nn block")
    N_list = list(N_list or [base.N])
    known = {v[0] for v in ACTIVATION_VARIANTS}
    if variants is not None and not set(variants) <= known:
        raise ConfigError(f"unknown variants {sorted(set(variants) - known)}; choose from {sorted(known)}")
    table = []
    for N in N_list:
        over = (rows_per_N or {}).get(N, {})
        cfg_N = base.replace(N=N, solver="nn", **{k: v for k, v in over.items() if k != "nn"})
        prob = build_problem(cfg_N)
        grid, u_grid = _test_data(cfg_N)
        for act_name, opt_name, change in ACTIVATION_VARIANTS:
            if variants is not None and act_name not in variants:
                continue
            nn_blob = asdict(cfg_N.nn)
            nn_blob.update(over.get("nn", {}))
            nn_blob.update(change)
            if change["optimizer"] == "gd" and gd_lr is not None:
                nn_blob["lr0"] = gd_lr
            cfg_v = cfg_N.replace(nn=nn_blob)
            prob_v = Problem(cfg_v, prob.cloud, prob.op, prob.f_rows, prob.u_exact, prob.gp)
            train_errs, test_errs = [], []
            for seed in _nn_seeds(cfg_v):
                params, _ = train_nn(prob_v, seed)
                train_errs.append(float(np.abs(nn.batch_forward(params, prob.cloud.points) - prob.u_exact).max()))
                test_errs.append(float(np.abs(nn.batch_forward(params, grid.points) - u_grid).max()))
            table.append({"activation": act_name, "optimizer": opt_name, "N": N,
                          "training_error_inf": float(np.mean(train_errs)),
                          "testing_error_inf": float(np.mean(test_errs)),
                          "per_seed_testing": test_errs})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "activations.json", table)
        (out / "activations.txt").write_text(format_activation_table(table))
    return table


# ---------------------------------------------------------------------------
# tables

def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def format_table(reports) -> str:
    """Columns per N, rows per metric (one column per N)."""
    reports = sorted(reports, key=lambda r: r.config["N"])
    header = ["N"] + [str(r.config["N"]) for r in reports]
    rows = [header]
    for label, key in (("forward error", "forward_error_inf"), ("inverse error", "inverse_error_inf"),
                       ("training error", "training_error_inf"), ("testing error", "testing_error_inf")):
        vals = [getattr(r, key) for r in reports]
        if all(v is None for v in vals):
            continue
        rows.append([label] + [_fmt(v) for v in vals])
    return _align(rows)


def format_activation_table(table) -> str:
    Ns = sorted({r["N"] for r in table})
    rows = [["activation", "optimizer", "error"] + [str(N) for N in Ns]]
    present = {r["activation"] for r in table}
    for act, opt, _ in ACTIVATION_VARIANTS:
        if act not in present:
            continue
        for label, key in (("training", "training_error_inf"), ("testing", "testing_error_inf")):
            vals = {r["N"]: r[key] for r in table if r["activation"] == act}
            rows.append([act, opt, label] + [_fmt(vals.get(N)) for N in Ns])
    return _align(rows)


def _align(rows) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    return "\n".join(lines) + "\n"


def load_report(run_dir) -> ExperimentReport:
    blob = _read_json(Path(run_dir) / "report.json")
    return ExperimentReport(**blob)


def report(run_dirs) -> str:
    """One table per manifold/solver group from finished run directories."""
    groups = {}
    for d in run_dirs:
        rep = load_report(d)
        key = (rep.config["manifold"], rep.config["solver"])
        groups.setdefault(key, []).append(rep)
    parts = []
    for (man, solver), reps in sorted(groups.items()):
        parts.append(f"{man} ({solver})\n" + format_table(reps))
    return "\n".join(parts)
