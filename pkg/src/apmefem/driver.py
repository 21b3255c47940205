"""Experiment orchestration: the solve/adapt loop, examples, convergence study.

One simulation alternates mesh adaptation with stiff integration:
starting from a solution-adapted initial mesh, each step recovers the
Hessian of the current solution, rebuilds the strategy's metric, adapts the
mesh once, transfers the solution, and integrates to the next adaptation
time. All file I/O (VTK snapshots, CSV logs, summaries) lives here.
"""

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import adapt as adapt_mod
from . import fem, metric as metric_mod, vtkio
from .exact import AnisotropicExact, BarenblattParams, residual_check
from .integrate import IntegratorConfig, OdeRightHandSide, integrate_interval
from .mesh import Rectangle, generate_fixed_mesh

STRATEGIES = ("fixed", "adap", "dmp", "dmp_adap")
SUPPORT_THRESHOLD = 1e-3


@dataclass
class ExperimentConfig:
    """Full description of one simulation run."""

    domain: Rectangle
    m: float
    diffusion: metric_mod.DiffusionField
    initial_kind: str  # apme-ellipse | pme-circle | boxes
    t_end: float
    r0: float | None = None
    boxes: tuple = ()
    dt_adapt: float | None = None
    strategy: str = "adap"
    alpha_h: float = 0.01
    target_N: int = 4000
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    output_dir: str | None = None
    output_every: int = 8
    initial_iterations: int = 5
    max_passes: int = 10
    loop_max_passes: int = 3  # in-loop adapts start from an adapted mesh
    save_metric: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.initial_kind not in ("apme-ellipse", "pme-circle", "boxes"):
            raise ValueError(f"unknown initial data kind {self.initial_kind!r}")
        if self.initial_kind != "boxes" and not self.r0:
            raise ValueError("r0 is required for compact-support initial data")
        if self.initial_kind == "boxes" and not self.boxes:
            raise ValueError("boxes initial data needs box coordinates")
        if self.uses_adap_metric and self.alpha_h <= 0:
            raise ValueError("alpha_h must be positive for this strategy")
        if self.t_end <= self.t0:
            raise ValueError("t_end must exceed the start time")

    @property
    def uses_adap_metric(self):
        return self.strategy == "adap"

    @property
    def t0(self):
        if self.initial_kind == "boxes":
            return 0.0
        return BarenblattParams(self.m, self.r0).t0

    @property
    def dt_adapt_effective(self):
        if self.dt_adapt is not None:
            return self.dt_adapt
        n = 120 if self.initial_kind == "boxes" else 64
        return (self.t_end - self.t0) / n

    def oracle(self):
        """Exact solution, available only for the ellipse data / constant D."""
        if self.initial_kind == "apme-ellipse" and self.diffusion.kind == "constant":
            return AnisotropicExact(BarenblattParams(self.m, self.r0), self.diffusion.matrix)
        return None

    def initial_data(self):
        """Point-evaluable initial profile."""
        if self.initial_kind == "apme-ellipse":
            e = AnisotropicExact(BarenblattParams(self.m, self.r0), self._d_matrix())
            return e.initial
        if self.initial_kind == "pme-circle":
            p = BarenblattParams(self.m, self.r0)
            from .exact import pme_initial

            return lambda x: pme_initial(p, x)
        boxes = self.boxes

        def indicator(x):
            x = np.asarray(x, dtype=float)
            out = np.zeros(x.shape[:-1])
            for (x0, x1, y0, y1) in boxes:
                inside = (
                    (x[..., 0] >= x0) & (x[..., 0] <= x1)
                    & (x[..., 1] >= y0) & (x[..., 1] <= y1)
                )
                out = np.where(inside, 1.0, out)
            return out

        return indicator

    def _d_matrix(self):
        if self.diffusion.kind != "constant":
            raise ValueError("ellipse initial data needs a constant diffusion matrix")
        return self.diffusion.matrix


@dataclass
class RunResult:
    config: ExperimentConfig
    mesh: object
    field: fem.SolutionField
    summary: dict
    snapshots: list  # (t, mesh, values)
    steps_log: list
    adapt_log: list
    solution_log: list


def _metric_builder(cfg):
    """strategy -> callable(mesh, field) -> MetricField."""
    D = cfg.diffusion

    def build(mesh, u):
        if cfg.strategy == "adap":
            H = metric_mod.recover_hessian(mesh, u.values)
            return metric_mod.metric_adap(mesh, H, cfg.alpha_h)
        if cfg.strategy == "dmp":
            return metric_mod.metric_dmp(mesh, D)
        if cfg.strategy == "dmp_adap":
            H = metric_mod.recover_hessian(mesh, u.values)
            return metric_mod.metric_dmp_adap(mesh, D, H)
        raise ValueError(cfg.strategy)

    return build


def _fixed_counts(domain, target_N):
    nx = max(1, round(math.sqrt(target_N / 4.0 * domain.width / domain.height)))
    ny = max(1, round(target_N / 4.0 / nx))
    return nx, ny


def build_initial_mesh(cfg, adapt_log=None):
    """Initial mesh plus initial field per the configured strategy."""
    u0 = cfg.initial_data()
    if cfg.strategy == "fixed":
        nx, ny = _fixed_counts(cfg.domain, cfg.target_N)
        mesh = generate_fixed_mesh(cfg.domain, nx, ny)
        u = fem.SolutionField(mesh, u0(mesh.vertices), cfg.t0)
    else:
        nx, ny = _fixed_counts(cfg.domain, max(cfg.target_N // 4, 64))
        seed_mesh = generate_fixed_mesh(cfg.domain, nx, ny)
        params = adapt_mod.AdaptParams(target_N=cfg.target_N, max_passes=cfg.max_passes)
        mesh, u = adapt_mod.iterate_initial_mesh(
            u0,
            seed_mesh,
            _metric_builder(cfg),
            params,
            iterations=cfg.initial_iterations,
            log=adapt_log,
        )
        u.time = cfg.t0
    u.values[mesh.boundary_vertex_flags] = 0.0
    u, _ = fem.cutoff(u)
    return mesh, u


def run_simulation(cfg):
    """Run the full adaptation/integration loop and collect artifacts."""
    steps_log = []
    adapt_log = []
    solution_log = []
    snapshots = []

    mesh, u = build_initial_mesh(cfg, adapt_log=_tagged(adapt_log, step=0))
    builder = _metric_builder(cfg)
    # hysteresis: the in-loop band is twice as wide as the bootstrap band, so
    # breathing of the global metric normalization (the front spike of the
    # recovered Hessian moves sigma_h around) does not churn settled regions
    adapt_params = adapt_mod.AdaptParams(
        target_N=cfg.target_N,
        max_passes=min(cfg.loop_max_passes, cfg.max_passes),
        L_low=0.5,
        L_high=2.0,
    )

    t0 = cfg.t0
    dt = cfg.dt_adapt_effective
    n_steps = max(1, int(round((cfg.t_end - t0) / dt)))
    times = np.linspace(t0, cfg.t_end, n_steps + 1)

    integ_cfg = cfg.integrator
    snapshots.append((t0, mesh, u.values.copy()))
    _log_solution(solution_log, mesh, u, clipped=0)

    last_metric = None
    h_carry = None
    s_prev = None
    for n in range(n_steps):
        t_a, t_b = float(times[n]), float(times[n + 1])
        if cfg.strategy != "fixed" and n > 0:
            m_field = builder(mesh, u)
            # normalization with damped breathing: the recovered Hessian
            # spikes at the free boundary make sigma_h jump between steps,
            # and letting the global scale follow those jumps would churn
            # (and re-interpolate) regions that are already converged. The
            # element-count feedback counteracts slow drift away from the
            # target that the hysteresis band would otherwise let pass.
            feedback = np.clip(cfg.target_N / mesh.num_elements, 0.5, 2.0) ** 0.5
            target_eff = cfg.target_N * feedback
            s_raw = target_eff * adapt_mod.UNIT_ELEMENT_AREA / m_field.sigma_h
            if s_prev is None:
                # scale the current mesh already realizes under this metric;
                # the median is robust against the free-boundary spike
                med = float(np.median(adapt_mod.edge_lengths_under(mesh, m_field)))
                s_prev = 1.0 / med ** 2
            s_used = float(np.clip(s_raw, s_prev / 1.3, s_prev * 2.0))
            s_prev = s_used
            m_field = m_field.scaled(s_used)
            new_mesh = adapt_mod.adapt_once(
                mesh, m_field, adapt_params, log=_tagged(adapt_log, step=n)
            )
            u = fem.transfer(u, new_mesh)
            mesh = new_mesh
            last_metric = m_field

        rhs = OdeRightHandSide(mesh, cfg.diffusion, cfg.m)
        M = rhs.mass()
        step_cfg = integ_cfg
        if h_carry is not None and integ_cfg.dt_init is None:
            step_cfg = replace(
                integ_cfg,
                dt_init=float(np.clip(h_carry, integ_cfg.dt_min, min(integ_cfg.dt_max, t_b - t_a))),
            )
        rows_before = len(steps_log)
        u = integrate_interval(rhs, M, u, (t_a, t_b), step_cfg, log=steps_log)
        accepted = [r for r in steps_log[rows_before:] if r["accepted"]]
        h_carry = accepted[-1]["dt"] if accepted else None
        clipped = sum(r["clipped_nodes"] for r in accepted)

        _log_solution(solution_log, mesh, u, clipped)
        if (n + 1) % cfg.output_every == 0 or n == n_steps - 1:
            snapshots.append((t_b, mesh, u.values.copy()))

    summary = _summarize(cfg, mesh, u, solution_log)
    result = RunResult(cfg, mesh, u, summary, snapshots, steps_log, adapt_log, solution_log)
    if cfg.output_dir:
        write_artifacts(result, last_metric)
    return result


def _tagged(log, **extra):
    """List-like that stamps extra keys onto appended rows."""

    class _Tagger(list):
        def append(self, row):
            row = {**extra, **row}
            log.append(row)

    return _Tagger()


def _log_solution(rows, mesh, u, clipped):
    rows.append(
        {
            "time": u.time,
            "total_mass": fem.total_mass(mesh, u),
            "min_u": float(u.values.min()),
            "max_u": float(u.values.max()),
            "n_elements": mesh.num_elements,
            "clipped_nodes": clipped,
        }
    )


def _summarize(cfg, mesh, u, solution_log):
    masses = [r["total_mass"] for r in solution_log]
    summary = {
        "strategy": cfg.strategy,
        "t_end": cfg.t_end,
        "n_elements": mesh.num_elements,
        "n_vertices": mesh.num_vertices,
        "min_u": float(u.values.min()),
        "max_u": float(u.values.max()),
        "total_mass": masses[-1],
        "mass_drift_rel": abs(masses[-1] - masses[0]) / abs(masses[0]) if masses[0] else 0.0,
        "target_N": cfg.target_N,
    }
    oracle = cfg.oracle()
    if oracle is not None:
        ref = lambda pts: oracle.solution(pts, cfg.t_end)
        summary["l2_error"] = fem.l2_error(mesh, u, ref)
        summary["support_mismatch_rel"] = support_mismatch(mesh, u.values, oracle, cfg.t_end)
    return summary


# -- analysis helpers -------------------------------------------------------


def support_mismatch(mesh, values, oracle, t, threshold=SUPPORT_THRESHOLD):
    """Symmetric-difference area of numerical vs exact support, relative
    to the exact support area (degree-5 quadrature of the indicators)."""
    pts = np.einsum("qv,nvx->nqx", fem.QUAD7_BARY, mesh.vertices[mesh.triangles])
    uh = values[mesh.triangles] @ fem.QUAD7_BARY.T
    num_in = uh > threshold
    exact_in = oracle.quad_form(pts) < oracle.support_radius2(t)
    mismatch = np.einsum("n,q,nq->", mesh.areas, fem.QUAD7_W, (num_in ^ exact_in).astype(float))
    return float(mismatch / oracle.support_area(t))


def positive_region_components(mesh, values, threshold=SUPPORT_THRESHOLD):
    """Number of connected components of the vertex set {u > threshold}."""
    pos = values > threshold
    if not pos.any():
        return 0
    idx = np.flatnonzero(pos)
    lookup = -np.ones(mesh.num_vertices, dtype=np.int64)
    lookup[idx] = np.arange(len(idx))
    e = mesh.edges
    keep = pos[e[:, 0]] & pos[e[:, 1]]
    rows = lookup[e[keep, 0]]
    cols = lookup[e[keep, 1]]
    graph = sp.coo_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(len(idx), len(idx))
    )
    n, _ = connected_components(graph, directed=False)
    return int(n)


def region_eccentricity(mesh, values, threshold=SUPPORT_THRESHOLD):
    """Eccentricity of the region {u > threshold} from its second moments."""
    pts = np.einsum("qv,nvx->nqx", fem.QUAD7_BARY, mesh.vertices[mesh.triangles])
    uh = values[mesh.triangles] @ fem.QUAD7_BARY.T
    ind = (uh > threshold).astype(float)
    w = np.einsum("n,q->nq", mesh.areas, fem.QUAD7_W) * ind
    total = w.sum()
    if total <= 0:
        return 0.0
    c = np.einsum("nq,nqx->x", w, pts) / total
    d = pts - c
    cov = np.einsum("nq,nqx,nqy->xy", w, d, d) / total
    lam = np.linalg.eigvalsh(cov)
    return float(np.sqrt(max(0.0, 1.0 - lam[0] / lam[1])))


def verify_exact(cfg, n_target=100, h=1e-3, t_check=None):
    """Residual oracle over a grid of interior-of-support points.

    Evaluates the PDE residual of the closed-form solution by centered
    differences at steps ``h`` and ``h/2`` and reports the maxima plus the
    Richardson ratio (should be about 4 for a second-order stencil).
    """
    oracle = cfg.oracle()
    if oracle is None:
        raise ValueError("verify-exact needs ellipse initial data with constant D")
    t = 2.0 * cfg.t0 if t_check is None else t_check

    r2 = oracle.support_radius2(t)
    # sample inside 0.75 of the support ellipse, margins included
    lim = np.sqrt(r2 * np.max(np.linalg.eigvalsh(oracle.D)))
    n_grid = 8
    pts = []
    while len(pts) < n_target:
        n_grid *= 2
        g = np.linspace(-0.9 * lim, 0.9 * lim, n_grid)
        gx, gy = np.meshgrid(g, g)
        cand = np.column_stack([gx.ravel(), gy.ravel()])
        q = oracle.quad_form(cand)
        pts = cand[q < 0.75 ** 2 * r2]

    res_h = np.array([residual_check(oracle, x, t, h=h) for x in pts])
    res_h2 = np.array([residual_check(oracle, x, t, h=h / 2.0) for x in pts])
    ratio = float(res_h.max() / res_h2.max())
    return {
        "n_points": int(len(pts)),
        "t": t,
        "h": h,
        "max_residual": float(res_h.max()),
        "max_residual_half_h": float(res_h2.max()),
        "richardson_ratio": ratio,
        "order2_ok": bool(abs(ratio - 4.0) <= 0.2 * 4.0),
    }


# -- convergence study ------------------------------------------------------


@dataclass
class ConvergenceRecord:
    strategy: str
    alpha_h: float | None
    N: int
    l2_error: float
    ref_sqrt: float
    ref_linear: float
    slope: float = np.nan


def run_convergence(base_cfg, strategies, N_sweep, out_path=None):
    """L2-error sweep over strategies and element-count targets.

    Each cell runs a full simulation to ``base_cfg.t_end`` and records the
    error against the exact solution; the log-log slope of error vs N is
    fitted per strategy. Failed cells are recorded with NaN error and the
    sweep continues.
    """
    if base_cfg.oracle() is None:
        raise ValueError("the convergence study needs an exact-solution oracle")
    records = []
    for strategy in strategies:
        strat, alpha = _parse_strategy(strategy, base_cfg.alpha_h)
        cells = []
        for target in N_sweep:
            cfg = replace(
                base_cfg,
                strategy=strat,
                alpha_h=alpha,
                target_N=int(target),
                output_dir=None,
            )
            try:
                result = run_simulation(cfg)
                cells.append(
                    ConvergenceRecord(
                        strategy=strategy,
                        alpha_h=alpha if strat in ("adap", "dmp_adap") else None,
                        N=result.summary["n_elements"],
                        l2_error=result.summary["l2_error"],
                        ref_sqrt=0.1 / np.sqrt(result.summary["n_elements"]),
                        ref_linear=1.0 / result.summary["n_elements"],
                    )
                )
            except Exception as exc:  # record and continue the sweep
                warnings.warn(f"convergence cell {strategy}/N={target} failed: {exc}")
                cells.append(
                    ConvergenceRecord(strategy, alpha, int(target), np.nan, np.nan, np.nan)
                )
        good = [c for c in cells if np.isfinite(c.l2_error)]
        if len(good) >= 2:
            slope = float(
                np.polyfit(
                    np.log([c.N for c in good]), np.log([c.l2_error for c in good]), 1
                )[0]
            )
            for c in cells:
                c.slope = slope
        records.extend(cells)
    if out_path:
        write_errors_csv(out_path, records)
    return records


def _parse_strategy(spec_str, default_alpha):
    """'adap' or 'adap:0.01' -> (name, alpha)."""
    if ":" in spec_str:
        name, alpha = spec_str.split(":", 1)
        return name, float(alpha)
    return spec_str, default_alpha


def fitted_slope(records, strategy):
    for r in records:
        if r.strategy == strategy and np.isfinite(r.slope):
            return r.slope
    raise KeyError(strategy)


# -- file output -------------------------------------------------------------


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_csv(path, rows, columns=None):
    if not rows:
        return
    columns = columns or list(rows[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in columns])


def write_errors_csv(path, records):
    rows = [
        {
            "strategy": r.strategy,
            "N": r.N,
            "l2_error": r.l2_error,
            "ref_sqrt": r.ref_sqrt,
            "ref_linear": r.ref_linear,
            "slope": r.slope,
        }
        for r in records
    ]
    write_csv(path, rows)


def write_artifacts(result, last_metric=None):
    out = Path(result.config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (t, mesh, values) in enumerate(result.snapshots):
        vtkio.write_vtk(
            out / f"snap_{i:04d}.vtk",
            mesh,
            point_scalars={"u": values},
            title=f"t={t:.10g}",
        )
    if result.config.save_metric and last_metric is not None:
        vtkio.write_vtk(
            out / "metric_final.vtk",
            result.mesh,
            cell_tensors={"metric": last_metric.tensors},
        )
    write_csv(out / "steps.csv", result.steps_log,
              ["t", "dt", "newton_iters", "error_estimate", "accepted", "clipped_nodes"])
    write_csv(out / "adapt.csv", result.adapt_log,
              ["step", "pass", "n_elements", "ops", "mean_q_ali", "max_q_ali",
               "len_q10", "len_q50", "len_q90"])
    write_csv(out / "solution.csv", result.solution_log,
              ["time", "total_mass", "min_u", "max_u", "n_elements", "clipped_nodes"])
    with open(out / "summary.json", "w") as f:
        json.dump(result.summary, f, indent=2, sort_keys=True)


def check_invariants(result):
    """Per-run sanity checks backing the CLI exit status."""
    problems = []
    for t, mesh, values in result.snapshots:
        if values.min() < 0:
            problems.append(f"negative nodal value at t={t}")
        if np.abs(values[mesh.boundary_vertex_flags]).max(initial=0.0) > 0:
            problems.append(f"nonzero boundary trace at t={t}")
    if result.config.strategy != "fixed":
        lo = 0.5 * result.config.target_N
        hi = 2.0 * result.config.target_N
        for row in result.solution_log:
            if not lo <= row["n_elements"] <= hi:
                problems.append(
                    f"element count {row['n_elements']} outside [{lo}, {hi}]"
                )
                break
    return problems


# -- config file -------------------------------------------------------------


def load_config(path, overrides=None):
    """Build an :class:`ExperimentConfig` from a YAML mapping."""
    import yaml

    with open(path) as f:
        raw = yaml.safe_load(f)
    raw.update(overrides or {})

    domain = Rectangle(*[float(v) for v in raw["domain"]])
    diff = raw["diffusion"]
    if diff["kind"] == "constant":
        D = metric_mod.DiffusionField.constant(np.array(diff["matrix"], dtype=float))
    elif diff["kind"] == "rotation":
        angle = diff.get("angle", {})
        D = metric_mod.DiffusionField.sincos(
            eigenvalues=tuple(diff["eigenvalues"]),
            amplitude=float(angle.get("amplitude", np.pi)),
            freq_x=float(angle.get("freq_x", 0.2)),
            freq_y=float(angle.get("freq_y", 0.1)),
        )
    else:
        raise ValueError(f"unknown diffusion kind {diff['kind']!r}")

    init = raw["initial"]
    integ_kwargs = {}
    for k, v in (raw.get("integrator") or {}).items():
        if v is None:
            continue
        if k == "jacobian_mode":
            integ_kwargs[k] = str(v)
        elif k == "newton_max_iters":
            integ_kwargs[k] = int(v)
        else:
            integ_kwargs[k] = float(v)
    integ = IntegratorConfig(**integ_kwargs)

    out_dir = os.environ.get("APMEFEM_OUTPUT_DIR", raw.get("output_dir"))
    return ExperimentConfig(
        domain=domain,
        m=float(raw["m"]),
        diffusion=D,
        initial_kind=init["kind"],
        r0=float(init["r0"]) if "r0" in init else None,
        boxes=tuple(tuple(float(v) for v in b) for b in init.get("boxes", ())),
        t_end=float(raw["t_end"]),
        dt_adapt=float(raw["dt_adapt"]) if raw.get("dt_adapt") else None,
        strategy=raw.get("strategy", "adap"),
        alpha_h=float(raw.get("alpha_h", 0.01)),
        target_N=int(raw.get("target_n", raw.get("target_N", 4000))),
        integrator=integ,
        output_dir=str(out_dir) if out_dir else None,
        output_every=int(raw.get("output_every", 8)),
        initial_iterations=int(raw.get("initial_iterations", 5)),
        max_passes=int(raw.get("max_passes", 10)),
        save_metric=bool(raw.get("save_metric", False)),
        seed=int(raw.get("seed", 0)),
    )
