"""Convergence laboratory: numerical certification of the stationarity bound.

Everything here runs on small synthetic instances whose constants are
computable to machine precision: frequency-diagonal transfer functions,
linear (Gaussian-kernel or identity) denoisers, and an oracle fixed point
x* from a direct conjugate-gradient solve.  The central bound certified
against solver traces is::

    E[(1/t) sum_{k<=t} ||G(x^{k-1})||^2]
        <= (L + 2 tau) * (||x0 - x*||^2 / (gamma t) + gamma nu^2 / B)

for 0 < gamma <= 1/(L + 2 tau), where nu^2 bounds the single-draw
gradient-estimator variance.  The bound is an expectation statement, so
seed ensembles with a documented 90% pass threshold are used, never
per-seed hard assertions; the deterministic full-batch case (nu = 0) must
hold on every seed.

Also here: the operator-theory property probes (nonexpansiveness of
convex combinations, cocoercivity of I - T, averagedness contraction,
cocoercive scaling) on random certified-nonexpansive convolutions, and
the single-iteration contraction and expectation-recursion checks that
mirror the proof skeleton step by step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from simba_idt.denoisers import DenoiserSpec
from simba_idt.errors import DataError, NonConvergenceError
from simba_idt.fidelity import (
    FidelityProblem,
    component_gradient,
    component_variance,
    estimate_lipschitz,
    full_gradient,
    make_rng,
)
from simba_idt.forward import ContrastVolume, normal_apply, normal_rhs, synth_tf
from simba_idt.simulate import make_phantom, simulate_measurements
from simba_idt.solvers import (
    SolverConfig,
    apply_denoiser,
    red_operator,
    resolve_gamma,
    simba_run,
)

LINEAR_DENOISER_KINDS = ("identity", "gaussianKernel")


def theorem1_bound(lipschitz: float, tau: float, gamma: float, batch_size: int,
                   nu2: float, dist0_sq: float, t: int) -> float:
    """(L + 2 tau) * (dist0_sq / (gamma t) + gamma nu2 / B)."""
    denom = lipschitz + 2.0 * tau
    if denom <= 0:
        raise DataError("need L + 2 tau > 0")
    if not 0.0 < gamma <= (1.0 / denom) * (1.0 + 1e-12):
        raise DataError(
            f"gamma = {gamma} outside the admissible range (0, 1/(L+2tau) = {1.0/denom}]")
    if batch_size < 1:
        raise DataError(f"batch size must be >= 1, got {batch_size}")
    if t < 1:
        raise DataError(f"horizon must be >= 1, got {t}")
    if nu2 < 0 or dist0_sq < 0:
        raise DataError("nu2 and dist0_sq must be nonnegative")
    return denom * (dist0_sq / (gamma * t) + gamma * nu2 / batch_size)


def fixed_point_oracle(p: FidelityProblem, d: DenoiserSpec, tau: float, *,
                       rtol: float = 1e-10,
                       max_iter: int = 20000) -> ContrastVolume:
    """Solve ((1/I) sum A_i^T A_i + tau (Id - W)) x = (1/I) sum A_i^T y_i.

    Requires a linear denoiser W (identity or Gaussian kernel, both
    symmetric with norm <= 1, so the system is symmetric positive
    semidefinite).  Conjugate gradient to relative residual 1e-10; the
    result satisfies ||G(x*)|| <= 1e-8 (1 + ||x*||) by construction and
    that is re-checked before returning.
    """
    if d.kind not in LINEAR_DENOISER_KINDS:
        raise DataError(
            f"oracle needs a linear denoiser {LINEAR_DENOISER_KINDS}, got {d.kind!r}")
    if tau < 0:
        raise DataError(f"tau must be >= 0, got {tau}")
    shape = p.volume_shape
    n = 2 * int(np.prod(shape))
    if n > 4096:
        raise DataError(f"oracle limited to 4096 unknowns, instance has {n}")

    def matvec(v):
        x = ContrastVolume.from_ravel(v, shape)
        out = normal_apply(x, p.tf)
        if tau != 0.0:
            out = out + tau * (x - apply_denoiser(d, x))
        return out.ravel()

    b = normal_rhs(p.measurements, p.tf).ravel()
    op = spla.LinearOperator((n, n), matvec=matvec, dtype=np.float64)
    sol, info = spla.cg(op, b, rtol=rtol, atol=0.0, maxiter=max_iter)
    if info != 0:
        raise NonConvergenceError(
            f"fixed-point solve did not converge (info={info}); the system is "
            "likely singular — with tau = 0 (or a norm-1 denoiser) a "
            "rank-deficient operator leaves the phase DC null space "
            "unconstrained; use tau > 0 with a strictly contracting denoiser")
    x_star = ContrastVolume.from_ravel(sol, shape)
    g = red_operator(p, d, tau, x_star)
    if g.norm() > 1e-8 * (1.0 + x_star.norm()):
        raise NonConvergenceError(
            f"oracle self-check failed: ||G(x*)|| = {g.norm():.3e} exceeds "
            f"1e-8 (1 + ||x*||) = {1e-8 * (1.0 + x_star.norm()):.3e}")
    return x_star


# ---------------------------------------------------------------------------
# theory instances
# ---------------------------------------------------------------------------


def ring_angles(n_ill: int, polar: float = 0.35) -> list[tuple[float, float]]:
    """Evenly spread illumination angles on one ring (radians)."""
    polar = float(polar)
    return [(polar * np.cos(2.0 * np.pi * i / n_ill),
             polar * np.sin(2.0 * np.pi * i / n_ill)) for i in range(n_ill)]


def two_ring_angles(n_ill: int, polar_a: float = 0.26,
                    polar_b: float = 0.50) -> list[tuple[float, float]]:
    """Two staggered rings, half the illuminations on each.

    Two distinct ring radii give every frequency two distinct defocus
    phases per slice, so the phase and absorption channels cannot both go
    blind at once; with the radii tuned so the probed directions stay
    near-orthogonal this conditions the mean normal operator far better
    than a single ring.
    """
    half = n_ill // 2
    rest = n_ill - half
    out = []
    for i in range(half):
        a = 2.0 * np.pi * i / half
        out.append((polar_a * np.cos(a), polar_a * np.sin(a)))
    for i in range(rest):
        a = 2.0 * np.pi * (i + 0.5) / rest
        out.append((polar_b * np.cos(a), polar_b * np.sin(a)))
    return out


@dataclass(frozen=True, eq=False)
class TheoryInstance:
    """A problem with every constant of the bound pinned down."""

    problem: FidelityProblem
    denoiser: DenoiserSpec
    tau: float
    lipschitz: float
    nu2: float
    x_star: ContrastVolume
    x0: ContrastVolume
    dist0_sq: float
    metadata: dict = field(default_factory=dict)

    @property
    def step_limit(self) -> float:
        return 1.0 / (self.lipschitz + 2.0 * self.tau)

    def red(self, x: ContrastVolume) -> ContrastVolume:
        return red_operator(self.problem, self.denoiser, self.tau, x)

    def config(self, **overrides) -> SolverConfig:
        base = dict(denoiser=self.denoiser, tau=self.tau, gamma="auto",
                    lipschitz=self.lipschitz, theory_mode=True,
                    trace_full_g=True)
        base.update(overrides)
        return SolverConfig(**base)


def build_theory_instance(*, size: int = 16, slices: int = 2, n_ill: int = 6,
                          tau: float = 0.2, seed: int = 3,
                          input_snr_db: float | None = 25.0,
                          denoiser: DenoiserSpec | None = None,
                          illumination_angles=None,
                          base_defocus_um: float | None = None,
                          phantom_smooth: int = 0,
                          nu2_cushion: float = 1.5,
                          pilot_iters: int = 200) -> TheoryInstance:
    """Small frequency-diagonal instance with exact constants.

    ``phantom_smooth`` applies the denoiser to the ground truth that many
    times before simulating, which bandlimits the scene; combined with a
    wrap-boundary denoiser and two-ring illumination this produces the
    well-conditioned instances used for tight fixed-point accuracy tests.

    nu^2 is the worst exact single-draw gradient variance over a pilot
    set (start point, oracle point, scaled perturbations, and snapshots
    of a worst-case B = 1 pilot run), inflated by ``nu2_cushion``.
    Overestimating nu^2 is safe: the bound is monotone in it.
    """
    if denoiser is None:
        denoiser = DenoiserSpec(kind="gaussianKernel", kernel_radius=2,
                                kernel_sigma=1.0)
    if illumination_angles is None:
        illumination_angles = ring_angles(n_ill)
    tf = synth_tf(size, size, slices,
                  wavelength_um=0.63, na=0.65,
                  illumination_angles=illumination_angles,
                  slice_spacing_um=5.0, seed=seed,
                  base_defocus_um=base_defocus_um)
    phantom = make_phantom(size, size, slices, "disks", seed + 1,
                           max_contrast=0.1, with_absorption=True)
    for _ in range(phantom_smooth):
        phantom = apply_denoiser(denoiser, phantom)
    m = simulate_measurements(phantom, tf, input_snr_db, seed + 2)
    p = FidelityProblem(measurements=m, tf=tf)

    lipschitz = estimate_lipschitz(p)
    x_star = fixed_point_oracle(p, denoiser, tau)
    x0 = ContrastVolume.zeros(*p.volume_shape)
    dist0_sq = (x0 - x_star).dot(x0 - x_star)

    points = [x0, x_star]
    rng = make_rng(seed + 10)
    radius = 2.0 * np.sqrt(dist0_sq) + 1e-12
    for _ in range(3):
        direction = ContrastVolume(rng.standard_normal(p.volume_shape),
                                   rng.standard_normal(p.volume_shape))
        points.append(x_star + (radius / direction.norm()) * direction)
    pilot_cfg = SolverConfig(denoiser=denoiser, tau=tau, gamma="auto",
                             batch_size=1, max_iter=pilot_iters, seed=0,
                             lipschitz=lipschitz)
    pilot_x, _ = simba_run(p, pilot_cfg)
    points.append(pilot_x)
    nu2 = nu2_cushion * max(component_variance(p, pt) for pt in points)

    return TheoryInstance(problem=p, denoiser=denoiser, tau=tau,
                          lipschitz=lipschitz, nu2=nu2, x_star=x_star,
                          x0=x0, dist0_sq=dist0_sq,
                          metadata={"size": size, "slices": slices,
                                    "n_ill": n_ill, "seed": seed,
                                    "input_snr_db": input_snr_db,
                                    "phantom_smooth": phantom_smooth,
                                    "nu2_cushion": nu2_cushion})


# ---------------------------------------------------------------------------
# Theorem suite
# ---------------------------------------------------------------------------


@dataclass
class TheoryReport:
    """Everything needed to audit one bound-certification run."""

    lipschitz: float
    nu2: float
    dist0_sq: float
    gamma: float
    horizon: int
    batch_sizes: tuple
    seeds: tuple
    full_batch_stub: bool
    running_avg: dict = field(default_factory=dict)   # B -> (n_seeds, t)
    bound: dict = field(default_factory=dict)         # B -> (t,)
    seed_pass: dict = field(default_factory=dict)     # B -> (n_seeds,) bool
    floors: dict = field(default_factory=dict)        # B -> float

    def pass_counts(self) -> dict:
        return {b: int(np.sum(self.seed_pass[b])) for b in self.batch_sizes}

    def to_csv(self, path):
        with open(path, "w") as handle:
            handle.write("batch_size,seed,iter,running_avg_g_sq,bound\n")
            for b in self.batch_sizes:
                avg = self.running_avg[b]
                bnd = self.bound[b]
                for si, seed in enumerate(self.seeds):
                    for t in range(avg.shape[1]):
                        handle.write(f"{b},{seed},{t + 1},"
                                     f"{avg[si, t]!r},{bnd[t]!r}\n")

    def summary(self) -> str:
        lines = [
            "stationarity bound certification",
            f"  L = {self.lipschitz:.6g}, nu^2 = {self.nu2:.6g}, "
            f"||x0 - x*||^2 = {self.dist0_sq:.6g}",
            f"  gamma = {self.gamma:.6g}, horizon t = {self.horizon}, "
            f"seeds = {len(self.seeds)}"
            + (", full-batch stub" if self.full_batch_stub else ""),
        ]
        for b in self.batch_sizes:
            n_pass = int(np.sum(self.seed_pass[b]))
            lines.append(f"  B = {b}: running average under bound for all t on "
                         f"{n_pass}/{len(self.seeds)} seeds; "
                         f"tail floor of ||G||^2 = {self.floors[b]:.6g}")
        ordered = sorted(self.batch_sizes)
        if len(ordered) > 1:
            fl = [self.floors[b] for b in ordered]
            trend = ("monotone decreasing with B"
                     if all(a > b for a, b in zip(fl, fl[1:]))
                     else "not monotone in B")
            lines.append(f"  floors across B {ordered}: {trend}")
        return "\n".join(lines)


def run_theorem1_suite(instance: TheoryInstance, *,
                       batch_sizes: tuple = (1, 2, 5),
                       horizon: int = 500,
                       seeds: tuple = tuple(range(20)),
                       gamma: float | str = "auto",
                       full_batch_stub: bool = False,
                       tail_fraction: float = 0.2) -> TheoryReport:
    """Compare per-seed running averages of ||G||^2 to the bound at every t.

    A seed passes when its running average sits below the bound for every
    prefix horizon.  With the full-batch stub the nu = 0 bound applies and
    must hold deterministically.
    """
    p = instance.problem
    n_ill = p.n_ill
    cfg0 = instance.config(batch_size=(n_ill if full_batch_stub else 1),
                           max_iter=horizon, gamma=gamma,
                           full_batch_stub=full_batch_stub)
    gamma_val = resolve_gamma(cfg0, instance.lipschitz)

    use_batches = (n_ill,) if full_batch_stub else tuple(batch_sizes)
    report = TheoryReport(lipschitz=instance.lipschitz, nu2=instance.nu2,
                          dist0_sq=instance.dist0_sq, gamma=gamma_val,
                          horizon=horizon, batch_sizes=use_batches,
                          seeds=tuple(seeds), full_batch_stub=full_batch_stub)
    t_axis = np.arange(1, horizon + 1, dtype=np.float64)
    for b in use_batches:
        nu2 = 0.0 if full_batch_stub else instance.nu2
        bound = (instance.lipschitz + 2.0 * instance.tau) * (
            instance.dist0_sq / (gamma_val * t_axis) + gamma_val * nu2 / b)
        avgs = np.full((len(seeds), horizon), np.nan)
        passes = np.zeros(len(seeds), dtype=bool)
        tails = []
        for si, seed in enumerate(seeds):
            cfg = instance.config(batch_size=b, max_iter=horizon, gamma=gamma,
                                  seed=seed, full_batch_stub=full_batch_stub)
            _, trace = simba_run(p, cfg)
            if trace.diverged or len(trace) < horizon:
                passes[si] = False
                continue
            g_sq = np.asarray(trace.g_sq_norm, dtype=np.float64)
            run_avg = np.cumsum(g_sq) / t_axis
            avgs[si] = run_avg
            passes[si] = bool(np.all(run_avg <= bound * (1.0 + 1e-12) + 1e-300))
            tail = max(1, int(round(tail_fraction * horizon)))
            tails.append(float(np.mean(g_sq[-tail:])))
        report.running_avg[b] = avgs
        report.bound[b] = bound
        report.seed_pass[b] = passes
        report.floors[b] = float(np.mean(tails)) if tails else float("nan")
    return report


@dataclass
class CorollaryReport:
    horizons: tuple
    seeds: tuple
    batch_size: int
    min_g_sq: dict            # horizon -> seed-averaged min_k ||G||^2
    slope: float


def run_corollary_sweep(instance: TheoryInstance, *,
                        horizons: tuple = (100, 400, 1600),
                        seeds: tuple = tuple(range(10)),
                        batch_size: int = 1) -> CorollaryReport:
    """Horizon-scaled step size gamma = 1/((L+2tau) sqrt(t)) per run.

    Records the seed-averaged best stationarity gap min_k ||G(x^{k-1})||^2
    per horizon and the fitted log-log slope across horizons (theory:
    -1/2 for the O(1/sqrt(t)) corollary).
    """
    mins = {}
    for t in horizons:
        per_seed = []
        for seed in seeds:
            cfg = instance.config(batch_size=batch_size, max_iter=t, seed=seed,
                                  gamma="auto", gamma_schedule="invSqrtT")
            _, trace = simba_run(instance.problem, cfg)
            g_sq = np.asarray(trace.g_sq_norm, dtype=np.float64)
            per_seed.append(float(np.min(g_sq)))
        mins[t] = float(np.mean(per_seed))
    ts = np.asarray(sorted(mins), dtype=np.float64)
    vals = np.asarray([mins[int(t)] for t in ts])
    slope = float(np.polyfit(np.log10(ts), np.log10(vals), 1)[0])
    return CorollaryReport(horizons=tuple(horizons), seeds=tuple(seeds),
                           batch_size=batch_size, min_g_sq=mins, slope=slope)


# ---------------------------------------------------------------------------
# proposition suite
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PropertyCheck:
    name: str
    passed: bool
    max_violation: float
    pairs: int


def _conv_op(kernel: np.ndarray, dims: tuple):
    """Circular convolution operator; norm <= l1 norm of the kernel."""
    kh, kw = kernel.shape
    pad = np.zeros(dims)
    pad[:kh, :kw] = kernel
    pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    symbol = np.fft.fft2(pad)

    def apply(x):
        return np.fft.ifft2(symbol * np.fft.fft2(x)).real

    return apply, symbol


def _random_contraction(rng: np.random.Generator, dims: tuple):
    k = rng.standard_normal((3, 3))
    l1 = np.sum(np.abs(k))
    while l1 < 1e-12:
        k = rng.standard_normal((3, 3))
        l1 = np.sum(np.abs(k))
    k *= rng.uniform(0.2, 1.0) / l1
    return _conv_op(k, dims)[0]


def proposition_suite(rng: np.random.Generator, dims: tuple = (16, 16), *,
                      n_pairs: int = 500, tol: float = 1e-9) -> dict:
    """Probe the four operator-theory building blocks on random instances.

    All operators are circular convolutions whose kernel l1 norm is <= 1,
    hence certified nonexpansive; cocoercive maps come from symmetric
    positive semidefinite convolution symbols.
    """
    checks = {}

    # (1) convex combinations of nonexpansive operators stay nonexpansive
    worst = -np.inf
    for _ in range(n_pairs):
        ops = [_random_contraction(rng, dims) for _ in range(3)]
        w = rng.dirichlet(np.ones(3))
        x, y = rng.standard_normal(dims), rng.standard_normal(dims)
        tx = sum(wi * op(x) for wi, op in zip(w, ops))
        ty = sum(wi * op(y) for wi, op in zip(w, ops))
        worst = max(worst, np.linalg.norm(tx - ty) / np.linalg.norm(x - y) - 1.0)
    checks["convex_combination_nonexpansive"] = PropertyCheck(
        "convex_combination_nonexpansive", worst <= tol, float(worst), n_pairs)

    # (2) T nonexpansive => R = Id - T is (1/2)-cocoercive
    worst = -np.inf
    for _ in range(n_pairs):
        op = _random_contraction(rng, dims)
        x, y = rng.standard_normal(dims), rng.standard_normal(dims)
        rx = (x - op(x)) - (y - op(y))
        gap = 0.5 * np.sum(rx * rx) - np.sum(rx * (x - y))
        worst = max(worst, gap)
    checks["residual_half_cocoercive"] = PropertyCheck(
        "residual_half_cocoercive", worst <= tol, float(worst), n_pairs)

    # (3) alpha-averaged contraction inequality
    worst = -np.inf
    for _ in range(n_pairs):
        op = _random_contraction(rng, dims)
        alpha = float(rng.uniform(0.05, 0.95))
        x, y = rng.standard_normal(dims), rng.standard_normal(dims)
        tx = (1.0 - alpha) * x + alpha * op(x)
        ty = (1.0 - alpha) * y + alpha * op(y)
        rx = (x - tx) - (y - ty)
        lhs = np.sum((tx - ty) ** 2)
        rhs = np.sum((x - y) ** 2) - (1.0 - alpha) / alpha * np.sum(rx * rx)
        worst = max(worst, lhs - rhs)
    checks["averaged_contraction"] = PropertyCheck(
        "averaged_contraction", worst <= tol, float(worst), n_pairs)

    # (4) T beta-cocoercive  <=>  Id - 2 beta T nonexpansive
    worst = -np.inf
    for _ in range(n_pairs):
        k = rng.standard_normal((3, 3))
        _, sym = _conv_op(k, dims)
        psd = np.abs(sym) ** 2
        top = float(np.max(psd))
        if top < 1e-12:
            psd = psd + 1.0
            top = float(np.max(psd))
        beta = 1.0 / top

        def cocoercive(x):
            return np.fft.ifft2(psd * np.fft.fft2(x)).real

        x, y = rng.standard_normal(dims), rng.standard_normal(dims)
        ux = x - 2.0 * beta * cocoercive(x)
        uy = y - 2.0 * beta * cocoercive(y)
        worst = max(worst, np.linalg.norm(ux - uy) / np.linalg.norm(x - y) - 1.0)
    checks["cocoercive_reflection_nonexpansive"] = PropertyCheck(
        "cocoercive_reflection_nonexpansive", worst <= tol, float(worst), n_pairs)
    return checks


# ---------------------------------------------------------------------------
# proof-skeleton probes on a theory instance
# ---------------------------------------------------------------------------


def _iterate_like_points(instance: TheoryInstance, n_points: int,
                         rng: np.random.Generator):
    """Random points at iterate-plausible distances from x*."""
    shape = instance.problem.volume_shape
    radius = np.sqrt(instance.dist0_sq) + 1e-12
    for _ in range(n_points):
        direction = ContrastVolume(rng.standard_normal(shape),
                                   rng.standard_normal(shape))
        scale = radius * 10.0 ** rng.uniform(-2.0, 0.3) / direction.norm()
        yield instance.x_star + scale * direction


def red_step_nonexpansive_probe(instance: TheoryInstance, n_pairs: int,
                                rng: np.random.Generator) -> float:
    """Max ratio for T = Id - (2/(L+2tau)) G over random pairs (expect <= 1)."""
    coeff = 2.0 / (instance.lipschitz + 2.0 * instance.tau)
    points = list(_iterate_like_points(instance, 2 * n_pairs, rng))
    worst = -np.inf
    for x, y in zip(points[::2], points[1::2]):
        tx = x - coeff * instance.red(x)
        ty = y - coeff * instance.red(y)
        worst = max(worst, (tx - ty).norm() / (x - y).norm())
    return float(worst)


def contraction_probe(instance: TheoryInstance, gamma: float, n_points: int,
                      rng: np.random.Generator) -> float:
    """Max violation of the single-iteration contraction toward x*.

    Checks ||x - x* - gamma G(x)||^2 <= ||x - x*||^2
           - (gamma/(L+2tau)) ||G(x)||^2 for random x; returns the largest
    lhs - rhs (expect <= ~1e-9 for admissible gamma).
    """
    denom = instance.lipschitz + 2.0 * instance.tau
    if not 0.0 < gamma <= (1.0 / denom) * (1.0 + 1e-12):
        raise DataError(f"gamma = {gamma} outside (0, 1/(L+2tau)]")
    worst = -np.inf
    for x in _iterate_like_points(instance, n_points, rng):
        g = instance.red(x)
        diff = x - instance.x_star
        lhs = (diff - gamma * g).dot(diff - gamma * g)
        rhs = diff.dot(diff) - (gamma / denom) * g.dot(g)
        worst = max(worst, lhs - rhs)
    return float(worst)


def expectation_recursion_check(instance: TheoryInstance, gamma: float,
                                x: ContrastVolume) -> dict:
    """Exact one-step expectation over all B = 1 minibatches.

    Returns the exact expectation of ||x+ - x*||^2, its variance
    decomposition (which must match to ~1e-10), and the recursion upper
    bound ||x - x*||^2 - (gamma/(L+2tau)) ||G||^2 + gamma^2 sigma^2.
    """
    p = instance.problem
    d, tau = instance.denoiser, instance.tau
    denom = instance.lipschitz + 2.0 * tau
    reg = tau * (x - apply_denoiser(d, x))
    g_full = full_gradient(p, x) + reg
    expectation = 0.0
    variance = 0.0
    for i in range(p.n_ill):
        ghat = component_gradient(p, x, i) + reg
        step = x - gamma * ghat - instance.x_star
        expectation += step.dot(step)
        dev = ghat - g_full
        variance += dev.dot(dev)
    expectation /= p.n_ill
    variance /= p.n_ill
    det_step = x - gamma * g_full - instance.x_star
    decomposition = det_step.dot(det_step) + gamma ** 2 * variance
    diff = x - instance.x_star
    upper = diff.dot(diff) - (gamma / denom) * g_full.dot(g_full) \
        + gamma ** 2 * variance
    return {
        "expectation": expectation,
        "decomposition": decomposition,
        "variance": variance,
        "upper_bound": upper,
        "dist_sq": diff.dot(diff),
    }
