"""No-U-turn Hamiltonian sampler with windowed warmup adaptation.

Multinomial trajectory sampling with biased progressive sampling at the top
level, the generalized no-U-turn criterion (including the checks across
merged subtrees), dual-averaging step size adaptation and a diagonal inverse
metric estimated in doubling slow windows.

The target is any object exposing ``dim`` and ``logp_grad(u) -> (float,
ndarray)`` on an unconstrained space.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergenceError, InitializationError, ParameterError

log = logging.getLogger(__name__)

MAX_DELTA_H = 1000.0


@dataclass(frozen=True)
class MCMCConfig:
    chains: int = 2
    warmup: int = 1000
    draws: int = 1000
    target_accept: float = 0.8
    max_treedepth: int = 10
    init_radius: float = 2.0
    max_divergent_fraction: float = 0.1
    init_buffer: int = 75
    term_buffer: int = 50
    base_window: int = 25
    min_chains: int = 2
    min_warmup: int = 200
    min_draws: int = 200

    def __post_init__(self):
        if self.chains < self.min_chains:
            raise ParameterError(f"need at least {self.min_chains} chains, got {self.chains}")
        if self.warmup < self.min_warmup:
            raise ParameterError(f"warmup must be at least {self.min_warmup}, got {self.warmup}")
        if self.draws < self.min_draws:
            raise ParameterError(f"draws must be at least {self.min_draws}, got {self.draws}")
        if not 0 < self.target_accept < 1:
            raise ParameterError("target_accept must lie in (0, 1)")

    def as_dict(self):
        return {
            "chains": self.chains, "warmup": self.warmup, "draws": self.draws,
            "target_accept": self.target_accept, "max_treedepth": self.max_treedepth,
        }


@dataclass(eq=False)
class ChainResult:
    draws: np.ndarray  # (draws, dim), unconstrained
    stepsize: float
    inv_metric: np.ndarray
    divergent: np.ndarray
    treedepth: np.ndarray
    n_leapfrog: np.ndarray
    accept_stat: np.ndarray
    warmup_divergent: int = 0


@dataclass(eq=False)
class SamplerRun:
    """Unconstrained draws of all chains plus per-iteration statistics."""

    chains: list
    seed: int
    config: MCMCConfig
    stats: dict = field(default_factory=dict)

    @property
    def draws(self):
        return np.stack([c.draws for c in self.chains])

    @property
    def divergent_fraction(self):
        div = np.concatenate([c.divergent for c in self.chains])
        return float(div.mean())


class _Point:
    __slots__ = ("u", "r", "grad", "logp", "r_sharp")

    def __init__(self, u, r, grad, logp, r_sharp):
        self.u = u
        self.r = r
        self.grad = grad
        self.logp = logp
        self.r_sharp = r_sharp


class _Tree:
    __slots__ = ("left", "right", "sample", "log_weight", "rho")

    def __init__(self, left, right, sample, log_weight, rho):
        self.left = left
        self.right = right
        self.sample = sample
        self.log_weight = log_weight
        self.rho = rho


def _no_uturn(r_sharp_left, r_sharp_right, rho):
    return float(r_sharp_left @ rho) > 0.0 and float(r_sharp_right @ rho) > 0.0


class _Integrator:
    """One chain's Hamiltonian machinery and trajectory builder."""

    def __init__(self, target, rng, max_treedepth):
        self.target = target
        self.rng = rng
        self.max_treedepth = max_treedepth
        self.inv_metric = np.ones(target.dim)
        self.eps = 1.0
        # per-transition counters
        self.n_leapfrog = 0
        self.sum_accept = 0.0
        self.divergent = False

    def leapfrog(self, pt, eps):
        r = pt.r + 0.5 * eps * pt.grad
        u = pt.u + eps * (self.inv_metric * r)
        logp, grad = self.target.logp_grad(u)
        r = r + 0.5 * eps * grad
        return _Point(u, r, grad, logp, self.inv_metric * r)

    def hamiltonian(self, pt):
        return -pt.logp + 0.5 * float(pt.r @ pt.r_sharp)

    def _merge(self, first, second, direction, biased):
        """Combine two adjacent trees; ``second`` was built after ``first``."""
        if direction > 0:
            left, right = first, second
        else:
            left, right = second, first
        total = np.logaddexp(first.log_weight, second.log_weight)
        if biased:
            accept = math.exp(min(0.0, second.log_weight - first.log_weight))
        else:
            accept = math.exp(second.log_weight - total)
        sample = second.sample if self.rng.uniform() < accept else first.sample
        rho = left.rho + right.rho
        ok = (
            _no_uturn(left.left.r_sharp, right.right.r_sharp, rho)
            and _no_uturn(left.left.r_sharp, right.left.r_sharp, left.rho + right.left.r)
            and _no_uturn(left.right.r_sharp, right.right.r_sharp, right.rho + left.right.r)
        )
        return _Tree(left.left, right.right, sample, total, rho), ok

    def build(self, edge, direction, depth, H0):
        """Return ``(tree, valid)``; an invalid tree must be discarded."""
        if depth == 0:
            pt = self.leapfrog(edge, direction * self.eps)
            H = self.hamiltonian(pt)
            if not np.isfinite(H):
                H = np.inf
            self.n_leapfrog += 1
            delta = H - H0
            self.sum_accept += math.exp(min(0.0, -delta)) if np.isfinite(delta) else 0.0
            if delta > MAX_DELTA_H:
                self.divergent = True
                return None, False
            return _Tree(pt, pt, pt, -delta, pt.r.copy()), True
        first, ok = self.build(edge, direction, depth - 1, H0)
        if not ok:
            return None, False
        nxt = first.right if direction > 0 else first.left
        second, ok = self.build(nxt, direction, depth - 1, H0)
        if not ok:
            return None, False
        return self._merge(first, second, direction, biased=False)

    def transition(self, current):
        """One NUTS transition from ``current`` (a _Point with stale momentum)."""
        rng = self.rng
        r = rng.standard_normal(current.u.shape[0]) / np.sqrt(self.inv_metric)
        start = _Point(current.u, r, current.grad, current.logp, self.inv_metric * r)
        H0 = self.hamiltonian(start)
        tree = _Tree(start, start, start, 0.0, r.copy())
        self.n_leapfrog = 0
        self.sum_accept = 0.0
        self.divergent = False
        depth = 0
        while depth < self.max_treedepth:
            direction = 1 if rng.uniform() < 0.5 else -1
            edge = tree.right if direction > 0 else tree.left
            sub, ok = self.build(edge, direction, depth, H0)
            depth += 1
            if not ok:
                break
            tree, ok = self._merge(tree, sub, direction, biased=True)
            if not ok:
                break
        accept_stat = self.sum_accept / max(self.n_leapfrog, 1)
        return tree.sample, accept_stat, depth

    def find_reasonable_eps(self, pt):
        """Halve/double the step size until one leapfrog step crosses 80% acceptance."""
        rng = self.rng
        eps = self.eps
        r = rng.standard_normal(pt.u.shape[0]) / np.sqrt(self.inv_metric)
        p0 = _Point(pt.u, r, pt.grad, pt.logp, self.inv_metric * r)
        H0 = self.hamiltonian(p0)
        new = self.leapfrog(p0, eps)
        delta = H0 - self.hamiltonian(new)
        direction = 1 if delta > math.log(0.8) else -1
        for _ in range(100):
            r = rng.standard_normal(pt.u.shape[0]) / np.sqrt(self.inv_metric)
            p0 = _Point(pt.u, r, pt.grad, pt.logp, self.inv_metric * r)
            H0 = self.hamiltonian(p0)
            new = self.leapfrog(p0, eps)
            delta = H0 - self.hamiltonian(new)
            if not np.isfinite(delta):
                delta = -np.inf
            if direction == 1 and not delta > math.log(0.8):
                break
            if direction == -1 and not delta < math.log(0.8):
                break
            eps = eps * 2.0 if direction == 1 else eps * 0.5
            if eps > 1e7 or eps < 1e-12:
                break
        return eps


class _DualAveraging:
    gamma = 0.05
    t0 = 10.0
    kappa = 0.75

    def __init__(self, eps, delta):
        self.delta = delta
        self.restart(eps)

    def restart(self, eps):
        self.mu = math.log(10.0 * eps)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat):
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    @property
    def final(self):
        return math.exp(self.x_bar)


def _window_ends(warmup, init_buffer, term_buffer, base_window):
    """Iteration indices (exclusive) at which slow metric windows close."""
    if init_buffer + base_window + term_buffer > warmup:
        init_buffer = int(0.15 * warmup)
        term_buffer = int(0.1 * warmup)
        base_window = warmup - init_buffer - term_buffer
    ends = []
    start = init_buffer
    size = base_window
    slow_end = warmup - term_buffer
    while start < slow_end:
        end = start + size
        if end + 2 * size > slow_end:
            end = slow_end
        ends.append(end)
        start = end
        size *= 2
    return init_buffer, ends


def _initial_point(target, rng, radius, tries=100):
    for _ in range(tries):
        u = rng.uniform(-radius, radius, target.dim)
        try:
            logp, grad = target.logp_grad(u)
        except (ArithmeticError, ValueError, FloatingPointError):
            continue
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return _Point(u, np.zeros_like(u), grad, logp, np.zeros_like(u))
    raise InitializationError(f"no finite initial point after {tries} attempts")


def run_chain(target, config, rng, init=None):
    """Warm up and sample a single chain."""
    integ = _Integrator(target, rng, config.max_treedepth)
    if init is None:
        pt = _initial_point(target, rng, config.init_radius)
    else:
        u = np.asarray(init, dtype=float)
        logp, grad = target.logp_grad(u)
        pt = _Point(u, np.zeros_like(u), grad, logp, np.zeros_like(u))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        integ.eps = integ.find_reasonable_eps(pt)
        da = _DualAveraging(integ.eps, config.target_accept)
        init_buffer, ends = _window_ends(
            config.warmup, config.init_buffer, config.term_buffer, config.base_window
        )
        ends_set = set(ends)
        window_start = init_buffer
        window = []
        warm_div = 0
        for it in range(config.warmup):
            pt, acc, _ = integ.transition(pt)
            warm_div += integ.divergent
            integ.eps = da.update(acc)
            if init_buffer <= it < (ends[-1] if ends else 0):
                window.append(pt.u)
            if (it + 1) in ends_set and it + 1 > window_start:
                W = np.asarray(window)
                nw = W.shape[0]
                var = W.var(axis=0, ddof=1) if nw > 1 else np.ones(target.dim)
                integ.inv_metric = (nw / (nw + 5.0)) * var + 1e-3 * (5.0 / (nw + 5.0))
                window = []
                window_start = it + 1
                integ.eps = integ.find_reasonable_eps(pt)
                da.restart(integ.eps)
        integ.eps = da.final if config.warmup > 0 else integ.eps

        n = config.draws
        draws = np.empty((n, target.dim))
        divergent = np.zeros(n, dtype=bool)
        depth = np.zeros(n, dtype=int)
        nleap = np.zeros(n, dtype=int)
        accept = np.zeros(n)
        for i in range(n):
            pt, acc, d = integ.transition(pt)
            draws[i] = pt.u
            divergent[i] = integ.divergent
            depth[i] = d
            nleap[i] = integ.n_leapfrog
            accept[i] = acc
    return ChainResult(
        draws=draws, stepsize=integ.eps, inv_metric=integ.inv_metric.copy(),
        divergent=divergent, treedepth=depth, n_leapfrog=nleap, accept_stat=accept,
        warmup_divergent=int(warm_div),
    )


def chain_rng(seed, chain):
    return np.random.default_rng([int(seed) & ((1 << 64) - 1), int(chain)])


def sample_posterior(target, config=None, seed=0, inits=None, check_divergences=True):
    """Run ``config.chains`` independent chains of the sampler on ``target``.

    Parameters
    ----------
    target : object with ``dim`` and ``logp_grad``
    config : MCMCConfig
    seed : int
        Chain ``c`` uses a generator seeded with ``(seed, c)``.
    inits : sequence of arrays, optional
        Starting points; by default uniform on ``(-2, 2)`` per coordinate.

    Raises
    ------
    DivergenceError
        If more than ``config.max_divergent_fraction`` of post-warmup
        transitions diverged; the run is attached as ``exc.draws``.
    """
    if config is None:
        config = MCMCConfig()
    chains = []
    for c in range(config.chains):
        init = None if inits is None else inits[c]
        chains.append(run_chain(target, config, chain_rng(seed, c), init=init))
    run = SamplerRun(chains=chains, seed=int(seed), config=config)
    frac = run.divergent_fraction
    run.stats = {
        "divergent_fraction": frac,
        "stepsize": [c.stepsize for c in chains],
        "mean_treedepth": [float(c.treedepth.mean()) for c in chains],
        "mean_accept_stat": [float(c.accept_stat.mean()) for c in chains],
    }
    if check_divergences and frac > config.max_divergent_fraction:
        raise DivergenceError(
            f"{100 * frac:.1f}% of post-warmup transitions diverged; "
            "increase target_accept to force a smaller step size",
            draws=run,
        )
    return run
