"""No-U-turn sampler with multinomial trajectory sampling and a dense metric.

The transition follows the multinomial variant with the generalised
no-U-turn criterion, including the two extra checks across the boundary of
every merged pair of subtrees. Step size is tuned by dual averaging during
warmup; the inverse metric is supplied by the caller (typically a Laplace
approximation) and optionally re-estimated in Stan-style expanding windows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_DELTA_H = 1000.0
MAX_DEPTH = 10


@dataclass
class _Point:
    theta: np.ndarray
    p: np.ndarray
    logp: float
    grad: np.ndarray


@dataclass
class _Tree:
    beg: _Point
    end: _Point
    p_sharp_beg: np.ndarray
    p_sharp_end: np.ndarray
    rho: np.ndarray
    proposal: _Point
    log_sum_w: float
    valid: bool


@dataclass
class DualAveraging:
    """Nesterov dual averaging of ``log(step)`` towards a target acceptance."""

    mu: float
    delta: float = 0.8
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    counter: int = 0
    s_bar: float = 0.0
    x_bar: float = 0.0

    def update(self, accept):
        self.counter += 1
        accept = min(1.0, accept)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept)
        x = self.mu - self.s_bar * np.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return float(np.exp(x))

    def final(self):
        return float(np.exp(self.x_bar))


class NUTS:
    """Multinomial NUTS on a log density.

    Parameters
    ----------
    logp_and_grad : callable
        ``theta -> (float, ndarray)``.
    inv_metric : ndarray (dim, dim)
        Inverse mass matrix (approximate posterior covariance).
    step_size : float
    max_depth : int
    """

    def __init__(self, logp_and_grad, inv_metric, step_size=0.5, max_depth=MAX_DEPTH):
        self.logp_and_grad = logp_and_grad
        self.step_size = float(step_size)
        self.max_depth = int(max_depth)
        self.set_metric(inv_metric)

    def set_metric(self, inv_metric):
        inv_metric = np.asarray(inv_metric, dtype=float)
        self.inv_metric = 0.5 * (inv_metric + inv_metric.T)
        # momentum ~ N(0, M) with M = inv_metric^{-1}; p = L^{-T} z, L L^T = inv_metric
        self._chol = np.linalg.cholesky(self.inv_metric)

    def _sample_momentum(self, rng):
        z = rng.standard_normal(self._chol.shape[0])
        return np.linalg.solve(self._chol.T, z)

    def _kinetic(self, p):
        return 0.5 * p @ self.inv_metric @ p

    def _leapfrog(self, pt, eps):
        p = pt.p + 0.5 * eps * pt.grad
        theta = pt.theta + eps * (self.inv_metric @ p)
        logp, grad = self.logp_and_grad(theta)
        p = p + 0.5 * eps * grad
        return _Point(theta, p, logp, grad)

    def _hamiltonian(self, pt):
        if not np.isfinite(pt.logp):
            return np.inf
        return -pt.logp + self._kinetic(pt.p)

    @staticmethod
    def _criterion(ps_a, ps_b, rho):
        return ps_a @ rho > 0 and ps_b @ rho > 0

    def _build_tree(self, pt, depth, eps, h0, rng, stats):
        if depth == 0:
            new = self._leapfrog(pt, eps)
            h = self._hamiltonian(new)
            if not np.isfinite(h):
                h = np.inf
            stats["n_leapfrog"] += 1
            stats["sum_accept"] += min(1.0, np.exp(h0 - h)) if np.isfinite(h) else 0.0
            if h - h0 > MAX_DELTA_H:
                stats["divergent"] = True
                return _Tree(new, new, None, None, None, new, -np.inf, False)
            ps = self.inv_metric @ new.p
            return _Tree(new, new, ps, ps, new.p.copy(), new, h0 - h, True)

        left = self._build_tree(pt, depth - 1, eps, h0, rng, stats)
        if not left.valid:
            return left
        right = self._build_tree(left.end, depth - 1, eps, h0, rng, stats)
        if not right.valid:
            return right
        log_sum_w = np.logaddexp(left.log_sum_w, right.log_sum_w)
        if np.log(rng.random()) < right.log_sum_w - log_sum_w:
            proposal = right.proposal
        else:
            proposal = left.proposal
        rho = left.rho + right.rho
        ok = self._criterion(left.p_sharp_beg, right.p_sharp_end, rho)
        ok = ok and self._criterion(left.p_sharp_beg, right.p_sharp_beg, left.rho + right.beg.p)
        ok = ok and self._criterion(left.p_sharp_end, right.p_sharp_end, right.rho + left.end.p)
        return _Tree(left.beg, right.end, left.p_sharp_beg, right.p_sharp_end, rho,
                     proposal, log_sum_w, ok)

    def transition(self, theta, logp, grad, rng):
        """One NUTS transition from ``theta``; returns (point, stats)."""
        p0 = self._sample_momentum(rng)
        start = _Point(theta, p0, logp, grad)
        h0 = self._hamiltonian(start)
        minus = plus = start
        ps_minus = ps_plus = self.inv_metric @ p0
        rho = p0.copy()
        sample = start
        log_sum_w = 0.0
        stats = dict(n_leapfrog=0, sum_accept=0.0, divergent=False)
        depth = 0
        while depth < self.max_depth:
            forward = rng.random() > 0.5
            eps = self.step_size if forward else -self.step_size
            edge = plus if forward else minus
            sub = self._build_tree(edge, depth, eps, h0, rng, stats)
            if not sub.valid:
                break
            depth += 1
            if sub.log_sum_w > log_sum_w or np.log(rng.random()) < sub.log_sum_w - log_sum_w:
                sample = sub.proposal
            log_sum_w = np.logaddexp(log_sum_w, sub.log_sum_w)
            rho_old = rho
            rho = rho_old + sub.rho
            if forward:
                ok = self._criterion(ps_minus, sub.p_sharp_end, rho)
                ok = ok and self._criterion(ps_minus, sub.p_sharp_beg, rho_old + sub.beg.p)
                ok = ok and self._criterion(ps_plus, sub.p_sharp_end, sub.rho + plus.p)
                plus, ps_plus = sub.end, sub.p_sharp_end
            else:
                ok = self._criterion(sub.p_sharp_end, ps_plus, rho)
                ok = ok and self._criterion(sub.p_sharp_beg, ps_plus, rho_old + sub.beg.p)
                ok = ok and self._criterion(sub.p_sharp_end, ps_minus, sub.rho + minus.p)
                minus, ps_minus = sub.end, sub.p_sharp_end
            if not ok:
                break
        n_lf = max(stats["n_leapfrog"], 1)
        info = dict(
            accept_stat=stats["sum_accept"] / n_lf,
            n_leapfrog=stats["n_leapfrog"],
            tree_depth=depth,
            divergent=stats["divergent"],
            energy=self._hamiltonian(sample),
            step_size=self.step_size,
        )
        return sample, info

    def find_reasonable_step(self, theta, logp, grad, rng):
        """Double or halve the step until one leapfrog crosses acceptance 0.8."""
        target = np.log(0.8)
        eps = self.step_size
        p0 = self._sample_momentum(rng)
        start = _Point(theta, p0, logp, grad)
        h0 = self._hamiltonian(start)

        def delta_h(step):
            new = self._leapfrog(start, step)
            h = self._hamiltonian(new)
            return h0 - h if np.isfinite(h) else -np.inf

        dh = delta_h(eps)
        direction = 1 if dh > target else -1
        for _ in range(50):
            eps = eps * 2.0 if direction == 1 else eps * 0.5
            dh = delta_h(eps)
            if direction == 1 and not dh > target:
                break
            if direction == -1 and not dh < target:
                break
        self.step_size = eps
        return eps


def _window_ends(n_warmup, init_buffer=75, term_buffer=50, base_window=25):
    """Stan-style metric adaptation window end points (iteration indices)."""
    if n_warmup < 20:
        return []
    if init_buffer + base_window + term_buffer > n_warmup:
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base_window = n_warmup - init_buffer - term_buffer
    ends = []
    start = init_buffer
    width = base_window
    last = n_warmup - term_buffer
    while start < last:
        end = start + width
        if end + 2 * width > last:
            end = last
        ends.append(end)
        start = end
        width *= 2
    return ends


def run_chain(logp_and_grad, theta0, inv_metric, n_warmup, n_keep, rng, thin=1,
              adapt_metric=False, target_accept=0.8, max_depth=MAX_DEPTH):
    """Warm up and sample one chain.

    Returns
    -------
    draws : ndarray (n_keep, dim)
    info : dict of ndarray
        Per-kept-draw sampler statistics plus the final step size.
    """
    sampler = NUTS(logp_and_grad, inv_metric, step_size=1.0, max_depth=max_depth)
    theta = np.asarray(theta0, dtype=float).copy()
    logp, grad = logp_and_grad(theta)
    if not np.isfinite(logp):
        raise FloatingPointError("initial point has non-finite log density")
    sampler.find_reasonable_step(theta, logp, grad, rng)
    da = DualAveraging(mu=np.log(10.0 * sampler.step_size), delta=target_accept)
    ends = set(_window_ends(n_warmup)) if adapt_metric else set()
    window = []
    win_start = 75 if adapt_metric else None
    for it in range(n_warmup):
        pt, info = sampler.transition(theta, logp, grad, rng)
        theta, logp, grad = pt.theta, pt.logp, pt.grad
        sampler.step_size = da.update(info["accept_stat"])
        if adapt_metric and it >= win_start:
            window.append(theta)
            if it + 1 in ends:
                x = np.array(window)
                k = x.shape[0]
                cov = np.cov(x, rowvar=False)
                shrunk = (k / (k + 5.0)) * cov + 1e-3 * (5.0 / (k + 5.0)) * np.eye(x.shape[1])
                sampler.set_metric(shrunk)
                sampler.find_reasonable_step(theta, logp, grad, rng)
                da = DualAveraging(mu=np.log(10.0 * sampler.step_size), delta=target_accept)
                window = []
    if n_warmup > 0:
        sampler.step_size = da.final()
    dim = theta.shape[0]
    draws = np.empty((n_keep, dim))
    keys = ("accept_stat", "n_leapfrog", "tree_depth", "divergent", "energy")
    stats = {k: np.empty(n_keep) for k in keys}
    for k in range(n_keep):
        for _ in range(thin):
            pt, info = sampler.transition(theta, logp, grad, rng)
            theta, logp, grad = pt.theta, pt.logp, pt.grad
        draws[k] = theta
        for key in keys:
            stats[key][k] = info[key]
    stats["step_size"] = sampler.step_size
    stats["inv_metric"] = sampler.inv_metric
    return draws, stats
