"""
This module provides exact tabular oracles for the uncertainty-penalized lower bound.

A chain MDP on a 1D lattice has a true kernel P and a perturbed model kernel P_hat.
With u(s, a) set to the exact lattice W1 distance between P(.|s,a) and P_hat(.|s,a) and
lambda at least the Lipschitz constant of the true value function, the penalized model
return of any policy must not exceed its true return. `certify_lower_bound` checks that
claim, the per-pair bias bound it rests on, and the telescoping identity relating the
two returns, all by dynamic programming.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from errors import ContractViolation, PreconditionError

logger: logging.Logger = logging.getLogger("Wombet")

TOLERANCE: float = 1e-10


@dataclass
class ChainMdp:
    """A finite-horizon MDP on n lattice sites with spacing h and m actions."""

    h: float
    P: np.ndarray
    P_hat: np.ndarray
    r: np.ndarray
    H: int
    gamma: float = 1.0
    mu0: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        n, m, n2 = self.P.shape
        if n != n2 or self.P_hat.shape != self.P.shape or self.r.shape != (n, m):
            raise ContractViolation("kernel and reward shapes disagree")
        for name, kernel in (("P", self.P), ("P_hat", self.P_hat)):
            if np.any(kernel < 0.0) or np.max(np.abs(kernel.sum(axis=2) - 1.0)) > 1e-12:
                raise ContractViolation(f"{name} is not a stochastic kernel")
        if self.H < 1 or not self.h > 0.0 or not 0.0 < self.gamma <= 1.0:
            raise ContractViolation("need H >= 1, h > 0 and gamma in (0, 1]")
        if self.mu0 is None:
            self.mu0 = np.full(n, 1.0 / n)

    @property
    def n(self) -> int:
        return int(self.P.shape[0])

    @property
    def m(self) -> int:
        return int(self.P.shape[1])

    def uncertainty(self) -> np.ndarray:
        """Exact u(s, a) = W1(P(.|s,a), P_hat(.|s,a)), shape (n, m)."""
        return np.array(
            [[w1_1d(self.P[s, a], self.P_hat[s, a], self.h) for a in range(self.m)] for s in range(self.n)]
        )


def _moves(n: int, m: int) -> np.ndarray:
    return np.arange(m) - m // 2


def _clamp(index: int, n: int) -> int:
    return min(max(index, 0), n - 1)


def make_chain_mdp(
    n: int = 21,
    m: int = 3,
    H: int = 10,
    seed: int = 0,
    eps_max: float = 0.5,
    h: float = 1.0,
    gamma: float = 1.0,
) -> ChainMdp:
    """
    A noisy chain with random rewards and a heterogeneously perturbed model kernel.

    Action a moves by a - m // 2 sites with probability 0.8 and slips one site either way
    with probability 0.1 each, clamped at the ends. P_hat mixes each P(.|s,a) with a copy
    shifted one site left or right, at a strength drawn uniformly from [0, eps_max].

    Args:
        n (int, optional): Lattice sites. Defaults to 21.
        m (int, optional): Actions. Defaults to 3.
        H (int, optional): Horizon. Defaults to 10.
        seed (int, optional): Seed of rewards and perturbations. Defaults to 0.
        eps_max (float, optional): Largest mixing strength. Defaults to 0.5.
        h (float, optional): Lattice spacing. Defaults to 1.0.
        gamma (float, optional): Discount. Defaults to 1.0.

    Returns:
        ChainMdp: The instance.
    """
    rng = np.random.default_rng(seed)
    P = np.zeros((n, m, n))
    for s in range(n):
        for a, move in enumerate(_moves(n, m)):
            target = s + int(move)
            P[s, a, _clamp(target, n)] += 0.8
            P[s, a, _clamp(target - 1, n)] += 0.1
            P[s, a, _clamp(target + 1, n)] += 0.1
    P_hat = np.zeros_like(P)
    strengths = rng.uniform(0.0, eps_max, size=(n, m))
    directions = rng.choice([-1, 1], size=(n, m))
    for s in range(n):
        for a in range(m):
            shifted = np.zeros(n)
            for s_next in range(n):
                shifted[_clamp(s_next + int(directions[s, a]), n)] += P[s, a, s_next]
            P_hat[s, a] = (1.0 - strengths[s, a]) * P[s, a] + strengths[s, a] * shifted
    return ChainMdp(h=h, P=P, P_hat=P_hat, r=rng.uniform(0.0, 1.0, size=(n, m)), H=H, gamma=gamma)


def adversarial_instance(n: int = 21, H: int = 10, cliff: int = 11, strength: float = 0.9) -> Tuple[ChainMdp, np.ndarray]:
    """
    A deterministic chain where the model is wrong exactly at the steepest value step.

    Reward is 1 on sites >= `cliff` and 0 elsewhere; the policy always stays and the
    episode starts one site left of the cliff. The model lets "stay" at that site jump
    over the cliff with probability `strength`, so a penalty of half the Lipschitz
    constant is too weak to cancel the optimism.

    Returns:
        Tuple[ChainMdp, np.ndarray]: The instance and the (n, 3) always-stay policy.
    """
    P = np.zeros((n, 3, n))
    for s in range(n):
        for a, move in enumerate((-1, 0, 1)):
            P[s, a, _clamp(s + move, n)] = 1.0
    P_hat = P.copy()
    start = cliff - 1
    P_hat[start, 1] = 0.0
    P_hat[start, 1, start] = 1.0 - strength
    P_hat[start, 1, cliff] = strength
    reward = np.repeat((np.arange(n) >= cliff).astype(np.float64)[:, None], 3, axis=1)
    mu0 = np.zeros(n)
    mu0[start] = 1.0
    policy = np.zeros((n, 3))
    policy[:, 1] = 1.0
    return ChainMdp(h=1.0, P=P, P_hat=P_hat, r=reward, H=H, mu0=mu0), policy


def _policy_at(policy: np.ndarray, t: int) -> np.ndarray:
    return policy[t] if policy.ndim == 3 else policy


def value_dp(
    mdp: ChainMdp,
    policy: np.ndarray,
    kernel: Optional[np.ndarray] = None,
    reward: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Exact finite-horizon policy evaluation by backward induction.

    Args:
        mdp (ChainMdp): The instance.
        policy (np.ndarray): (n, m) stationary or (H, n, m) time-indexed action distributions.
        kernel (Optional[np.ndarray], optional): Transition kernel; defaults to the true P.
        reward (Optional[np.ndarray], optional): Reward table; defaults to mdp.r.

    Returns:
        np.ndarray: V of shape (H + 1, n); V[t] is the value with H - t steps to go, V[H] = 0.
    """
    kernel = mdp.P if kernel is None else kernel
    reward = mdp.r if reward is None else reward
    values = np.zeros((mdp.H + 1, mdp.n))
    for t in range(mdp.H - 1, -1, -1):
        q = reward + mdp.gamma * kernel @ values[t + 1]
        values[t] = np.sum(_policy_at(policy, t) * q, axis=1)
    return values


def policy_return(mdp: ChainMdp, values: np.ndarray) -> float:
    """J = mu0 . V[0]."""
    return float(mdp.mu0 @ values[0])  # type: ignore[operator]


def w1_1d(p: np.ndarray, q: np.ndarray, h: float) -> float:
    """
    Exact Wasserstein-1 distance of two distributions on the same 1D lattice.

    Args:
        p (np.ndarray): Probability vector.
        q (np.ndarray): Probability vector of the same length.
        h (float): Lattice spacing.

    Returns:
        float: h * sum_i |CDF_p(i) - CDF_q(i)|.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise PreconditionError("distributions live on different lattices")
    for dist in (p, q):
        if np.any(dist < 0.0) or abs(dist.sum() - 1.0) > 1e-9:
            raise PreconditionError("input is not a normalized distribution")
    return float(h * np.sum(np.abs(np.cumsum(p) - np.cumsum(q))))


def lipschitz_const(values: np.ndarray, h: float) -> float:
    """
    Largest |V(s1) - V(s2)| / |s1 - s2| over lattice pairs, maximized over steps.

    Args:
        values (np.ndarray): (n,) or (T, n) value table.
        h (float): Lattice spacing.

    Returns:
        float: L_v.
    """
    table = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if not np.all(np.isfinite(table)):
        raise PreconditionError("value table must be finite")
    n = table.shape[1]
    if n < 2:
        return 0.0
    index = np.arange(n)
    distance = h * np.abs(index[:, None] - index[None, :])
    np.fill_diagonal(distance, np.inf)
    slopes = np.abs(table[:, :, None] - table[:, None, :]) / distance
    return float(slopes.max())


def model_bias(mdp: ChainMdp, values: np.ndarray) -> np.ndarray:
    """
    One-step model bias G_t(s, a) = E_P[V_{t+1}(s')] - E_P_hat[V_{t+1}(s')].

    Returns:
        np.ndarray: (H, n, m).
    """
    return np.stack([(mdp.P - mdp.P_hat) @ values[t + 1] for t in range(mdp.H)])


def occupancy(mdp: ChainMdp, policy: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """State-action visitation d_t(s, a) under `kernel` from mu0, shape (H, n, m)."""
    states = np.asarray(mdp.mu0, dtype=np.float64)
    result: List[np.ndarray] = []
    for t in range(mdp.H):
        joint = states[:, None] * _policy_at(policy, t)
        result.append(joint)
        states = np.einsum("sa,sap->p", joint, kernel)
    return np.stack(result)


@dataclass
class PolicyCertificate:
    """Bound checks for one policy."""

    true_return: float
    model_return: float
    penalized_return: float
    lipschitz: float
    penalty: float
    bias_margin: float
    bound_margin: float
    telescoping_error: float


@dataclass
class CertificationReport:
    """Aggregate of `certify_lower_bound`."""

    n_policies: int
    lam_scale: float
    bias_violations: int = 0
    bound_violations: int = 0
    telescoping_violations: int = 0
    worst_bias_margin: float = np.inf
    worst_bound_margin: float = np.inf
    max_telescoping_error: float = 0.0
    certificates: List[PolicyCertificate] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.bias_violations == 0 and self.bound_violations == 0 and self.telescoping_violations == 0

    def summary(self) -> str:
        return (
            f"policies={self.n_policies} lambda=L_v*{self.lam_scale:g} "
            f"bias_violations={self.bias_violations} bound_violations={self.bound_violations} "
            f"telescoping_violations={self.telescoping_violations} "
            f"worst_bias_margin={self.worst_bias_margin:.3e} worst_bound_margin={self.worst_bound_margin:.3e} "
            f"max_telescoping_error={self.max_telescoping_error:.3e}"
        )


def certify_policy(mdp: ChainMdp, policy: np.ndarray, u: np.ndarray, lam_scale: float = 1.0) -> PolicyCertificate:
    """
    Check the per-pair bias bound, the penalized lower bound and the telescoping identity.

    Args:
        mdp (ChainMdp): The instance.
        policy (np.ndarray): Action distributions.
        u (np.ndarray): (n, m) uncertainty, the exact W1 of the kernels.
        lam_scale (float, optional): lambda = lam_scale * L_v. Defaults to 1.0.

    Returns:
        PolicyCertificate: Returns, margins and the identity error.
    """
    true_values = value_dp(mdp, policy)
    lipschitz = lipschitz_const(true_values, mdp.h)
    penalty = lam_scale * lipschitz
    true_return = policy_return(mdp, true_values)
    model_return = policy_return(mdp, value_dp(mdp, policy, kernel=mdp.P_hat))
    penalized_return = policy_return(mdp, value_dp(mdp, policy, kernel=mdp.P_hat, reward=mdp.r - penalty * u))

    bias = model_bias(mdp, true_values)
    bias_margin = float(np.min(lipschitz * u[None] - np.abs(bias)))
    visits = occupancy(mdp, policy, mdp.P_hat)
    weights = mdp.gamma ** (np.arange(mdp.H) + 1.0)
    telescoped = float(np.sum(weights[:, None, None] * visits * bias))
    return PolicyCertificate(
        true_return=true_return,
        model_return=model_return,
        penalized_return=penalized_return,
        lipschitz=lipschitz,
        penalty=penalty,
        bias_margin=bias_margin,
        bound_margin=true_return - penalized_return,
        telescoping_error=abs((true_return - model_return) - telescoped),
    )


def random_policies(mdp: ChainMdp, count: int, seed: int) -> List[np.ndarray]:
    """Stationary policies with Dirichlet(1) action distributions per state."""
    rng = np.random.default_rng(seed)
    return [rng.dirichlet(np.ones(mdp.m), size=mdp.n) for _ in range(count)]


def certify_lower_bound(
    mdp: ChainMdp,
    n_policies: int = 100,
    seed: int = 0,
    lam_scale: float = 1.0,
    policies: Optional[List[np.ndarray]] = None,
) -> CertificationReport:
    """
    Certify the uncertainty-penalized lower bound over many policies.

    Args:
        mdp (ChainMdp): The instance.
        n_policies (int, optional): Random policies to draw when `policies` is None. Defaults to 100.
        seed (int, optional): Policy seed. Defaults to 0.
        lam_scale (float, optional): lambda as a multiple of each policy's L_v. Defaults to 1.0.
        policies (Optional[List[np.ndarray]], optional): Explicit policies to test.

    Returns:
        CertificationReport: Violation counts and worst margins.
    """
    tested = policies if policies is not None else random_policies(mdp, n_policies, seed)
    u = mdp.uncertainty()
    report = CertificationReport(n_policies=len(tested), lam_scale=lam_scale)
    for policy in tested:
        cert = certify_policy(mdp, policy, u, lam_scale)
        report.certificates.append(cert)
        report.bias_violations += int(cert.bias_margin < -TOLERANCE)
        report.bound_violations += int(cert.bound_margin < -TOLERANCE)
        report.telescoping_violations += int(cert.telescoping_error > TOLERANCE)
        report.worst_bias_margin = min(report.worst_bias_margin, cert.bias_margin)
        report.worst_bound_margin = min(report.worst_bound_margin, cert.bound_margin)
        report.max_telescoping_error = max(report.max_telescoping_error, cert.telescoping_error)
    logger.info("Certification: %s", report.summary())
    return report
