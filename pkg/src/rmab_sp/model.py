"""Finite-horizon restless bandit instances and their mean-field dynamics.

Conventions used throughout the package:

* a state vector ``x`` has shape ``(S,)`` and holds the fraction of arms in
  each state;
* an action vector ``y`` has shape ``(S, 2)``; ``y[s, a]`` is the fraction of
  arms in state ``s`` receiving action ``a`` (1 = pull, 0 = idle);
* kernels are stored as ``kernels[h - 1, a, s, :] = P_h(. | s, a)`` for
  ``h = 1 .. H-1`` and rewards as ``rewards[h - 1, s, a]`` for ``h = 1 .. H``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROW_SUM_TOL = 5e-3
SIMPLEX_TOL = 1e-9


class InstanceError(ValueError):
    """Raised for malformed instances, states or actions."""


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream identified by ``(seed, *keys)``.

    Streams with different keys are statistically independent, and a stream
    is reproducible from its keys alone, so work can be split and reordered
    without changing any draw.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def normalize_rows(kernel: np.ndarray, tol: float = ROW_SUM_TOL) -> np.ndarray:
    """Rescale kernel rows to sum to one; reject rows that are off by more than ``tol``."""
    kernel = np.asarray(kernel, dtype=float)
    if np.any(kernel < 0) or not np.all(np.isfinite(kernel)):
        raise InstanceError("kernel entries must be finite and nonnegative")
    sums = kernel.sum(axis=-1, keepdims=True)
    worst = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
    if worst > tol:
        raise InstanceError(f"kernel row sum deviates from 1 by {worst:.3g} (> {tol})")
    return kernel / sums


@dataclass(frozen=True, eq=False)
class RmabInstance:
    """Homogeneous-arm restless bandit with a per-stage pull budget ``alpha``."""

    alpha: float
    kernels: np.ndarray
    rewards: np.ndarray
    x_ini: np.ndarray
    reward_offset: float = 0.0
    name: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        kernels = np.asarray(self.kernels, dtype=float)
        rewards = np.asarray(self.rewards, dtype=float)
        x_ini = np.asarray(self.x_ini, dtype=float)
        if rewards.ndim != 3 or rewards.shape[2] != 2:
            raise InstanceError("rewards must have shape (H, S, 2)")
        H, S = rewards.shape[:2]
        if H < 1 or S < 1:
            raise InstanceError("need H >= 1 and S >= 1")
        if kernels.shape != (H - 1, 2, S, S):
            raise InstanceError(f"kernels must have shape {(H - 1, 2, S, S)}, got {kernels.shape}")
        if not 0.0 < self.alpha < 1.0:
            raise InstanceError("alpha must lie in (0, 1)")
        if np.any(rewards < 0) or not np.all(np.isfinite(rewards)):
            raise InstanceError("rewards must be finite and nonnegative (shift them first)")
        check_state(x_ini)
        if kernels.size:
            kernels = normalize_rows(kernels)
        for name, arr in (("kernels", kernels), ("rewards", rewards), ("x_ini", x_ini)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def S(self) -> int:
        return self.rewards.shape[1]

    @property
    def H(self) -> int:
        return self.rewards.shape[0]

    @property
    def r_max(self) -> float:
        return float(self.rewards.max())

    def kernel(self, h: int) -> np.ndarray:
        """``P_h`` as an array indexed ``[a, s, s']``."""
        if not 1 <= h < self.H:
            raise InstanceError(f"no kernel for stage {h}")
        return self.kernels[h - 1]

    def reward(self, h: int) -> np.ndarray:
        return self.rewards[h - 1]

    def unshift(self, value: float) -> float:
        """Convert a per-arm total reward back to the original reward scale."""
        return value - self.H * self.reward_offset

    def to_dict(self) -> dict:
        return {
            "S": self.S,
            "H": self.H,
            "alpha": self.alpha,
            "kernels": [self.kernels[h, a].tolist() for h in range(self.H - 1) for a in (0, 1)],
            "rewards": self.rewards.tolist(),
            "x_ini": self.x_ini.tolist(),
            "reward_offset": self.reward_offset,
            "name": self.name,
        }


def check_state(x, N: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or np.any(x < -SIMPLEX_TOL) or abs(x.sum() - 1.0) > 1e-8:
        raise InstanceError("state must be a nonnegative vector summing to 1")
    if N is not None and np.max(np.abs(x * N - np.round(x * N))) > 1e-6:
        raise InstanceError(f"state is not a multiple of 1/{N}")
    return x


def check_action(y, x, alpha: float, tol: float = 1e-8) -> np.ndarray:
    """Validate ``y`` against state ``x``: nonnegative, consistent with ``x``, budget ``alpha``."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if y.shape != (x.size, 2):
        raise InstanceError("action must have shape (S, 2)")
    if np.any(y < -tol):
        raise InstanceError("action has negative entries")
    if np.max(np.abs(y.sum(axis=1) - x)) > tol:
        raise InstanceError("action is inconsistent with the state")
    if abs(y[:, 1].sum() - alpha) > tol:
        raise InstanceError("action violates the pull budget")
    return y


def from_dict(data: dict) -> RmabInstance:
    """Build an instance from the JSON schema ``{S, H, alpha, kernels, rewards, x_ini}``.

    ``kernels`` lists the ``S x S`` matrices in (stage, action) order, so entry
    ``2 * (h - 1) + a`` is ``P_h(. | ., a)``.  A trailing pair for stage ``H``
    is accepted and ignored.
    """
    try:
        S, H, alpha = int(data["S"]), int(data["H"]), float(data["alpha"])
        kernels = np.asarray(data["kernels"], dtype=float)
        rewards = np.asarray(data["rewards"], dtype=float)
        x_ini = np.asarray(data["x_ini"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise InstanceError(f"bad instance document: {exc}") from exc
    if kernels.ndim != 3 or kernels.shape[1:] != (S, S):
        raise InstanceError("kernels must be a list of S x S matrices")
    if kernels.shape[0] == 2 * H:
        kernels = kernels[: 2 * (H - 1)]
    if kernels.shape[0] != 2 * (H - 1):
        raise InstanceError(f"expected {2 * (H - 1)} or {2 * H} kernel matrices, got {kernels.shape[0]}")
    if rewards.shape != (H, S, 2):
        raise InstanceError(f"rewards must have shape {(H, S, 2)}")
    if x_ini.shape != (S,):
        raise InstanceError("x_ini must have length S")
    offset = float(data.get("reward_offset", 0.0))
    if rewards.min() < 0:
        # a common shift changes every policy's value by H * shift and nothing else
        shift = -float(rewards.min())
        rewards = rewards + shift
        offset += shift
    return RmabInstance(
        alpha=alpha,
        kernels=kernels.reshape(H - 1, 2, S, S),
        rewards=rewards,
        x_ini=x_ini,
        reward_offset=offset,
        name=str(data.get("name", "custom")),
    )


def load_instance(path: str | Path) -> RmabInstance:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InstanceError(f"cannot read instance {path}: {exc}") from exc
    return from_dict(data)


def drift(instance: RmabInstance, h: int, y) -> np.ndarray:
    """Expected next state fraction ``sum_{s,a} y[s,a] P_h(. | s,a)``."""
    return np.einsum("sa,ast->t", np.asarray(y, dtype=float), instance.kernel(h))


def stage_covariances(instance: RmabInstance, h: int) -> np.ndarray:
    """One-step covariance of a single arm, indexed ``[s, a, i, j]``."""
    P = instance.kernel(h).transpose(1, 0, 2)  # [s, a, s']
    outer = -P[..., :, None] * P[..., None, :]
    idx = np.arange(instance.S)
    outer[..., idx, idx] += P
    return outer


@dataclass(frozen=True)
class CovarianceSpec:
    """Per-arm covariances ``sigma[h-1, s, a]`` and aggregated ``gamma[h-1]``."""

    sigma: np.ndarray
    gamma: np.ndarray


def covariances(instance: RmabInstance, y_star) -> CovarianceSpec:
    """Transition covariances around the fluid plan ``y_star`` of shape ``(H, S, 2)``."""
    y_star = np.asarray(y_star, dtype=float)
    H, S = instance.H, instance.S
    sigma = np.zeros((max(H - 1, 0), S, 2, S, S))
    gamma = np.zeros((max(H - 1, 0), S, S))
    for h in range(1, H):
        sigma[h - 1] = stage_covariances(instance, h)
        gamma[h - 1] = np.einsum("sa,saij->ij", y_star[h - 1], sigma[h - 1])
    return CovarianceSpec(sigma=sigma, gamma=gamma)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based, O(S log S))."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def random_instance(seed: int, S: int, H: int, alpha: float = 0.4, sparsity: str = "dense") -> RmabInstance:
    """Random instance with i.i.d. Exp(1) draws.

    Kernel rows and ``x_ini`` are normalized draws; rewards are raw draws.  With
    ``sparsity="half"`` each kernel row has ``S // 2`` entries zeroed at random
    before normalization.
    """
    if sparsity not in ("dense", "half"):
        raise InstanceError("sparsity must be 'dense' or 'half'")
    if sparsity == "half" and S < 2:
        raise InstanceError("half-sparse kernels need S >= 2")
    rng = rng_stream(seed, S, H)
    kernels = rng.exponential(size=(H - 1, 2, S, S))
    if sparsity == "half":
        n_zero = S // 2
        order = np.argsort(rng.random(size=kernels.shape), axis=-1)
        mask = np.ones_like(kernels, dtype=bool)
        np.put_along_axis(mask, order[..., :n_zero], False, axis=-1)
        kernels = kernels * mask
    kernels /= kernels.sum(axis=-1, keepdims=True)
    rewards = rng.exponential(size=(H, S, 2))
    x_ini = rng.exponential(size=S)
    x_ini /= x_ini.sum()
    return RmabInstance(alpha=alpha, kernels=kernels, rewards=rewards, x_ini=x_ini,
                        name=f"random-{sparsity}-S{S}-H{H}-seed{seed}")


_MAINT_P0 = """
0.5415 0.4585 0 0 0 0 0 0 0 0
0.5471 0.2265 0.2265 0 0 0 0 0 0 0
0.7067 0 0.1467 0.1467 0 0 0 0 0 0
0.8578 0 0 0.0711 0.0711 0 0 0 0 0
0.9214 0 0 0 0.0786 0 0 0 0 0
0 0 0 0 0 0.6396 0.3604 0 0 0
0 0 0 0 0 0.5694 0.2153 0.2153 0 0
0 0 0 0 0 0.6453 0 0.1773 0.1773 0
0 0 0 0 0 0.7007 0 0 0.1496 0.1496
0 0 0 0 0 0.7097 0 0 0 0.2903
"""
_MAINT_P1 = """
1 0 0 0 0 0 0 0 0 0
0.7337 0.2663 0 0 0 0 0 0 0 0
0.7265 0 0.2735 0 0 0 0 0 0 0
0.6146 0 0 0.3854 0 0 0 0 0 0
0.6054 0 0 0 0.3946 0 0 0 0 0
0 0 0 0 0 1 0 0 0 0
0 0 0 0 0 0.6037 0.3963 0 0 0
0 0 0 0 0 0.6004 0 0.3996 0 0
0 0 0 0 0 0.7263 0 0 0.2737 0
0 0 0 0 0 0.6138 0 0 0 0.3862
"""
_MAINT_R0 = [0, -5.4707, -7.0669, -8.5784, -9.2141, 0, -5.6942, -6.4534, -7.0074, -7.097]
_MAINT_R1 = [-1.9963, -2.085, -2.035, -2.0661, -1.9581, -1.994, -1.9647, -2.2478, -2.0468, -2.2821]


def _matrix(text: str) -> np.ndarray:
    return np.array([[float(v) for v in line.split()] for line in text.strip().splitlines()])


def _two_state() -> RmabInstance:
    kernels = np.zeros((1, 2, 2, 2))
    kernels[0, 1, 0] = [0.2, 0.8]
    kernels[0, 0, 0] = [0.9, 0.1]
    kernels[0, 1, 1] = [0.7, 0.3]
    kernels[0, 0, 1] = [0.25, 0.75]
    rewards = np.zeros((2, 2, 2))
    rewards[:, 0, 1] = 1.0
    return RmabInstance(alpha=0.5, kernels=kernels, rewards=rewards, x_ini=np.array([0.5, 0.5]),
                        name="two-state")


def _maintenance(uniform_pull_cost: bool) -> RmabInstance:
    H, S = 5, 10
    raw0, raw1 = _matrix(_MAINT_P0), _matrix(_MAINT_P1)
    correction = float(max(np.abs(raw0.sum(axis=1) - 1).max(), np.abs(raw1.sum(axis=1) - 1).max()))
    p0, p1 = normalize_rows(raw0), normalize_rows(raw1)
    kernels = np.broadcast_to(np.stack([p0, p1]), (H - 1, 2, S, S)).copy()
    r0 = np.array(_MAINT_R0)
    r1 = np.full(S, -2.0) if uniform_pull_cost else np.array(_MAINT_R1)
    raw = np.stack([r0, r1], axis=1)
    offset = -float(raw.min())
    rewards = np.broadcast_to(raw + offset, (H, S, 2)).copy()
    x_ini = np.zeros(S)
    x_ini[[1, 6]] = 0.5
    name = "maintenance-uniform" if uniform_pull_cost else "maintenance"
    return RmabInstance(alpha=0.4, kernels=kernels, rewards=rewards, x_ini=x_ini,
                        reward_offset=offset, name=name, meta={"max_row_correction": correction})


BUILTINS = {
    "two-state": _two_state,
    "maintenance": lambda: _maintenance(False),
    "maintenance-uniform": lambda: _maintenance(True),
}


def builtin(name: str) -> RmabInstance:
    """Named example instance: ``two-state``, ``maintenance`` or ``maintenance-uniform``."""
    try:
        return BUILTINS[name]()
    except KeyError:
        raise InstanceError(f"unknown builtin {name!r}; choose from {sorted(BUILTINS)}") from None


def integer_state(x, N: int) -> np.ndarray:
    """Arm counts closest to ``N * x`` with the exact total ``N`` (largest remainder)."""
    x = check_state(x)
    raw = np.clip(x, 0, None) * N
    counts = np.floor(raw + 1e-9).astype(np.int64)
    short = N - counts.sum()
    if short > 0:
        counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    return counts


def sample_counts(kernel: np.ndarray, counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Next-state counts when ``counts[s, a]`` arms in state ``s`` take action ``a``."""
    S = counts.shape[0]
    out = np.zeros(S, dtype=np.int64)
    for s in range(S):
        for a in (0, 1):
            n = int(counts[s, a])
            if n:
                out += rng.multinomial(n, kernel[a, s])
    return out


def sample_transition(instance: RmabInstance, h: int, y, N: int, rng: np.random.Generator) -> np.ndarray:
    """Sample ``X_{h+1}`` given the integer-scaled action ``y`` on ``N`` arms."""
    counts = np.rint(np.asarray(y, dtype=float) * N).astype(np.int64)
    if np.max(np.abs(counts - np.asarray(y) * N)) > 1e-6:
        raise InstanceError(f"action is not a multiple of 1/{N}")
    return sample_counts(instance.kernel(h), counts, rng) / N


def arm_step(cum_kernel: np.ndarray, states: np.ndarray, counts: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Move labelled arms one stage by inverse CDF, one uniform per arm.

    Within each state the ``counts[s, 1]`` lowest-labelled arms are pulled.
    Two policies fed the same uniforms then move an arm identically whenever
    they agree on its state and action, which keeps paired comparisons tight
    while each arm's law stays exact.
    """
    states = np.asarray(states)
    S = counts.shape[0]
    n_x = np.bincount(states, minlength=S)
    order = np.argsort(states, kind="stable")
    start = np.concatenate(([0], np.cumsum(n_x)[:-1]))
    rank = np.empty(states.size, dtype=np.int64)
    rank[order] = np.arange(states.size) - start[states[order]]
    act = (rank < counts[states, 1]).astype(np.int64)
    return (uniforms[:, None] > cum_kernel[act, states]).sum(axis=1)


def cumulative_kernel(kernel: np.ndarray) -> np.ndarray:
    cum = np.cumsum(kernel, axis=-1)
    cum[..., -1] = 1.0
    return cum


@dataclass
class EvalReport:
    """Monte Carlo summary of a per-arm value estimate (95% normal interval)."""

    mean: float
    ci: float
    reps: int
    N: int | None
    seed: int | None
    stage_deviation: np.ndarray | None = None
    samples: np.ndarray | None = field(default=None, repr=False)
    notes: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples, N=None, seed=None, **kw) -> "EvalReport":
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        se = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return cls(mean=float(samples.mean()), ci=1.96 * se, reps=n, N=N, seed=seed, samples=samples, **kw)

    def to_dict(self) -> dict:
        out = {"mean": self.mean, "ci": self.ci, "reps": self.reps, "N": self.N, "seed": self.seed}
        if self.stage_deviation is not None:
            out["stage_deviation"] = [float(v) for v in self.stage_deviation]
        out.update(self.notes)
        return out
