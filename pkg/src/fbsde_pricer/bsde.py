"""Forward BSDE recursion and the training losses.

The recursion starts from the value network's own t=0 output and steps
Y_{i+1} = Y_i - g(t_i, X_i, Y_i, Z_i, ...) dt + Z_i dW_{i+1}, with the
hedge Z_i = sigma_i X_i du/dX read off the tangent channel of the value
network so the loss gradient flows through it.

Losses: a hybrid RMSE+MAPE fit to market quotes at t=0, an RMSE match
to the payoff at expiry, and an RMSE consistency between direct value
network evaluations and the recursion along the path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .autodiff import TV, Tape
from .errors import DataError, NumericsError


@dataclass
class LossWeights:
    lam_price: float = 0.8
    lam_terminal: float = 0.1
    lam_path: float = 0.1
    omega_rmse: float = 1.0
    omega_mape: float = 1.0
    eps_mape: float = 0.01  # CNY floor inside the relative-error term


@dataclass
class LossBreakdown:
    price: float
    terminal: float
    path: float
    total: float
    weights: LossWeights


@dataclass
class ContractBatch:
    """B contracts, each with M simulated paths on an N-step grid.

    Arrays indexed (contract,) or (contract, path, ...); path blocks are
    laid out contract-major when flattened.
    """

    x0: np.ndarray        # (B,)
    strike: np.ndarray    # (B,)
    tau: np.ndarray       # (B,) years
    r: float
    label: np.ndarray     # (B,) market quotes
    is_call: np.ndarray   # (B,) bool
    sigma_steps: np.ndarray  # (B, N)
    e: np.ndarray         # (B, 5)
    X: np.ndarray         # (B, M, N+1)
    dW: np.ndarray        # (B, M, N)

    @property
    def n_contracts(self) -> int:
        return self.x0.shape[0]

    @property
    def n_paths(self) -> int:
        return self.X.shape[1]

    @property
    def n_steps(self) -> int:
        return self.dW.shape[2]

    @property
    def dt(self) -> np.ndarray:
        return self.tau / self.n_steps


@dataclass
class RecursionState:
    u0: TV                 # (B,) value-net output at t=0
    U_path: List[TV]       # N+1 entries of (B*M,) direct evaluations
    Y_path: List[TV]       # N+1 entries of (B*M,) recursion values
    Z_path: List[TV]       # N entries of (B*M,) hedge values
    Y: TV                  # terminal recursion value, Y_path[-1]
    Z: TV                  # last hedge used, Z_path[-1]


# value_eval(tape, inputs, want_dual) -> (u, du-or-None); inputs hold
# (B*M,)-shaped TVs for t, x, k, tau, sigma, r and (B*M, 5) for e.
ValueEval = Callable[[Tape, Dict[str, TV], bool], Tuple[TV, Optional[TV]]]
GenEval = Callable[[Tape, Dict[str, TV]], TV]


def payoff(x, strike, is_call):
    """European payoff at expiry."""
    return np.where(is_call, np.maximum(x - strike, 0.0),
                    np.maximum(strike - x, 0.0))


def _rep(a: np.ndarray, m: int) -> np.ndarray:
    return np.repeat(a, m)


def recurse(tape: Tape, value_eval: ValueEval, gen_eval: GenEval,
            batch: ContractBatch) -> RecursionState:
    """Run the forward recursion for a whole batch on one tape.

    The value network is evaluated in a single stacked call covering the
    t=0 points (once per contract; paths coincide there) plus every
    (path, step) grid point, with the tangent direction on the price
    channel supplying du/dX. Sentiment is held at its t=0 vector.
    """
    b, m, n = batch.n_contracts, batch.n_paths, batch.n_steps
    bm = b * m
    dt = batch.dt

    # Stacked evaluation points: [B at step 0 | B*M at step 1 | ... | B*M at step N].
    t_parts = [np.zeros(b)]
    x_parts = [batch.x0]
    sig_parts = [batch.sigma_steps[:, 0]]
    for i in range(1, n + 1):
        t_parts.append(_rep(i * dt, m))
        x_parts.append(batch.X[:, :, i].reshape(-1))
        sig_parts.append(_rep(batch.sigma_steps[:, min(i, n - 1)], m))
    k_flat = _rep(batch.strike, m)
    tau_flat = _rep(batch.tau, m)
    e_flat = np.repeat(batch.e, m, axis=0)

    p = b + n * bm
    call_mask = batch.is_call.astype(np.float64)
    inputs = {
        "t": tape.constant(np.concatenate(t_parts)),
        "x": tape.constant(np.concatenate(x_parts), tangent=np.ones(p)),
        "k": tape.constant(np.concatenate([batch.strike, np.tile(k_flat, n)])),
        "tau": tape.constant(np.concatenate([batch.tau, np.tile(tau_flat, n)])),
        "sigma": tape.constant(np.concatenate(sig_parts)),
        "r": tape.constant(np.full(p, batch.r)),
        "e": tape.constant(np.concatenate([batch.e, np.tile(e_flat, (n, 1))], axis=0)),
        # raw head-selection mask, aligned with the stacked layout
        "is_call": np.concatenate([call_mask, np.tile(_rep(call_mask, m), n)]),
    }
    u_all, du_all = value_eval(tape, inputs, True)

    u0 = u_all.slice1d(0, b)
    du0 = du_all.slice1d(0, b)
    u_steps = [u_all.slice1d(b + (i - 1) * bm, b + i * bm) for i in range(1, n + 1)]
    du_steps = [du_all.slice1d(b + (i - 1) * bm, b + i * bm) for i in range(1, n)]

    u_path: List[TV] = [u0.repeat(m)] + u_steps
    du_path: List[TV] = [du0.repeat(m)] + du_steps  # steps 0..N-1

    dt_flat = _rep(dt, m)
    y_path: List[TV] = [u_path[0]]  # Y_0 := U_0, exactly the same node
    z_path: List[TV] = []
    for i in range(n):
        x_i = batch.X[:, :, i].reshape(-1)
        sig_i = _rep(batch.sigma_steps[:, i], m)
        z_i = du_path[i] * (sig_i * x_i)
        g_i = gen_eval(tape, {
            "t": tape.constant(_rep(i * dt, m)),
            "x": tape.constant(x_i),
            "y": y_path[i],
            "z": z_i,
            "k": tape.constant(k_flat),
            "tau": tape.constant(tau_flat),
            "sigma": tape.constant(sig_i),
            "r": tape.constant(np.full(bm, batch.r)),
            "e": tape.constant(e_flat),
        })
        y_next = y_path[i] - g_i * dt_flat + z_i * tape.constant(batch.dW[:, :, i].reshape(-1))
        if not np.all(np.isfinite(y_next.value)):
            bad = int(np.argmax(~np.isfinite(y_next.value)))
            raise NumericsError(
                f"non-finite recursion value at step {i + 1}, "
                f"contract {bad // m}, path {bad % m}")
        y_path.append(y_next)
        z_path.append(z_i)

    return RecursionState(u0=u0, U_path=u_path, Y_path=y_path, Z_path=z_path,
                          Y=y_path[-1], Z=z_path[-1])


# -- plain losses (reference implementations over numpy arrays) ----------


def loss_price(u0, y_market, omega_rmse=1.0, omega_mape=1.0, eps_mape=0.01) -> float:
    """Hybrid quote-fit loss: omega_r * RMSE + omega_m * MAPE.

    The relative term uses fractional units with denominator
    max(|y|, eps) so near-zero quotes cannot blow it up.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    y = np.asarray(y_market, dtype=np.float64)
    if u0.shape != y.shape:
        raise DataError(f"length mismatch: {u0.shape} vs {y.shape}")
    rmse = float(np.sqrt(np.mean((u0 - y) ** 2)))
    mape = float(np.mean(np.abs(u0 - y) / np.maximum(np.abs(y), eps_mape)))
    return omega_rmse * rmse + omega_mape * mape


def loss_terminal(u_tau, x_tau, strike, is_call) -> float:
    """RMSE between terminal value-net outputs and the option payoff."""
    u_tau = np.asarray(u_tau, dtype=np.float64)
    phi = payoff(np.asarray(x_tau, dtype=np.float64), strike, is_call)
    return float(np.sqrt(np.mean((u_tau - phi) ** 2)))


def loss_path(u_path, y_path) -> float:
    """RMSE over all (step, path) cells of the first N steps."""
    u = np.asarray(u_path, dtype=np.float64)
    y = np.asarray(y_path, dtype=np.float64)
    if u.shape != y.shape:
        raise DataError(f"shape mismatch: {u.shape} vs {y.shape}")
    return float(np.sqrt(np.mean((u - y) ** 2)))


def total_loss(price: float, terminal: float, path: float,
               weights: LossWeights) -> LossBreakdown:
    total = (weights.lam_price * price + weights.lam_terminal * terminal
             + weights.lam_path * path)
    return LossBreakdown(price=price, terminal=terminal, path=path,
                         total=total, weights=weights)


# -- tape losses (differentiable, used by training) -----------------------


def _rmse_tv(diff: TV, count: int) -> TV:
    return (diff.pow2().sum() / float(count)).sqrt()


def training_loss(tape: Tape, state: RecursionState, batch: ContractBatch,
                  weights: LossWeights) -> Tuple[TV, LossBreakdown]:
    """Differentiable total loss for one batch, plus its float breakdown."""
    b, m, n = batch.n_contracts, batch.n_paths, batch.n_steps

    y = batch.label
    diff0 = state.u0 - tape.constant(y)
    rmse0 = _rmse_tv(diff0, b)
    denom = tape.constant(np.maximum(np.abs(y), weights.eps_mape))
    mape0 = (diff0.abs() / denom).sum() / float(b)
    price = rmse0 * weights.omega_rmse + mape0 * weights.omega_mape

    phi = payoff(batch.X[:, :, -1].reshape(-1), _rep(batch.strike, m),
                 _rep(batch.is_call, m))
    terminal = _rmse_tv(state.U_path[-1] - tape.constant(phi), b * m)

    ss = None
    for i in range(n):
        term = (state.U_path[i] - state.Y_path[i]).pow2().sum()
        ss = term if ss is None else ss + term
    path = (ss / float(b * m * n)).sqrt()

    total = (price * weights.lam_price + terminal * weights.lam_terminal
             + path * weights.lam_path)
    breakdown = total_loss(float(price.value), float(terminal.value),
                           float(path.value), weights)
    return total, breakdown
