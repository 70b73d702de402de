import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from tools.common.errors import CalibrationError, DimensionError
from tools.glm.glm_engine import GlmFit, predict_mean

_logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
_MIN_STEP = 2.0 ** -30


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    """广义 raking 问题

    Args:
        base_weights: 完整观测的基础权重 π̂⁻¹（长度为完整观测数或全体样本数）
        aux_full: 全体样本的 n×k 辅助变量矩阵
        selected: 完整观测指示 R
    """
    base_weights: np.ndarray
    aux_full: np.ndarray
    selected: np.ndarray
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        aux = np.asarray(self.aux_full, dtype=float)
        if aux.ndim == 1:
            aux = aux.reshape(-1, 1)
        selected = np.asarray(self.selected).reshape(-1).astype(bool)
        if selected.shape[0] != aux.shape[0]:
            raise DimensionError("完整观测指示与辅助变量行数不一致")
        if aux.shape[1] < 1:
            raise DimensionError("至少需要一个辅助变量")
        base = np.asarray(self.base_weights, dtype=float).reshape(-1)
        if base.shape[0] == aux.shape[0] and base.shape[0] != selected.sum():
            base = base[selected]
        if base.shape[0] != selected.sum():
            raise DimensionError("基础权重长度与完整观测数不一致")
        if np.any(base < 0) or not np.all(np.isfinite(base)):
            raise CalibrationError("基础权重必须为非负有限数")
        object.__setattr__(self, "aux_full", aux)
        object.__setattr__(self, "selected", selected)
        object.__setattr__(self, "base_weights", base)

    @property
    def aux_selected(self) -> np.ndarray:
        return self.aux_full[self.selected]

    @property
    def totals(self) -> np.ndarray:
        return self.aux_full.sum(axis=0)


@dataclass(frozen=True, eq=False)
class CalibratedWeights:
    multipliers: np.ndarray
    lambda_: np.ndarray
    converged: bool
    residual_norm: float
    iterations: int = 0
    objective_trace: tuple[float, ...] = ()

    def final_weights(self, base_weights: np.ndarray) -> np.ndarray:
        return np.asarray(base_weights, dtype=float) * self.multipliers


@dataclass(frozen=True, eq=False)
class RakingVariance:
    covariance: np.ndarray
    phase1: np.ndarray
    phase2: np.ndarray
    residualized: bool


def _dual_objective(lam: np.ndarray, H: np.ndarray, d: np.ndarray, T: np.ndarray) -> float:
    return float(np.sum(d * np.exp(H @ lam)) - lam @ T)


def rake(problem: CalibrationProblem) -> CalibratedWeights:
    """指数倾斜距离下的校准：阻尼牛顿法求解对偶问题

    a_i = exp(h_iᵀλ)，λ 使得 Σ_{R=1} π̂⁻¹ a_i h_i = Σ_all h_i。
    """
    H = problem.aux_selected
    d = problem.base_weights
    T = problem.totals
    n_cc, k = H.shape

    # 各列按最大绝对值缩放，等价的重新参数化
    scale = np.maximum(np.abs(H).max(axis=0, initial=0.0), np.abs(problem.aux_full).max(axis=0, initial=0.0))
    active = scale > 0
    Hs = H[:, active] / scale[active]
    Ts = T[active] / scale[active]
    lam_s = np.zeros(int(active.sum()))

    def residual(lam):
        a = np.exp(Hs @ lam)
        return a, float(np.max(np.abs(H.T @ (d * a) - T), initial=0.0))

    a, residual_norm = residual(lam_s)
    trace = [_dual_objective(lam_s, Hs, d, Ts)]
    converged = residual_norm < problem.tol
    iteration = 0

    if not converged and n_cc < k:
        _logger.warning("完整观测数 %d 少于辅助变量数 %d，无法校准", n_cc, k)
    while not converged and n_cc >= k and iteration < problem.max_iter:
        iteration += 1
        gradient = Hs.T @ (d * a) - Ts
        jacobian = Hs.T @ ((d * a)[:, None] * Hs)
        try:
            step = linalg.solve(jacobian, gradient, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            _logger.warning("raking 牛顿雅可比矩阵奇异（第%d次迭代）", iteration)
            break
        objective = trace[-1]
        t = 1.0
        candidate = lam_s - step
        candidate_objective = _dual_objective(candidate, Hs, d, Ts)
        while not candidate_objective <= objective and t > _MIN_STEP:
            t /= 2.0
            candidate = lam_s - t * step
            candidate_objective = _dual_objective(candidate, Hs, d, Ts)
        if not candidate_objective <= objective:
            _logger.warning("raking 线搜索未能降低对偶目标")
            break
        lam_s = candidate
        trace.append(candidate_objective)
        a, residual_norm = residual(lam_s)
        _logger.debug("raking 第%d次迭代: 步长=%g 残差=%.3e", iteration, t, residual_norm)
        converged = residual_norm < problem.tol

    if not converged:
        _logger.warning("raking 未收敛: 残差 %.3e，迭代 %d 次", residual_norm, iteration)

    lam = np.zeros(k)
    lam[active] = lam_s / scale[active]
    return CalibratedWeights(
        multipliers=a,
        lambda_=lam,
        converged=converged,
        residual_norm=residual_norm,
        iterations=iteration,
        objective_trace=tuple(trace),
    )


def raking_variance(fit: GlmFit, calibrated: CalibratedWeights, aux, base_weights, X, y) -> RakingVariance:
    """校准估计的线性化方差

    Args:
        fit: 以校准权重在完整观测上拟合的模型
        calibrated: rake 的结果
        aux: 完整观测的辅助变量矩阵
        base_weights: 完整观测的基础权重
        X, y: 完整观测的设计矩阵与响应

    Returns:
        RakingVariance，总方差 = 第一阶段 + 第二阶段
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    H = np.asarray(aux, dtype=float)
    if H.ndim == 1:
        H = H.reshape(-1, 1)
    b = np.asarray(base_weights, dtype=float).reshape(-1)
    a = calibrated.multipliers
    if not (X.shape[0] == y.shape[0] == H.shape[0] == b.shape[0] == a.shape[0]):
        raise DimensionError("raking 方差的输入行数不一致")

    # 每个观测对系数的线性化贡献
    u = ((y - predict_mean(fit, X))[:, None] * X) @ fit.information_inverse.T

    nonzero = np.abs(H).max(axis=0, initial=0.0) > 0
    Hn = H[:, nonzero]
    residualized = True
    if Hn.shape[1] == 0:
        e = u
    else:
        gram = Hn.T @ (b[:, None] * Hn)
        rank = np.linalg.matrix_rank(gram)
        if rank < Hn.shape[1]:
            _logger.warning("辅助变量回归秩亏 (%d < %d)，退回未残差化的方差", rank, Hn.shape[1])
            e = u
            residualized = False
        else:
            coef = linalg.solve(gram, Hn.T @ (b[:, None] * u), assume_a="pos")
            e = u - Hn @ coef

    w = b * a
    phase1 = u.T @ (w[:, None] * u)
    ae = a[:, None] * e
    phase2 = ae.T @ ((b * (b - 1.0))[:, None] * ae)
    phase1 = (phase1 + phase1.T) / 2.0
    phase2 = (phase2 + phase2.T) / 2.0
    return RakingVariance(covariance=phase1 + phase2, phase1=phase1, phase2=phase2, residualized=residualized)
