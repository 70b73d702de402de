import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed
from numpy.linalg import LinAlgError

from tools.common.errors import LearnerError, SimulationException, UsageError
from tools.common.rng import stream
from tools.learners.learners import CLIP, FittedLearner, LearnerSpec, clip_probability, fit_learner

_logger = logging.getLogger(__name__)

META_TOL = 1e-8
META_MAX_ITER = 5000


@dataclass(frozen=True, eq=False)
class SuperLearnerFit:
    library: tuple[FittedLearner, ...]
    weights: np.ndarray
    cv_risk: np.ndarray
    ensemble_cv_risk: float
    dropped: tuple[str, ...] = ()

    @property
    def labels(self) -> list[str]:
        return [learner.spec.label for learner in self.library]

    def predict(self, X) -> np.ndarray:
        predictions = np.column_stack([learner.predict(X) for learner in self.library])
        return clip_probability(predictions @ self.weights)


def fold_assignment(seed: int, n: int, folds: int) -> np.ndarray:
    """折号只由 (seed, n, folds) 决定"""
    order = stream(seed, n, folds).permutation(n)
    assignment = np.empty(n, dtype=int)
    assignment[order] = np.arange(n) % folds
    return assignment


def log_loss(p: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    p = clip_probability(p)
    return float(-np.sum(w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))) / np.sum(w))


def _meta_weights(Z: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """单纯形上最小化加权 log-loss：带回溯的指数梯度下降"""
    J = Z.shape[1]
    alpha = np.full(J, 1.0 / J)
    normalized = w / w.sum()

    def risk(a):
        return log_loss(Z @ a, y, w)

    current = risk(alpha)
    for iteration in range(META_MAX_ITER):
        p = np.clip(Z @ alpha, CLIP, 1.0 - CLIP)
        gradient = -(normalized * (y / p - (1.0 - y) / (1.0 - p))) @ Z
        eta = 1.0
        while True:
            proposal = alpha * np.exp(-eta * (gradient - gradient.min()))
            proposal /= proposal.sum()
            candidate = risk(proposal)
            if candidate <= current or eta < 1e-12:
                break
            eta /= 2.0
        if candidate > current:
            break
        improvement = current - candidate
        alpha, current = proposal, candidate
        if improvement < META_TOL:
            break
    _logger.debug("超级学习器元优化 %d 次迭代，风险 %.8f", iteration + 1, current)
    return alpha


def _fit_fold(spec: LearnerSpec, X, y, w, train, test, seed):
    try:
        learner = fit_learner(spec, X[train], y[train], w[train], seed=seed)
        return learner.predict(X[test])
    except (SimulationException, ValueError, LinAlgError) as e:
        return e


def fit_super_learner(library: Sequence[LearnerSpec], X, y, w=None, folds: int = 10,
                      seed: int = 0, n_jobs: int = 1) -> SuperLearnerFit:
    """交叉验证的凸组合超级学习器

    Args:
        library: 候选学习器
        X: n×k 特征矩阵
        y: 0/1 响应
        w: 非负权重
        folds: 交叉验证折数
        seed: 折号与 boosting 的随机种子
        n_jobs: 折拟合的并行度，不影响结果

    Returns:
        SuperLearnerFit；在某折失败的学习器被剔除并记录
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=float).reshape(-1)
    n = len(y)
    w = np.ones(n) if w is None else np.asarray(w, dtype=float).reshape(-1)
    if folds < 2:
        raise UsageError(f"交叉验证折数至少为 2: {folds}")
    if n < folds:
        raise UsageError(f"样本量 {n} 小于折数 {folds}")
    if not library:
        raise UsageError("学习器库不能为空")

    assignment = fold_assignment(seed, n, folds)
    tasks = [(j, k) for j in range(len(library)) for k in range(folds)]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_fit_fold)(library[j], X, y, w, assignment != k, assignment == k, seed) for j, k in tasks
    )

    Z = np.zeros((n, len(library)))
    failed = set()
    for (j, k), result in zip(tasks, results):
        if isinstance(result, Exception):
            if j not in failed:
                _logger.warning("学习器 %s 在第%d折失败，已剔除: %s", library[j].label, k, result)
            failed.add(j)
        else:
            Z[assignment == k, j] = result

    kept = [j for j in range(len(library)) if j not in failed]
    dropped = tuple(library[j].label for j in sorted(failed))
    if not kept:
        raise LearnerError(f"所有学习器均拟合失败: {dropped}")
    Z = Z[:, kept]
    cv_risk = np.array([log_loss(Z[:, j], y, w) for j in range(Z.shape[1])])

    weights = _meta_weights(Z, y, w)
    ensemble_risk = log_loss(Z @ weights, y, w)
    best = int(np.argmin(cv_risk))
    if ensemble_risk > cv_risk[best]:
        weights = np.zeros(len(kept))
        weights[best] = 1.0
        ensemble_risk = float(cv_risk[best])

    fitted = tuple(fit_learner(library[j], X, y, w, seed=seed) for j in kept)
    return SuperLearnerFit(
        library=fitted,
        weights=weights,
        cv_risk=cv_risk,
        ensemble_cv_risk=ensemble_risk,
        dropped=dropped,
    )
