"""Loss oracles with stochastic-gradient sampling and verification optima.

Three model kinds:

* ``quadratic``   -- least squares, per-sample loss (w.x - y)^2 / 2, plus
  an optional L2 term lam/2 ||w||^2; strongly convex with exact
  curvature constants from the data Gram matrix.
* ``logistic``    -- multiclass softmax cross-entropy with L2 penalty
  (lam > 0 makes it lam-strongly convex); parameters are the flattened
  (n_classes, d) weight matrix.
* ``mlp``         -- one hidden tanh layer, softmax output; non-convex,
  refused by every convexity-dependent analysis.

Minibatches are drawn uniformly WITHOUT replacement within a batch, so
expectation over batches of the minibatch gradient equals the full
gradient, and batch second moments have closed forms used by
`estimate_constants` (exact expectation over all subsets, no sampling).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    InvalidArgumentError,
    ModelVector,
    RngStream,
    as_model_vector,
    check_same_dim,
)

__all__ = [
    "DataPoint",
    "Dataset",
    "LossModel",
    "MinibatchSample",
    "SmoothnessConstants",
    "UnsupportedModelError",
    "RankDeficiencyError",
    "loss",
    "loss_on_batch",
    "gradient",
    "stochastic_gradient",
    "per_sample_gradients",
    "batch_second_moment",
    "batch_deviation_moment",
    "estimate_constants",
    "closed_form_optimum",
    "draw_minibatch",
    "init_params",
    "accuracy",
]


class UnsupportedModelError(InvalidArgumentError):
    """Operation not defined for this model kind."""


class RankDeficiencyError(InvalidArgumentError):
    """Normal equations are singular and no regularization is present."""


@dataclass(frozen=True)
class DataPoint:
    features: np.ndarray
    target: float


@dataclass
class Dataset:
    """Feature matrix plus targets; targets are labels for classification."""

    features: np.ndarray
    targets: np.ndarray
    task: str = "regression"

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise InvalidArgumentError(
                f"features must be 2-D, got shape {self.features.shape}"
            )
        if self.task == "classification":
            self.targets = np.asarray(self.targets, dtype=np.int64)
        elif self.task == "regression":
            self.targets = np.asarray(self.targets, dtype=np.float64)
        else:
            raise InvalidArgumentError(f"unknown task {self.task!r}")
        if self.targets.shape != (self.features.shape[0],):
            raise InvalidArgumentError("targets length must match features rows")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def point(self, i: int) -> DataPoint:
        return DataPoint(self.features[i], self.targets[i])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.targets[idx], self.task)


@dataclass(frozen=True)
class LossModel:
    """Model kind plus hyperparameters; `n_features` fixes the input width."""

    kind: str
    n_features: int
    lam: float = 0.0
    n_classes: int = 2
    hidden: int = 16

    def __post_init__(self) -> None:
        if self.kind not in ("quadratic", "logistic", "mlp"):
            raise InvalidArgumentError(f"unknown model kind {self.kind!r}")
        if self.n_features < 1:
            raise InvalidArgumentError("n_features must be >= 1")
        if self.lam < 0:
            raise InvalidArgumentError("lam must be >= 0")
        if self.kind in ("logistic", "mlp") and self.n_classes < 2:
            raise InvalidArgumentError("n_classes must be >= 2")
        if self.kind == "mlp" and not (1 <= self.hidden <= 32):
            raise InvalidArgumentError("mlp hidden width must be in [1, 32]")

    @property
    def param_dim(self) -> int:
        if self.kind == "quadratic":
            return self.n_features
        if self.kind == "logistic":
            return self.n_classes * self.n_features
        h, d, c = self.hidden, self.n_features, self.n_classes
        return h * d + h + c * h + c

    @property
    def convex(self) -> bool:
        return self.kind in ("quadratic", "logistic")

    @property
    def task(self) -> str:
        return "regression" if self.kind == "quadratic" else "classification"


@dataclass(frozen=True)
class MinibatchSample:
    """Indices drawn uniformly without replacement from one client dataset."""

    indices: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "indices", np.asarray(self.indices, dtype=np.int64)
        )
        if self.indices.size == 0:
            raise InvalidArgumentError("minibatch must contain at least one index")

    @property
    def batch_size(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class SmoothnessConstants:
    """Curvature and gradient-moment constants.

    mu and L are analytic (data Gram eigenvalues plus lam); sigma2 and G2
    are empirical maxima over the sampled parameter points recorded in
    `protocol` (the minibatch expectation itself is exact, not sampled).
    """

    mu: float
    L: float
    sigma2: float
    G2: float
    protocol: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.mu <= 0 or self.L <= 0:
            raise InvalidArgumentError("mu and L must be positive")
        if self.mu > self.L * (1 + 1e-12):
            raise InvalidArgumentError(f"mu={self.mu} exceeds L={self.L}")
        if self.sigma2 < 0 or self.G2 < 0:
            raise InvalidArgumentError("sigma2 and G2 must be nonnegative")

    @property
    def kappa(self) -> float:
        return self.L / self.mu


def _check_model_data(model: LossModel, data: Dataset) -> None:
    if data.dim != model.n_features:
        raise InvalidArgumentError(
            f"data dimension {data.dim} != model n_features {model.n_features}"
        )
    if model.task != data.task:
        raise InvalidArgumentError(
            f"{model.kind} model expects {model.task} data, got {data.task}"
        )
    if len(data) == 0:
        raise InvalidArgumentError("dataset is empty")
    if data.task == "classification" and data.targets.max(initial=0) >= model.n_classes:
        raise InvalidArgumentError("label exceeds model n_classes")


def _check_params(model: LossModel, w: np.ndarray) -> ModelVector:
    w = as_model_vector(w)
    if w.size != model.param_dim:
        raise InvalidArgumentError(
            f"parameter vector has length {w.size}, expected {model.param_dim}"
        )
    return w


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs


def _mlp_unpack(model: LossModel, w: np.ndarray):
    h, d, c = model.hidden, model.n_features, model.n_classes
    o1 = h * d
    o2 = o1 + h
    o3 = o2 + c * h
    return (
        w[:o1].reshape(h, d),
        w[o1:o2],
        w[o2:o3].reshape(c, h),
        w[o3:],
    )


def _mlp_forward(model: LossModel, w: np.ndarray, X: np.ndarray):
    W1, b1, W2, b2 = _mlp_unpack(model, w)
    hidden = np.tanh(X @ W1.T + b1)
    scores = hidden @ W2.T + b2
    return hidden, scores


def _cross_entropy(scores: np.ndarray, labels: np.ndarray) -> float:
    shifted = scores - scores.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(scores.shape[0]), labels]
    return float(np.mean(logz - picked))


def loss(model: LossModel, w, data: Dataset) -> float:
    """Average per-sample loss over `data` plus the L2 term."""
    w = _check_params(model, w)
    _check_model_data(model, data)
    reg = 0.5 * model.lam * float(w @ w)
    X = data.features
    if model.kind == "quadratic":
        resid = X @ w - data.targets
        return 0.5 * float(np.mean(resid**2)) + reg
    if model.kind == "logistic":
        scores = X @ w.reshape(model.n_classes, model.n_features).T
        return _cross_entropy(scores, data.targets) + reg
    _, scores = _mlp_forward(model, w, X)
    return _cross_entropy(scores, data.targets) + reg


def loss_on_batch(model: LossModel, w, data: Dataset, batch: MinibatchSample) -> float:
    """The minibatch objective whose gradient `stochastic_gradient` returns."""
    _validate_batch(batch, len(data))
    return loss(model, w, data.subset(batch.indices))


def gradient(model: LossModel, w, data: Dataset) -> ModelVector:
    """Full-batch gradient of `loss` at w."""
    w = _check_params(model, w)
    _check_model_data(model, data)
    X = data.features
    n = len(data)
    if model.kind == "quadratic":
        resid = X @ w - data.targets
        return X.T @ resid / n + model.lam * w
    if model.kind == "logistic":
        W = w.reshape(model.n_classes, model.n_features)
        probs = _softmax_rows(X @ W.T)
        probs[np.arange(n), data.targets] -= 1.0
        return (probs.T @ X / n + model.lam * W).reshape(-1)
    return _mlp_gradient(model, w, X, data.targets)


def _mlp_gradient(model: LossModel, w: np.ndarray, X: np.ndarray, labels: np.ndarray) -> ModelVector:
    W1, b1, W2, b2 = _mlp_unpack(model, w)
    n = X.shape[0]
    hidden = np.tanh(X @ W1.T + b1)
    probs = _softmax_rows(hidden @ W2.T + b2)
    probs[np.arange(n), labels] -= 1.0
    probs /= n
    g_W2 = probs.T @ hidden + model.lam * W2
    g_b2 = probs.sum(axis=0) + model.lam * b2
    back = (probs @ W2) * (1.0 - hidden**2)
    g_W1 = back.T @ X + model.lam * W1
    g_b1 = back.sum(axis=0) + model.lam * b1
    return np.concatenate([g_W1.ravel(), g_b1, g_W2.ravel(), g_b2])


def _validate_batch(batch: MinibatchSample, n: int) -> None:
    if batch.indices.min() < 0 or batch.indices.max() >= n:
        raise InvalidArgumentError("minibatch indices out of range")


def stochastic_gradient(
    model: LossModel, w, dataset: Dataset, batch: MinibatchSample
) -> ModelVector:
    """Gradient of the minibatch-average loss at w (unbiased for `gradient`)."""
    _validate_batch(batch, len(dataset))
    return gradient(model, w, dataset.subset(batch.indices))


def draw_minibatch(rng: RngStream, n: int, batch_size: int) -> MinibatchSample:
    """Uniform without-replacement batch; clamps batch_size to n."""
    if n < 1:
        raise InvalidArgumentError("dataset is empty")
    if batch_size < 1:
        raise InvalidArgumentError("batch_size must be >= 1")
    b = min(batch_size, n)
    return MinibatchSample(rng.generator.choice(n, size=b, replace=False))


def per_sample_gradients(model: LossModel, w, data: Dataset) -> np.ndarray:
    """Per-sample gradients including the L2 term, shape (n, param_dim).

    The minibatch gradient equals the row mean over the batch, so batch
    moments reduce to sums over these rows.
    """
    w = _check_params(model, w)
    _check_model_data(model, data)
    X = data.features
    n = len(data)
    if model.kind == "quadratic":
        resid = X @ w - data.targets
        return resid[:, None] * X + model.lam * w
    if model.kind == "logistic":
        W = w.reshape(model.n_classes, model.n_features)
        probs = _softmax_rows(X @ W.T)
        probs[np.arange(n), data.targets] -= 1.0
        grads = probs[:, :, None] * X[:, None, :]
        return grads.reshape(n, -1) + model.lam * w
    raise UnsupportedModelError("per-sample gradients not available for mlp")


def _batch_moment_terms(grads: np.ndarray, batch_size: int):
    n = grads.shape[0]
    b = min(batch_size, n)
    sq = np.einsum("ij,ij->i", grads, grads)
    total = grads.sum(axis=0)
    mean2 = float(sq.mean())
    if n == 1 or b == n:
        cross = 0.0 if n == 1 else float((total @ total - sq.sum()) / (n * (n - 1)))
    else:
        cross = float((total @ total - sq.sum()) / (n * (n - 1)))
    return b, mean2, cross, total / n


def batch_second_moment(model: LossModel, w, data: Dataset, batch_size: int) -> float:
    """Exact E||g_B(w)||^2 over uniform without-replacement batches."""
    grads = per_sample_gradients(model, w, data)
    b, mean2, cross, _ = _batch_moment_terms(grads, batch_size)
    return mean2 / b + (b - 1) / b * cross


def batch_deviation_moment(
    model: LossModel, w, data: Dataset, batch_size: int, anchor_grad
) -> float:
    """Exact E||g_B(w) - anchor||^2 over uniform without-replacement batches."""
    anchor = as_model_vector(anchor_grad)
    grads = per_sample_gradients(model, w, data)
    check_same_dim(grads[0], anchor, "gradient and anchor")
    b, mean2, cross, mean_grad = _batch_moment_terms(grads, batch_size)
    second = mean2 / b + (b - 1) / b * cross
    return second - 2.0 * float(mean_grad @ anchor) + float(anchor @ anchor)


def _analytic_curvature(model: LossModel, datasets: list[Dataset]) -> tuple[float, float]:
    if model.kind == "quadratic":
        mus, ls = [], []
        for ds in datasets:
            gram = ds.features.T @ ds.features / len(ds)
            eigs = np.linalg.eigvalsh(gram)
            mus.append(eigs[0] + model.lam)
            ls.append(eigs[-1] + model.lam)
        return min(mus), max(ls)
    if model.kind == "logistic":
        if model.lam <= 0:
            raise UnsupportedModelError(
                "logistic needs lam > 0 for strong convexity constants"
            )
        # Softmax Hessian of one sample is bounded by (1/2) x x^T per
        # class block, hence L <= lam + max eigenvalue of Gram / 2.
        l_data = 0.0
        for ds in datasets:
            gram = ds.features.T @ ds.features / len(ds)
            l_data = max(l_data, float(np.linalg.eigvalsh(gram)[-1]))
        return model.lam, model.lam + 0.5 * l_data
    raise UnsupportedModelError("curvature constants undefined for mlp")


def estimate_constants(
    model: LossModel,
    datasets: list[Dataset],
    w_samples: list[np.ndarray],
    batch_size: int,
    anchors: list[np.ndarray] | None = None,
) -> SmoothnessConstants:
    """Curvature constants plus empirical gradient-moment bounds.

    sigma2 is the max over clients and sampled points of the exact batch
    deviation moment E||g_B(w) - grad F_i(a)||^2, where the anchor a is
    the paired entry of `anchors` when given (trajectory round-start
    points) and w itself otherwise.  G2 is the max batch second moment.
    """
    if model.kind == "mlp":
        raise UnsupportedModelError("estimate_constants does not support mlp")
    if not datasets or not w_samples:
        raise InvalidArgumentError("need at least one dataset and one w sample")
    if anchors is not None and len(anchors) != len(w_samples):
        raise InvalidArgumentError("anchors must pair one-to-one with w_samples")
    mu, L = _analytic_curvature(model, datasets)
    sigma2 = 0.0
    g2 = 0.0
    for ds in datasets:
        for k, w in enumerate(w_samples):
            anchor_point = w if anchors is None else anchors[k]
            anchor_grad = gradient(model, anchor_point, ds)
            sigma2 = max(
                sigma2, batch_deviation_moment(model, w, ds, batch_size, anchor_grad)
            )
            g2 = max(g2, batch_second_moment(model, w, ds, batch_size))
    protocol = {
        "n_clients": len(datasets),
        "n_w_samples": len(w_samples),
        "batch_size": batch_size,
        "minibatch_expectation": "exact-without-replacement",
        "anchor": "same-point" if anchors is None else "paired",
        "mu_L": "analytic",
    }
    return SmoothnessConstants(mu=mu, L=L, sigma2=sigma2, G2=max(g2, 0.0), protocol=protocol)


def closed_form_optimum(model: LossModel, data: Dataset) -> ModelVector:
    """Minimizer of `loss` over `data`; gradient norm < 1e-10 at the result."""
    _check_model_data(model, data)
    if model.kind == "quadratic":
        X = data.features
        n = len(data)
        gram = X.T @ X / n + model.lam * np.eye(model.n_features)
        eigs = np.linalg.eigvalsh(gram)
        if eigs[0] <= 1e-12 * max(1.0, eigs[-1]):
            raise RankDeficiencyError(
                "normal equations are rank deficient; add regularization"
            )
        return np.linalg.solve(gram, X.T @ data.targets / n)
    if model.kind == "logistic":
        return _logistic_optimum(model, data)
    raise UnsupportedModelError("no high-precision optimum for mlp")


def _logistic_hessian(model: LossModel, w: np.ndarray, data: Dataset) -> np.ndarray:
    X = data.features
    n, d = X.shape
    c = model.n_classes
    probs = _softmax_rows(X @ w.reshape(c, d).T)
    H = np.zeros((c * d, c * d))
    for a in range(c):
        for b in range(a, c):
            coef = probs[:, a] * ((1.0 if a == b else 0.0) - probs[:, b])
            block = X.T @ (X * coef[:, None]) / n
            H[a * d : (a + 1) * d, b * d : (b + 1) * d] = block
            if a != b:
                H[b * d : (b + 1) * d, a * d : (a + 1) * d] = block
    H += model.lam * np.eye(c * d)
    return H


def _logistic_optimum(model: LossModel, data: Dataset) -> ModelVector:
    if model.lam <= 0:
        raise RankDeficiencyError(
            "softmax objective has no unique minimizer with lam = 0"
        )
    from scipy.optimize import minimize

    def objective(w):
        return loss(model, w, data), gradient(model, w, data)

    res = minimize(
        objective,
        np.zeros(model.param_dim),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 5000, "gtol": 1e-12, "ftol": 0.0},
    )
    w = res.x
    # Newton polish: quadratic convergence wipes out the L-BFGS residual.
    for _ in range(10):
        g = gradient(model, w, data)
        if np.linalg.norm(g) < 1e-11:
            break
        w = w - np.linalg.solve(_logistic_hessian(model, w, data), g)
    gnorm = float(np.linalg.norm(gradient(model, w, data)))
    if gnorm >= 1e-10:
        raise InvalidArgumentError(
            f"logistic optimum did not reach gradient norm 1e-10 (got {gnorm:.2e})"
        )
    return w


def init_params(model: LossModel, rng: RngStream, scale: float = 0.5) -> ModelVector:
    """Gaussian parameter initialization (zeros when scale = 0)."""
    if scale == 0.0:
        return np.zeros(model.param_dim)
    return scale * rng.generator.standard_normal(model.param_dim)


def accuracy(model: LossModel, w, data: Dataset) -> float:
    """Top-1 accuracy for classification models."""
    w = _check_params(model, w)
    _check_model_data(model, data)
    if model.kind == "quadratic":
        raise UnsupportedModelError("accuracy undefined for regression")
    if model.kind == "logistic":
        scores = data.features @ w.reshape(model.n_classes, model.n_features).T
    else:
        _, scores = _mlp_forward(model, w, data.features)
    return float(np.mean(scores.argmax(axis=1) == data.targets))
