#!/usr/bin/env python3
"""
Comparison baselines for the CQural lab
PCA-1 projection, Pegasos linear SVM, single-qubit fidelity kernel with an LS-SVM solver,
and the pure single-qubit QNN, each wrapped in the common classifier interface
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from data_ingest import LabeledImage
from lab_errors import DataError, DimensionError, NumericError, ParameterError
from models import BinaryClassifier, Predictions
from quantum_sim import HeadMode, QuantumHead, hybrid_head, param_shift_grad, ry, run_circuit
from tensor_autodiff import AdamState, Tape, Tensor, adam_step, backward_pass, nll_loss, parameter

logger = logging.getLogger(__name__)

PCA_TOLERANCE = 1e-10
PCA_MAX_ITERATIONS = 1000
LSSVM_RESIDUAL_LIMIT = 1e-8


def flatten_images(images: Sequence[LabeledImage]) -> np.ndarray:
    return np.stack([image.pixels.reshape(-1) for image in images])


def labels_of(images: Sequence[LabeledImage]) -> np.ndarray:
    return np.array([image.label for image in images], dtype=np.int64)


# ---------------------------------------------------------------- PCA-1

@dataclass
class PcaProjection:
    """Top principal direction plus the affine map sending train projections onto [-π/2, π/2]"""

    direction: np.ndarray
    mean: np.ndarray
    scale: float
    variance: float
    iterations: int

    def project(self, features: np.ndarray) -> np.ndarray:
        raw = (np.atleast_2d(features) - self.mean) @ self.direction
        return np.clip(raw * self.scale, -math.pi / 2, math.pi / 2)


def pca1_project(features: np.ndarray, tolerance: float = PCA_TOLERANCE,
                 max_iterations: int = PCA_MAX_ITERATIONS):
    """
    Mean-center the rows and find the top covariance eigenvector by power iteration.
    Returns the fitted projection and the train scalars scaled to [-π/2, π/2].
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise DimensionError(f"pca1_project needs at least 2 rows of features, got shape {features.shape}")
    mean = features.mean(axis=0)
    centered = features - mean
    denominator = features.shape[0] - 1

    start = centered[np.argmax(np.einsum("ij,ij->i", centered, centered))]
    norm = np.linalg.norm(start)
    if norm == 0.0:
        raise NumericError("pca1_project: features have zero variance")
    vector = start / norm

    for iteration in range(1, max_iterations + 1):
        nxt = centered.T @ (centered @ vector) / denominator
        nxt_norm = np.linalg.norm(nxt)
        if nxt_norm == 0.0:
            raise NumericError("pca1_project: covariance annihilated the iterate")
        nxt /= nxt_norm
        if nxt @ vector < 0:
            nxt = -nxt
        delta = np.linalg.norm(nxt - vector)
        vector = nxt
        if delta < tolerance:
            break
    else:
        raise NumericError(f"pca1_project: power iteration did not converge after {max_iterations} iterations")

    raw = centered @ vector
    variance = float(raw @ raw / denominator)
    peak = float(np.abs(raw).max())
    scale = (math.pi / 2) / peak if peak > 0 else 0.0
    projection = PcaProjection(vector, mean, scale, variance, iteration)
    logger.debug(f"PCA-1 converged in {iteration} iterations, variance {variance:.6g}")
    return projection, raw * scale


# ---------------------------------------------------------------- Pegasos

@dataclass
class PegasosModel:
    weights: np.ndarray
    bias: float
    loss_trace: List[float] = field(default_factory=list)

    def decision(self, features: np.ndarray) -> np.ndarray:
        return np.atleast_2d(features) @ self.weights + self.bias


def svm_train_pegasos(features: np.ndarray, labels: Sequence[int], lam: float = 1e-4, epochs: int = 50,
                      rng: Optional[np.random.Generator] = None, projection_step: bool = True) -> PegasosModel:
    """
    Primal hinge-loss SGD with step 1/(λt) over seeded epoch permutations.
    The bias rides along as a constant feature; the per-epoch mean of the hinge losses
    met before each step is kept in `loss_trace`.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    y = np.asarray(labels, dtype=np.float64)
    if features.shape[0] == 0:
        raise DataError("svm_train_pegasos needs a non-empty training set")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DataError("svm_train_pegasos labels must be -1 or +1")
    if lam <= 0:
        raise ParameterError(f"pegasos regularization must be positive, got {lam}")
    rng = rng or np.random.default_rng(0)

    augmented = np.hstack([features, np.ones((features.shape[0], 1))])
    w = np.zeros(augmented.shape[1])
    radius = 1.0 / math.sqrt(lam)
    trace = []
    t = 0
    for _ in range(epochs):
        losses = []
        for i in rng.permutation(augmented.shape[0]):
            t += 1
            eta = 1.0 / (lam * t)
            margin = y[i] * (w @ augmented[i])
            losses.append(max(0.0, 1.0 - margin))
            w *= 1.0 - eta * lam
            if margin < 1.0:
                w += eta * y[i] * augmented[i]
            if projection_step:
                norm = np.linalg.norm(w)
                if norm > radius:
                    w *= radius / norm
        trace.append(float(np.mean(losses)))
    return PegasosModel(weights=w[:-1].copy(), bias=float(w[-1]), loss_trace=trace)


# ---------------------------------------------------------------- quantum kernel + LS-SVM

def quantum_kernel(x: float, y: float) -> float:
    """|<ψ(x)|ψ(y)>|² with ψ(t) = RY(2t)|0>, i.e. cos²(x - y)"""
    return math.cos(x - y) ** 2


def embed_angle(t: float):
    return run_circuit([ry(2.0 * t)])


@dataclass
class KernelMatrix:
    entries: np.ndarray

    @property
    def size(self) -> int:
        return self.entries.shape[0]


def kernel_matrix(rows: Sequence[float], cols: Optional[Sequence[float]] = None) -> KernelMatrix:
    rows = np.asarray(rows, dtype=np.float64)
    cols = rows if cols is None else np.asarray(cols, dtype=np.float64)
    return KernelMatrix(np.cos(rows[:, None] - cols[None, :]) ** 2)


@dataclass
class LssvmSolution:
    alpha: np.ndarray
    bias: float
    residual: float


def lssvm_solve(kernel: KernelMatrix, labels: Sequence[int], gamma: float = 10.0) -> LssvmSolution:
    """Direct solve of [[0, 1ᵀ], [1, K + I/γ]]·[b; α] = [0; y]"""
    entries = np.asarray(kernel.entries, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n = entries.shape[0]
    if entries.shape != (n, n) or y.shape != (n,):
        raise DimensionError(f"lssvm_solve needs an N×N kernel and N labels, got {entries.shape} and {y.shape}")
    if gamma <= 0:
        raise ParameterError(f"lssvm ridge parameter must be positive, got {gamma}")

    system = np.zeros((n + 1, n + 1))
    system[0, 1:] = 1.0
    system[1:, 0] = 1.0
    system[1:, 1:] = entries + np.eye(n) / gamma
    rhs = np.concatenate([[0.0], y])
    try:
        solution = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"lssvm system is singular: {e}") from e
    residual = float(np.abs(system @ solution - rhs).max())
    if not np.all(np.isfinite(solution)) or residual >= LSSVM_RESIDUAL_LIMIT:
        raise NumericError(f"lssvm solve residual {residual:.3e} exceeds {LSSVM_RESIDUAL_LIMIT:.0e}")
    return LssvmSolution(alpha=solution[1:], bias=float(solution[0]), residual=residual)


# ---------------------------------------------------------------- pure QNN

def pure_qnn_forward(x: float, w: float):
    """RY(x) then RY(w) on |0>: (P0, P1) with P1 = sin²((x + w)/2)"""
    return run_circuit([ry(x), ry(w)]).probabilities()


def qnn_head(w: float = 0.0) -> QuantumHead:
    """The QNN circuit is the amplitude head with embedding angle x/2"""
    return QuantumHead(mode=HeadMode.AMPLITUDE, weight=parameter([w], name="qnn.w"))


def qnn_weight_gradient(x: float, w: float) -> float:
    """dP1/dw by parameter shift"""
    return param_shift_grad(qnn_head(w), "w", {"phi": x / 2.0, "w": w}, "p1")


def _qnn_inputs(angles: np.ndarray) -> Tensor:
    half = np.asarray(angles, dtype=np.float64) / 2.0
    return Tensor(np.stack([np.cos(half), np.sin(half)], axis=1))


# ---------------------------------------------------------------- classifier wrappers

def _standardize_features(train: np.ndarray):
    mean = train.mean(axis=0)
    std = train.std(axis=0) + 1e-8
    return mean, std


class LinearSVMClassifier(BinaryClassifier):
    """Pegasos SVM on flattened, per-feature standardized pixels"""

    name = "svm"

    def __init__(self, lam: float = 1e-4, epochs: int = 50, seed: int = 0):
        self.lam = lam
        self.epochs = epochs
        self.seed = seed
        self.model: Optional[PegasosModel] = None

    def fit(self, images: Sequence[LabeledImage]) -> "LinearSVMClassifier":
        features = flatten_images(images)
        self._mean, self._std = _standardize_features(features)
        signs = 2 * labels_of(images) - 1
        self.model = svm_train_pegasos((features - self._mean) / self._std, signs, self.lam, self.epochs,
                                       np.random.default_rng(self.seed))
        return self

    def predict(self, images: Sequence[LabeledImage]) -> Predictions:
        scores = self.model.decision((flatten_images(images) - self._mean) / self._std)
        return Predictions(labels=(scores > 0).astype(np.int64), scores=scores)


class HybridSVMClassifier(BinaryClassifier):
    """LS-SVM over the single-qubit fidelity kernel of PCA-1 angles; half-angles keep the embedding injective"""

    name = "hybrid_svm"

    def __init__(self, gamma: float = 10.0):
        self.gamma = gamma

    def fit(self, images: Sequence[LabeledImage]) -> "HybridSVMClassifier":
        self.projection, scalars = pca1_project(flatten_images(images))
        self._angles = scalars / 2.0
        signs = 2 * labels_of(images) - 1
        self.solution = lssvm_solve(kernel_matrix(self._angles), signs, self.gamma)
        return self

    def predict(self, images: Sequence[LabeledImage]) -> Predictions:
        angles = self.projection.project(flatten_images(images)) / 2.0
        scores = kernel_matrix(angles, self._angles).entries @ self.solution.alpha + self.solution.bias
        return Predictions(labels=(scores > 0).astype(np.int64), scores=scores)


class PureQNNClassifier(BinaryClassifier):
    """Single trainable rotation after an RY(x) embedding of the PCA-1 angle, trained with Adam on NLL"""

    name = "qnn"

    def __init__(self, epochs: int = 100, lr: float = 0.05):
        self.epochs = epochs
        self.lr = lr
        self.head = qnn_head()
        self.loss_trace: List[float] = []

    def fit(self, images: Sequence[LabeledImage]) -> "PureQNNClassifier":
        self.projection, angles = pca1_project(flatten_images(images))
        labels = labels_of(images)
        inputs = _qnn_inputs(angles)
        state = AdamState(lr=self.lr)
        for _ in range(self.epochs):
            with Tape():
                loss = nll_loss(hybrid_head(inputs, self.head), labels)
                backward_pass(loss)
            self.loss_trace.append(loss.item())
            adam_step(self.head.parameters(), state)
        return self

    def predict(self, images: Sequence[LabeledImage]) -> Predictions:
        angles = self.projection.project(flatten_images(images))
        p1 = np.array([pure_qnn_forward(x, self.head.w)[1] for x in angles])
        return Predictions(labels=(p1 > 0.5).astype(np.int64), scores=p1)
