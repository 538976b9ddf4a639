"""Post-hoc OOD scorers. Every scorer returns one value per row, higher = more ID.

Functional forms (``score_msp``, ``score_energy``, ...) operate on plain arrays.
The class forms share a ``fit(bundle)`` / ``score(bundle)`` interface over a
:class:`Bundle`, which is what the CLI, the evaluator and plugins use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .errors import ArgumentError, NumericalError, RegistrationError, StateError
from .features import ClassifierHead, FeatureSet, preprocess
from .flow import FlowModel


@dataclass(frozen=True)
class Bundle:
    """Features of one dataset plus what the baselines need to re-derive logits."""

    features: FeatureSet
    head: ClassifierHead | None = None
    penultimate_stage: int = -1

    @property
    def penultimate(self) -> np.ndarray:
        idx = self.penultimate_stage
        if idx < 0:
            idx += len(self.features.stage_dims)
        return self.features.stage(idx)

    @property
    def logits(self) -> np.ndarray:
        if self.features.logits is not None:
            return self.features.logits.astype(np.float64)
        if self.head is not None:
            return self.head.logits(self.penultimate)
        raise ArgumentError(f"dataset {self.features.name!r} has neither stored logits nor a classifier head")

    def require_head(self) -> ClassifierHead:
        if self.head is None:
            raise ArgumentError("this scorer needs the classifier head (manifest head_path)")
        return self.head


# --------------------------------------------------------------------------- #
# logit-based scores
# --------------------------------------------------------------------------- #


def _check_temperature(T: float) -> None:
    if not T > 0:
        raise ArgumentError(f"temperature must be > 0, got {T}")


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def score_energy(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    """Negative free energy ``T * logsumexp(logits / T)``."""
    _check_temperature(T)
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    return T * _logsumexp_rows(logits / T)


def score_msp(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    """Maximum softmax probability at temperature ``T`` (T > 1 is ODIN without perturbation)."""
    _check_temperature(T)
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if logits.shape[1] < 2:
        raise ArgumentError("MSP needs at least two classes")
    a = logits / T
    a = a - a.max(axis=1, keepdims=True)
    return 1.0 / np.exp(a).sum(axis=1)


# --------------------------------------------------------------------------- #
# feature-based scores
# --------------------------------------------------------------------------- #


class MahalanobisFit:
    """Class means with one shared, ridge-regularized, pooled within-class covariance."""

    ridge_scale = 1e-6

    def __init__(self):
        self.means = None
        self._chol = None

    def fit(self, x: np.ndarray, labels: np.ndarray) -> MahalanobisFit:
        x = np.asarray(x, dtype=np.float64)
        labels = np.asarray(labels)
        classes, counts = np.unique(labels, return_counts=True)
        if (counts < 2).any():
            raise ArgumentError(f"classes {classes[counts < 2].tolist()} have fewer than 2 samples")
        means = np.stack([x[labels == c].mean(axis=0) for c in classes])
        centered = x - means[np.searchsorted(classes, labels)]
        cov = centered.T @ centered / x.shape[0]
        d = cov.shape[0]
        cov[np.diag_indices(d)] += self.ridge_scale * np.trace(cov) / d
        try:
            self._chol = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"pooled covariance is singular after ridge ({exc})") from exc
        self.classes = classes
        self.means = means
        self.covariance = cov
        self._means_w = linalg.solve_triangular(self._chol, means.T, lower=True).T
        return self

    def min_distance(self, q: np.ndarray) -> np.ndarray:
        if self.means is None:
            raise StateError("MDS scorer used before fit")
        q = np.asarray(q, dtype=np.float64)
        qw = linalg.solve_triangular(self._chol, q.T, lower=True).T
        d2 = (qw * qw).sum(axis=1)[:, None] - 2.0 * qw @ self._means_w.T + (self._means_w**2).sum(axis=1)[None, :]
        return np.maximum(d2, 0.0).min(axis=1)


def mds_fit_score(id_x: np.ndarray, id_labels: np.ndarray, query: np.ndarray) -> np.ndarray:
    return -MahalanobisFit().fit(id_x, id_labels).min_distance(query)


def default_principal_dim(d_pen: int) -> int:
    return 64 if d_pen >= 128 else d_pen // 2


class VimFit:
    """Principal subspace of the head-centered ID features and the virtual-logit scale."""

    def __init__(self, principal_dim: int | None = None, alpha: float | None = None):
        self.principal_dim = principal_dim
        self.alpha_override = alpha
        self.alpha = None

    def fit(self, x: np.ndarray, head: ClassifierHead) -> VimFit:
        x = np.asarray(x, dtype=np.float64)
        d_pen = x.shape[1]
        k = default_principal_dim(d_pen) if self.principal_dim is None else int(self.principal_dim)
        if not 0 <= k < d_pen:
            raise ArgumentError(f"principal dim {k} must be < penultimate width {d_pen}")
        self.origin = -np.linalg.pinv(head.weight) @ head.bias
        xc = x - self.origin
        try:
            _, vecs = np.linalg.eigh(xc.T @ xc / x.shape[0])
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"eigendecomposition failed: {exc}") from exc
        # eigh sorts ascending: the leading d_pen - k columns span the residual space
        self.residual_basis = vecs[:, : d_pen - k]
        self.head = head
        if self.alpha_override is not None:
            self.alpha = float(self.alpha_override)
        else:
            max_logit = head.logits(x).max(axis=1).mean()
            self.alpha = float(max_logit / self.residual_norm(x).mean())
        return self

    def residual_norm(self, x: np.ndarray) -> np.ndarray:
        r = (np.asarray(x, dtype=np.float64) - self.origin) @ self.residual_basis
        return np.sqrt((r * r).sum(axis=1))

    def score(self, x: np.ndarray, logits: np.ndarray | None = None) -> np.ndarray:
        if self.alpha is None:
            raise StateError("ViM scorer used before fit")
        logits = self.head.logits(x) if logits is None else logits
        return score_energy(logits) - self.alpha * self.residual_norm(x)


def vim_fit_score(id_x, head: ClassifierHead, principal_dim: int | None, query_x, query_logits=None, alpha=None):
    return VimFit(principal_dim, alpha).fit(id_x, head).score(query_x, query_logits)


def react_threshold(id_x: np.ndarray, percentile: float) -> float:
    if not 0 < percentile <= 100:
        raise ArgumentError(f"percentile must be in (0, 100], got {percentile}")
    return float(np.percentile(np.asarray(id_x, dtype=np.float64), percentile))


def react_score(x: np.ndarray, head: ClassifierHead, threshold: float) -> np.ndarray:
    return score_energy(head.logits(np.minimum(np.asarray(x, dtype=np.float64), threshold)))


def react_fit_score(id_x, head: ClassifierHead, percentile: float, query_x) -> np.ndarray:
    return react_score(query_x, head, react_threshold(id_x, percentile))


def score_flow(model: FlowModel, x: FeatureSet | np.ndarray) -> np.ndarray:
    data = x.data if isinstance(x, FeatureSet) else np.asarray(x)
    if data.ndim != 2 or data.shape[1] != model.dim:
        raise ArgumentError(f"flow expects width {model.dim}, got shape {data.shape}")
    return model.log_prob(data)


# --------------------------------------------------------------------------- #
# scorer objects and registry
# --------------------------------------------------------------------------- #


class Scorer:
    """Base class: ``fit`` on the ID training bundle, then ``score`` query bundles."""

    name = "scorer"
    needs_fit = False

    def __init__(self):
        self._fitted = not self.needs_fit

    def fit(self, bundle: Bundle) -> Scorer:
        self._fit(bundle)
        self._fitted = True
        return self

    def score(self, bundle: Bundle) -> np.ndarray:
        if not self._fitted:
            raise StateError(f"scorer {self.name!r} used before fit")
        return np.asarray(self._score(bundle), dtype=np.float64)

    def _fit(self, bundle: Bundle) -> None:
        pass

    def _score(self, bundle: Bundle) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict:
        return {}


class FlowScorer(Scorer):
    name = "flow"

    def __init__(self, model: FlowModel, stages: Sequence[int] | None = None, l2: str = "concat", epsilon: float = 1e-12):
        super().__init__()
        self.model = model
        self.stages = None if stages is None else list(stages)
        self.l2 = l2
        self.epsilon = epsilon

    def _score(self, bundle):
        return score_flow(self.model, preprocess(bundle.features, self.stages, self.l2, self.epsilon))

    def params(self):
        return {"stages": self.stages, "l2": self.l2}


class MSPScorer(Scorer):
    name = "msp"

    def __init__(self, temperature: float = 1.0):
        super().__init__()
        _check_temperature(temperature)
        self.temperature = temperature

    def _score(self, bundle):
        return score_msp(bundle.logits, self.temperature)

    def params(self):
        return {"temperature": self.temperature}


class EnergyScorer(Scorer):
    name = "energy"

    def __init__(self, temperature: float = 1.0):
        super().__init__()
        _check_temperature(temperature)
        self.temperature = temperature

    def _score(self, bundle):
        return score_energy(bundle.logits, self.temperature)

    def params(self):
        return {"temperature": self.temperature}


class MDSScorer(Scorer):
    name = "mds"
    needs_fit = True

    def _fit(self, bundle):
        if bundle.features.labels is None:
            raise ArgumentError("MDS needs class labels on the ID training set")
        self.fit_state = MahalanobisFit().fit(bundle.penultimate, bundle.features.labels)

    def _score(self, bundle):
        return -self.fit_state.min_distance(bundle.penultimate)


class ViMScorer(Scorer):
    name = "vim"
    needs_fit = True

    def __init__(self, principal_dim: int | None = None, alpha: float | None = None):
        super().__init__()
        self.principal_dim = principal_dim
        self.alpha = alpha

    def _fit(self, bundle):
        self.fit_state = VimFit(self.principal_dim, self.alpha).fit(bundle.penultimate, bundle.require_head())

    def _score(self, bundle):
        return self.fit_state.score(bundle.penultimate)

    def params(self):
        return {"principal_dim": self.principal_dim, "alpha": self.fit_state.alpha if self._fitted else self.alpha}


class ReActScorer(Scorer):
    name = "react"
    needs_fit = True

    def __init__(self, percentile: float = 90.0, threshold: float | None = None):
        super().__init__()
        if not 0 < percentile <= 100:
            raise ArgumentError(f"percentile must be in (0, 100], got {percentile}")
        self.percentile = percentile
        self.threshold = threshold

    def _fit(self, bundle):
        if self.threshold is None:
            self.threshold = react_threshold(bundle.penultimate, self.percentile)

    def _score(self, bundle):
        return react_score(bundle.penultimate, bundle.require_head(), self.threshold)

    def params(self):
        return {"percentile": self.percentile, "threshold": self.threshold}


class FunctionScorer(Scorer):
    """Plugin built from two callables: ``fit(bundle) -> state`` and ``score(state, bundle)``."""

    needs_fit = True

    def __init__(self, name: str, fit: Callable[[Bundle], object], score: Callable[[object, Bundle], np.ndarray]):
        super().__init__()
        self.name = name
        self._fit_fn = fit
        self._score_fn = score

    def _fit(self, bundle):
        self.state = self._fit_fn(bundle)

    def _score(self, bundle):
        return self._score_fn(self.state, bundle)


_REGISTRY: dict[str, Callable[..., Scorer]] = {}


def register_scorer(name: str, factory: Callable[..., Scorer]) -> None:
    if name in _REGISTRY:
        raise RegistrationError(f"scorer {name!r} is already registered")
    _REGISTRY[name] = factory


def unregister_scorer(name: str) -> None:
    _REGISTRY.pop(name, None)


def plugin_scorer(name: str, fit: Callable[[Bundle], object], score: Callable[[object, Bundle], np.ndarray]) -> None:
    """Register a plugin; each ``get_scorer(name)`` returns a fresh, unfitted instance."""
    register_scorer(name, lambda **_: FunctionScorer(name, fit, score))


def available_scorers() -> list[str]:
    return sorted(_REGISTRY)


def get_scorer(name: str, **params) -> Scorer:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise RegistrationError(f"unknown scorer {name!r}; available: {', '.join(available_scorers())}") from None
    return factory(**params)


def _kw(params: dict, *keys) -> dict:
    return {k: params[k] for k in keys if params.get(k) is not None}


register_scorer("flow", lambda model=None, **p: FlowScorer(model, **_kw(p, "stages", "l2", "epsilon")))
register_scorer("msp", lambda **p: MSPScorer(**_kw(p, "temperature")))
register_scorer("msp_temp", lambda **p: MSPScorer(p.get("temperature") or 1000.0))
register_scorer("energy", lambda **p: EnergyScorer(**_kw(p, "temperature")))
register_scorer("mds", lambda **p: MDSScorer())
register_scorer("vim", lambda **p: ViMScorer(**_kw(p, "principal_dim", "alpha")))
register_scorer("react", lambda **p: ReActScorer(**_kw(p, "percentile", "threshold")))
