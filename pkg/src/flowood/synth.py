"""Synthetic feature benchmarks with known densities.

ID and OOD feature distributions are diagonal Gaussian mixtures, so the Bayes
score ``log p_id(x)`` is available in closed form and ``oracle_auroc`` gives a
Monte-Carlo reference for what any density-based detector can reach.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ArgumentError
from .evaluator import delong_auc_variance
from .features import (
    ClassifierHead,
    DatasetManifest,
    FeatureSet,
    ManifestEntry,
    write_fvec,
    write_head,
    write_manifest,
)
from .flow import LOG_2PI

_SPLIT_CODES = {"train": 0, "val": 1, "test": 2, "mc": 3}


@dataclass(frozen=True)
class Component:
    weight: float
    mean: np.ndarray
    var: np.ndarray


@dataclass(frozen=True)
class SyntheticSpec:
    """Diagonal Gaussian mixture plus per-split sample counts."""

    dim: int
    components: tuple[Component, ...]
    n_samples: Mapping[str, int] = field(default_factory=lambda: {"train": 4000, "val": 500, "test": 2000})
    seed: int = 0

    def __post_init__(self):
        comps = []
        for c in self.components:
            mean = np.broadcast_to(np.asarray(c.mean, dtype=np.float64), (self.dim,)).copy()
            var = np.broadcast_to(np.asarray(c.var, dtype=np.float64), (self.dim,)).copy()
            if not (var > 0).all():
                raise ArgumentError("component variances must be > 0")
            comps.append(Component(float(c.weight), mean, var))
        if not comps:
            raise ArgumentError("spec needs at least one component")
        w = np.array([c.weight for c in comps])
        if (w <= 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ArgumentError(f"component weights must be positive and sum to 1, got {w.tolist()}")
        object.__setattr__(self, "components", tuple(comps))

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.choice(len(self.components), size=n, p=self.weights)
        means = np.stack([c.mean for c in self.components])[labels]
        stds = np.sqrt(np.stack([c.var for c in self.components]))[labels]
        return means + stds * rng.standard_normal((n, self.dim)), labels

    def log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        terms = []
        for c in self.components:
            z2 = ((x - c.mean) ** 2 / c.var).sum(axis=1)
            terms.append(np.log(c.weight) - 0.5 * (self.dim * LOG_2PI + np.log(c.var).sum() + z2))
        t = np.stack(terms, axis=1)
        m = t.max(axis=1)
        return m + np.log(np.exp(t - m[:, None]).sum(axis=1))

    def shifted(self, shift: float, seed: int, n_samples: Mapping[str, int] | None = None) -> SyntheticSpec:
        """Same mixture with every mean moved by ``shift`` standard deviations in every dim."""
        comps = tuple(Component(c.weight, c.mean + shift * np.sqrt(c.var), c.var) for c in self.components)
        return SyntheticSpec(self.dim, comps, dict(n_samples or self.n_samples), seed)


def gaussian_spec(dim: int, mean: float | Sequence[float] = 0.0, var: float | Sequence[float] = 1.0,
                  n_samples: Mapping[str, int] | None = None, seed: int = 0) -> SyntheticSpec:
    kw = {} if n_samples is None else {"n_samples": dict(n_samples)}
    return SyntheticSpec(dim, (Component(1.0, np.asarray(mean, float), np.asarray(var, float)),), seed=seed, **kw)


def class_mixture_spec(stage_dims: Sequence[int], n_classes: int = 4, separation: float = 3.0,
                       n_samples: Mapping[str, int] | None = None, seed: int = 0) -> SyntheticSpec:
    """Equal-weight, unit-variance classes with random means of norm ~``separation`` in every stage."""
    dim = int(sum(stage_dims))
    rng = np.random.default_rng([seed, 99])
    means = []
    edges = np.concatenate([[0], np.cumsum(stage_dims)])
    for _ in range(n_classes):
        mu = np.zeros(dim)
        for lo, hi in zip(edges[:-1], edges[1:]):
            v = rng.standard_normal(hi - lo)
            mu[lo:hi] = separation * v / np.linalg.norm(v)
        means.append(mu)
    comps = tuple(Component(1.0 / n_classes, mu, np.ones(dim)) for mu in means)
    kw = {} if n_samples is None else {"n_samples": dict(n_samples)}
    return SyntheticSpec(dim, comps, seed=seed, **kw)


def _rng(spec: SyntheticSpec, role_code: int, split: str) -> np.random.Generator:
    return np.random.default_rng([spec.seed, role_code, _SPLIT_CODES[split]])


def bayes_head(spec: SyntheticSpec, lo: int, hi: int) -> ClassifierHead:
    """Linear classifier that is Bayes-optimal for the ID classes under their pooled diagonal variance."""
    var = sum(c.weight * c.var[lo:hi] for c in spec.components)
    w = np.stack([c.mean[lo:hi] / var for c in spec.components])
    b = np.array([-0.5 * np.sum(c.mean[lo:hi] ** 2 / var) + np.log(c.weight) for c in spec.components])
    return ClassifierHead(w, b)


@dataclass(frozen=True)
class OODSpec:
    spec: SyntheticSpec
    category: str = ""


def generate_benchmark(
    id_spec: SyntheticSpec,
    ood_specs: Mapping[str, OODSpec | SyntheticSpec],
    out_dir: str | os.PathLike,
    stage_dims: Sequence[int] | None = None,
    ood_val: str | None = None,
    with_head: bool = True,
) -> DatasetManifest:
    """Write FVEC files for every split and a manifest; returns the manifest.

    The classifier head sits on the last stage. ``ood_val`` names the OOD spec
    whose ``val`` split becomes the model-selection OOD set (default: the first).
    """
    if not ood_specs:
        raise ArgumentError("need at least one OOD spec")
    ood_specs = {k: v if isinstance(v, OODSpec) else OODSpec(v) for k, v in ood_specs.items()}
    for name, o in ood_specs.items():
        if o.spec.dim != id_spec.dim:
            raise ArgumentError(f"OOD spec {name!r} has dim {o.spec.dim}, ID has {id_spec.dim}")
    stage_dims = [id_spec.dim] if stage_dims is None else [int(s) for s in stage_dims]
    if sum(stage_dims) != id_spec.dim:
        raise ArgumentError(f"stage_dims {stage_dims} do not sum to dim {id_spec.dim}")
    ood_val = ood_val or next(iter(ood_specs))
    if ood_val not in ood_specs:
        raise ArgumentError(f"unknown ood_val spec {ood_val!r}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pen = len(stage_dims) - 1
    lo = sum(stage_dims[:-1])
    head = bayes_head(id_spec, lo, id_spec.dim) if with_head else None

    def make(spec, role_code, split, name, labelled):
        x, labels = spec.sample(spec.n_samples[split], _rng(spec, role_code, split))
        logits = None if head is None else head.logits(x[:, lo:])
        return FeatureSet(x, stage_dims, logits, labels if (labelled and head is not None) else None, name=name)

    entries = []
    for split, role in (("train", "id_train"), ("val", "id_val"), ("test", "id_test")):
        fs = make(id_spec, 0, split, role, labelled=True)
        write_fvec(out / f"{role}.fvec", fs)
        entries.append(ManifestEntry(f"{role}.fvec", role, "id", role))
    for i, (name, o) in enumerate(ood_specs.items(), start=1):
        if name == ood_val:
            fs = make(o.spec, i, "val", f"{name}_val", labelled=False)
            write_fvec(out / f"ood_val_{name}.fvec", fs)
            entries.append(ManifestEntry(f"ood_val_{name}.fvec", "ood_val", o.category, f"{name}_val"))
        fs = make(o.spec, i, "test", name, labelled=False)
        write_fvec(out / f"ood_test_{name}.fvec", fs)
        entries.append(ManifestEntry(f"ood_test_{name}.fvec", "ood_test", o.category, name))

    head_path = None
    if head is not None:
        write_head(out / "head.fvec", head)
        head_path = "head.fvec"
    manifest = DatasetManifest(tuple(entries), pen, head_path, root=out)
    write_manifest(out / "manifest.json", manifest)
    return manifest


def default_benchmark_specs(stage_dims: Sequence[int] = (4, 4, 8), n_classes: int = 4, near_shift: float = 1.5,
                            far_shift: float = 6.0, n_train: int = 4000, n_val: int = 500, n_test: int = 2000,
                            seed: int = 0, separation: float = 3.0) -> tuple[SyntheticSpec, dict[str, OODSpec]]:
    """ID class mixture plus a near (small mean shift) and a far (large shift) OOD set."""
    id_spec = class_mixture_spec(stage_dims, n_classes, separation,
                                 n_samples={"train": n_train, "val": n_val, "test": n_test}, seed=seed)
    n_ood = {"val": n_val, "test": n_test}
    return id_spec, {
        "near_shift": OODSpec(id_spec.shifted(near_shift, seed, n_ood), "near"),
        "far_shift": OODSpec(id_spec.shifted(far_shift, seed, n_ood), "far"),
    }


def oracle_auroc(id_spec: SyntheticSpec, ood_spec: SyntheticSpec, n_mc: int = 100_000,
                 seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo AUROC of the true ID log-density, with its DeLong standard error."""
    if id_spec.dim != ood_spec.dim:
        raise ArgumentError("specs must share dim")
    if n_mc < 1000:
        raise ArgumentError("n_mc must be >= 1000")
    x_id, _ = id_spec.sample(n_mc, np.random.default_rng([seed, 0]))
    x_ood, _ = ood_spec.sample(n_mc, np.random.default_rng([seed, 1]))
    auc, var = delong_auc_variance(id_spec.log_density(x_id), id_spec.log_density(x_ood))
    return auc, float(np.sqrt(var))
