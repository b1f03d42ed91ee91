"""Seeded generators: dictionaries, planted sparse signals, labeled data.

All functions take a 64-bit master seed and draw from derived Philox streams
(see rng.py), so every artifact is reproducible from the seed alone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import rng
from .core import TargetSignal, UnitDictionary, mutual_coherence
from .errors import InvalidConfigError, InvalidKError, InvalidShapeError, UnreachableError

# Bisection on the blend parameter stops after this many halvings.
_MAX_BISECT = 60


def random_orthonormal_dictionary(dim: int, n_atoms: int, seed: int) -> UnitDictionary:
    """Haar-distributed orthonormal columns via QR with sign canonicalization.

    Requires 2 <= n_atoms <= dim. Fixing the sign of each R diagonal makes the
    result both uniformly distributed and independent of the QR routine's sign
    convention.
    """
    if not 2 <= n_atoms <= dim:
        raise InvalidShapeError(f"need 2 <= n_atoms <= dim, got dim={dim}, n_atoms={n_atoms}")
    gen = rng.stream(seed, "orthonormal")
    g = gen.standard_normal((dim, n_atoms))
    q, r = np.linalg.qr(g)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return UnitDictionary(q)


def _blend(base: np.ndarray, u: np.ndarray, t: float) -> np.ndarray:
    m = (1.0 - t) * base + t * u[:, None]
    return m / np.linalg.norm(m, axis=0)


def coherent_dictionary(
    dim: int, n_atoms: int, target_mu: float, tol: float, seed: int
) -> UnitDictionary:
    """Dictionary whose mutual coherence is target_mu within tol.

    Construction: draw an orthonormal base and a random unit direction u, flip
    base column signs so every column has nonnegative inner product with u,
    then blend, e_i = normalize((1-t) q_i + t u). Coherence is 0 at t=0,
    approaches 1 as t -> 1, and the sign alignment makes it monotone in t, so
    the target is found by bisection. Raises UnreachableError when the target
    cannot be bracketed or hit within tol.
    """
    if not 0.0 <= target_mu < 1.0:
        raise InvalidConfigError(f"target_mu must be in [0, 1), got {target_mu}")
    if tol <= 0.0:
        raise InvalidConfigError(f"tol must be positive, got {tol}")
    if not 2 <= n_atoms <= dim:
        raise InvalidShapeError(f"need 2 <= n_atoms <= dim, got dim={dim}, n_atoms={n_atoms}")

    gen = rng.stream(seed, "coherent")
    g = gen.standard_normal((dim, n_atoms))
    q, r = np.linalg.qr(g)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    u = gen.standard_normal(dim)
    u /= np.linalg.norm(u)
    base = q * np.where(q.T @ u < 0, -1.0, 1.0)

    if target_mu == 0.0:
        return UnitDictionary(base)

    lo, hi = 0.0, 1.0 - 1e-9
    mu_hi = mutual_coherence(UnitDictionary(_blend(base, u, hi)))
    if mu_hi < target_mu:
        raise UnreachableError(
            f"coherence {target_mu} exceeds the construction's ceiling {mu_hi:.6f}"
        )
    for _ in range(_MAX_BISECT):
        mid = 0.5 * (lo + hi)
        if mutual_coherence(UnitDictionary(_blend(base, u, mid))) < target_mu:
            lo = mid
        else:
            hi = mid
    result = UnitDictionary(_blend(base, u, 0.5 * (lo + hi)))
    if abs(mutual_coherence(result) - target_mu) > tol:
        raise UnreachableError(
            f"bisection missed coherence {target_mu} within tol {tol}"
        )
    return result


def planted_signal(
    dictionary: UnitDictionary, k: int, seed: int, coeff_law: str = "rademacher"
) -> TargetSignal:
    """Exact k-sparse combination of dictionary atoms with recorded truth.

    The support is a uniform random k-subset. Coefficients are +-1 signs
    ("rademacher", the default; equal magnitudes are the adversarial case for
    greedy recovery) or signed magnitudes uniform in [0.5, 1.5] ("uniform").
    """
    n = dictionary.n_atoms
    if not 1 <= k <= n:
        raise InvalidKError(f"k must be in [1, {n}], got {k}")
    if coeff_law not in ("rademacher", "uniform"):
        raise InvalidConfigError(f"unknown coeff_law {coeff_law!r}")
    gen = rng.stream(seed, "planted")
    support = np.sort(gen.choice(n, size=k, replace=False))
    signs = gen.integers(0, 2, size=k) * 2.0 - 1.0
    if coeff_law == "uniform":
        coef = signs * gen.uniform(0.5, 1.5, size=k)
    else:
        coef = signs
    vector = dictionary.data[:, support] @ coef
    return TargetSignal(vector=vector, support=tuple(int(i) for i in support), coefficients=coef)


@dataclass(frozen=True)
class ClassificationDataset:
    """Labeled vectors whose trailing feature block is an exact linear mixture.

    features is M x D; the first n_informative columns carry the class signal
    (per-class Gaussian centroid plus unit noise) and the remaining columns
    equal features[:, :n_informative] @ mixing exactly.
    """

    features: np.ndarray
    labels: np.ndarray
    mixing: np.ndarray
    n_informative: int
    n_classes: int
    class_sep: float
    seed: int

    def __post_init__(self):
        f = np.array(self.features, dtype=np.float64, copy=True)
        l = np.array(self.labels, dtype=np.int64, copy=True)
        a = np.array(self.mixing, dtype=np.float64, copy=True)
        if f.ndim != 2 or l.ndim != 1 or f.shape[0] != l.shape[0]:
            raise InvalidShapeError("features and labels misaligned")
        if a.shape != (self.n_informative, f.shape[1] - self.n_informative):
            raise InvalidShapeError("mixing matrix shape inconsistent with feature split")
        for arr, name in ((f, "features"), (l, "labels"), (a, "mixing")):
            if not np.all(np.isfinite(arr)):
                raise InvalidShapeError(f"{name} contains non-finite entries")
            arr.setflags(write=False)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", l)
        object.__setattr__(self, "mixing", a)


def synthetic_classification(
    samples: int = 4000,
    features: int = 100,
    informative: int = 10,
    classes: int = 10,
    class_sep: float = 0.6,
    seed: int = 42,
) -> ClassificationDataset:
    """Classification data with a deliberately redundant feature dictionary.

    Class c gets a centroid drawn N(0, class_sep^2 I) in the informative
    subspace; each sample is its class centroid plus unit Gaussian noise. The
    redundant block is an exact random linear image of the informative block
    (entries of the mixing matrix are N(0, 1/informative)), which drives the
    column coherence of the feature matrix far above that of the informative
    block alone. Labels are balanced round-robin (within one sample) and then
    shuffled.
    """
    if samples < 1 or classes < 2 or informative < 1:
        raise InvalidConfigError("need samples >= 1, classes >= 2, informative >= 1")
    if not informative <= features:
        raise InvalidConfigError(
            f"informative ({informative}) must not exceed features ({features})"
        )
    if class_sep < 0:
        raise InvalidConfigError(f"class_sep must be nonnegative, got {class_sep}")
    if samples < classes:
        raise InvalidConfigError("need at least one sample per class")

    gen = rng.stream(rng.check_seed(seed), "dataset")
    centroids = class_sep * gen.standard_normal((classes, informative))
    labels = np.arange(samples, dtype=np.int64) % classes
    labels = labels[gen.permutation(samples)]
    noise = gen.standard_normal((samples, informative))
    x_inf = centroids[labels] + noise
    n_red = features - informative
    mixing = gen.standard_normal((informative, n_red)) / np.sqrt(informative)
    x = np.hstack([x_inf, x_inf @ mixing])
    return ClassificationDataset(
        features=x,
        labels=labels,
        mixing=mixing,
        n_informative=informative,
        n_classes=classes,
        class_sep=float(class_sep),
        seed=int(seed),
    )


def export_classification_csv(dataset: ClassificationDataset, path) -> None:
    """Write `label,f0,...,f{D-1}` rows with 17 significant digits."""
    d = dataset.features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{j}" for j in range(d)])
        for label, row in zip(dataset.labels, dataset.features):
            writer.writerow([int(label)] + [f"{v:.17g}" for v in row])


def load_classification_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an exported dataset back as (features, labels)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "label":
            raise InvalidShapeError("expected a header starting with 'label'")
        rows = list(reader)
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    feats = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    if feats.shape[1] != len(header) - 1:
        raise InvalidShapeError("row width disagrees with header")
    return feats, labels
