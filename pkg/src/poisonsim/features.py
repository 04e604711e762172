"""Raw-sample space, differentiable feature extractors, and synthetic populations.

Raw samples are vectors in [0,1]^d_in (normalized sensor intensities). A
feature extractor is a tiny fully-connected network mapping raw samples to
embeddings, optionally L2-normalized. Everything here is immutable after
construction and deterministic under a seed, so datasets and extractors can be
shared freely across experiment workers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "identity")


class DimensionError(ValueError):
    """Input dimensionality does not match the extractor or mask."""


class EmbeddingParseError(ValueError):
    """Malformed embedding CSV; carries the offending 1-based line number."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Layer:
    """One dense layer: activation(weight @ x + bias)."""

    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)
    activation: str = "tanh"

    def __post_init__(self):
        w = _frozen_array(self.weight)
        b = _frozen_array(self.bias)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise DimensionError(
                f"layer shapes {w.shape} / {b.shape} are inconsistent")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class FeatureExtractor:
    """Differentiable map from raw space to embedding space.

    Args:
        layers: dense layers whose dimensions chain from d_in to d_emb.
        l2_normalize: when true the final output is scaled to unit L2 norm
            (the normalization Jacobian is part of `jacobian`).
        seed: seed the weights were drawn from, kept for provenance.
    """

    layers: tuple[Layer, ...]
    l2_normalize: bool = True
    seed: int | None = None

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("extractor needs at least one layer")
        for prev, cur in zip(layers, layers[1:]):
            if cur.weight.shape[1] != prev.weight.shape[0]:
                raise DimensionError(
                    f"layer chain broken: {prev.weight.shape} -> {cur.weight.shape}")
        object.__setattr__(self, "layers", layers)

    @property
    def d_in(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def d_emb(self) -> int:
        return self.layers[-1].weight.shape[0]

    def _check_input(self, X: np.ndarray):
        if X.shape[-1] != self.d_in:
            raise DimensionError(
                f"input has dimension {X.shape[-1]}, extractor expects {self.d_in}")

    def forward_batch(self, X) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward pass keeping per-layer activations for `backprop_batch`.

        Returns (embeddings, cache) where cache[0] is the input batch and
        cache[i] the post-activation output of layer i; the embedding row
        norms are cached last when normalization is on.
        """
        A = np.atleast_2d(np.asarray(X, dtype=float))
        self._check_input(A)
        cache = [A]
        for layer in self.layers:
            Z = A @ layer.weight.T + layer.bias
            A = np.tanh(Z) if layer.activation == "tanh" else Z
            cache.append(A)
        if self.l2_normalize:
            norms = np.linalg.norm(A, axis=1, keepdims=True)
            if np.any(norms == 0.0):
                raise ArithmeticError("zero-norm pre-normalization output")
            A = A / norms
            cache.append(norms)
        return A, cache

    def extract_batch(self, X) -> np.ndarray:
        """Embed a batch of raw samples, rows aligned with the input."""
        return self.forward_batch(X)[0]

    def extract(self, x) -> np.ndarray:
        """Embed a single raw sample."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise DimensionError("extract expects a single vector")
        return self.extract_batch(x[None, :])[0]

    def backprop_batch(self, cache, upstream: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product: d(upstream . embedding)/d(input), per row.

        Much cheaper than forming full Jacobians when only a gradient of a
        scalar loss is needed (one matmul chain instead of d_emb of them).
        """
        if self.l2_normalize:
            norms = cache[-1]
            pre = cache[-2]
            e = pre / norms
            g = (upstream - e * np.sum(upstream * e, axis=1, keepdims=True)) / norms
            acts = cache[:-1]
        else:
            g = upstream
            acts = cache
        for layer, a_out in zip(reversed(self.layers), reversed(acts[1:])):
            if layer.activation == "tanh":
                g = g * (1.0 - a_out ** 2)
            g = g @ layer.weight
        return g

    def jacobian(self, x) -> np.ndarray:
        """Exact analytic Jacobian (d_emb x d_in) at x, chain rule layer by layer."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise DimensionError("jacobian expects a single vector")
        self._check_input(x)
        a = x
        J = np.eye(self.d_in)
        for layer in self.layers:
            z = layer.weight @ a + layer.bias
            J = layer.weight @ J
            if layer.activation == "tanh":
                a = np.tanh(z)
                J = (1.0 - a ** 2)[:, None] * J
            else:
                a = z
        if self.l2_normalize:
            r = np.linalg.norm(a)
            if r == 0.0:
                raise ArithmeticError("zero-norm pre-normalization output")
            e = a / r
            # d(e)/d(pre) = (I - e e^T)/r
            J = (J - np.outer(e, e @ J)) / r
        return J


def random_extractor(d_in: int, d_emb: int, hidden=(48, 32), seed: int = 0,
                     l2_normalize: bool = True) -> FeatureExtractor:
    """Two hidden tanh layers plus a linear output, Xavier-style 1/sqrt(fan_in) init."""
    rng = np.random.default_rng(seed)
    dims = (d_in, *hidden, d_emb)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
        activation = "tanh" if i < len(dims) - 2 else "identity"
        layers.append(Layer(w, np.zeros(fan_out), activation))
    return FeatureExtractor(tuple(layers), l2_normalize=l2_normalize, seed=seed)


def perturbed_extractor(base: FeatureExtractor, rel_scale: float,
                        seed: int = 0) -> FeatureExtractor:
    """Weight-jittered copy of an extractor.

    Models a closely related model (same architecture, retrained on similar
    data): each weight matrix gets Gaussian noise of rel_scale times its own
    standard deviation.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for layer in base.layers:
        scale = rel_scale * float(np.std(layer.weight))
        w = layer.weight + rng.normal(0.0, scale, size=layer.weight.shape)
        layers.append(Layer(w, layer.bias, layer.activation))
    return FeatureExtractor(tuple(layers), l2_normalize=base.l2_normalize, seed=seed)


@dataclass(frozen=True)
class PerturbationMask:
    """Boolean footprint of editable coordinates, optionally laid out on a grid."""

    editable: np.ndarray
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        mask = _frozen_array(self.editable, dtype=bool)
        if mask.ndim != 1 or not mask.any():
            raise ValueError("mask must be a 1-D vector with >= 1 editable coordinate")
        if self.grid_shape is not None:
            rows, cols = self.grid_shape
            if rows * cols != mask.shape[0]:
                raise DimensionError(
                    f"grid {self.grid_shape} does not tile {mask.shape[0]} coordinates")
            object.__setattr__(self, "grid_shape", (int(rows), int(cols)))
        object.__setattr__(self, "editable", mask)

    @property
    def n_editable(self) -> int:
        return int(self.editable.sum())

    @property
    def editable_fraction(self) -> float:
        return self.n_editable / self.editable.shape[0]


def full_mask(d_in: int, grid_shape=None) -> PerturbationMask:
    """Everything editable: the perfect/unconstrained attacker."""
    return PerturbationMask(np.ones(d_in, dtype=bool), grid_shape)


def block_mask(d_in: int, fraction: float = 0.086, start: int = 0,
               grid_shape=None) -> PerturbationMask:
    """Contiguous editable block covering about `fraction` of coordinates.

    The default fraction mimics an accessory footprint of roughly 8.6% of the
    input surface.
    """
    count = max(1, round(fraction * d_in))
    if start < 0 or start + count > d_in:
        raise ValueError(f"block [{start}, {start + count}) exceeds d_in={d_in}")
    mask = np.zeros(d_in, dtype=bool)
    mask[start:start + count] = True
    return PerturbationMask(mask, grid_shape)


def apply_perturbation(x, mask: PerturbationMask, delta) -> np.ndarray:
    """Replace masked coordinates of x by delta values; clamp result to [0,1]."""
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if x.shape[-1] != mask.editable.shape[0] or delta.shape[-1] != mask.editable.shape[0]:
        raise DimensionError("x, mask and delta must share d_in")
    m = mask.editable
    return np.clip(np.where(m, delta, x), 0.0, 1.0)


@dataclass(frozen=True)
class PopulationConfig:
    """Synthetic population layout. Defaults are the frozen benchmark values."""

    n_users: int = 30
    samples_per_user: int = 40
    d_in: int = 64
    enrolment_size: int = 10
    # Per-user cluster: isotropic Gaussian of scale sigma_user around a center
    # seeded sigma_pop away from mid-range, then refined so the center's
    # embedding lands on the user's assigned direction (see
    # generate_synthetic_population). A small fraction of samples get their
    # noise inflated by outlier_scale, modeling occasional bad captures
    # (occlusion, extreme pose); the resulting heavy genuine tail is what
    # keeps the EER threshold a realistic distance out from the cluster core.
    sigma_user: float = 0.02
    sigma_pop: float = 0.35
    outlier_fraction: float = 0.08
    outlier_scale: float = 6.9

    def __post_init__(self):
        if self.samples_per_user < self.enrolment_size + 1:
            raise ValueError("each user needs at least enrolment_size + 1 samples")


@dataclass(frozen=True)
class UserSamples:
    """One user's samples; raw is None for embedding-only datasets."""

    raw: np.ndarray | None
    embeddings: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "embeddings", _frozen_array(self.embeddings))
        object.__setattr__(self, "train_idx", _frozen_array(self.train_idx, dtype=int))
        object.__setattr__(self, "test_idx", _frozen_array(self.test_idx, dtype=int))
        if self.raw is not None:
            object.__setattr__(self, "raw", _frozen_array(self.raw))

    @property
    def n_samples(self) -> int:
        return self.embeddings.shape[0]

    @property
    def train_embeddings(self) -> np.ndarray:
        return self.embeddings[self.train_idx]

    @property
    def test_embeddings(self) -> np.ndarray:
        return self.embeddings[self.test_idx]

    @property
    def train_raw(self) -> np.ndarray:
        if self.raw is None:
            raise ValueError("dataset is embedding-only; no raw samples")
        return self.raw[self.train_idx]

    @property
    def test_raw(self) -> np.ndarray:
        if self.raw is None:
            raise ValueError("dataset is embedding-only; no raw samples")
        return self.raw[self.test_idx]


@dataclass(frozen=True)
class PopulationDataset:
    """Users keyed by id, either raw mode (with embeddings) or embedding-only."""

    users: dict[str, UserSamples]
    mode: str  # "raw" | "embedding_only"

    def __post_init__(self):
        if self.mode not in ("raw", "embedding_only"):
            raise ValueError(f"unknown dataset mode {self.mode!r}")
        if not self.users:
            raise ValueError("dataset has no users")

    @property
    def user_ids(self) -> tuple[str, ...]:
        return tuple(self.users)

    @property
    def d_emb(self) -> int:
        first = next(iter(self.users.values()))
        return first.embeddings.shape[1]


def _assigned_directions(n: int, d_emb: int, rng) -> np.ndarray:
    """Unit target directions for user centers: +-columns of rotated bases.

    Users 2i and 2i+1 share an axis with opposite sign; users on distinct
    axes are mutually orthogonal, so inter-user embedding distances are
    sqrt(2) apart from the antipodal pairs. Mirrors how a trained extractor
    spreads identities evenly over the embedding sphere; with random raw
    centers instead, the net's warp makes inter-user distances span a ~2x
    band, drowning the attack dynamics in placement luck. For n > 2*d_emb a
    fresh rotated basis is drawn; cross-basis angles are then unconstrained.
    """
    targets: list[np.ndarray] = []
    while len(targets) < n:
        g = rng.standard_normal((d_emb, d_emb))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        for i in range(d_emb):
            targets.append(q[:, i].copy())
            targets.append(-q[:, i])
    return np.asarray(targets[:n])


def _refine_centers(extractor: FeatureExtractor, targets: np.ndarray,
                    x0: np.ndarray, steps: int = 400) -> np.ndarray:
    """Pull each raw center's embedding onto its assigned direction.

    Per-row projected gradient descent on ||f(x) - t||^2 with multiplicative
    step adaptation; rows converge independently. Purely deterministic.
    """
    x = x0.copy()
    resid = np.sum((extractor.extract_batch(x) - targets) ** 2, axis=1)
    step = np.full(len(x), 0.5)
    for _ in range(steps):
        out, cache = extractor.forward_batch(x)
        grad = extractor.backprop_batch(cache, 2.0 * (out - targets))
        cand = np.clip(x - step[:, None] * grad, 0.0, 1.0)
        cand_resid = np.sum((extractor.extract_batch(cand) - targets) ** 2,
                            axis=1)
        better = cand_resid < resid
        x = np.where(better[:, None], cand, x)
        resid = np.where(better, cand_resid, resid)
        step = np.maximum(np.where(better, step * 1.2, step * 0.5), 1e-6)
        if resid.max() < 1e-8:
            break
    return x


def generate_synthetic_population(cfg: PopulationConfig,
                                  extractor: FeatureExtractor,
                                  seed: int) -> PopulationDataset:
    """Sample a synthetic user population and embed it with the extractor.

    Each user is an isotropic Gaussian cluster in raw space, clamped to [0,1],
    around a user-specific center. Centers start sigma_pop away from mid-range
    and are refined so their embeddings sit on evenly spread directions of the
    embedding sphere (see _assigned_directions). Deterministic under the seed.
    The first enrolment_size samples of each user form the train split, the
    remainder the test split.
    """
    if cfg.d_in != extractor.d_in:
        raise DimensionError(
            f"config d_in={cfg.d_in} but extractor expects {extractor.d_in}")
    if cfg.sigma_user >= cfg.sigma_pop:
        warnings.warn(
            "sigma_user >= sigma_pop: user clusters will likely be inseparable",
            RuntimeWarning)
    rng = np.random.default_rng(seed)
    targets = _assigned_directions(cfg.n_users, extractor.d_emb, rng)
    if not extractor.l2_normalize:
        # Targets live on the unit sphere; match the typical pre-normalization
        # output scale so the refinement objective stays well conditioned.
        probe = rng.random((32, cfg.d_in))
        targets = targets * np.median(
            np.linalg.norm(extractor.extract_batch(probe), axis=1))
    dirs = rng.normal(size=(cfg.n_users, cfg.d_in))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centers = _refine_centers(
        extractor, targets, np.clip(0.5 + cfg.sigma_pop * dirs, 0.0, 1.0))
    users: dict[str, UserSamples] = {}
    width = len(str(cfg.n_users - 1))
    for u in range(cfg.n_users):
        noise = rng.normal(size=(cfg.samples_per_user, cfg.d_in)) * cfg.sigma_user
        heavy = rng.random(cfg.samples_per_user) < cfg.outlier_fraction
        noise[heavy] *= cfg.outlier_scale
        raw = np.clip(centers[u] + noise, 0.0, 1.0)
        embeddings = extractor.extract_batch(raw)
        users[f"u{u:0{width}d}"] = UserSamples(
            raw=raw,
            embeddings=embeddings,
            train_idx=np.arange(cfg.enrolment_size),
            test_idx=np.arange(cfg.enrolment_size, cfg.samples_per_user),
        )
    return PopulationDataset(users=users, mode="raw")


def save_embeddings(dataset: PopulationDataset, path) -> None:
    """Write embeddings as CSV: header user_id,split,e0..e{d-1}; UTF-8, LF."""
    d = dataset.d_emb
    header = "user_id,split," + ",".join(f"e{i}" for i in range(d))
    lines = [header]
    for uid, user in dataset.users.items():
        train = set(int(i) for i in user.train_idx)
        for idx, emb in enumerate(user.embeddings):
            split = "train" if idx in train else "test"
            values = ",".join(repr(float(v)) for v in emb)
            lines.append(f"{uid},{split},{values}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_embeddings(path) -> PopulationDataset:
    """Load an embeddings CSV into an embedding-only dataset.

    Raw-space attack generation is unavailable on the result; only flows that
    work directly in embedding space apply.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise EmbeddingParseError("empty file", 1)
    header = lines[0].split(",")
    if header[:2] != ["user_id", "split"] or len(header) < 3:
        raise EmbeddingParseError(
            "header must be user_id,split,e0,...", 1)
    d = len(header) - 2
    if header[2:] != [f"e{i}" for i in range(d)]:
        raise EmbeddingParseError("embedding columns must be e0,e1,...", 1)
    rows: dict[str, list[tuple[str, np.ndarray]]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != d + 2:
            raise EmbeddingParseError(
                f"expected {d + 2} fields, got {len(parts)}", lineno)
        uid, split = parts[0], parts[1]
        if split not in ("train", "test"):
            raise EmbeddingParseError(f"unknown split {split!r}", lineno)
        try:
            values = np.array([float(v) for v in parts[2:]], dtype=float)
        except ValueError as exc:
            raise EmbeddingParseError(str(exc), lineno) from None
        if not np.all(np.isfinite(values)):
            raise EmbeddingParseError("non-finite embedding value", lineno)
        rows.setdefault(uid, []).append((split, values))
    users: dict[str, UserSamples] = {}
    for uid, entries in rows.items():
        embeddings = np.stack([vals for _, vals in entries])
        splits = [s for s, _ in entries]
        train_idx = np.array([i for i, s in enumerate(splits) if s == "train"], dtype=int)
        test_idx = np.array([i for i, s in enumerate(splits) if s == "test"], dtype=int)
        users[uid] = UserSamples(raw=None, embeddings=embeddings,
                                 train_idx=train_idx, test_idx=test_idx)
    return PopulationDataset(users=users, mode="embedding_only")
