"""Knowledge-space gate and classifier.

Test samples are projected into attribute space by per-attribute
projectors. A sample whose binarized projection exactly matches a seen
class signature is labeled immediately. Everything else is scored against
per-seen-class Gaussian mixtures fitted on projections of real plus
generated samples; a sample outside every class's control limit is routed
to an attribute-based Naive Bayes model that ranks the unseen classes,
otherwise it gets the nearest seen signature.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data as datamod
from . import nn
from .generator import (
    CheckpointMismatch,
    GeneratorModel,
    build_donor_pools,
    default_generation_counts,
    generate_samples,
)

GATE_FORMAT = "kss-d/v1"

COARSE = "coarse"
FINE_SEEN = "fine-seen"
FINE_UNSEEN = "fine-unseen"


@dataclass(frozen=True)
class GateHyperparams:
    """Projector training schedule, mixture size and EM controls."""

    ap_hidden: tuple = (64,)
    ap_epochs: int = 100
    ap_batch: int = 256
    learning_rate: float = 1e-3
    n_components: int = 3
    em_tol: float = 1e-4
    em_max_iter: int = 100
    cov_reg: float = 1e-6
    var_floor: float = 1e-6

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.em_max_iter < 1 or self.em_tol <= 0:
            raise ValueError("invalid EM controls")
        if self.ap_epochs < 1 or self.ap_batch < 1:
            raise ValueError("invalid projector schedule")
        object.__setattr__(self, "ap_hidden", tuple(self.ap_hidden))

    def to_dict(self) -> dict:
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v
                for f in fields(self)}

    @classmethod
    def from_dict(cls, payload: dict) -> "GateHyperparams":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter(s): {sorted(unknown)}")
        return cls(**payload)


# ---------------------------------------------------------------------------
# Attribute projectors


class AttributeProjector:
    """M per-attribute binary classifiers; predict() returns the probability
    that each attribute is present, one column per attribute."""

    def __init__(self, stage: str, stacks: List[nn.DenseStack]):
        if stage not in ("AP1", "AP2"):
            raise ValueError(f"stage must be 'AP1' or 'AP2', got {stage!r}")
        self.stage = stage
        self.stacks = stacks

    @property
    def n_attributes(self) -> int:
        return len(self.stacks)

    def predict(self, x: np.ndarray) -> np.ndarray:
        cols = [nn.softmax(s.forward(x))[:, 1] for s in self.stacks]
        return np.stack(cols, axis=1)

    def to_dict(self) -> dict:
        return {"stage": self.stage, "stacks": [s.to_dict() for s in self.stacks]}

    @classmethod
    def from_dict(cls, payload: dict) -> "AttributeProjector":
        return cls(payload["stage"], [nn.DenseStack.from_dict(d) for d in payload["stacks"]])


def train_ap(
    stage: str,
    real: datamod.LabeledDataset,
    fake_unseen: Optional[Tuple[np.ndarray, np.ndarray]],
    hp: GateHyperparams,
    rng: np.random.Generator,
) -> AttributeProjector:
    """Fit the per-attribute classifiers by cross-entropy over the pooled data.

    The first stage trains on real seen samples only; the second stage pools
    generated unseen samples (with their attribute rows) on top."""
    if stage == "AP1" and fake_unseen is not None:
        raise ValueError("AP1 is trained on real data only")
    if stage == "AP2" and fake_unseen is None:
        raise ValueError("AP2 needs generated unseen samples")
    x = real.samples
    z = real.attributes
    if fake_unseen is not None:
        fx, fz = fake_unseen
        if fx.shape[0] != fz.shape[0]:
            raise ValueError("fake samples and attribute labels disagree in length")
        if fx.shape[0]:
            x = np.concatenate([x, fx])
            z = np.concatenate([z, np.asarray(fz, dtype=np.int64)])

    m = z.shape[1]
    for k in range(m):
        if len(np.unique(z[:, k])) < 2:
            warnings.warn(
                f"attribute {k} has a single value in the {stage} pool; "
                "its classifier will be constant"
            )

    dims = [x.shape[1], *hp.ap_hidden, 2]
    acts = ["leaky_relu"] * (len(dims) - 2) + ["identity"]
    seeds = np.random.SeedSequence(int(rng.integers(2**32))).spawn(m)
    stacks = [nn.DenseStack(dims, acts, seed=int(s.generate_state(1)[0])) for s in seeds]
    opt = nn.AdamW([p for s in stacks for p in s.parameters()], lr=hp.learning_rate)

    n = x.shape[0]
    for _ in range(hp.ap_epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.ap_batch):
            idx = order[start:start + hp.ap_batch]
            grads = []
            for k, stack in enumerate(stacks):
                logits, cache = stack.forward_cache(x[idx])
                _, dlogits = nn.binary_2logit_xent(logits, z[idx, k])
                _, g = stack.backward(cache, dlogits / m)
                grads.extend(g)
            opt.step(grads)
    return AttributeProjector(stage, stacks)


def coarse_classify(ap1: AttributeProjector, x: np.ndarray,
                    matrix: datamod.AttributeMatrix) -> List[Optional[int]]:
    """Binarize the stage-1 projection at 0.5 and look for an exact seen
    signature; None marks samples deferred to the fine stage."""
    binarized = (ap1.predict(np.atleast_2d(x)) > 0.5).astype(np.int64)
    lookup = {tuple(matrix.row(j)): j for j in matrix.seen_ids}
    return [lookup.get(tuple(row)) for row in binarized]


# ---------------------------------------------------------------------------
# Per-class Gaussian mixtures


@dataclass
class SeenClassGmm:
    """Full-covariance mixture for one seen class in attribute space."""

    class_id: int
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    trace: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        if not np.isclose(self.weights.sum(), 1.0, atol=1e-9):
            raise ValueError("component weights must sum to 1")
        if (self.weights < 0).any():
            raise ValueError("component weights must be nonnegative")

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[0])


def _log_gaussian(points: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Log density of a full-covariance Gaussian at each point, via Cholesky."""
    m = mean.shape[0]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("covariance not positive-definite") from None
    diff = points - mean
    # forward substitution through the factor; small M keeps this cheap
    y = np.linalg.solve(chol, diff.T).T
    quad = np.sum(y * y, axis=1)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (m * np.log(2.0 * np.pi) + logdet + quad)


def _component_log_density(gmm_weights, gmm_means, gmm_covs, points) -> np.ndarray:
    """[n, R] matrix of log(alpha_r) + log N_r(point)."""
    cols = []
    for a, mu, cov in zip(gmm_weights, gmm_means, gmm_covs):
        cols.append(np.log(a) + _log_gaussian(points, mu, cov))
    return np.stack(cols, axis=1)


def _logsumexp(rows: np.ndarray) -> np.ndarray:
    top = rows.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(rows - top).sum(axis=1, keepdims=True)))[:, 0]


def gmm_fit_em(points: np.ndarray, n_components: int, seed,
               tol: float = 1e-4, max_iter: int = 100, reg: float = 1e-6,
               class_id: int = -1) -> SeenClassGmm:
    """Expectation-maximization with full covariances.

    Means start at distinct random points, covariances at the global
    covariance, weights uniform. Iteration stops when the mean per-point
    log-likelihood improves by less than tol, or after max_iter rounds.
    Every covariance update adds reg*I; a component that collapses is
    re-seeded from a random point with a warning."""
    points = np.asarray(points, dtype=np.float64)
    n, m = points.shape
    if n < n_components:
        raise ValueError(f"{n} points cannot support {n_components} components")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    global_cov = np.cov(points, rowvar=False, bias=True).reshape(m, m) + reg * np.eye(m)
    means = points[rng.choice(n, size=n_components, replace=False)].copy()
    covs = np.stack([global_cov.copy() for _ in range(n_components)])
    weights = np.full(n_components, 1.0 / n_components)

    trace: List[float] = []
    for _ in range(max_iter):
        # E-step
        log_dens = _component_log_density(weights, means, covs, points)
        log_norm = _logsumexp(log_dens)
        resp = np.exp(log_dens - log_norm[:, None])
        trace.append(float(log_norm.mean()))
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            break
        # M-step
        bulk = resp.sum(axis=0)
        for r in range(n_components):
            if bulk[r] < 1e-12 or not np.isfinite(bulk[r]):
                warnings.warn(f"mixture component {r} collapsed; re-seeding")
                means[r] = points[rng.integers(n)]
                covs[r] = global_cov.copy()
                weights[r] = 1.0 / n
                continue
            mu = resp[:, r] @ points / bulk[r]
            diff = points - mu
            cov = (resp[:, r][:, None] * diff).T @ diff / bulk[r] + reg * np.eye(m)
            means[r], covs[r] = mu, cov
            weights[r] = bulk[r] / n
        weights = weights / weights.sum()

    return SeenClassGmm(class_id, weights, means, covs, trace)


def gmm_nll(model: SeenClassGmm, z: np.ndarray) -> np.ndarray:
    """Per-point negative log-likelihood under the mixture."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    log_dens = _component_log_density(model.weights, model.means, model.covariances, z)
    return -_logsumexp(log_dens)


def control_limit(i_class: np.ndarray, i_unseen: np.ndarray) -> float:
    """Largest modeling-point score, truncated to just below the nearest
    unseen anchor. With no unseen anchors the truncation is dropped."""
    i_class = np.asarray(i_class, dtype=np.float64)
    if i_class.size == 0:
        raise ValueError("control limit needs at least one modeling point")
    i_unseen = np.asarray(i_unseen, dtype=np.float64)
    if i_unseen.size == 0:
        return float(i_class.max())
    return float(min(i_class.max(), i_unseen.min()))


# ---------------------------------------------------------------------------
# Attribute-based Naive Bayes over unseen classes


@dataclass
class DapModel:
    """Per-attribute Gaussian Naive Bayes: p(x | a_k=v) with diagonal
    covariance, plus smoothed attribute priors. Scores unseen classes by the
    product over attributes of posterior/prior, in log space."""

    unseen_ids: tuple
    unseen_rows: np.ndarray
    means: np.ndarray        # [M, 2, d]
    variances: np.ndarray    # [M, 2, d]
    has_params: np.ndarray   # [M, 2] bool; False -> global fallback was used
    log_priors: np.ndarray   # [M, 2], Laplace-smoothed
    var_floor: float


def dap_train(samples: np.ndarray, attributes: np.ndarray,
              matrix: datamod.AttributeMatrix, var_floor: float = 1e-6) -> DapModel:
    """Fit the per-attribute value-conditional Gaussians on the pooled
    attribute-labeled data. A value absent from the pool falls back to the
    global Gaussian so every row remains scoreable."""
    if len(matrix.unseen_ids) == 0:
        raise ValueError("no unseen classes configured")
    samples = np.asarray(samples, dtype=np.float64)
    attributes = np.asarray(attributes, dtype=np.int64)
    n, d = samples.shape
    m = attributes.shape[1]

    global_mean = samples.mean(axis=0)
    global_var = np.maximum(samples.var(axis=0), var_floor)
    means = np.zeros((m, 2, d))
    variances = np.zeros((m, 2, d))
    has_params = np.zeros((m, 2), dtype=bool)
    log_priors = np.zeros((m, 2))
    for k in range(m):
        n1 = int((attributes[:, k] == 1).sum())
        log_priors[k, 1] = np.log((n1 + 1.0) / (n + 2.0))
        log_priors[k, 0] = np.log((n - n1 + 1.0) / (n + 2.0))
        for v in (0, 1):
            block = samples[attributes[:, k] == v]
            if block.shape[0] == 0:
                means[k, v] = global_mean
                variances[k, v] = global_var
                continue
            means[k, v] = block.mean(axis=0)
            variances[k, v] = np.maximum(block.var(axis=0), var_floor)
            has_params[k, v] = True

    unseen = tuple(sorted(matrix.unseen_ids))
    rows = np.stack([matrix.row(u) for u in unseen])
    return DapModel(unseen, rows, means, variances, has_params, log_priors, var_floor)


def _dap_log_posteriors(model: DapModel, x: np.ndarray) -> np.ndarray:
    """[n, M, 2] log p(a_k=v | x) from the value-conditional Gaussians."""
    x = np.atleast_2d(x)
    n = x.shape[0]
    m = model.means.shape[0]
    joint = np.zeros((n, m, 2))
    for k in range(m):
        for v in (0, 1):
            mu, var = model.means[k, v], model.variances[k, v]
            ll = -0.5 * (np.log(2.0 * np.pi * var) + (x - mu) ** 2 / var).sum(axis=1)
            joint[:, k, v] = ll + model.log_priors[k, v]
    top = joint.max(axis=2, keepdims=True)
    log_evidence = top[:, :, 0] + np.log(np.exp(joint - top).sum(axis=2))
    return joint - log_evidence[:, :, None]


def dap_scores(model: DapModel, x: np.ndarray) -> np.ndarray:
    """[n, q] log scores: sum over attributes of posterior minus prior for
    each unseen class's attribute row."""
    log_post = _dap_log_posteriors(model, x)
    n = log_post.shape[0]
    scores = np.zeros((n, len(model.unseen_ids)))
    for ui, row in enumerate(model.unseen_rows):
        idx = np.arange(row.shape[0])
        scores[:, ui] = (log_post[:, idx, row] - model.log_priors[idx, row]).sum(axis=1)
    return scores


def dap_classify(model: DapModel, x: np.ndarray) -> np.ndarray:
    """Most plausible unseen class per sample; ties go to the smallest id.
    unseen_ids are kept sorted, so the first argmax hit is the smallest."""
    scores = dap_scores(model, x)
    return np.array([model.unseen_ids[i] for i in scores.argmax(axis=1)])


def _dap_to_dict(model: DapModel) -> dict:
    return {
        "unseen_ids": list(model.unseen_ids),
        "unseen_rows": model.unseen_rows.tolist(),
        "means": model.means.tolist(),
        "variances": model.variances.tolist(),
        "has_params": model.has_params.tolist(),
        "log_priors": model.log_priors.tolist(),
        "var_floor": model.var_floor,
    }


def _dap_from_dict(payload: dict) -> DapModel:
    return DapModel(
        tuple(payload["unseen_ids"]),
        np.array(payload["unseen_rows"], dtype=np.int64),
        np.array(payload["means"]),
        np.array(payload["variances"]),
        np.array(payload["has_params"], dtype=bool),
        np.array(payload["log_priors"]),
        float(payload["var_floor"]),
    )


# ---------------------------------------------------------------------------
# The assembled gate


class GateModel:
    """Both projector stages, one mixture and control limit per seen class,
    and the unseen-class fallback, bound to one attribute matrix."""

    def __init__(self, ap1: AttributeProjector, ap2: AttributeProjector,
                 gmms: List[SeenClassGmm], limits: Dict[int, float],
                 dap: Optional[DapModel], matrix: datamod.AttributeMatrix,
                 hyperparams: GateHyperparams):
        if {g.class_id for g in gmms} != set(matrix.seen_ids):
            raise ValueError("need exactly one mixture per seen class")
        if set(limits) != set(matrix.seen_ids):
            raise ValueError("need exactly one control limit per seen class")
        for j, l in limits.items():
            if not np.isfinite(l):
                raise ValueError(f"control limit for class {j} is not finite")
        self.ap1 = ap1
        self.ap2 = ap2
        self.gmms = sorted(gmms, key=lambda g: g.class_id)
        self.limits = dict(limits)
        self.dap = dap
        self.matrix = matrix
        self.hyperparams = hyperparams
        self.matrix_hash = datamod.matrix_fingerprint(matrix)
        self.config_hash: Optional[str] = None

    def to_dict(self, config_hash: Optional[str] = None) -> dict:
        payload = {
            "format": GATE_FORMAT,
            "matrix_hash": self.matrix_hash,
            "hyperparams": self.hyperparams.to_dict(),
            "ap1": self.ap1.to_dict(),
            "ap2": self.ap2.to_dict(),
            "gmms": [
                {
                    "class_id": g.class_id,
                    "weights": g.weights.tolist(),
                    "means": g.means.tolist(),
                    "covariances": g.covariances.tolist(),
                    "trace": list(g.trace),
                }
                for g in self.gmms
            ],
            "limits": {str(j): l for j, l in self.limits.items()},
            "dap": None if self.dap is None else _dap_to_dict(self.dap),
        }
        if config_hash or self.config_hash:
            payload["config_hash"] = config_hash or self.config_hash
        return payload

    @classmethod
    def from_dict(cls, payload: dict, matrix: datamod.AttributeMatrix) -> "GateModel":
        if payload.get("format") != GATE_FORMAT:
            raise CheckpointMismatch(
                f"unsupported checkpoint format {payload.get('format')!r}")
        if payload["matrix_hash"] != datamod.matrix_fingerprint(matrix):
            raise CheckpointMismatch(
                "checkpoint was trained against a different attribute matrix"
            )
        gmms = [
            SeenClassGmm(g["class_id"], np.array(g["weights"]), np.array(g["means"]),
                         np.array(g["covariances"]), list(g["trace"]))
            for g in payload["gmms"]
        ]
        model = cls(
            AttributeProjector.from_dict(payload["ap1"]),
            AttributeProjector.from_dict(payload["ap2"]),
            gmms,
            {int(j): float(l) for j, l in payload["limits"].items()},
            None if payload["dap"] is None else _dap_from_dict(payload["dap"]),
            matrix,
            GateHyperparams.from_dict(payload["hyperparams"]),
        )
        model.config_hash = payload.get("config_hash")
        return model


def train_gate(
    generator: Optional[GeneratorModel],
    train: datamod.LabeledDataset,
    matrix: datamod.AttributeMatrix,
    hp: GateHyperparams,
    rng: np.random.Generator,
) -> GateModel:
    """Fit the full gate. With a generator, stage-2 projectors, mixtures and
    the fallback all see generated samples; without one (ablation), stage 2
    reuses the real-only projector and models real data alone."""
    seen = sorted(matrix.seen_ids)
    unseen = sorted(matrix.unseen_ids)
    ap1 = train_ap("AP1", train, None, hp, rng)

    counts = default_generation_counts(train, matrix)
    fake_unseen_x: List[np.ndarray] = []
    fake_unseen_z: List[np.ndarray] = []
    fake_seen: Dict[int, np.ndarray] = {}
    if generator is not None:
        pools = build_donor_pools(train)
        for u in unseen:
            fx = generate_samples(generator, train, matrix, u, counts[u], rng, pools)
            fake_unseen_x.append(fx)
            fake_unseen_z.append(np.tile(matrix.row(u), (fx.shape[0], 1)))
        for j in seen:
            fake_seen[j] = generate_samples(generator, train, matrix, j, counts[j],
                                            rng, pools)
        ap2 = train_ap(
            "AP2", train,
            (np.concatenate(fake_unseen_x) if fake_unseen_x else np.zeros((0, train.n_features)),
             np.concatenate(fake_unseen_z) if fake_unseen_z else np.zeros((0, matrix.n_attributes), dtype=int)),
            hp, rng,
        )
    else:
        ap2 = ap1

    unseen_rows = matrix.unseen_rows.astype(np.float64)
    gmms, limits = [], {}
    for j in seen:
        real_j = train.samples[train.labels == j]
        blocks = [ap2.predict(real_j)]
        if generator is not None:
            blocks.append(ap2.predict(fake_seen[j]))
        z_j = np.concatenate(blocks)
        gmm = gmm_fit_em(z_j, hp.n_components, rng, tol=hp.em_tol,
                         max_iter=hp.em_max_iter, reg=hp.cov_reg, class_id=j)
        i_class = gmm_nll(gmm, z_j)
        i_unseen = gmm_nll(gmm, unseen_rows) if len(unseen) else np.empty(0)
        gmms.append(gmm)
        limits[j] = control_limit(i_class, i_unseen)

    if unseen:
        if fake_unseen_x and any(b.shape[0] for b in fake_unseen_x):
            pooled_x = np.concatenate([train.samples] + fake_unseen_x)
            pooled_z = np.concatenate([train.attributes] + fake_unseen_z)
        else:
            pooled_x, pooled_z = train.samples, train.attributes
        dap = dap_train(pooled_x, pooled_z, matrix, var_floor=hp.var_floor)
    else:
        # degenerate split: limits already fell back to the largest modeling
        # score and no sample can ever be routed past the seen classes
        warnings.warn("no unseen classes configured; the unseen path is disabled")
        dap = None

    return GateModel(ap1, ap2, gmms, limits, dap, matrix, hp)


def fine_classify(gate: GateModel, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Stage-2 decision for deferred samples. Returns (labels, unseen mask).

    A sample above every class's control limit goes to the unseen-class
    model; anything else gets the seen class with the nearest signature in
    L1 distance (ties to the smallest id)."""
    x = np.atleast_2d(x)
    z_hat = gate.ap2.predict(x)
    conf = np.stack([gmm_nll(g, z_hat) for g in gate.gmms], axis=1)
    lims = np.array([gate.limits[g.class_id] for g in gate.gmms])
    if gate.dap is None:
        is_unseen = np.zeros(x.shape[0], dtype=bool)
    else:
        is_unseen = (conf > lims).all(axis=1)

    labels = np.zeros(x.shape[0], dtype=np.int64)
    if is_unseen.any():
        labels[is_unseen] = dap_classify(gate.dap, x[is_unseen])
    if (~is_unseen).any():
        seen_ids = [g.class_id for g in gate.gmms]  # ascending
        rows = np.stack([gate.matrix.row(j) for j in seen_ids]).astype(np.float64)
        dists = np.abs(z_hat[~is_unseen, None, :] - rows[None, :, :]).sum(axis=2)
        picks = dists.argmin(axis=1)  # first minimum -> smallest id
        labels[~is_unseen] = np.array(seen_ids)[picks]
    return labels, is_unseen


def diagnose(gate: GateModel, samples: np.ndarray) -> Tuple[np.ndarray, List[str]]:
    """Label every sample and record which path produced each label."""
    samples = np.atleast_2d(samples)
    n = samples.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), []
    labels = np.zeros(n, dtype=np.int64)
    paths = [COARSE] * n
    coarse = coarse_classify(gate.ap1, samples, gate.matrix)
    defer = [i for i, c in enumerate(coarse) if c is None]
    for i, c in enumerate(coarse):
        if c is not None:
            labels[i] = c
    if defer:
        fine_labels, is_unseen = fine_classify(gate, samples[defer])
        for pos, i in enumerate(defer):
            labels[i] = fine_labels[pos]
            paths[i] = FINE_UNSEEN if is_unseen[pos] else FINE_SEEN
    return labels, paths
