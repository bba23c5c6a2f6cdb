"""Knowledge-guided sample generator.

A bank of per-attribute extractors maps each input to M small feature
blocks, one per attribute. Fake samples of a target class are built by
taking the feature blocks of the most similar class and swapping the
blocks of differing attributes with blocks extracted from donor samples
that carry the target value, then decoding through the reconstructor.

Training alternates a discrimination-head update with a generator update
under a weighted sum of recognizer, group-variance, auxiliary,
reconstruction and adversarial terms. The shared backbone with its class
and attribute heads is fitted once up front and stays frozen afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data as datamod
from . import nn

PROB_CLAMP = 1e-7  # discriminator outputs are clipped to [eps, 1-eps] before log

CHECKPOINT_FORMAT = "kss-g/v1"


class DonorUnavailable(RuntimeError):
    """No training sample carries the attribute value a swap needs."""

    def __init__(self, target_class: int, attribute: int, value: int):
        super().__init__(
            f"class {target_class}: no donor sample with attribute {attribute} = {value}"
        )
        self.target_class = target_class
        self.attribute = attribute
        self.value = value


class CheckpointMismatch(ValueError):
    """Checkpoint was produced against a different attribute matrix."""


@dataclass(frozen=True)
class GeneratorHyperparams:
    """Loss weights, schedule counts and layer widths.

    Defaults are the reference configuration for the 52-feature benchmark;
    widths scale with the data, so smaller problems override them.
    """

    lambda_ar: float = 1.0
    lambda_av: float = 0.5
    lambda_au: float = 0.5
    lambda_r: float = 4.0
    lambda_g: float = 1.0
    pretrain_epochs: int = 100
    epochs: int = 300
    disc_steps_per_gen: int = 2
    batch_per_class: int = 256
    learning_rate: float = 1e-3
    feature_dim: int = 16
    extractor_hidden: tuple = (104, 32)
    recognizer_hidden: tuple = (32, 16)
    reconstructor_lift: int = 64
    disc_hidden: tuple = (256, 128)
    disc_embed: int = 64
    disc_head_hidden: tuple = (16,)

    def __post_init__(self):
        for name in ("lambda_ar", "lambda_av", "lambda_au", "lambda_r", "lambda_g"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.disc_steps_per_gen < 1:
            raise ValueError("disc_steps_per_gen must be >= 1")
        if self.batch_per_class < 1:
            raise ValueError("batch_per_class must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("extractor_hidden", "recognizer_hidden", "disc_hidden", "disc_head_hidden"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def to_dict(self) -> dict:
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v
                for f in fields(self)}

    @classmethod
    def from_dict(cls, payload: dict) -> "GeneratorHyperparams":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter(s): {sorted(unknown)}")
        return cls(**payload)


# ---------------------------------------------------------------------------
# Model parts


class _StackBank:
    """M independent stacks applied to a shared input."""

    def __init__(self, stacks: List[nn.DenseStack]):
        self.stacks = stacks

    @property
    def size(self) -> int:
        return len(self.stacks)

    def parameters(self) -> list:
        out = []
        for s in self.stacks:
            out.extend(s.parameters())
        return out

    def to_dict(self) -> dict:
        return {"stacks": [s.to_dict() for s in self.stacks]}

    @classmethod
    def from_dict(cls, payload: dict):
        return cls([nn.DenseStack.from_dict(d) for d in payload["stacks"]])


class ExtractorBank(_StackBank):
    """One feature extractor per attribute; all share input and output width."""

    @classmethod
    def build(cls, in_dim: int, hidden: Sequence[int], out_dim: int, seeds: Sequence[int]):
        dims = [in_dim, *hidden, out_dim]
        acts = ["leaky_relu"] * (len(dims) - 1)
        return cls([nn.DenseStack(dims, acts, seed=s) for s in seeds])

    @property
    def in_dim(self) -> int:
        return self.stacks[0].dims[0]

    @property
    def out_dim(self) -> int:
        return self.stacks[0].dims[-1]

    def extract(self, batch: np.ndarray) -> np.ndarray:
        """Stack per-attribute features into [n, M, out_dim]."""
        return np.stack([s.forward(batch) for s in self.stacks], axis=1)

    def extract_with_cache(self, batch: np.ndarray):
        outs, caches = [], []
        for s in self.stacks:
            y, c = s.forward_cache(batch)
            outs.append(y)
            caches.append(c)
        return np.stack(outs, axis=1), caches


class RecognizerBank(_StackBank):
    """One 2-way classifier per attribute, reading that attribute's features."""

    @classmethod
    def build(cls, feat_dim: int, hidden: Sequence[int], seeds: Sequence[int]):
        dims = [feat_dim, *hidden, 2]
        acts = ["leaky_relu"] * (len(dims) - 2) + ["identity"]
        return cls([nn.DenseStack(dims, acts, seed=s) for s in seeds])


class Reconstructor:
    """Decode [n, M, feat_dim] feature groups back to [n, d] samples.

    Each block is lifted to a common width, the M lifted blocks are mixed
    down to one along the attribute axis, and an output layer maps the
    mixed vector to sample space.
    """

    def __init__(self, lift: nn.DenseStack, mixer: nn.DenseStack, out: nn.DenseStack):
        self.lift = lift
        self.mixer = mixer
        self.out = out

    @classmethod
    def build(cls, feat_dim: int, n_attributes: int, lift_dim: int, out_dim: int,
              seeds: Sequence[int]):
        lift = nn.DenseStack([feat_dim, lift_dim], ["leaky_relu"], seed=seeds[0])
        mixer = nn.DenseStack([n_attributes, 1], ["leaky_relu"], seed=seeds[1])
        out = nn.DenseStack([lift_dim, out_dim], ["identity"], seed=seeds[2])
        return cls(lift, mixer, out)

    @property
    def n_attributes(self) -> int:
        return self.mixer.dims[0]

    @property
    def feat_dim(self) -> int:
        return self.lift.dims[0]

    def _check(self, features: np.ndarray):
        if features.ndim != 3 or features.shape[1:] != (self.n_attributes, self.feat_dim):
            raise nn.ShapeError(
                f"expected features [n, {self.n_attributes}, {self.feat_dim}], "
                f"got {features.shape}"
            )

    def forward(self, features: np.ndarray) -> np.ndarray:
        return self.forward_cache(features)[0]

    def forward_cache(self, features: np.ndarray):
        self._check(features)
        n, m, fd = features.shape
        h = self.lift.dims[-1]
        lifted, c_lift = self.lift.forward_cache(features.reshape(n * m, fd))
        across = lifted.reshape(n, m, h).transpose(0, 2, 1).reshape(n * h, m)
        mixed, c_mix = self.mixer.forward_cache(across)
        squeezed = mixed.reshape(n, h)
        y, c_out = self.out.forward_cache(squeezed)
        return y, (n, m, h, c_lift, c_mix, c_out)

    def backward(self, cache, dout: np.ndarray):
        """Returns (dfeatures, grads) with grads aligned to parameters()."""
        n, m, h, c_lift, c_mix, c_out = cache
        dsq, g_out = self.out.backward(c_out, dout)
        dmix, g_mix = self.mixer.backward(c_mix, dsq.reshape(n * h, 1))
        dlift = dmix.reshape(n, h, m).transpose(0, 2, 1).reshape(n * m, h)
        dfeat, g_lift = self.lift.backward(c_lift, dlift)
        return dfeat.reshape(n, m, self.feat_dim), g_lift + g_mix + g_out

    def parameters(self) -> list:
        return self.lift.parameters() + self.mixer.parameters() + self.out.parameters()

    def to_dict(self) -> dict:
        return {"lift": self.lift.to_dict(), "mixer": self.mixer.to_dict(),
                "out": self.out.to_dict()}

    @classmethod
    def from_dict(cls, payload: dict) -> "Reconstructor":
        return cls(nn.DenseStack.from_dict(payload["lift"]),
                   nn.DenseStack.from_dict(payload["mixer"]),
                   nn.DenseStack.from_dict(payload["out"]))


class MultiHeadDiscriminator:
    """Shared backbone with class, attribute and real/fake heads.

    The backbone plus the class and attribute heads form one parameter
    group (fitted during pretraining, frozen afterwards); the real/fake
    head is the only part updated during adversarial training.
    """

    def __init__(self, backbone, class_head, attr_head, disc_head, n_attributes: int):
        self.backbone = backbone
        self.class_head = class_head
        self.attr_head = attr_head
        self.disc_head = disc_head
        self.n_attributes = n_attributes

    @classmethod
    def build(cls, in_dim: int, n_seen: int, n_attributes: int, hidden, embed: int,
              head_hidden, seeds: Sequence[int]):
        bdims = [in_dim, *hidden, embed]
        backbone = nn.DenseStack(bdims, ["leaky_relu"] * (len(bdims) - 1), seed=seeds[0])
        class_head = nn.DenseStack([embed, n_seen], ["identity"], seed=seeds[1])
        attr_head = nn.DenseStack([embed, 2 * n_attributes], ["identity"], seed=seeds[2])
        hdims = [embed, *head_hidden, 1]
        disc_head = nn.DenseStack(
            hdims, ["leaky_relu"] * (len(hdims) - 2) + ["sigmoid"], seed=seeds[3]
        )
        return cls(backbone, class_head, attr_head, disc_head, n_attributes)

    def backbone_parameters(self) -> list:
        return (self.backbone.parameters() + self.class_head.parameters()
                + self.attr_head.parameters())

    def disc_parameters(self) -> list:
        return self.disc_head.parameters()

    # -- class + attribute branches

    def classification_loss(self, x, label_idx, attrs, want_input_grad: bool):
        """Mean class cross-entropy plus attribute cross-entropy averaged over
        attributes. Returns (loss, dx or None, backbone-group grads)."""
        n = x.shape[0]
        m = self.n_attributes
        emb, c_back = self.backbone.forward_cache(x)
        cls_logits, c_cls = self.class_head.forward_cache(emb)
        attr_logits, c_attr = self.attr_head.forward_cache(emb)
        loss_cls, dcls = nn.softmax_xent(cls_logits, label_idx)
        per_attr = attr_logits.reshape(n, m, 2)
        dattr = np.zeros_like(per_attr)
        loss_attr = 0.0
        for k in range(m):
            lk, dk = nn.binary_2logit_xent(per_attr[:, k, :], attrs[:, k])
            loss_attr += lk / m
            dattr[:, k, :] = dk / m
        demb_cls, g_cls = self.class_head.backward(c_cls, dcls)
        demb_attr, g_attr = self.attr_head.backward(c_attr, dattr.reshape(n, 2 * m))
        dx, g_back = self.backbone.backward(c_back, demb_cls + demb_attr)
        grads = g_back + g_cls + g_attr
        return loss_cls + loss_attr, (dx if want_input_grad else None), grads

    # -- real/fake branch

    def discrimination_probs(self, x: np.ndarray) -> np.ndarray:
        return self.disc_head.forward(self.backbone.forward(x))[:, 0]

    def disc_head_loss_and_grads(self, real: np.ndarray, fake: np.ndarray):
        """Real/fake loss and its gradient w.r.t. the head only."""
        p_real, c_real = self.disc_head.forward_cache(self.backbone.forward(real))
        p_fake, c_fake = self.disc_head.forward_cache(self.backbone.forward(fake))
        loss_r, dr = _neg_log_mean(p_real)
        loss_f, df = _neg_log_one_minus_mean(p_fake)
        _, g_real = self.disc_head.backward(c_real, dr)
        _, g_fake = self.disc_head.backward(c_fake, -df)  # this loss subtracts E[log(1-D)]
        grads = nn.zeros_like_params(self.disc_parameters())
        nn.accumulate(grads, g_real)
        nn.accumulate(grads, g_fake)
        return loss_r - loss_f, grads

    def generator_adversarial(self, fake: np.ndarray):
        """E[log(1-D(fake))] and its gradient w.r.t. the fake inputs."""
        emb, c_back = self.backbone.forward_cache(fake)
        probs, c_head = self.disc_head.forward_cache(emb)
        loss, dprobs = _neg_log_one_minus_mean(probs)
        demb, _ = self.disc_head.backward(c_head, dprobs)
        dx, _ = self.backbone.backward(c_back, demb)
        return loss, dx

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "class_head": self.class_head.to_dict(),
            "attr_head": self.attr_head.to_dict(),
            "disc_head": self.disc_head.to_dict(),
            "n_attributes": self.n_attributes,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MultiHeadDiscriminator":
        return cls(
            nn.DenseStack.from_dict(payload["backbone"]),
            nn.DenseStack.from_dict(payload["class_head"]),
            nn.DenseStack.from_dict(payload["attr_head"]),
            nn.DenseStack.from_dict(payload["disc_head"]),
            int(payload["n_attributes"]),
        )


def _neg_log_mean(probs: np.ndarray):
    """(-mean(log p), gradient w.r.t. p) with the clamp's flat regions at zero."""
    clamped = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -np.mean(np.log(clamped))
    grad = np.where(probs == clamped, -1.0 / (probs.size * clamped), 0.0)
    return loss, grad


def _neg_log_one_minus_mean(probs: np.ndarray):
    """(mean(log(1-p)), gradient w.r.t. p), clamp handled as above."""
    clamped = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = np.mean(np.log1p(-clamped))
    grad = np.where(probs == clamped, -1.0 / (probs.size * (1.0 - clamped)), 0.0)
    return loss, grad


# ---------------------------------------------------------------------------
# Losses on attribute feature groups


def recognizer_loss(recognizers: RecognizerBank, features: np.ndarray,
                    attr_targets: np.ndarray):
    """Mean over samples and attributes of the per-attribute 2-class
    cross-entropy. Returns (loss, dfeatures, recognizer grads)."""
    n, m, fd = features.shape
    if m != recognizers.size:
        raise nn.ShapeError(f"features carry {m} attribute blocks, bank has {recognizers.size}")
    total = 0.0
    dfeat = np.zeros_like(features)
    grads = []
    for k, stack in enumerate(recognizers.stacks):
        logits, cache = stack.forward_cache(features[:, k, :])
        loss_k, dlogits = nn.binary_2logit_xent(logits, attr_targets[:, k])
        total += loss_k / m
        dx, g = stack.backward(cache, dlogits / m)
        dfeat[:, k, :] = dx
        grads.extend(g)
    return total, dfeat, grads


def attribute_variance_loss(features: np.ndarray, attr_targets: np.ndarray):
    """Sum of per-dimension population variances of the value-1 and value-0
    feature groups of every attribute, divided by the feature width.
    Returns (loss, dfeatures). Empty groups contribute nothing."""
    n, m, fd = features.shape
    total = 0.0
    dfeat = np.zeros_like(features)
    for k in range(m):
        for value in (0, 1):
            rows = attr_targets[:, k] == value
            cnt = int(rows.sum())
            if cnt == 0:
                continue
            block = features[rows, k, :]
            mean = block.mean(axis=0)
            centered = block - mean
            total += np.mean(centered * centered, axis=0).sum()
            dfeat[rows, k, :] += (2.0 / cnt) * centered
    return total / fd, dfeat / fd


def reconstruct(rec: Reconstructor, features: np.ndarray) -> np.ndarray:
    return rec.forward(features)


def reconstruction_loss(x: np.ndarray, x_hat: np.ndarray):
    """Mean squared error over all entries; returns (loss, d/dx_hat)."""
    return nn.mse(x_hat, x)


def adversarial_losses(disc: MultiHeadDiscriminator, real: np.ndarray, fake: np.ndarray):
    """Value-only real/fake losses: discriminator side and generator side."""
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("adversarial losses need nonempty real and fake batches")
    p_real = np.clip(disc.discrimination_probs(real), PROB_CLAMP, 1 - PROB_CLAMP)
    p_fake = np.clip(disc.discrimination_probs(fake), PROB_CLAMP, 1 - PROB_CLAMP)
    loss_d = -np.mean(np.log(p_real)) - np.mean(np.log1p(-p_fake))
    loss_g = np.mean(np.log1p(-p_fake))
    return float(loss_d), float(loss_g)


def auxiliary_loss(disc: MultiHeadDiscriminator, fake: np.ndarray, labels: np.ndarray,
                   attrs: np.ndarray, seen_ids: Sequence[int]):
    """Class/attribute cross-entropy of fakes under the frozen heads.
    Returns (loss, dfake); head parameters receive no update."""
    index = {c: i for i, c in enumerate(seen_ids)}
    try:
        label_idx = np.array([index[int(l)] for l in labels])
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} is not a seen class") from None
    loss, dx, _ = disc.classification_loss(fake, label_idx, attrs, want_input_grad=True)
    return loss, dx


# ---------------------------------------------------------------------------
# Similar-class search and feature swaps


def similar_category_search(target_row: np.ndarray, candidate_ids: Sequence[int],
                            candidate_rows: np.ndarray) -> int:
    """Candidate class whose attribute row is nearest in L1 distance;
    ties go to the smallest class id."""
    if len(candidate_ids) == 0:
        raise ValueError("candidate set is empty")
    dists = np.abs(candidate_rows - np.asarray(target_row)).sum(axis=1)
    best = None
    for cid, dist in zip(candidate_ids, dists):
        if best is None or dist < best[1] or (dist == best[1] and cid < best[0]):
            best = (int(cid), dist)
    return best[0]


def differing_attributes(row_a: np.ndarray, row_b: np.ndarray) -> tuple:
    return tuple(int(k) for k in np.flatnonzero(np.asarray(row_a) != np.asarray(row_b)))


def build_donor_pools(train: datamod.LabeledDataset) -> Dict[Tuple[int, int], np.ndarray]:
    """Training-row indices keyed by (attribute, value)."""
    pools = {}
    for k in range(train.attributes.shape[1]):
        col = train.attributes[:, k]
        for value in (0, 1):
            pools[(k, value)] = np.flatnonzero(col == value)
    return pools


def _draw_donors(donor_pools, target_class: int, target_row: np.ndarray,
                 diff: Sequence[int], n: int, rng: np.random.Generator):
    """Per differing attribute, one independent donor row index per output row.
    Attributes are visited in ascending order so draws are reproducible."""
    picks = {}
    for k in sorted(diff):
        value = int(target_row[k])
        pool = donor_pools.get((k, value), np.empty(0, dtype=int))
        if pool.size == 0:
            raise DonorUnavailable(target_class, k, value)
        picks[k] = rng.choice(pool, size=n, replace=True)
    return picks


def feature_group_reorganize(
    target_class: int,
    target_row: np.ndarray,
    source_features: np.ndarray,
    diff: Sequence[int],
    donor_pools: Dict[Tuple[int, int], np.ndarray],
    train: datamod.LabeledDataset,
    extractors: ExtractorBank,
    rng: np.random.Generator,
    return_donors: bool = False,
):
    """Swap the feature blocks of differing attributes with blocks extracted
    from donor samples carrying the target value; all other blocks pass
    through unchanged."""
    out = np.array(source_features, copy=True)
    picks = _draw_donors(donor_pools, target_class, target_row, diff, out.shape[0], rng)
    for k, idx in picks.items():
        out[:, k, :] = extractors.stacks[k].forward(train.samples[idx])
    if return_donors:
        return out, picks
    return out


# ---------------------------------------------------------------------------
# Bundle


class GeneratorModel:
    """Extractors, recognizers, reconstructor and discriminator, plus the
    schedule they were built for. One checkpoint carries all of it."""

    def __init__(self, extractors: ExtractorBank, recognizers: RecognizerBank,
                 reconstructor: Reconstructor, discriminator: MultiHeadDiscriminator,
                 hyperparams: GeneratorHyperparams, seen_ids: tuple, matrix_hash: str):
        self.extractors = extractors
        self.recognizers = recognizers
        self.reconstructor = reconstructor
        self.discriminator = discriminator
        self.hyperparams = hyperparams
        self.seen_ids = tuple(int(c) for c in seen_ids)
        self.matrix_hash = matrix_hash
        self.config_hash: Optional[str] = None

    def generator_parameters(self) -> list:
        """The jointly optimized part: extractors + recognizers + reconstructor."""
        return (self.extractors.parameters() + self.recognizers.parameters()
                + self.reconstructor.parameters())

    def to_dict(self, config_hash: Optional[str] = None) -> dict:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "matrix_hash": self.matrix_hash,
            "seen_ids": list(self.seen_ids),
            "hyperparams": self.hyperparams.to_dict(),
            "extractors": self.extractors.to_dict(),
            "recognizers": self.recognizers.to_dict(),
            "reconstructor": self.reconstructor.to_dict(),
            "discriminator": self.discriminator.to_dict(),
        }
        if config_hash or self.config_hash:
            payload["config_hash"] = config_hash or self.config_hash
        return payload

    @classmethod
    def from_dict(cls, payload: dict, matrix: datamod.AttributeMatrix) -> "GeneratorModel":
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointMismatch(
                f"unsupported checkpoint format {payload.get('format')!r}")
        expected = datamod.matrix_fingerprint(matrix)
        if payload["matrix_hash"] != expected:
            raise CheckpointMismatch(
                "checkpoint was trained against a different attribute matrix"
            )
        model = cls(
            ExtractorBank.from_dict(payload["extractors"]),
            RecognizerBank.from_dict(payload["recognizers"]),
            Reconstructor.from_dict(payload["reconstructor"]),
            MultiHeadDiscriminator.from_dict(payload["discriminator"]),
            GeneratorHyperparams.from_dict(payload["hyperparams"]),
            tuple(payload["seen_ids"]),
            payload["matrix_hash"],
        )
        model.config_hash = payload.get("config_hash")
        return model


def build_model(in_dim: int, matrix: datamod.AttributeMatrix,
                hp: GeneratorHyperparams, seed: int) -> GeneratorModel:
    """Freshly initialized model; widths come from hp, counts from the data."""
    m = matrix.n_attributes
    seen = tuple(sorted(matrix.seen_ids))
    children = np.random.SeedSequence(seed).spawn(2 * m + 7)
    ints = [int(c.generate_state(1)[0]) for c in children]
    extractors = ExtractorBank.build(in_dim, hp.extractor_hidden, hp.feature_dim, ints[:m])
    recognizers = RecognizerBank.build(hp.feature_dim, hp.recognizer_hidden, ints[m:2 * m])
    reconstructor = Reconstructor.build(hp.feature_dim, m, hp.reconstructor_lift,
                                        in_dim, ints[2 * m:2 * m + 3])
    discriminator = MultiHeadDiscriminator.build(
        in_dim, len(seen), m, hp.disc_hidden, hp.disc_embed, hp.disc_head_hidden,
        ints[2 * m + 3:2 * m + 7],
    )
    return GeneratorModel(extractors, recognizers, reconstructor, discriminator, hp,
                          seen, datamod.matrix_fingerprint(matrix))


# ---------------------------------------------------------------------------
# Training


def batches_per_epoch(train: datamod.LabeledDataset, matrix: datamod.AttributeMatrix,
                      hp: GeneratorHyperparams) -> int:
    p = len(matrix.seen_ids)
    return max(1, train.n_samples // (hp.batch_per_class * p))


def pretrain_aid_discriminator(model: GeneratorModel, train: datamod.LabeledDataset,
                               matrix: datamod.AttributeMatrix,
                               rng: np.random.Generator) -> List[float]:
    """Fit the backbone with its class and attribute heads; the real/fake head
    is untouched. Returns the per-epoch mean loss."""
    hp = model.hyperparams
    disc = model.discriminator
    index = {c: i for i, c in enumerate(model.seen_ids)}
    opt = nn.AdamW(disc.backbone_parameters(), lr=hp.learning_rate)
    n_batches = batches_per_epoch(train, matrix, hp)
    history = []
    for epoch in range(hp.pretrain_epochs):
        running = 0.0
        for _ in range(n_batches):
            batch = datamod.sample_balanced_batch(train, matrix, hp.batch_per_class, rng)
            label_idx = np.array([index[int(l)] for l in batch.labels])
            loss, _, grads = disc.classification_loss(
                batch.samples, label_idx, batch.attributes, want_input_grad=False
            )
            if not np.isfinite(loss):
                raise nn.NonFiniteError(
                    f"pretraining loss became non-finite at epoch {epoch + 1}"
                )
            opt.step(grads)
            running += float(loss)
        history.append(running / n_batches)
    return history


@dataclass
class FgrStep:
    """Precomputed swap recipe for one target class."""

    target: int
    target_row: np.ndarray
    source: int
    diff: tuple


def _fgr_plan(matrix: datamod.AttributeMatrix) -> List[FgrStep]:
    """For every seen class, the most similar other seen class and the
    attributes whose blocks must be swapped."""
    plan = []
    seen = sorted(matrix.seen_ids)
    for j in seen:
        others = [c for c in seen if c != j]
        if not others:
            plan.append(FgrStep(j, np.array(matrix.row(j)), j, ()))
            continue
        rows = np.stack([matrix.row(c) for c in others])
        m = similar_category_search(matrix.row(j), others, rows)
        diff = differing_attributes(matrix.row(j), matrix.row(m))
        plan.append(FgrStep(j, np.array(matrix.row(j)), m, diff))
    return plan


@dataclass
class TrainingLog:
    """Per-update loss components and the update counters."""

    generator: List[dict] = field(default_factory=list)
    discriminator: List[float] = field(default_factory=list)
    gen_updates: int = 0
    disc_updates: int = 0


def _build_fake_batch(model: GeneratorModel, batch: datamod.Batch, plan: List[FgrStep],
                      donor_pools, train, rng, features=None):
    """Forward-only fake batch: one block of batch_per_class fakes per seen
    class, sources taken from the most similar class's block of the same
    balanced batch."""
    seen = model.seen_ids
    b = batch.samples.shape[0] // len(seen)
    if features is None:
        features = model.extractors.extract(batch.samples)
    blocks, labels, attrs = [], [], []
    for step in plan:
        src = seen.index(step.source)
        g_src = features[src * b:(src + 1) * b]
        g_fake = feature_group_reorganize(
            step.target, step.target_row, g_src, step.diff, donor_pools, train,
            model.extractors, rng,
        )
        blocks.append(g_fake)
        labels.extend([step.target] * b)
        attrs.append(np.tile(step.target_row, (b, 1)))
    fake = model.reconstructor.forward(np.concatenate(blocks))
    return fake, np.array(labels), np.concatenate(attrs)


def _generator_step(model: GeneratorModel, batch: datamod.Batch, matrix,
                    plan: List[FgrStep], donor_picks, train: datamod.LabeledDataset):
    """One generator evaluation with fixed batch and donor draws.

    Returns (parts, grads): unweighted loss components and the weighted
    gradient aligned with generator_parameters(). Deterministic, so it can
    be checked against finite differences as one composite function."""
    hp = model.hyperparams
    disc = model.discriminator
    rec = model.reconstructor
    seen = model.seen_ids
    b = batch.samples.shape[0] // len(seen)
    gen_params = model.generator_parameters()
    n_ext = len(model.extractors.parameters())
    n_rec = len(model.recognizers.parameters())
    ext_len = len(model.extractors.stacks[0].parameters())

    features, ext_caches = model.extractors.extract_with_cache(batch.samples)
    dfeat = np.zeros_like(features)
    grads = nn.zeros_like_params(gen_params)
    parts = {"ar": 0.0, "av": 0.0, "au": 0.0, "r": 0.0, "g": 0.0}

    if hp.lambda_ar > 0:
        loss_ar, dfeat_ar, g_ar = recognizer_loss(model.recognizers, features,
                                                  batch.attributes)
        parts["ar"] = float(loss_ar)
        dfeat += hp.lambda_ar * dfeat_ar
        nn.accumulate(grads[n_ext:n_ext + n_rec], g_ar, hp.lambda_ar)

    if hp.lambda_av > 0:
        loss_av, dfeat_av = attribute_variance_loss(features, batch.attributes)
        parts["av"] = float(loss_av)
        dfeat += hp.lambda_av * dfeat_av

    if hp.lambda_r > 0:
        x_hat, rc = rec.forward_cache(features)
        loss_r, dx_hat = reconstruction_loss(batch.samples, x_hat)
        parts["r"] = float(loss_r)
        dfeat_r, g_rec = rec.backward(rc, hp.lambda_r * dx_hat)
        dfeat += dfeat_r
        nn.accumulate(grads[n_ext + n_rec:], g_rec)

    if donor_picks is not None:
        blocks, donor_caches = [], []
        fake_labels, fake_attrs = [], []
        for si, step in enumerate(plan):
            src = seen.index(step.source)
            g_fake = np.array(features[src * b:(src + 1) * b], copy=True)
            for k, idx in donor_picks[si].items():
                gk, ck = model.extractors.stacks[k].forward_cache(train.samples[idx])
                g_fake[:, k, :] = gk
                donor_caches.append((si, k, ck))
            blocks.append(g_fake)
            fake_labels.extend([step.target] * b)
            fake_attrs.append(np.tile(step.target_row, (b, 1)))
        g_tilde = np.concatenate(blocks)
        fake, frc = rec.forward_cache(g_tilde)
        dfake = np.zeros_like(fake)

        if hp.lambda_g > 0:
            loss_g, dfake_g = disc.generator_adversarial(fake)
            parts["g"] = float(loss_g)
            dfake += hp.lambda_g * dfake_g
        if hp.lambda_au > 0:
            loss_au, dfake_au = auxiliary_loss(
                disc, fake, np.array(fake_labels), np.concatenate(fake_attrs), seen
            )
            parts["au"] = float(loss_au)
            dfake += hp.lambda_au * dfake_au

        dg_tilde, g_rec_fake = rec.backward(frc, dfake)
        nn.accumulate(grads[n_ext + n_rec:], g_rec_fake)
        for si, k, ck in donor_caches:
            _, g_don = model.extractors.stacks[k].backward(
                ck, dg_tilde[si * b:(si + 1) * b, k, :]
            )
            nn.accumulate(grads[k * ext_len:(k + 1) * ext_len], g_don)
        # blocks that were not swapped route their gradient to the source rows
        for si, step in enumerate(plan):
            src = seen.index(step.source)
            for k in range(matrix.n_attributes):
                if k not in step.diff:
                    dfeat[src * b:(src + 1) * b, k, :] += dg_tilde[si * b:(si + 1) * b, k, :]

    for k, (stack, cache) in enumerate(zip(model.extractors.stacks, ext_caches)):
        _, g_ext = stack.backward(cache, dfeat[:, k, :])
        nn.accumulate(grads[k * ext_len:(k + 1) * ext_len], g_ext)

    return parts, grads


def weighted_total(hp: GeneratorHyperparams, parts: dict) -> float:
    return (hp.lambda_ar * parts["ar"] + hp.lambda_av * parts["av"]
            + hp.lambda_au * parts["au"] + hp.lambda_r * parts["r"]
            + hp.lambda_g * parts["g"])


def train_kss_g(model: GeneratorModel, train: datamod.LabeledDataset,
                matrix: datamod.AttributeMatrix, rng: np.random.Generator) -> TrainingLog:
    """Alternating schedule: per batch, several real/fake-head updates, then
    one update of the generator parameters under the weighted loss sum.
    The backbone group stays frozen throughout."""
    hp = model.hyperparams
    disc = model.discriminator
    b = hp.batch_per_class
    adversarial = hp.lambda_g > 0
    need_fakes = adversarial or hp.lambda_au > 0

    plan = _fgr_plan(matrix)
    donor_pools = build_donor_pools(train)
    opt_gen = nn.AdamW(model.generator_parameters(), lr=hp.learning_rate)
    opt_disc = nn.AdamW(disc.disc_parameters(), lr=hp.learning_rate)
    n_batches = batches_per_epoch(train, matrix, hp)
    log = TrainingLog()

    for epoch in range(hp.epochs):
        for bi in range(n_batches):
            if adversarial:
                for _ in range(hp.disc_steps_per_gen):
                    real = datamod.sample_balanced_batch(train, matrix, b, rng)
                    fake, _, _ = _build_fake_batch(model, real, plan, donor_pools,
                                                   train, rng)
                    loss_d, d_grads = disc.disc_head_loss_and_grads(real.samples, fake)
                    opt_disc.step(d_grads)
                    log.discriminator.append(float(loss_d))
                    log.disc_updates += 1

            batch = datamod.sample_balanced_batch(train, matrix, b, rng)
            donor_picks = None
            if need_fakes:
                donor_picks = [
                    _draw_donors(donor_pools, step.target, step.target_row,
                                 step.diff, b, rng)
                    for step in plan
                ]
            parts, grads = _generator_step(model, batch, matrix, plan, donor_picks,
                                           train)
            total = weighted_total(hp, parts)
            if not np.isfinite(total):
                detail = ", ".join(f"{k}={v:.6g}" for k, v in parts.items())
                raise nn.NonFiniteError(
                    f"training loss became non-finite at epoch {epoch + 1}"
                    f" batch {bi + 1} ({detail})"
                )
            opt_gen.step(grads)
            parts["total"] = float(total)
            log.generator.append(parts)
            log.gen_updates += 1
    return log


# ---------------------------------------------------------------------------
# Sample generation


def generate_samples(model: GeneratorModel, train: datamod.LabeledDataset,
                     matrix: datamod.AttributeMatrix, target_class: int, count: int,
                     rng: np.random.Generator,
                     donor_pools: Optional[dict] = None) -> np.ndarray:
    """Fake samples for a seen or unseen class: draw sources from the most
    similar seen class, swap differing attribute blocks, decode."""
    if count == 0:
        return np.zeros((0, train.n_features))
    if donor_pools is None:
        donor_pools = build_donor_pools(train)
    target_row = matrix.row(target_class)
    candidates = [c for c in sorted(matrix.seen_ids) if c != target_class]
    rows = np.stack([matrix.row(c) for c in candidates])
    source = similar_category_search(target_row, candidates, rows)
    diff = differing_attributes(target_row, matrix.row(source))

    pool = np.flatnonzero(train.labels == source)
    if pool.size == 0:
        raise ValueError(f"no training samples for source class {source}")
    idx = rng.choice(pool, size=count, replace=count > pool.size)
    g_src = model.extractors.extract(train.samples[idx])
    g_fake = feature_group_reorganize(target_class, target_row, g_src, diff,
                                      donor_pools, train, model.extractors, rng)
    out = model.reconstructor.forward(g_fake)
    if not np.isfinite(out).all():
        raise nn.NonFiniteError(f"generated samples for class {target_class} are non-finite")
    return out


def default_generation_counts(train: datamod.LabeledDataset,
                              matrix: datamod.AttributeMatrix) -> Dict[int, int]:
    """Per-class fake sample counts: each seen class gets its real count;
    each unseen class gets an equal share of one seen class's worth."""
    counts = {}
    for j in matrix.seen_ids:
        counts[j] = int((train.labels == j).sum())
    per_unseen = train.n_samples // max(1, len(matrix.seen_ids))
    for u in matrix.unseen_ids:
        counts[u] = per_unseen
    return counts
