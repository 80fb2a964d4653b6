"""Adversarial training with target-proportion estimation and source-domain weighting.

One iteration of :func:`train_step` runs four stages in a fixed order:

1. label predictor and feature extractor step on ``L_Y - alpha_D * L_D``
   (the domain gradient reaches the extractor through a reversal layer);
2. domain weights ``lambda`` recomputed from the adapter's hidden layer and
   exponentially smoothed;
3. domain adapter step on the class- and domain-weighted ``L_D``;
4. one gradient step on the proportion logits for
   ``alpha_mean * L_mean + alpha_dist * L_dist``, with features held fixed.

Mode ``"dann"`` freezes the proportions at uniform, keeps ``lambda``
uniform and uses unit class weights, which recovers the plain adversarial
baseline.  Mode ``"mean"`` drops the kernel-divergence term.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import dist_match, domain_weights as dw
from .datagen import DomainDataset
from .errors import (
    ConfigurationError,
    DegenerateWeightsError,
    IncompleteStatsError,
    NumericError,
    UnsupportedMetricError,
    UsageError,
)
from .nn import (
    DenseLayer,
    OptimizerConfig,
    gradient_reversal,
    init_mlp,
    mlp_backward,
    mlp_forward,
    optimizer_step,
    softmax,
    weighted_cross_entropy,
)
from .proportions import (
    BetaWeights,
    beta_weights,
    class_conditional_means,
    mean_matching_loss,
    source_proportions,
)

MODES = ("dats", "mean", "dann")
BANDWIDTH_POLICIES = ("median", "median-frozen")
MODE_ALIASES = {"mean-matching-only": "mean", "mean_matching": "mean"}


def normalize_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass
class TrainingConfig:
    mode: str = "dats"
    alpha_domain: float = 1.0
    alpha_mean: float = 1.0
    alpha_dist: float = 1.0
    learning_rate: float = 0.01
    domain_learning_rate: float | None = None  # defaults to learning_rate
    gamma_learning_rate: float = 0.05
    gamma_optimizer: str = "adam"  # "adam" | "sgd"
    optimizer: str = "momentum"
    momentum: float = 0.9
    lr_decay: float = 0.0  # rates scale by (1 + lr_decay * t / max_iter) ** -0.75
    gamma_lr_decay: float = 10.0  # same schedule, proportion step only
    batch_size: int = 32  # per domain
    max_iter: int = 3000
    seed: int = 0
    feature_hidden: tuple = (64, 64)
    label_hidden: int = 64
    domain_hidden: int = 64
    rho: float = 0.9
    beta_floor: float = 1e-6
    bandwidth: float | str = "median"  # or "median-frozen", or a fixed value
    ridge_scale: float = 1e-3

    def __post_init__(self):
        self.mode = normalize_mode(self.mode)
        self.feature_hidden = tuple(int(w) for w in self.feature_hidden)
        for name in ("alpha_domain", "alpha_mean", "alpha_dist"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.max_iter < 0:
            raise ConfigurationError("batch_size must be positive and max_iter non-negative")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigurationError("rho must lie in [0, 1)")
        if self.lr_decay < 0 or self.gamma_lr_decay < 0:
            raise ConfigurationError("learning-rate decay must be non-negative")
        if self.gamma_optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown proportion optimizer {self.gamma_optimizer!r}")

    @property
    def gamma_weights(self) -> tuple[float, float]:
        """Effective (mean, divergence) weights after applying the mode."""
        if self.mode == "dann":
            return 0.0, 0.0
        if self.mode == "mean":
            return self.alpha_mean, 0.0
        return self.alpha_mean, self.alpha_dist

    @property
    def estimates_gamma(self) -> bool:
        return self.mode != "dann"

    def rate_scale(self, iteration: int) -> float:
        if self.lr_decay == 0 or self.max_iter == 0:
            return 1.0
        return (1.0 + self.lr_decay * iteration / self.max_iter) ** -0.75

    def gamma_rate_scale(self, iteration: int) -> float:
        scale = self.rate_scale(iteration)
        if self.gamma_lr_decay == 0 or self.max_iter == 0:
            return scale
        return scale * (1.0 + self.gamma_lr_decay * iteration / self.max_iter) ** -0.75

    def optimizer_config(self, learning_rate=None, iteration: int = 0) -> OptimizerConfig:
        lr = self.learning_rate if learning_rate is None else learning_rate
        return OptimizerConfig(lr * self.rate_scale(iteration), self.optimizer, self.momentum)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_hidden"] = list(self.feature_hidden)
        return d


@dataclass
class ModelState:
    feature: list[DenseLayer]
    label: list[DenseLayer]
    domain: list[DenseLayer]
    gamma_logits: np.ndarray
    weights: dw.DomainWeightState
    source_proportions: list[np.ndarray]
    n_classes: int
    iteration: int = 0
    bandwidth: float | None = None
    grids: list | None = None  # KernelGrid per source, refreshed every epoch
    epoch_means: list | None = None  # full-domain class means (d x L) per source
    opt: dict = field(default_factory=dict)

    @property
    def gamma(self) -> np.ndarray:
        return softmax(self.gamma_logits)

    @property
    def lam(self) -> np.ndarray:
        return self.weights.lam

    @property
    def n_sources(self) -> int:
        return len(self.source_proportions)


@dataclass
class MetricsRecord:
    iteration: int
    label_loss: float
    domain_loss: float
    mean_loss: float
    dist_loss: float
    gamma: np.ndarray
    lam: np.ndarray
    target_accuracy: float | None = None

    def as_row(self) -> dict:
        row = {
            "iteration": self.iteration,
            "label_loss": self.label_loss,
            "domain_loss": self.domain_loss,
            "mean_loss": self.mean_loss,
            "dist_loss": self.dist_loss,
        }
        row.update({f"gamma_{l}": float(g) for l, g in enumerate(self.gamma)})
        row.update({f"lambda_{s}": float(v) for s, v in enumerate(self.lam)})
        row["target_accuracy"] = "" if self.target_accuracy is None else self.target_accuracy
        return row


class TrainingAborted(NumericError):
    def __init__(self, message: str, record: MetricsRecord):
        super().__init__(message)
        self.record = record


@dataclass
class Minibatch:
    source_x: list[np.ndarray]
    source_y: list[np.ndarray]
    target_x: np.ndarray

    @property
    def n_sources(self) -> int:
        return len(self.source_x)

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All rows (sources then target), domain ids and class labels (-1 for target)."""
        x = np.vstack(list(self.source_x) + [self.target_x])
        dom = np.concatenate(
            [np.full(len(sx), s) for s, sx in enumerate(self.source_x)]
            + [np.full(len(self.target_x), self.n_sources)]
        ).astype(np.intp)
        y = np.concatenate(list(self.source_y) + [np.full(len(self.target_x), -1)]).astype(np.intp)
        return x, dom, y


def init_state(input_dim: int, n_classes: int, source_props: Sequence[np.ndarray],
               config: TrainingConfig) -> ModelState:
    """Initial parameters; proportions start uniform and domain weights at 1/S."""
    n_sources = len(source_props)
    ss = np.random.SeedSequence([config.seed, 0x5EED])
    rf, rl, rd = (np.random.default_rng(s) for s in ss.spawn(3))
    feat = init_mlp([input_dim, *config.feature_hidden], rf, output_activation="relu")
    h_dim = config.feature_hidden[-1] if config.feature_hidden else input_dim
    label = init_mlp([h_dim, config.label_hidden, n_classes], rl, output_activation="softmax")
    domain = init_mlp([h_dim, config.domain_hidden, n_sources + 1], rd, output_activation="softmax")
    return ModelState(
        feature=feat,
        label=label,
        domain=domain,
        gamma_logits=np.zeros(n_classes),
        weights=dw.DomainWeightState.uniform(n_sources, config.rho),
        source_proportions=[np.asarray(p, dtype=np.float64) for p in source_props],
        n_classes=n_classes,
    )


def encode(params: Sequence[DenseLayer], x) -> np.ndarray:
    return mlp_forward(x, params)[0] if params else np.asarray(x, dtype=np.float64)


def current_betas(state: ModelState, config: TrainingConfig) -> list[BetaWeights]:
    if config.mode == "dann":
        ones = np.ones(state.n_classes)
        return [BetaWeights(ones, float(state.n_classes)) for _ in range(state.n_sources)]
    return [beta_weights(state.gamma, gs, config.beta_floor) for gs in state.source_proportions]


def domain_sample_weights(domain_labels, class_labels, lam, betas: Sequence[BetaWeights],
                          counts, n_target: int, n_classes: int) -> np.ndarray:
    """Per-sample weights of the domain loss.

    Source sample i in domain s with class y: ``lam_s * beta_s[y] / (n_s * |beta_s|_1)``;
    target samples: ``1 / (L * N_T)``.
    """
    domain_labels = np.asarray(domain_labels, dtype=np.intp)
    class_labels = np.asarray(class_labels, dtype=np.intp)
    n_sources = len(betas)
    if n_target <= 0 or any(c <= 0 for c in counts):
        raise UsageError("domain counts must be positive")
    w = np.empty(domain_labels.size)
    for s in range(n_sources):
        mask = domain_labels == s
        b = betas[s]
        if not b.l1 > 0:
            raise DegenerateWeightsError(f"beta of source {s} has zero L1 norm")
        w[mask] = lam[s] * b.values[class_labels[mask]] / (counts[s] * b.l1)
    w[domain_labels == n_sources] = 1.0 / (n_classes * n_target)
    return w


def weighted_domain_loss(domain_logits, domain_labels, class_labels, lam, betas,
                         counts, n_target: int, n_classes: int) -> tuple[float, np.ndarray]:
    w = domain_sample_weights(domain_labels, class_labels, lam, betas, counts, n_target, n_classes)
    return weighted_cross_entropy(domain_logits, domain_labels, w)


def composite_gradients(state: ModelState, batch: Minibatch, config: TrainingConfig):
    """Losses and gradients of ``L_Y - alpha_D * L_D`` for the label and feature nets.

    Returns ``(label_loss, domain_loss, label_grads, feature_grads)``.  The
    domain adapter and the proportions are treated as constants.
    """
    x, dom, y = batch.stacked()
    n_src = int((dom < batch.n_sources).sum())
    h, cache_h = mlp_forward(x, state.feature)
    logits_y, cache_y = mlp_forward(h[:n_src], state.label)
    label_loss, g_logits_y = weighted_cross_entropy(
        logits_y, y[:n_src], np.full(n_src, 1.0 / n_src)
    )
    label_grads, g_h_label = mlp_backward(cache_y, state.label, g_logits_y)

    logits_d, cache_d = mlp_forward(h, state.domain)
    counts = [len(sx) for sx in batch.source_x]
    domain_loss, g_logits_d = weighted_domain_loss(
        logits_d, dom, y, state.lam, current_betas(state, config), counts,
        len(batch.target_x), state.n_classes,
    )
    _, g_h_domain = mlp_backward(cache_d, state.domain, g_logits_d)

    g_h = gradient_reversal(g_h_domain, config.alpha_domain)
    g_h[:n_src] += g_h_label
    feature_grads, _ = mlp_backward(cache_h, state.feature, g_h)
    return label_loss, domain_loss, label_grads, feature_grads


def _gamma_losses(state: ModelState, config: TrainingConfig, h_src: list, y_src: list,
                  h_tgt: np.ndarray) -> tuple[float, float, np.ndarray]:
    a_mean, a_dist = config.gamma_weights
    grad = np.zeros(state.n_classes)
    mean_loss = dist_loss = 0.0
    if a_mean > 0:
        means, masks = [], []
        for s, (hs, ys) in enumerate(zip(h_src, y_src)):
            cm = class_conditional_means(hs, ys, state.n_classes)
            if not cm.complete:
                if state.epoch_means is None:
                    raise IncompleteStatsError(f"source {s} batch lacks a class")
                cm = cm.filled(state.epoch_means[s])
            means.append(cm)
            masks.append(cm.present.astype(np.float64))
        mean_loss, g = mean_matching_loss(means, state.lam, state.gamma_logits,
                                          h_tgt.mean(axis=0), masks)
        grad += a_mean * g
    if a_dist > 0 and state.grids is not None:
        for s, (hs, ys) in enumerate(zip(h_src, y_src)):
            try:
                stats = dist_match.estimate_match_stats(
                    h_tgt, hs, ys, state.grids[s], n_classes=state.n_classes
                )
            except IncompleteStatsError:
                continue  # a class is missing from this source's batch
            stats.delta = dist_match.default_ridge(stats.A, config.ridge_scale)
            v, g = dist_match.f_divergence_objective(stats, state.gamma_logits)
            dist_loss += state.lam[s] * v
            grad += a_dist * state.lam[s] * g
    return mean_loss, dist_loss, grad


def gamma_step(logits, grad, config: TrainingConfig, state=None, scale=1.0, beta1=0.9,
               beta2=0.99, eps=1e-8):
    """One update of the proportion logits.

    ``"sgd"`` is a plain gradient step.  ``"adam"`` rescales the step by
    running moment estimates, which keeps its size independent of the
    feature scale (the matching losses grow quadratically with it).
    """
    lr = config.gamma_learning_rate * scale
    if config.gamma_optimizer == "sgd":
        return logits - lr * grad, None
    m, v, t = state if state is not None else (np.zeros_like(grad), np.zeros_like(grad), 0)
    t += 1
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    step = lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
    return logits - step, (m, v, t)


def train_step(state: ModelState, batch: Minibatch, config: TrainingConfig
               ) -> tuple[ModelState, MetricsRecord]:
    """One iteration; ``state`` is not modified, a new state is returned."""
    if batch.n_sources != state.n_sources or len(batch.target_x) == 0:
        raise UsageError("minibatch needs every source domain and the target")
    opt = dict(state.opt)

    # 1. label predictor + feature extractor, gamma and theta_D fixed
    label_loss, domain_loss, g_label, g_feat = composite_gradients(state, batch, config)
    if not (math.isfinite(label_loss) and math.isfinite(domain_loss)):
        rec = MetricsRecord(state.iteration, label_loss, domain_loss, float("nan"),
                            float("nan"), state.gamma, state.lam)
        raise TrainingAborted(f"non-finite loss at iteration {state.iteration}", rec)
    net_cfg = config.optimizer_config(iteration=state.iteration)
    label, opt["label"] = optimizer_step(state.label, g_label, net_cfg, opt.get("label"))
    feature, opt["feature"] = optimizer_step(state.feature, g_feat, net_cfg, opt.get("feature"))
    state = replace(state, label=label, feature=feature, opt=opt)

    x, dom, y = batch.stacked()
    h = encode(state.feature, x)
    logits_d, cache_d = mlp_forward(h, state.domain)

    # 2. domain weights from the adapter's last hidden layer
    if config.estimates_gamma:
        z = cache_d.inputs[-1]
        src_z = [z[dom == s] for s in range(state.n_sources)]
        means, tmean = dw.adapter_hidden_means(src_z, z[dom == state.n_sources])
        new_lam = dw.compute_lambda(means, tmean, previous=state.lam)
        state = replace(state, weights=dw.smooth_lambda(state.weights, new_lam))

    # 3. domain adapter on weighted source and target samples
    counts = [len(sx) for sx in batch.source_x]
    _, g_logits_d = weighted_domain_loss(
        logits_d, dom, y, state.lam, current_betas(state, config), counts,
        len(batch.target_x), state.n_classes,
    )
    g_domain, _ = mlp_backward(cache_d, state.domain, g_logits_d)
    d_cfg = config.optimizer_config(config.domain_learning_rate, state.iteration)
    domain, opt["domain"] = optimizer_step(state.domain, g_domain, d_cfg, opt.get("domain"))
    state = replace(state, domain=domain)

    # 4. proportions, features treated as constants
    mean_loss = dist_loss = 0.0
    if config.estimates_gamma:
        h_src = [h[dom == s] for s in range(state.n_sources)]
        y_src = [y[dom == s] for s in range(state.n_sources)]
        mean_loss, dist_loss, g_gamma = _gamma_losses(
            state, config, h_src, y_src, h[dom == state.n_sources]
        )
        if not np.isfinite(g_gamma).all():
            rec = MetricsRecord(state.iteration, label_loss, domain_loss, mean_loss,
                                dist_loss, state.gamma, state.lam)
            raise TrainingAborted("non-finite proportion gradient", rec)
        logits, opt["gamma"] = gamma_step(state.gamma_logits, g_gamma, config, opt.get("gamma"),
                                           scale=config.gamma_rate_scale(state.iteration))
        state = replace(state, gamma_logits=logits, opt=opt)

    state = replace(state, iteration=state.iteration + 1)
    record = MetricsRecord(state.iteration, label_loss, domain_loss, mean_loss, dist_loss,
                           state.gamma, state.lam.copy())
    return state, record


class _DomainSampler:
    """Cycles through a shuffled index order, reshuffling when exhausted."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n == 0:
            raise UsageError("cannot sample from an empty domain")
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            m = min(k, self.n - self.pos)
            out.append(self.order[self.pos:self.pos + m])
            self.pos += m
            k -= m
        return np.concatenate(out)


def _split(datasets: Sequence[DomainDataset]):
    targets = [d for d in datasets if d.is_target]
    sources = [d for d in datasets if not d.is_target]
    if len(targets) != 1:
        raise UsageError("exactly one target domain required")
    if not sources:
        raise UsageError("at least one source domain required")
    for d in sources:
        if d.y is None:
            raise UsageError(f"source domain {d.domain} has no labels")
    return sources, targets[0]


def refresh_epoch_stats(state: ModelState, sources: Sequence[DomainDataset],
                        config: TrainingConfig, target: DomainDataset | None = None) -> ModelState:
    """Recompute per-source kernel grids and class means on current features.

    Under the ``"median"`` policy the bandwidth is re-estimated here too, since
    the feature scale keeps growing during training; ``"median-frozen"`` keeps
    the value from the first pass.
    """
    grids, means = [], []
    if config.gamma_weights[1] > 0 and (
        config.bandwidth == "median" or (config.bandwidth == "median-frozen" and state.bandwidth is None)
    ):
        allx = np.vstack([d.x for d in sources] + ([target.x] if target is not None else []))
        bw = dist_match.median_bandwidth(encode(state.feature, allx),
                                         rng=np.random.default_rng(state.iteration))
        state = replace(state, bandwidth=bw)
    for d in sources:
        h = encode(state.feature, d.x)
        cm = class_conditional_means(h, d.y, state.n_classes)
        means.append(cm.means)
        if config.gamma_weights[1] > 0:
            grids.append(dist_match.build_grid(h, d.y, state.n_classes, state.bandwidth))
    return replace(state, grids=grids or None, epoch_means=means)


def train(datasets: Sequence[DomainDataset], config: TrainingConfig,
          n_classes: int | None = None,
          callback: Callable[[ModelState, MetricsRecord], None] | None = None,
          ) -> tuple[ModelState, list[MetricsRecord]]:
    """Run ``config.max_iter`` iterations on stratified per-domain minibatches."""
    sources, target = _split(datasets)
    if n_classes is None:
        n_classes = int(max(d.y.max() for d in sources)) + 1
    props = [source_proportions(d.y, n_classes) for d in sources]
    state = init_state(target.x.shape[1], n_classes, props, config)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xBA7C]))
    samplers = [_DomainSampler(len(d), rng) for d in list(sources) + [target]]
    if config.gamma_weights[1] > 0 and not isinstance(config.bandwidth, str):
        state = replace(state, bandwidth=float(config.bandwidth))
    elif config.gamma_weights[1] > 0 and config.bandwidth not in BANDWIDTH_POLICIES:
        raise ConfigurationError(f"unknown bandwidth policy {config.bandwidth!r}")
    steps_per_epoch = max(1, max(len(d) for d in list(sources) + [target]) // config.batch_size)

    history: list[MetricsRecord] = []
    for it in range(config.max_iter):
        if it % steps_per_epoch == 0 and config.estimates_gamma:
            state = refresh_epoch_stats(state, sources, config, target)
        idx = [smp.take(config.batch_size) for smp in samplers]
        batch = Minibatch(
            [d.x[i] for d, i in zip(sources, idx)],
            [d.y[i] for d, i in zip(sources, idx)],
            target.x[idx[-1]],
        )
        state, rec = train_step(state, batch, config)
        history.append(rec)
        if callback is not None:
            callback(state, rec)
    return state, history


def predict_proba(state: ModelState, x) -> np.ndarray:
    logits, _ = mlp_forward(encode(state.feature, x), state.label)
    return softmax(logits)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney rank statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate(state: ModelState, x, y, true_gamma=None, auc: bool | None = None,
             proba: np.ndarray | None = None) -> dict:
    """Accuracy, per-class accuracy, confusion counts, binary AUC and proportion error.

    The AUC treats class 1 as positive and scores with its predicted probability.
    """
    y = np.asarray(y, dtype=np.intp)
    if y.size == 0:
        raise UsageError("evaluation set is empty")
    L = state.n_classes
    if y.min() < 0 or y.max() >= L:
        raise UsageError(f"labels must lie in [0, {L})")
    if auc and L != 2:
        raise UnsupportedMetricError("AUC is only defined here for two classes")
    p = predict_proba(state, x) if proba is None else np.asarray(proba)
    pred = p.argmax(axis=1)
    confusion = np.zeros((L, L), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    per_class = [float(confusion[l, l] / confusion[l].sum()) if confusion[l].sum() else float("nan")
                 for l in range(L)]
    out = {
        "accuracy": float((pred == y).mean()),
        "per_class_accuracy": per_class,
        "confusion": confusion.tolist(),
        "n": int(y.size),
    }
    if auc or (auc is None and L == 2):
        out["auc"] = roc_auc(p[:, 1], y == 1)
    if true_gamma is not None:
        err = state.gamma - np.asarray(true_gamma, dtype=np.float64)
        out["gamma_l1"] = float(np.abs(err).sum())
        out["gamma_linf"] = float(np.abs(err).max())
    return out


METRIC_FIELDS = ("iteration", "label_loss", "domain_loss", "mean_loss", "dist_loss")


def write_metrics_csv(path, history: Sequence[MetricsRecord], n_classes: int = 0,
                      n_sources: int = 0) -> None:
    """One row per iteration; an empty history still gets the header row."""
    rows = [r.as_row() for r in history]
    if rows:
        columns = list(rows[0])
    else:
        columns = [*METRIC_FIELDS, *(f"gamma_{l}" for l in range(n_classes)),
                   *(f"lambda_{s}" for s in range(n_sources)), "target_accuracy"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)
