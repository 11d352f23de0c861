"""Incremental session protocol: base training, prototype registration,
nearest-mean evaluation, metrics, ablations, and the delta sweep.

Session 0 trains the encoder on the base classes; every later session
is few-shot and touches nothing but the prototype table (plus, behind
an off-by-default flag, the freshly appended classifier rows). The
extractor, projection head, and all previously existing classifier rows
stay frozen after the base session, which the driver enforces by
digest comparison around every incremental session.

Evaluation is nearest-class-mean over the expanded prototype table:
each real class owns one prototype per label slot, and per-class scores
aggregate cosine similarity across slots (sum by default).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .augment import (
    MIXTURE_MODES,
    TransformSet,
    expand_batch,
    make_views,
    plain_views,
    proxy_encode,
    sample_pairing,
)
from .config import ConfigError, RunConfig, dataset_spec, encoder_spec
from .data import SampleStore, Session, SessionError, gen_synthetic, load_store, make_batches, split_sessions
from .encoder import (
    ModelParams,
    forward_classifier,
    forward_features,
    forward_projection,
    init_params,
    momentum_sync,
    params_digest,
    register_classes,
)
from .losses import FeatureQueue, class_loss, joint_loss, sscl_loss
from .seeds import derive_rng
from .tensor import GradTape, NumericError, Tensor, init_sgd, no_grad, reverse_pass, sgd_momentum_step

COMPONENT_GRID = ("ce", "ce+pc", "ce+sscl", "ce+sscl+pc", "ce+pc+fa", "full")
MIXTURE_GRID = ("ce", "aug+noise", "ori+noise", "ori+aug", "ori+ori", "aug+aug")


class VariantError(ConfigError):
    """Ablation flags are inconsistent with each other."""


@dataclass(frozen=True)
class AblationVariant:
    """Which training components are active for a run."""

    use_sscl: bool = True
    use_proxy: bool = True
    use_feataug: bool = True
    mixture: str = "aug+aug"

    def __post_init__(self) -> None:
        if self.mixture not in MIXTURE_MODES:
            raise VariantError(f"unknown mixture mode {self.mixture!r}, expected one of {MIXTURE_MODES}")
        if self.use_feataug and not self.use_proxy:
            raise VariantError("feature mixing needs the proxy label space (use_feataug requires use_proxy)")
        if self.mixture != "aug+aug" and not self.use_feataug:
            raise VariantError(f"mixture mode {self.mixture!r} is meaningful only with use_feataug")

    @classmethod
    def parse(cls, name: str, mixture: str = "aug+aug") -> "AblationVariant":
        tokens = [t for t in name.strip().lower().split("+") if t]
        if tokens == ["full"]:
            return cls(mixture=mixture)
        known = {"ce", "sscl", "pc", "fa"}
        unknown = set(tokens) - known
        if unknown:
            raise VariantError(f"unknown ablation token(s) {sorted(unknown)} in {name!r}")
        if "ce" not in tokens:
            raise VariantError(f"ablation {name!r} must include the ce term")
        fa = "fa" in tokens
        return cls(
            use_sscl="sscl" in tokens,
            use_proxy="pc" in tokens,
            use_feataug=fa,
            mixture=mixture if fa else "aug+aug",
        )

    @property
    def proxy_factor(self) -> int:
        return 2 if self.use_proxy else 1

    def flags(self) -> str:
        parts = ["ce"]
        if self.use_sscl:
            parts.append("sscl")
        if self.use_proxy:
            parts.append("pc")
        if self.use_feataug:
            parts.append("fa")
        return "+".join(parts)

    def label(self) -> str:
        name = self.flags()
        if self.use_feataug and self.mixture != "aug+aug":
            name += f"[{self.mixture}]"
        return name


@dataclass
class MetricsReport:
    """Per-session accuracies in percent plus the derived summaries."""

    accuracies: list[float]
    average_acc: float
    pd: float
    delta_fi: float | None = None


def compute_metrics(accuracies, baseline=None) -> MetricsReport:
    """Average accuracy, drop from first to last session, and the final
    improvement over a baseline run when one is supplied."""
    accs = [float(a) for a in accuracies]
    if not accs:
        raise ValueError("need at least one session accuracy")
    delta_fi = None
    if baseline is not None:
        base = [float(b) for b in baseline]
        if not base:
            raise ValueError("baseline accuracies must be non-empty when given")
        delta_fi = accs[-1] - base[-1]
    return MetricsReport(
        accuracies=accs,
        average_acc=float(np.mean(accs)),
        pd=accs[0] - accs[-1],
        delta_fi=delta_fi,
    )


@dataclass
class SessionState:
    """Frozen model plus everything registered across sessions."""

    params: ModelParams
    transforms: TransformSet
    proxy_factor: int
    aggregation: str = "sum"
    session_classes: list[np.ndarray] = field(default_factory=list)
    prototypes: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def current_session(self) -> int:
        return len(self.session_classes) - 1

    def registered_classes(self) -> np.ndarray:
        if not self.session_classes:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(self.session_classes))

    def register_session(self, classes: np.ndarray) -> None:
        classes = np.asarray(classes, dtype=np.int64)
        if classes.size == 0:
            raise SessionError("a session must introduce at least one class")
        seen = set(self.registered_classes().tolist())
        overlap = seen.intersection(classes.tolist())
        if overlap:
            raise SessionError(f"classes {sorted(overlap)} already registered in an earlier session")
        self.session_classes.append(classes)


def build_prototypes(state: SessionState, session: Session, *, delta: float, seed: int) -> SessionState:
    """Register a session's classes and add their slot prototypes.

    Slot 0 is the normalized mean feature of the class's train rows.
    With a doubled label space, slot 1 is the normalized mean of
    delta-mixed transformed features where partners are drawn within
    the class only.
    """
    state.register_session(session.classes)
    params, transforms = state.params, state.transforms
    for cls in session.classes.tolist():
        rows = session.train_x[session.train_y == cls]
        if rows.shape[0] == 0:
            raise SessionError(f"class {cls} has no train rows in session {session.index}")
        with no_grad():
            feats = forward_features(params, rows).values
        mean = feats.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-150:
            raise NumericError(f"class {cls} slot-0 prototype has zero norm")
        state.prototypes[proxy_encode(cls, 0, state.proxy_factor)] = mean / norm
        if state.proxy_factor == 1:
            continue
        x_exp, _ = expand_batch(rows, np.full(rows.shape[0], cls), transforms)
        with no_grad():
            z = forward_features(params, x_exp).values
        pairing = sample_pairing(z.shape[0], derive_rng(seed, "proto", int(cls)))
        mixed = delta * z + (1.0 - delta) * z[pairing]
        mean1 = mixed.mean(axis=0)
        norm1 = np.linalg.norm(mean1)
        if norm1 < 1e-150:
            raise NumericError(f"class {cls} slot-1 prototype has zero norm")
        state.prototypes[proxy_encode(cls, 1, state.proxy_factor)] = mean1 / norm1
    return state


def _prototype_table(state: SessionState) -> tuple[np.ndarray, np.ndarray]:
    classes = state.registered_classes()
    if classes.size == 0:
        raise SessionError("no classes registered yet")
    rows = [
        state.prototypes[proxy_encode(int(c), p, state.proxy_factor)]
        for c in classes
        for p in range(state.proxy_factor)
    ]
    return classes, np.stack(rows)


def ncm_integrated_predict(state: SessionState, features: np.ndarray) -> np.ndarray:
    """Predict real classes by aggregated cosine similarity to the slot
    prototypes of every registered class. Ties go to the smallest id."""
    classes, table = _prototype_table(state)
    q = np.asarray(features, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != table.shape[1]:
        raise SessionError(f"queries of shape {q.shape} do not match prototypes of width {table.shape[1]}")
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    q = np.divide(q, norms, out=np.zeros_like(q), where=norms > 0)
    sims = (q @ table.T).reshape(q.shape[0], classes.size, state.proxy_factor)
    scores = sims.max(axis=2) if state.aggregation == "max" else sims.sum(axis=2)
    return classes[np.argmax(scores, axis=1)]


def evaluate_session(state: SessionState, test_x: np.ndarray, test_y: np.ndarray) -> float:
    """Accuracy in percent over a test pool of registered classes."""
    test_y = np.asarray(test_y, dtype=np.int64)
    if test_y.size == 0:
        raise SessionError("empty test pool")
    registered = set(state.registered_classes().tolist())
    missing = set(np.unique(test_y).tolist()) - registered
    if missing:
        raise SessionError(f"test pool contains unregistered classes {sorted(missing)}")
    with no_grad():
        feats = forward_features(state.params, test_x).values
    pred = ncm_integrated_predict(state, feats)
    return 100.0 * float(np.mean(pred == test_y))


def confusion_matrix(state: SessionState, test_x: np.ndarray, test_y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Counts indexed [true, predicted] over the registered classes."""
    classes = state.registered_classes()
    index = {int(c): i for i, c in enumerate(classes)}
    with no_grad():
        feats = forward_features(state.params, test_x).values
    pred = ncm_integrated_predict(state, feats)
    counts = np.zeros((classes.size, classes.size), dtype=np.int64)
    for t, p in zip(np.asarray(test_y, dtype=np.int64), pred):
        counts[index[int(t)], index[int(p)]] += 1
    return classes, counts


@dataclass
class StepOutput:
    loss: Tensor
    class_term: float
    contrastive_term: float
    keys: Tensor | None
    key_labels: np.ndarray | None


def batch_joint_loss(
    params: ModelParams,
    xb: np.ndarray,
    yb: np.ndarray,
    transforms: TransformSet,
    queue: FeatureQueue | None,
    variant: AblationVariant,
    config: RunConfig,
    epoch: int,
    batch_index: int,
) -> StepOutput:
    """One training step's loss, built from per-purpose seeded streams.

    Pure in the parameters: calling it twice with the same arguments
    consumes identical random draws, so it serves both the training
    loop and derivative checking. The queue is read, never written.
    """
    seed = config.seed
    delta = config.delta if variant.use_feataug else 1.0
    jitter = config.jitter if variant.use_sscl else 0.0
    shared = dict(
        rng_view_a=derive_rng(seed, "view-a", epoch, batch_index),
        rng_view_b=derive_rng(seed, "view-b", epoch, batch_index),
        jitter=jitter,
        perturb=variant.use_sscl,
        momentum_view=variant.use_sscl,
    )
    if variant.use_proxy:
        view_a, view_b = make_views(
            xb, yb, params, transforms,
            delta=delta,
            mixture=variant.mixture,
            noise_scale=config.noise_scale,
            rng_pair=derive_rng(seed, "pair", epoch, batch_index),
            rng_noise=derive_rng(seed, "noise", epoch, batch_index),
            **shared,
        )
    else:
        view_a, view_b = plain_views(xb, yb, params, transforms, **shared)

    logits = forward_classifier(params, view_a.f_comb)
    l_class = class_loss(logits, view_a.proxy_labels)
    if not variant.use_sscl:
        return StepOutput(l_class, l_class.item(), 0.0, None, None)

    anchors = forward_projection(params, view_a.f_comb)
    with no_grad():
        keys = forward_projection(params, view_b.f_comb, use_momentum=True)
    l_con = sscl_loss(anchors, keys, view_a.proxy_labels, view_b.proxy_labels, queue, config.tau)
    return StepOutput(
        joint_loss(l_class, l_con), l_class.item(), l_con.item(), keys, view_b.proxy_labels
    )


def train_base(
    config: RunConfig,
    variant: AblationVariant,
    session: Session,
    transforms: TransformSet,
) -> tuple[ModelParams, FeatureQueue | None, list[dict]]:
    """Train the encoder on the base session; later sessions freeze it.

    Returns the trained parameters, the key queue (None when the
    contrastive term is off), and one log record per epoch.
    """
    if session.index != 0:
        raise SessionError("train_base only runs on the base session")
    params = init_params(
        encoder_spec(config), config.seed, proxy_factor=variant.proxy_factor, ema=config.ema
    )
    register_classes(params, session.classes.size)
    queue = FeatureQueue(config.queue, config.projection_dim) if variant.use_sscl else None
    trainables = params.trainable()
    optimizer = init_sgd(trainables, config.lr, config.sgd_momentum)
    logs: list[dict] = []
    for epoch in range(config.epochs_base):
        batches = make_batches(
            session.train_x, session.train_y, config.batch, derive_rng(config.seed, "batches", epoch)
        )
        totals = np.zeros(3)
        for b_idx, (xb, yb) in enumerate(batches):
            with GradTape() as tape:
                step = batch_joint_loss(
                    params, xb, yb, transforms, queue, variant, config, epoch, b_idx
                )
            grads = reverse_pass(tape, step.loss, trainables)
            sgd_momentum_step(trainables, grads, optimizer)
            if variant.use_sscl:
                momentum_sync(params)
                queue.push(step.keys, step.key_labels)
            totals += (step.loss.item(), step.class_term, step.contrastive_term)
        mean = totals / len(batches)
        logs.append(
            {"epoch": epoch, "loss": float(mean[0]), "class_loss": float(mean[1]), "sscl_loss": float(mean[2])}
        )
    return params, queue, logs


def _finetune_classifier(
    params: ModelParams, session: Session, transforms: TransformSet, config: RunConfig, variant: AblationVariant
) -> None:
    """Optional few-shot fine-tuning of the freshly appended classifier
    rows. All other weights, including older classifier rows, stay put."""
    new_rows = session.classes.size * params.proxy_factor
    frozen_rows = params.classifier_width - new_rows
    x_exp, y_exp = expand_batch(session.train_x, session.train_y, transforms)
    with no_grad():
        feats = forward_features(params, x_exp).values
    if variant.use_proxy:
        rng = derive_rng(config.seed, "finetune-mix", session.index)
        delta = config.delta if variant.use_feataug else 1.0
        pairing = sample_pairing(feats.shape[0], rng)
        mixed = delta * feats + (1.0 - delta) * feats[pairing]
        rows = np.empty((2 * feats.shape[0], feats.shape[1]))
        rows[0::2] = feats
        rows[1::2] = mixed
        labels = np.empty(2 * y_exp.shape[0], dtype=np.int64)
        labels[0::2] = proxy_encode(y_exp, np.zeros_like(y_exp))
        labels[1::2] = proxy_encode(y_exp, np.ones_like(y_exp))
    else:
        rows, labels = feats, y_exp
    optimizer = init_sgd([params.classifier], config.lr, config.sgd_momentum)
    rows_t = Tensor(rows)
    for epoch in range(config.epochs_incremental):
        with GradTape() as tape:
            loss = class_loss(forward_classifier(params, rows_t), labels)
        (grad,) = reverse_pass(tape, loss, [params.classifier])
        grad[:frozen_rows] = 0.0
        sgd_momentum_step([params.classifier], [grad], optimizer)


@dataclass
class ProtocolResult:
    report: MetricsReport
    state: SessionState
    logs: list[dict]
    confusion_classes: np.ndarray
    confusion: np.ndarray
    variant: AblationVariant


def provision_store(config: RunConfig) -> SampleStore:
    """Load the configured store, or synthesize one from the schema."""
    if config.store:
        return load_store(config.store)
    return gen_synthetic(dataset_spec(config), config.seed, config.separation)


def run_protocol(config: RunConfig, store: SampleStore | None = None, baseline=None) -> ProtocolResult:
    """Run the full incremental protocol for one configuration."""
    variant = AblationVariant.parse(config.ablation, config.mixture)
    if store is None:
        store = provision_store(config)
    sessions = split_sessions(store, dataset_spec(config), seed=config.seed)
    transforms = TransformSet.vector(config.input_dim, config.transforms, seed=config.seed)
    params, _, logs = train_base(config, variant, sessions[0], transforms)

    state = SessionState(
        params=params,
        transforms=transforms,
        proxy_factor=variant.proxy_factor,
        aggregation=config.aggregation,
    )
    delta = config.delta if variant.use_feataug else 1.0
    build_prototypes(state, sessions[0], delta=delta, seed=config.seed)
    accuracies = [evaluate_session(state, sessions[0].test_x, sessions[0].test_y)]

    for session in sessions[1:]:
        backbone_before = params_digest(params, include_classifier=False)
        classifier_before = params.classifier.values.copy()
        register_classes(params, session.classes.size)
        build_prototypes(state, session, delta=delta, seed=config.seed)
        if config.finetune_incremental:
            _finetune_classifier(params, session, transforms, config, variant)
        if params_digest(params, include_classifier=False) != backbone_before:
            raise SessionError(f"backbone changed during incremental session {session.index}")
        if not np.array_equal(params.classifier.values[: classifier_before.shape[0]], classifier_before):
            raise SessionError(f"existing classifier rows changed during incremental session {session.index}")
        accuracies.append(evaluate_session(state, session.test_x, session.test_y))

    report = compute_metrics(accuracies, baseline)
    conf_classes, conf = confusion_matrix(state, sessions[-1].test_x, sessions[-1].test_y)
    return ProtocolResult(
        report=report,
        state=state,
        logs=logs,
        confusion_classes=conf_classes,
        confusion=conf,
        variant=variant,
    )


def run_ablation(variant: AblationVariant | str, config: RunConfig, store: SampleStore | None = None, baseline=None) -> MetricsReport:
    """Run the protocol with a component variant swapped in."""
    if isinstance(variant, str):
        variant = AblationVariant.parse(variant, config.mixture)
    adjusted = replace(config, ablation=variant.flags(), mixture=variant.mixture)
    return run_protocol(adjusted, store=store, baseline=baseline).report


@dataclass
class SweepRow:
    delta: float
    final_accuracy: float
    report: MetricsReport


def sweep_delta(deltas, config: RunConfig, store: SampleStore | None = None) -> list[SweepRow]:
    """One full protocol run per mix coefficient, all sharing one seed."""
    rows: list[SweepRow] = []
    for d in deltas:
        d = float(d)
        if not 0.0 <= d <= 1.0:
            raise ConfigError(f"sweep delta {d} outside [0, 1]")
        result = run_protocol(replace(config, delta=d), store=store)
        rows.append(SweepRow(delta=d, final_accuracy=result.report.accuracies[-1], report=result.report))
    return rows
