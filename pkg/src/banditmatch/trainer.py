"""Training loops and the evaluation protocol.

Covers: supervised training of the logging policy, fine-tuning on logged
feedback (the full composite objective, its ablations, and the baseline
objectives), interactive evaluation against the dialog world, an ablation
grid with paired seeds, and the labeled-percentage sweep.

Fine-tuning warm-starts from the logging policy. Each step draws a
uniform batch from the log, refreshes the adaptive thresholds from the
batch's correct positives and negatives, builds the confidence and
bandit-eligibility masks, and descends the weighted sum of the four loss
terms. Optional early stopping keeps the parameters that maximize
exact-match rate on a held-out slice of logged positives
(composite/pseudo-label methods) or the clipped counterfactual value
estimate on the held-out log (importance-weighting baselines, whose
objective is not exact-match); by default every method trains its full
budget and reports the final model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import fet, nncore, objectives
from .datasets import BanditRecord, LabeledExample, SplitConfig, log_bandit_data, split_corpus
from .dialogworld import (
    WorldSchema,
    compute_aggregate,
    run_episode,
    run_expert_episode,
    sample_goal,
)
from .nncore import Tensor
from .objectives import AugmentConfig, LossWeights
from .policy import ActionSetPolicy, PolicyNet, policy_spec_for
from .seeding import derive_rng

METHOD_BANDITMATCH = "banditmatch"
METHOD_FIXMATCH = "fixmatch"
METHOD_IPS = "ips"
METHOD_BANDITNET = "banditnet"
METHOD_SL = "sl"

FINETUNE_METHODS = (METHOD_BANDITMATCH, METHOD_FIXMATCH, METHOD_IPS, METHOD_BANDITNET)

ABLATIONS = ("full", "no_mc_scale", "no_fet", "no_cbl", "no_kl", "none_all")

DEFAULT_SWEEP_PERCENTAGES = (5, 10, 20, 30, 40, 50, 60, 70, 80, 90)


class TrainerError(Exception):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 64
    epochs: int = 30
    sl_epochs: int = 240
    sl_label_smoothing: float = 0.2
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    hidden_dims: tuple[int, ...] = (128, 128)
    weights: LossWeights = field(default_factory=LossWeights)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    fet_decay: float = 0.9
    method: str = METHOD_BANDITMATCH
    add_kl: bool = False  # "+ KL control" variants of ips / banditnet
    no_mc_scale: bool = False
    no_fet: bool = False
    no_cbl: bool = False
    no_kl: bool = False
    warm_start: bool = True
    weight_decay: float = 0.0
    holdout_fraction: float = 0.1
    early_stop: bool = False
    ips_clip: float = objectives.DEFAULT_IPS_CLIP
    banditnet_translation: float = objectives.DEFAULT_TRANSLATION
    fixmatch_tau: float = objectives.FIXED_CONFIDENCE
    # the fixmatch baseline is feedback-blind SSL: its labeled data is the
    # expert split; switching to "logged_positives" reproduces the
    # drop-all-additions ablation of the composite method
    fixmatch_labeled_source: str = "split"
    # replay the expert split next to logged positives during composite
    # fine-tuning (off: logged positives only)
    replay_labeled: bool = False
    # optional diagnostics: per-step per-class threshold trace CSV
    threshold_trace_path: str | None = None

    def __post_init__(self):
        known = (*FINETUNE_METHODS, METHOD_SL)
        if self.method not in known:
            raise TrainerError(f"unknown method {self.method!r} (choose from {known})")
        if self.method != METHOD_BANDITMATCH and any(
            (self.no_mc_scale, self.no_fet, self.no_cbl, self.no_kl)
        ):
            raise TrainerError("ablation switches only apply to the banditmatch method")


def apply_ablation(config: TrainConfig, ablation: str) -> TrainConfig:
    """Translate a named ablation row into config switches."""
    if ablation not in ABLATIONS:
        raise TrainerError(f"unknown ablation {ablation!r}")
    if ablation == "full":
        return replace(config)
    if ablation == "none_all":
        return replace(config, no_fet=True, no_cbl=True, no_kl=True)
    return replace(config, **{ablation: True})


@dataclass
class StepLog:
    step: int
    loss_labeled: float
    loss_pseudo: float
    loss_bandit: float
    loss_kl: float
    total: float
    n_confident: int
    n_unconfident: int
    mc_pos: float
    mc_neg: float


def write_threshold_trace(path, rows: list[tuple]) -> None:
    """Per-step per-class threshold diagnostics (when a trace is requested)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "class", "accept", "reject", "mc_pos", "mc_neg"])
        for step, cls, accept, reject, mc_pos, mc_neg in rows:
            writer.writerow(
                [step, cls, repr(float(accept)), repr(float(reject)),
                 repr(float(mc_pos)), repr(float(mc_neg))]
            )


def write_training_log(path, rows: list[StepLog]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "step",
                "loss_labeled",
                "loss_pseudo",
                "loss_bandit",
                "loss_kl",
                "total",
                "n_confident",
                "n_unconfident",
                "mc_pos",
                "mc_neg",
            ]
        )
        for r in rows:
            writer.writerow(
                [
                    r.step,
                    repr(r.loss_labeled),
                    repr(r.loss_pseudo),
                    repr(r.loss_bandit),
                    repr(r.loss_kl),
                    repr(r.total),
                    r.n_confident,
                    r.n_unconfident,
                    repr(r.mc_pos),
                    repr(r.mc_neg),
                ]
            )


# -- array views over the log ----------------------------------------------------


@dataclass
class LogArrays:
    states: np.ndarray
    logged_mask: np.ndarray
    rho: np.ndarray
    delta: np.ndarray

    @classmethod
    def from_records(cls, records: list[BanditRecord], num_classes: int) -> "LogArrays":
        states = np.stack([r.state for r in records])
        logged = fet.sets_to_mask([r.logged_actions for r in records], num_classes)
        rho = np.stack([r.propensities for r in records])
        delta = np.array([r.feedback for r in records], dtype=np.int64)
        return cls(states, logged, rho, delta)

    def take(self, idx: np.ndarray) -> "LogArrays":
        return LogArrays(
            self.states[idx], self.logged_mask[idx], self.rho[idx], self.delta[idx]
        )

    def __len__(self) -> int:
        return self.states.shape[0]


def exact_match_rate(policy: PolicyNet, states: np.ndarray, target_mask: np.ndarray) -> float:
    if states.shape[0] == 0:
        return 0.0
    probs = policy.probs(states)
    return float(np.all((probs > 0.5) == target_mask, axis=1).mean())


def clipped_value_estimate(
    policy: PolicyNet, arrays: LogArrays, clip: float = objectives.DEFAULT_IPS_CLIP
) -> float:
    """Held-out clipped importance-weighted feedback estimate."""
    probs = policy.probs(arrays.states)
    z = arrays.logged_mask.astype(np.float64)
    log_w = (
        z * (np.log(probs) - np.log(arrays.rho))
        + (1.0 - z) * (np.log(1.0 - probs) - np.log(1.0 - arrays.rho))
    ).sum(axis=1)
    w = np.minimum(np.exp(log_w), clip)
    return float(np.mean(arrays.delta * w))


# -- supervised training -----------------------------------------------------------


def train_supervised(
    examples: list[LabeledExample],
    spec: nncore.MlpSpec,
    config: TrainConfig,
    stream: str = "sl",
) -> PolicyNet:
    """Per-class BCE on expert-labeled examples (no augmentation).

    Targets are label-smoothed so the fitted probabilities stay
    calibrated instead of saturating on a small corpus; decision
    thresholds are unaffected but the recorded propensities keep usable
    headroom for the downstream importance ratios and thresholds.
    """
    if not examples:
        raise TrainerError("supervised training needs at least one example")
    rng = derive_rng(config.seed, stream)
    policy = PolicyNet(spec, rng=rng)
    states = np.stack([ex.state for ex in examples])
    eps = config.sl_label_smoothing
    targets = fet.sets_to_mask([ex.actions for ex in examples], spec.output_dim)
    targets = targets.astype(np.float64) * (1.0 - eps) + eps / 2.0
    delta = np.ones(len(examples), dtype=np.int64)
    opt = nncore.make_optimizer(
        policy.trainable_parameters(), config.optimizer, config.learning_rate,
        config.weight_decay,
    )
    n = len(examples)
    for _ in range(config.sl_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            probs = policy.forward(states[idx])
            loss = objectives.loss_labeled(probs, targets[idx], delta[idx])
            policy.zero_grad()
            loss.backward()
            opt.step()
    return policy


def train_logging_policy(
    labeled: list[LabeledExample], spec: nncore.MlpSpec, config: TrainConfig
) -> PolicyNet:
    """Supervised training on the labeled split; returned frozen."""
    policy = train_supervised(labeled, spec, config, stream="logging")
    return policy.clone_frozen()


# -- fine-tuning on the log ----------------------------------------------------------


def _holdout_split(
    n: int, fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_hold = int(np.floor(fraction * n))
    return order[n_hold:], order[:n_hold]


def train_on_log(
    logging_policy: PolicyNet,
    records: list[BanditRecord],
    config: TrainConfig,
    labeled_split: list[LabeledExample] | None = None,
) -> tuple[PolicyNet, list[StepLog]]:
    """Fine-tune a copy of the logging policy on the logged feedback.

    Dispatches on ``config.method``; ablation switches refine the
    composite method. ``labeled_split`` is the small expert split: the
    feedback-blind fixmatch baseline requires it (it is that method's only
    labeled data; logged feedback enters solely through the unlabeled
    pseudo-label pathway), while the composite method can optionally
    replay it next to the logged positives. Returns the trained policy
    and the per-step log.
    """
    if config.method == METHOD_SL:
        raise TrainerError("sl trains on the expert corpus; use train_supervised")
    if not records:
        raise TrainerError("empty bandit log")
    if config.method == METHOD_FIXMATCH and not labeled_split:
        raise TrainerError("the fixmatch baseline needs the labeled split")
    if config.method in (METHOD_IPS, METHOD_BANDITNET):
        return _train_crm(logging_policy, records, config)
    return _train_composite(logging_policy, records, config, labeled_split)


def train_baseline(
    kind: str,
    logging_policy: PolicyNet,
    records: list[BanditRecord] | None,
    config: TrainConfig,
    labeled: list[LabeledExample] | None = None,
    add_kl: bool = False,
) -> PolicyNet:
    """Train one comparison method.

    ``sl`` fits the expert corpus directly (full labels, no bandit log);
    the other kinds fine-tune a copy of the logging policy on the log.
    ``add_kl`` turns on the "+ KL control" variant of the CRM baselines.
    """
    if kind == METHOD_SL:
        if not labeled:
            raise TrainerError("the sl baseline trains on the expert corpus")
        cfg = replace(config, method=METHOD_SL)
        return train_supervised(labeled, logging_policy.spec, cfg)
    cfg = replace(config, method=kind, add_kl=add_kl)
    policy, _ = train_on_log(logging_policy, records or [], cfg, labeled_split=labeled)
    return policy


def _init_policy(logging_policy: PolicyNet, config: TrainConfig) -> PolicyNet:
    if config.warm_start:
        return logging_policy.clone_trainable()
    return PolicyNet(logging_policy.spec, rng=derive_rng(config.seed, "init"))


def _train_composite(
    logging_policy: PolicyNet,
    records: list[BanditRecord],
    config: TrainConfig,
    labeled_split: list[LabeledExample] | None,
) -> tuple[PolicyNet, list[StepLog]]:
    use_fet = not config.no_fet and config.method == METHOD_BANDITMATCH
    use_cbl = not config.no_cbl and config.method == METHOD_BANDITMATCH
    use_kl = not config.no_kl and config.method == METHOD_BANDITMATCH
    # which examples feed the supervised term: the fixmatch baseline draws
    # on the expert split only; the composite method uses logged positives
    # (optionally replaying the split next to them)
    split_only_labels = (
        config.method == METHOD_FIXMATCH and config.fixmatch_labeled_source == "split"
    )
    use_split = split_only_labels or (
        config.method == METHOD_BANDITMATCH and config.replay_labeled
    )
    if use_split and not labeled_split:
        raise TrainerError(f"{config.method} configuration needs the labeled split")

    num_classes = logging_policy.num_actions
    arrays = LogArrays.from_records(records, num_classes)
    rng = derive_rng(config.seed, "train")
    aug_rng = derive_rng(config.seed, "augment")
    train_idx, hold_idx = _holdout_split(len(arrays), config.holdout_fraction, rng)
    train = arrays.take(train_idx)
    hold = arrays.take(hold_idx)
    hold_pos = hold.take(np.flatnonzero(hold.delta == 1))

    split_states = split_targets = None
    if use_split:
        split_states = np.stack([ex.state for ex in labeled_split])
        split_targets = fet.sets_to_mask([ex.actions for ex in labeled_split], num_classes)

    policy = _init_policy(logging_policy, config)
    opt = nncore.make_optimizer(
        policy.trainable_parameters(), config.optimizer, config.learning_rate,
        config.weight_decay,
    )
    tracker = fet.FetTracker(
        num_classes, decay=config.fet_decay, apply_scale=not config.no_mc_scale
    )
    ref_train = logging_policy.probs(train.states) if use_kl else None

    history: list[StepLog] = []
    trace_rows: list[tuple] | None = [] if config.threshold_trace_path else None
    best_score = -np.inf
    best_params = None
    n = len(train)
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = train.take(idx)
            weak_states, _ = objectives.mixup_batch(batch.states, config.aug.alpha_weak, aug_rng)
            strong_states, _ = objectives.mixup_batch(batch.states, config.aug.alpha_strong, aug_rng)

            plain_t = policy.forward(batch.states)
            weak_t = policy.forward(weak_states)
            plain_probs = plain_t.data
            weak_probs = weak_t.data

            pos_rows = batch.delta == 1
            if use_fet:
                thresholds = tracker.update(
                    plain_probs[pos_rows],
                    batch.logged_mask[pos_rows],
                    batch.rho[pos_rows],
                    plain_probs[~pos_rows],
                    batch.logged_mask[~pos_rows],
                    batch.rho[~pos_rows],
                )
                conf = fet.confidence_mask(weak_probs, batch.delta, thresholds)
                stats = tracker.correctness()
            else:
                conf = objectives.fixmatch_mask(weak_probs, batch.delta, config.fixmatch_tau)
                stats = fet.CorrectnessStats(0.0, 0.0, available=False)

            qhat = objectives.pseudo_labels(weak_probs)
            if split_only_labels:
                l_l = Tensor(0.0)
            else:
                l_l = objectives.loss_labeled(weak_t, batch.logged_mask, batch.delta)
            if use_split:
                lab_idx = rng.integers(0, split_states.shape[0], size=config.batch_size)
                weak_split, _ = objectives.mixup_batch(
                    split_states[lab_idx], config.aug.alpha_weak, aug_rng
                )
                split_t = policy.forward(weak_split)
                l_l = l_l + objectives.loss_labeled(
                    split_t, split_targets[lab_idx], np.ones(len(lab_idx), dtype=np.int64)
                )
            strong_t = policy.forward(strong_states)
            l_p = objectives.loss_pseudo(strong_t, qhat, conf)
            if use_cbl:
                umask = objectives.unconfident_plus_mask(batch.delta, conf, batch.logged_mask)
                l_b = objectives.loss_bandit(plain_t, batch.rho, batch.delta, umask)
            else:
                umask = np.zeros_like(conf, dtype=np.float64)
                l_b = Tensor(0.0)
            if use_kl:
                l_k = objectives.loss_kl_control(plain_t, ref_train[idx])
            else:
                l_k = Tensor(0.0)
            total = objectives.total_loss(l_l, l_p, l_b, l_k, config.weights)
            policy.zero_grad()
            total.backward()
            opt.step()
            step += 1
            history.append(
                StepLog(
                    step=step,
                    loss_labeled=l_l.item(),
                    loss_pseudo=l_p.item(),
                    loss_bandit=l_b.item(),
                    loss_kl=l_k.item(),
                    total=total.item(),
                    n_confident=int(conf.sum()),
                    n_unconfident=int(umask.sum()),
                    mc_pos=stats.mc_pos,
                    mc_neg=stats.mc_neg,
                )
            )
            if trace_rows is not None and use_fet:
                trace_rows.extend(
                    (step, c, thresholds.accept[c], thresholds.reject[c],
                     stats.mc_pos, stats.mc_neg)
                    for c in range(num_classes)
                )
        if config.early_stop and len(hold_pos) > 0:
            score = exact_match_rate(policy, hold_pos.states, hold_pos.logged_mask)
            if score > best_score:
                best_score = score
                best_params = [p.data.copy() for p in policy.parameters()]
    if best_params is not None:
        for p, data in zip(policy.parameters(), best_params):
            p.data = data
    if trace_rows is not None:
        write_threshold_trace(config.threshold_trace_path, trace_rows)
    return policy, history


def _train_crm(
    logging_policy: PolicyNet, records: list[BanditRecord], config: TrainConfig
) -> tuple[PolicyNet, list[StepLog]]:
    num_classes = logging_policy.num_actions
    arrays = LogArrays.from_records(records, num_classes)
    rng = derive_rng(config.seed, "train")
    train_idx, hold_idx = _holdout_split(len(arrays), config.holdout_fraction, rng)
    train = arrays.take(train_idx)
    hold = arrays.take(hold_idx)

    policy = _init_policy(logging_policy, config)
    opt = nncore.make_optimizer(
        policy.trainable_parameters(), config.optimizer, config.learning_rate,
        config.weight_decay,
    )
    ref_train = logging_policy.probs(train.states) if config.add_kl else None

    history: list[StepLog] = []
    best_score = -np.inf
    best_params = None
    n = len(train)
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = train.take(idx)
            probs_t = policy.forward(batch.states)
            if config.method == METHOD_IPS:
                loss = objectives.loss_ips(
                    probs_t, batch.rho, batch.delta, batch.logged_mask, config.ips_clip
                )
            else:
                loss = objectives.loss_banditnet(
                    probs_t,
                    batch.rho,
                    batch.delta,
                    batch.logged_mask,
                    config.banditnet_translation,
                    config.ips_clip,
                )
            l_k = Tensor(0.0)
            if config.add_kl:
                l_k = objectives.loss_kl_control(probs_t, ref_train[idx])
                loss = loss + config.weights.kl * l_k
            policy.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            history.append(
                StepLog(
                    step=step,
                    loss_labeled=0.0,
                    loss_pseudo=0.0,
                    loss_bandit=loss.item(),
                    loss_kl=l_k.item(),
                    total=loss.item(),
                    n_confident=0,
                    n_unconfident=int(batch.logged_mask.sum()),
                    mc_pos=0.0,
                    mc_neg=0.0,
                )
            )
        if config.early_stop and len(hold) > 0:
            score = clipped_value_estimate(policy, hold, config.ips_clip)
            if score > best_score:
                best_score = score
                best_params = [p.data.copy() for p in policy.parameters()]
    if best_params is not None:
        for p, data in zip(policy.parameters(), best_params):
            p.data = data
    return policy, history


# -- interactive evaluation ------------------------------------------------------------


@dataclass
class ExperimentReport:
    method: str
    metrics: dict[str, tuple[float, float]]  # field -> (mean, std) over runs
    n_runs: int
    n_dialogs: int
    seed: int


def _aggregate_runs(run_fn, schema, n_dialogs, n_runs, seed, method) -> ExperimentReport:
    if n_dialogs < 1 or n_runs < 1:
        raise TrainerError("n_dialogs and n_runs must be at least 1")
    run_means: dict[str, list[float]] = {}
    for run in range(n_runs):
        rng = derive_rng(seed, "eval", run)
        episodes = [run_fn(sample_goal(schema, rng)) for _ in range(n_dialogs)]
        agg = compute_aggregate(episodes)
        for name, (mean_value, _) in agg.items():
            run_means.setdefault(name, []).append(mean_value)
    metrics = {
        name: (float(np.mean(vals)), float(np.std(vals)))
        for name, vals in run_means.items()
    }
    return ExperimentReport(method, metrics, n_runs, n_dialogs, seed)


def evaluate(
    policy: PolicyNet,
    schema: WorldSchema,
    n_dialogs: int = 500,
    n_runs: int = 5,
    seed: int = 0,
    max_turns: int = 20,
    method: str = "policy",
) -> ExperimentReport:
    """Simulate ``n_runs`` independent sets of dialogs and aggregate.

    The reported std is over run means, matching the runs-of-dialogs
    protocol rather than per-episode variance.
    """
    adapter = ActionSetPolicy(policy, schema)
    return _aggregate_runs(
        lambda goal: run_episode(adapter, schema, goal, max_turns=max_turns),
        schema, n_dialogs, n_runs, seed, method,
    )


def evaluate_expert(
    schema: WorldSchema,
    n_dialogs: int = 500,
    n_runs: int = 5,
    seed: int = 0,
    max_turns: int = 20,
) -> ExperimentReport:
    """Evaluate the rule expert under the same protocol (skyline check)."""
    return _aggregate_runs(
        lambda goal: run_expert_episode(schema, goal, max_turns=max_turns),
        schema, n_dialogs, n_runs, seed, "expert",
    )


# -- grids ---------------------------------------------------------------------------


def run_ablation_grid(
    logging_policy: PolicyNet,
    records: list[BanditRecord],
    schema: WorldSchema,
    config: TrainConfig,
    n_dialogs: int = 500,
    n_runs: int = 5,
    eval_seed: int = 0,
) -> list[ExperimentReport]:
    """Full method plus the five ablations, trained and evaluated with
    shared seeds so row deltas are paired."""
    reports = []
    for ablation in ABLATIONS:
        cfg = apply_ablation(replace(config, method=METHOD_BANDITMATCH), ablation)
        trained, _ = train_on_log(logging_policy, records, cfg)
        label = METHOD_BANDITMATCH if ablation == "full" else f"{METHOD_BANDITMATCH}-{ablation}"
        reports.append(
            evaluate(trained, schema, n_dialogs, n_runs, eval_seed, method=label)
        )
    return reports


def run_sl_sweep(
    corpus: list[LabeledExample],
    schema: WorldSchema,
    config: TrainConfig,
    percentages=DEFAULT_SWEEP_PERCENTAGES,
    methods=(METHOD_BANDITMATCH, METHOD_FIXMATCH, METHOD_IPS, METHOD_BANDITNET),
    n_dialogs: int = 500,
    n_runs: int = 5,
) -> dict[str, list[tuple[int, ExperimentReport]]]:
    """Regenerate the split, logging policy, and log per percentage point,
    then train and evaluate every method on the same log."""
    spec = policy_spec_for(schema, config.hidden_dims)
    results: dict[str, list[tuple[int, ExperimentReport]]] = {m: [] for m in methods}
    results["logging"] = []
    for p in percentages:
        point_seed = int(derive_rng(config.seed, "sweep", p).integers(2**31))
        labeled, pool = split_corpus(corpus, SplitConfig(p / 100.0, seed=point_seed))
        point_cfg = replace(config, seed=point_seed)
        logging_policy = train_logging_policy(labeled, spec, point_cfg)
        records = log_bandit_data(logging_policy, pool)
        results["logging"].append(
            (p, evaluate(logging_policy, schema, n_dialogs, n_runs, point_seed, method="logging"))
        )
        for method in methods:
            cfg = replace(point_cfg, method=method)
            trained, _ = train_on_log(logging_policy, records, cfg, labeled_split=labeled)
            results[method].append(
                (p, evaluate(trained, schema, n_dialogs, n_runs, point_seed, method=method))
            )
    return results
