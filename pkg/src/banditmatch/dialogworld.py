"""Synthetic multi-domain task-oriented dialog environment.

A deterministic, desk-scale stand-in for a corpus + user-simulator stack:
goal sampler, agenda-based user simulator, rule-based expert policy, binary
state encoder, and interactive metrics (Turn / Match / Inform Recall /
Inform F1 / Success).

Action vocabulary. An atomic action is a (domain, act_type, slot) triple.
For each domain the agent may ``inform`` any slot, ``request`` any
constraint (informable) slot, and emit slotless ``offer`` / ``book`` /
``nooffer``; a single global ``bye`` closes the dialog. The triple <->
index mapping is fixed by the schema and stable for the life of a run.

Episode flow: the user opens, then agent and user alternate. The episode
ends when the user has everything it needs (it says bye), when the agent
says bye, or at ``max_turns`` agent turns.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

INFORM = "inform"
REQUEST = "request"
OFFER = "offer"
BOOK = "book"
NOOFFER = "nooffer"
BYE = "bye"

GENERAL = "general"
DONTCARE = "dontcare"

SCHEMA_VERSION = "v1"

TURN_BUCKETS = 6  # one-hot over turn counts 0..4 and 5+
MATCH_BUCKETS = 4  # 0, 1, 2-3, >=4 database matches


class WorldError(Exception):
    pass


@dataclass(frozen=True, order=True)
class AtomicAction:
    domain: str
    act_type: str
    slot: str | None = None

    def label(self) -> str:
        return f"{self.domain}-{self.act_type}-{self.slot or 'none'}"


@dataclass(frozen=True)
class UserAct:
    """User-side dialog act; informs carry the uttered value."""

    domain: str
    act_type: str  # inform | request | book | bye
    slot: str | None = None
    value: str | None = None


@dataclass
class DomainSchema:
    name: str
    informable: dict[str, list[str]]  # slot -> allowed values
    requestable: list[str]
    entities: list[dict[str, str]]  # each maps every slot of the domain

    def all_slots(self) -> list[str]:
        return list(self.informable) + list(self.requestable)


@dataclass
class WorldSchema:
    domains: list[DomainSchema]

    def __post_init__(self):
        for dom in self.domains:
            for ent in dom.entities:
                missing = [s for s in dom.all_slots() if s not in ent]
                if missing:
                    raise WorldError(
                        f"entity in domain {dom.name!r} missing slots {missing}"
                    )
        self._actions = self._build_vocab()
        self._index = {a: i for i, a in enumerate(self._actions)}

    def _build_vocab(self) -> list[AtomicAction]:
        actions: list[AtomicAction] = []
        for dom in self.domains:
            for slot in dom.all_slots():
                actions.append(AtomicAction(dom.name, INFORM, slot))
            for slot in dom.informable:
                actions.append(AtomicAction(dom.name, REQUEST, slot))
            actions.append(AtomicAction(dom.name, OFFER))
            actions.append(AtomicAction(dom.name, BOOK))
            actions.append(AtomicAction(dom.name, NOOFFER))
        actions.append(AtomicAction(GENERAL, BYE))
        return actions

    @property
    def actions(self) -> list[AtomicAction]:
        return self._actions

    @property
    def num_actions(self) -> int:
        return len(self._actions)

    def action_index(self, action: AtomicAction) -> int:
        return self._index[action]

    def domain(self, name: str) -> DomainSchema:
        for dom in self.domains:
            if dom.name == name:
                return dom
        raise WorldError(f"unknown domain {name!r}")

    @property
    def state_dim(self) -> int:
        dim = 0
        for dom in self.domains:
            n_all = len(dom.all_slots())
            n_inf = len(dom.informable)
            n_req = len(dom.requestable)
            # expressed / pending / informed flags, match bucket, booking
            # requested+done, active flag, last-turn user inform/request/book
            dim += 3 * n_all + MATCH_BUCKETS + 2 + 1 + n_inf + n_req + 1
        return dim + 1 + TURN_BUCKETS  # user-bye flag + turn bucket

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "domains": [
                {
                    "name": d.name,
                    "informable": d.informable,
                    "requestable": d.requestable,
                    "entities": d.entities,
                }
                for d in self.domains
            ],
        }

    def save(self, path) -> None:
        # insertion order of the slot maps is part of the schema (it fixes
        # the action vocabulary order), so keys are not sorted
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_dict(cls, payload: dict) -> "WorldSchema":
        version = payload.get("schema_version")
        if version != SCHEMA_VERSION:
            raise WorldError(
                f"world schema version {version!r} unsupported (expected {SCHEMA_VERSION!r})"
            )
        domains = [
            DomainSchema(
                name=d["name"],
                informable={k: list(v) for k, v in d["informable"].items()},
                requestable=list(d["requestable"]),
                entities=[dict(e) for e in d["entities"]],
            )
            for d in payload["domains"]
        ]
        return cls(domains)

    @classmethod
    def load(cls, path) -> "WorldSchema":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def default_schema() -> WorldSchema:
    """Four domains, 4 constraint + 4 request slots each, 10 entities each.

    Entity attributes are drawn from skewed, domain-specific value
    distributions (fixed internal seed, so the schema is a constant).
    The clustering makes the most informative constraint question depend
    on which entities remain, not merely on how many, which keeps several
    system responses plausible for one encoded state.
    """
    names = ("hotel", "restaurant", "attraction", "train")
    informable_slots = ("area", "price", "kind", "rating")
    requestable_slots = ("phone", "address", "postcode", "hours")
    values = {
        "area": ["north", "south", "east"],
        "price": ["cheap", "moderate", "expensive"],
        "kind": ["classic", "modern", "family"],
        "rating": ["low", "medium", "high"],
    }
    rng = np.random.default_rng(2024)
    domains = []
    for name in names:
        informable = {s: list(values[s]) for s in informable_slots}
        entities = []
        for e_idx in range(10):
            ent = {}
            for slot in informable_slots:
                w = rng.permutation([1.0, 2.0, 4.0])
                ent[slot] = values[slot][int(rng.choice(3, p=w / w.sum()))]
            for slot in requestable_slots:
                ent[slot] = f"{name}_{slot}_{e_idx}"
            entities.append(ent)
        domains.append(DomainSchema(name, informable, list(requestable_slots), entities))
    return WorldSchema(domains)


def tiny_schema() -> WorldSchema:
    """One domain, two entities; small enough to enumerate every goal."""
    dom = DomainSchema(
        name="hotel",
        informable={"area": ["north", "south"]},
        requestable=["phone", "address"],
        entities=[
            {"area": "north", "phone": "hotel_phone_0", "address": "hotel_address_0"},
            {"area": "south", "phone": "hotel_phone_1", "address": "hotel_address_1"},
        ],
    )
    return WorldSchema([dom])


# -- goals --------------------------------------------------------------------

# Sampling weights, documented for the statistical coverage check:
# number of active domains ~ {1: 0.3, 2: 0.35, 3: 0.35} (truncated to the
# schema size), domains chosen uniformly without replacement; per active
# domain up to 3 constraints and up to 3 requested slots.
ACTIVE_DOMAIN_WEIGHTS = (0.3, 0.35, 0.35)
CONSTRAINT_COUNT_WEIGHTS = (0.1, 0.25, 0.35, 0.3)  # 0..3 constraints
REQUEST_COUNT_WEIGHTS = (0.0, 0.15, 0.3, 0.55)  # 0..3 requests per domain
BOOKING_PROB = 0.8


@dataclass
class UserGoal:
    constraints: dict[str, dict[str, str]]
    requests: dict[str, list[str]]
    booking: dict[str, bool]

    @property
    def domains(self) -> list[str]:
        return list(self.constraints)

    def total_requests(self) -> int:
        return sum(len(r) for r in self.requests.values())


def _weighted_count(rng: np.random.Generator, weights, limit: int) -> int:
    w = np.array(weights[: limit + 1], dtype=float)
    w /= w.sum()
    return int(rng.choice(len(w), p=w))


def sample_goal(schema: WorldSchema, rng: np.random.Generator) -> UserGoal:
    """Draw a satisfiable goal: constraints are copied from a database entity."""
    for dom in schema.domains:
        if not dom.entities:
            raise WorldError(f"domain {dom.name!r} has an empty database")
    n_dom = len(schema.domains)
    weights = np.array(ACTIVE_DOMAIN_WEIGHTS[:n_dom], dtype=float)
    weights /= weights.sum()
    n_active = int(rng.choice(np.arange(1, len(weights) + 1), p=weights))
    picked = rng.choice(n_dom, size=n_active, replace=False)
    active = [schema.domains[i] for i in sorted(picked)]

    constraints: dict[str, dict[str, str]] = {}
    requests: dict[str, list[str]] = {}
    booking: dict[str, bool] = {}
    for dom in active:
        seed_entity = dom.entities[int(rng.integers(len(dom.entities)))]
        inf_slots = list(dom.informable)
        k_c = _weighted_count(rng, CONSTRAINT_COUNT_WEIGHTS, len(inf_slots))
        chosen_c = sorted(rng.choice(len(inf_slots), size=k_c, replace=False).tolist())
        constraints[dom.name] = {inf_slots[i]: seed_entity[inf_slots[i]] for i in chosen_c}
        req_slots = list(dom.requestable)
        k_r = _weighted_count(rng, REQUEST_COUNT_WEIGHTS, len(req_slots))
        chosen_r = sorted(rng.choice(len(req_slots), size=k_r, replace=False).tolist())
        requests[dom.name] = [req_slots[i] for i in chosen_r]
        booking[dom.name] = bool(rng.random() < BOOKING_PROB)
    if all(len(r) == 0 for r in requests.values()):
        # every goal must want at least one piece of information
        dom = active[0]
        requests[dom.name] = [dom.requestable[int(rng.integers(len(dom.requestable)))]]
    goal = UserGoal(constraints, requests, booking)
    _check_satisfiable(schema, goal)
    return goal


def _check_satisfiable(schema: WorldSchema, goal: UserGoal) -> None:
    for name, cons in goal.constraints.items():
        dom = schema.domain(name)
        if not any(all(ent[s] == v for s, v in cons.items()) for ent in dom.entities):
            raise WorldError(f"goal constraints for {name!r} are unsatisfiable: {cons}")


def enumerate_goals(schema: WorldSchema) -> list[UserGoal]:
    """Every satisfiable single-assignment goal; tractable for tiny schemas."""
    goals = []
    for dom in schema.domains:
        inf_slots = list(dom.informable)
        req_slots = list(dom.requestable)
        constraint_options = []
        for k in range(len(inf_slots) + 1):
            for combo in itertools.combinations(inf_slots, k):
                for values in itertools.product(*(dom.informable[s] for s in combo)):
                    constraint_options.append(dict(zip(combo, values)))
        request_options = [
            list(combo)
            for k in range(1, len(req_slots) + 1)
            for combo in itertools.combinations(req_slots, k)
        ]
        for cons in constraint_options:
            if not any(
                all(ent[s] == v for s, v in cons.items()) for ent in dom.entities
            ):
                continue
            for reqs in request_options:
                for book in (False, True):
                    goals.append(
                        UserGoal({dom.name: dict(cons)}, {dom.name: list(reqs)}, {dom.name: book})
                    )
    return goals


# -- dialog context (system view) ----------------------------------------------


@dataclass
class DomainContext:
    expressed: dict[str, str] = field(default_factory=dict)  # includes dontcare
    pending_requests: list[str] = field(default_factory=list)
    informed: set[str] = field(default_factory=set)
    booking_requested: bool = False
    booked: bool = False
    selected_entity: int | None = None  # index of last offered/booked entity
    active: bool = False


@dataclass
class DialogContext:
    schema: WorldSchema
    domains: dict[str, DomainContext] = field(init=False)
    last_user_acts: list[UserAct] = field(default_factory=list)
    turn: int = 0
    user_said_bye: bool = False
    useful_informs: int = 0
    total_informs: int = 0
    answered: set[tuple[str, str]] = field(default_factory=set)

    def __post_init__(self):
        self.domains = {d.name: DomainContext() for d in self.schema.domains}


def db_matches(schema: WorldSchema, ctx: DialogContext, domain: str) -> list[int]:
    """Entity indices consistent with the constraints expressed so far."""
    dom = schema.domain(domain)
    cons = {
        s: v
        for s, v in ctx.domains[domain].expressed.items()
        if v != DONTCARE and s in dom.informable
    }
    return [
        i
        for i, ent in enumerate(dom.entities)
        if all(ent[s] == v for s, v in cons.items())
    ]


def apply_user_acts(ctx: DialogContext, acts: list[UserAct]) -> None:
    for act in acts:
        if act.act_type == BYE:
            ctx.user_said_bye = True
            continue
        dctx = ctx.domains[act.domain]
        dctx.active = True
        if act.act_type == INFORM:
            dctx.expressed[act.slot] = act.value
        elif act.act_type == REQUEST:
            if act.slot not in dctx.pending_requests:
                dctx.pending_requests.append(act.slot)
        elif act.act_type == BOOK:
            dctx.booking_requested = True
    ctx.last_user_acts = list(acts)


def apply_agent_actions(ctx: DialogContext, actions: set[AtomicAction]) -> None:
    """Update the context with one agent turn.

    Agent bye is inert for episode control (the user simulator decides
    termination, as in interactive corpus evaluators); it simply produces
    no state change.
    """
    schema = ctx.schema
    for action in sorted(actions):
        if action.act_type == BYE:
            continue
        if action.domain not in ctx.domains:
            continue
        dctx = ctx.domains[action.domain]
        if action.act_type == INFORM:
            ctx.total_informs += 1
            if action.slot in dctx.pending_requests:
                ctx.useful_informs += 1
                dctx.pending_requests.remove(action.slot)
                ctx.answered.add((action.domain, action.slot))
            dctx.informed.add(action.slot)
        elif action.act_type in (OFFER, BOOK):
            # a completed booking is binding; later offers/books cannot
            # amend the committed entity
            if dctx.booked:
                continue
            matches = db_matches(schema, ctx, action.domain)
            if matches:
                dctx.selected_entity = matches[0]
            if action.act_type == BOOK:
                dctx.booked = True


# -- state encoding -------------------------------------------------------------


def encode_state(schema: WorldSchema, ctx: DialogContext) -> np.ndarray:
    """Fixed-dimension binary feature vector for the current context.

    Layout per domain (canonical order): expressed flag per slot, pending
    request flag per slot, informed flag per slot, match-count bucket
    one-hot (0 / 1 / 2-3 / >=4), booking requested, booked, active flag,
    last-turn user informs (constraint slots), last-turn user requests
    (request slots), last-turn book flag. Then a user-bye flag and a
    turn-count bucket one-hot (0..4, 5+).
    """
    feats: list[float] = []
    last = ctx.last_user_acts
    for dom in schema.domains:
        dctx = ctx.domains[dom.name]
        slots = dom.all_slots()
        feats.extend(1.0 if s in dctx.expressed else 0.0 for s in slots)
        feats.extend(1.0 if s in dctx.pending_requests else 0.0 for s in slots)
        feats.extend(1.0 if s in dctx.informed else 0.0 for s in slots)
        if dctx.active:
            n = len(db_matches(schema, ctx, dom.name))
            bucket = 0 if n == 0 else 1 if n == 1 else 2 if n <= 3 else 3
            feats.extend(1.0 if bucket == b else 0.0 for b in range(MATCH_BUCKETS))
        else:
            feats.extend(0.0 for _ in range(MATCH_BUCKETS))
        feats.append(1.0 if dctx.booking_requested else 0.0)
        feats.append(1.0 if dctx.booked else 0.0)
        feats.append(1.0 if dctx.active else 0.0)
        feats.extend(
            1.0
            if any(
                a.domain == dom.name and a.act_type == INFORM and a.slot == s
                for a in last
            )
            else 0.0
            for s in dom.informable
        )
        feats.extend(
            1.0
            if any(
                a.domain == dom.name and a.act_type == REQUEST and a.slot == s
                for a in last
            )
            else 0.0
            for s in dom.requestable
        )
        feats.append(
            1.0
            if any(a.domain == dom.name and a.act_type == BOOK for a in last)
            else 0.0
        )
    feats.append(1.0 if ctx.user_said_bye else 0.0)
    bucket = min(ctx.turn, TURN_BUCKETS - 1)
    feats.extend(1.0 if bucket == b else 0.0 for b in range(TURN_BUCKETS))
    return np.array(feats, dtype=np.float64)


# -- expert policy ---------------------------------------------------------------


def _most_discriminative_slot(dom: DomainSchema, matches: list[int], askable: list[str]) -> str:
    """The constraint slot whose values best split the matching entities.

    Asking the highest-entropy slot narrows the database fastest. The
    choice depends on which entities remain, not just on how many, so two
    contexts with identical encoded features can warrant different
    requests; ties fall back to canonical slot order.
    """
    best_slot = askable[0]
    best_score = -1.0
    for slot in askable:
        counts: dict[str, int] = {}
        for idx in matches:
            v = dom.entities[idx][slot]
            counts[v] = counts.get(v, 0) + 1
        total = float(len(matches))
        score = -sum((c / total) * np.log(c / total) for c in counts.values())
        if score > best_score + 1e-12:
            best_score = score
            best_slot = slot
    return best_slot


def expert_respond(schema: WorldSchema, ctx: DialogContext) -> set[AtomicAction]:
    """Deterministic rule policy used as ground truth.

    Per active domain: answer every pending request; while several
    database entities match, request the one missing constraint slot that
    best discriminates among them; offer+book once the booking is
    requested and the match is pinned down (or no constraint slots are
    left to ask); say nooffer when nothing matches. Falls back to
    (re)offering the current match so a turn is never empty, and closes
    with bye after the user does.
    """
    if ctx.user_said_bye:
        return {AtomicAction(GENERAL, BYE)}
    actions: set[AtomicAction] = set()
    for dom in schema.domains:
        dctx = ctx.domains[dom.name]
        if not dctx.active:
            continue
        matches = db_matches(schema, ctx, dom.name)
        if not matches:
            actions.add(AtomicAction(dom.name, NOOFFER))
            continue
        domain_acts: set[AtomicAction] = {
            AtomicAction(dom.name, INFORM, slot) for slot in dctx.pending_requests
        }
        askable = [s for s in dom.informable if s not in dctx.expressed]
        if len(matches) > 1 and askable:
            slot = _most_discriminative_slot(dom, matches, askable)
            domain_acts.add(AtomicAction(dom.name, REQUEST, slot))
        if dctx.booking_requested and not dctx.booked and (len(matches) == 1 or not askable):
            domain_acts.add(AtomicAction(dom.name, OFFER))
            domain_acts.add(AtomicAction(dom.name, BOOK))
        if not domain_acts:
            domain_acts.add(AtomicAction(dom.name, OFFER))
        actions |= domain_acts
    if not actions:
        actions.add(AtomicAction(GENERAL, BYE))
    return actions


# -- agenda-based user ------------------------------------------------------------


MAX_INITIATIVE = 3  # agenda items the user utters per turn


@dataclass
class UserState:
    goal: UserGoal
    agenda: list[UserAct] = field(init=False)
    uttered_requests: set[tuple[str, str]] = field(default_factory=set)
    uttered_book: set[str] = field(default_factory=set)

    def __post_init__(self):
        agenda: list[UserAct] = []
        for name in self.goal.domains:
            for slot in sorted(self.goal.constraints[name]):
                agenda.append(UserAct(name, INFORM, slot, self.goal.constraints[name][slot]))
            for slot in self.goal.requests[name]:
                agenda.append(UserAct(name, REQUEST, slot))
            if self.goal.booking[name]:
                agenda.append(UserAct(name, BOOK))
        self.agenda = agenda


def _needs_met(ustate: UserState, ctx: DialogContext) -> bool:
    goal = ustate.goal
    for name in goal.domains:
        for slot in goal.requests[name]:
            if (name, slot) not in ctx.answered:
                return False
        if goal.booking[name] and not ctx.domains[name].booked:
            return False
    return True


def _refill_agenda(ustate: UserState, ctx: DialogContext) -> None:
    """Re-issue unmet needs (retry behavior when the agent stalls)."""
    goal = ustate.goal
    for name in goal.domains:
        for slot in goal.requests[name]:
            if (name, slot) not in ctx.answered and (name, slot) in ustate.uttered_requests:
                ustate.agenda.append(UserAct(name, REQUEST, slot))
                ustate.uttered_requests.discard((name, slot))
        if goal.booking[name] and not ctx.domains[name].booked and name in ustate.uttered_book:
            ustate.agenda.append(UserAct(name, BOOK))
            ustate.uttered_book.discard(name)


def user_step(
    ustate: UserState, ctx: DialogContext, agent_actions: set[AtomicAction]
) -> tuple[list[UserAct], bool]:
    """One user turn: answer agent requests, then pop agenda items.

    Returns the uttered acts and a terminated flag. The user closes with
    bye once every requested slot is answered and every required booking
    is done.
    """
    acts: list[UserAct] = []
    goal = ustate.goal
    for action in sorted(agent_actions):
        if action.act_type != REQUEST or action.domain not in ctx.domains:
            continue
        value = goal.constraints.get(action.domain, {}).get(action.slot, DONTCARE)
        acts.append(UserAct(action.domain, INFORM, action.slot, value))
        ustate.agenda = [
            a
            for a in ustate.agenda
            if not (a.domain == action.domain and a.act_type == INFORM and a.slot == action.slot)
        ]
    if _needs_met(ustate, ctx) and not ustate.agenda:
        acts.append(UserAct(GENERAL, BYE))
        return acts, True
    if not ustate.agenda:
        _refill_agenda(ustate, ctx)
    budget = MAX_INITIATIVE
    while ustate.agenda and budget > 0:
        act = ustate.agenda.pop(0)
        if act.act_type == REQUEST:
            if (act.domain, act.slot) in ctx.answered:
                continue  # answered proactively while queued
            ustate.uttered_requests.add((act.domain, act.slot))
        elif act.act_type == BOOK:
            if ctx.domains[act.domain].booked:
                continue
            ustate.uttered_book.add(act.domain)
        acts.append(act)
        budget -= 1
    return acts, False


def user_open(ustate: UserState) -> list[UserAct]:
    """The opening user turn (no agent actions to react to yet)."""
    acts: list[UserAct] = []
    budget = MAX_INITIATIVE
    while ustate.agenda and budget > 0:
        act = ustate.agenda.pop(0)
        if act.act_type == REQUEST:
            ustate.uttered_requests.add((act.domain, act.slot))
        elif act.act_type == BOOK:
            ustate.uttered_book.add(act.domain)
        acts.append(act)
        budget -= 1
    return acts


# -- episodes and metrics ----------------------------------------------------------


@dataclass
class EpisodeMetrics:
    turns: int
    match: int
    inform_recall: float
    inform_precision: float
    inform_f1: float
    success: int


def _compute_match(ctx: DialogContext, goal: UserGoal) -> int:
    schema = ctx.schema
    for name in goal.domains:
        if not goal.booking[name]:
            continue
        dctx = ctx.domains[name]
        if dctx.selected_entity is None or not dctx.booked:
            return 0
        ent = schema.domain(name).entities[dctx.selected_entity]
        if any(ent[s] != v for s, v in goal.constraints[name].items()):
            return 0
    return 1


def finish_metrics(ctx: DialogContext, goal: UserGoal, turns: int) -> EpisodeMetrics:
    total_requests = goal.total_requests()
    answered = sum(
        1
        for name in goal.domains
        for slot in goal.requests[name]
        if (name, slot) in ctx.answered
    )
    recall = answered / total_requests if total_requests else 1.0
    precision = ctx.useful_informs / ctx.total_informs if ctx.total_informs else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    match = _compute_match(ctx, goal)
    success = 1 if recall == 1.0 and match == 1 else 0
    return EpisodeMetrics(turns, match, recall, precision, f1, success)


def run_episode(
    policy,
    schema: WorldSchema,
    goal: UserGoal,
    max_turns: int = 20,
    trace: list | None = None,
) -> EpisodeMetrics:
    """Roll one dialog between ``policy`` and the agenda user.

    ``policy`` maps a state vector to a set of AtomicActions (anything with
    an ``act(state) -> set[AtomicAction]`` method or a bare callable).
    """
    act_fn = policy.act if hasattr(policy, "act") else policy
    ctx = DialogContext(schema)
    ustate = UserState(goal)
    user_acts = user_open(ustate)
    apply_user_acts(ctx, user_acts)
    turns = 0
    while turns < max_turns:
        state = encode_state(schema, ctx)
        actions = act_fn(state)
        turns += 1
        if trace is not None:
            trace.append(
                {
                    "turn": turns,
                    "user": [f"{a.domain}-{a.act_type}-{a.slot or 'none'}" for a in user_acts],
                    "agent": sorted(a.label() for a in actions),
                }
            )
        apply_agent_actions(ctx, actions)
        user_acts, terminated = user_step(ustate, ctx, actions)
        apply_user_acts(ctx, user_acts)
        ctx.turn += 1
        if terminated:
            break
    return finish_metrics(ctx, goal, turns)


def run_expert_episode(
    schema: WorldSchema, goal: UserGoal, max_turns: int = 20, collect=None
) -> EpisodeMetrics:
    """Like run_episode but drives the rule expert on the live context.

    When ``collect`` is a list, (state, action set) pairs are appended for
    corpus generation.
    """
    ctx = DialogContext(schema)
    ustate = UserState(goal)
    apply_user_acts(ctx, user_open(ustate))
    turns = 0
    while turns < max_turns:
        state = encode_state(schema, ctx)
        actions = expert_respond(schema, ctx)
        if collect is not None:
            collect.append((state, actions))
        turns += 1
        apply_agent_actions(ctx, actions)
        user_acts, terminated = user_step(ustate, ctx, actions)
        apply_user_acts(ctx, user_acts)
        ctx.turn += 1
        if terminated:
            # one closing expert turn so corpora contain bye examples
            if collect is not None:
                state = encode_state(schema, ctx)
                collect.append((state, expert_respond(schema, ctx)))
                turns += 1
            break
    return finish_metrics(ctx, goal, turns)


# -- aggregation --------------------------------------------------------------------

METRIC_FIELDS = ("turns", "match", "inform_recall", "inform_f1", "success")


def compute_aggregate(episodes: list[EpisodeMetrics]) -> dict[str, tuple[float, float]]:
    """Mean and population standard deviation per metric; Success in percent."""
    if not episodes:
        raise WorldError("compute_aggregate needs at least one episode")
    out: dict[str, tuple[float, float]] = {}
    for name in METRIC_FIELDS:
        values = np.array([getattr(e, name) for e in episodes], dtype=np.float64)
        if name == "success":
            values = values * 100.0
        out[name] = (float(values.mean()), float(values.std()))
    return out


def format_metric(mean_value: float, std_value: float, digits: int = 2) -> str:
    return f"{mean_value:.{digits}f} ± {std_value:.{digits}f}"
