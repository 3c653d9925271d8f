import numpy as np
import pytest

from banditmatch import dialogworld as dw


@pytest.fixture(scope="module")
def schema():
    return dw.default_schema()


@pytest.fixture(scope="module")
def tiny():
    return dw.tiny_schema()


class TestSchema:
    def test_vocab_is_bijective_and_stable(self, schema):
        actions = schema.actions
        assert len(set(actions)) == len(actions) == schema.num_actions
        for i, action in enumerate(actions):
            assert schema.action_index(action) == i
        again = dw.default_schema()
        assert again.actions == actions

    def test_state_dim_matches_encoder(self, schema):
        ctx = dw.DialogContext(schema)
        assert dw.encode_state(schema, ctx).shape == (schema.state_dim,)

    def test_entities_cover_all_slots(self, schema):
        for dom in schema.domains:
            for ent in dom.entities:
                assert set(dom.all_slots()) <= set(ent)

    def test_save_load_round_trip(self, schema, tmp_path):
        path = tmp_path / "world.json"
        schema.save(path)
        loaded = dw.WorldSchema.load(path)
        assert loaded.to_dict() == schema.to_dict()
        assert loaded.actions == schema.actions

    def test_version_mismatch_rejected(self, schema, tmp_path):
        import json

        payload = schema.to_dict()
        payload["schema_version"] = "v9"
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(payload))
        with pytest.raises(dw.WorldError):
            dw.WorldSchema.load(path)

    def test_missing_entity_slot_rejected(self):
        dom = dw.DomainSchema(
            name="hotel",
            informable={"area": ["north"]},
            requestable=["phone"],
            entities=[{"area": "north"}],  # phone missing
        )
        with pytest.raises(dw.WorldError):
            dw.WorldSchema([dom])


class TestGoals:
    def test_same_seed_identical(self, schema):
        a = dw.sample_goal(schema, np.random.default_rng(7))
        b = dw.sample_goal(schema, np.random.default_rng(7))
        assert a == b

    def test_single_entity_schema_constraints_consistent(self):
        dom = dw.DomainSchema(
            name="hotel",
            informable={"area": ["north", "south"], "price": ["cheap", "dear"]},
            requestable=["phone"],
            entities=[{"area": "north", "price": "cheap", "phone": "p0"}],
        )
        schema = dw.WorldSchema([dom])
        rng = np.random.default_rng(0)
        for _ in range(50):
            goal = dw.sample_goal(schema, rng)
            ent = dom.entities[0]
            for slot, value in goal.constraints["hotel"].items():
                assert ent[slot] == value

    def test_domain_coverage_over_many_samples(self, schema):
        rng = np.random.default_rng(1)
        counts = {d.name: 0 for d in schema.domains}
        n = 10_000
        for _ in range(n):
            goal = dw.sample_goal(schema, rng)
            for name in goal.domains:
                counts[name] += 1
        for name, count in counts.items():
            assert count / n >= 0.01, name

    def test_goals_always_want_something(self, schema):
        rng = np.random.default_rng(2)
        for _ in range(300):
            assert dw.sample_goal(schema, rng).total_requests() >= 1

    def test_empty_database_rejected(self):
        dom = dw.DomainSchema("hotel", {"area": ["north"]}, ["phone"], [])
        schema = dw.WorldSchema([dom])
        with pytest.raises(dw.WorldError):
            dw.sample_goal(schema, np.random.default_rng(0))


class TestEncoder:
    def test_fresh_context_all_zero_except_turn_bucket(self, schema):
        vec = dw.encode_state(schema, dw.DialogContext(schema))
        bucket_start = schema.state_dim - dw.TURN_BUCKETS
        assert vec[bucket_start] == 1.0
        rest = np.delete(vec, bucket_start)
        assert not rest.any()

    def test_same_context_same_vector(self, schema):
        ctx = dw.DialogContext(schema)
        dw.apply_user_acts(ctx, [dw.UserAct("hotel", dw.INFORM, "area", "north")])
        assert np.array_equal(dw.encode_state(schema, ctx), dw.encode_state(schema, ctx))

    def test_constraint_flag_set_exactly(self, schema):
        ctx = dw.DialogContext(schema)
        dw.apply_user_acts(ctx, [dw.UserAct("hotel", dw.INFORM, "kind", "modern")])
        vec = dw.encode_state(schema, ctx)
        fresh = dw.encode_state(schema, dw.DialogContext(schema))
        dom = schema.domain("hotel")
        slots = dom.all_slots()
        # constraint-expressed flags are the first block of the first domain
        block = vec[: len(slots)]
        expected = [1.0 if s == "kind" else 0.0 for s in slots]
        assert block.tolist() == expected
        # nothing outside the hotel feature block plus the last-act flags moved
        assert vec.shape == fresh.shape

    def test_binary_valued(self, schema):
        rng = np.random.default_rng(3)
        goal = dw.sample_goal(schema, rng)
        collected = []
        dw.run_expert_episode(schema, goal, collect=collected)
        for state, _ in collected:
            assert set(np.unique(state)) <= {0.0, 1.0}


class TestExpert:
    def test_pending_requests_answered_with_unique_match(self, schema):
        ctx = dw.DialogContext(schema)
        dom = schema.domain("hotel")
        ent = dom.entities[0]
        acts = [
            dw.UserAct("hotel", dw.INFORM, s, ent[s]) for s in dom.informable
        ] + [
            dw.UserAct("hotel", dw.REQUEST, "phone"),
            dw.UserAct("hotel", dw.REQUEST, "address"),
        ]
        dw.apply_user_acts(ctx, acts)
        if len(dw.db_matches(schema, ctx, "hotel")) == 1:
            actions = dw.expert_respond(schema, ctx)
            informs = {a for a in actions if a.act_type == dw.INFORM}
            assert informs == {
                dw.AtomicAction("hotel", dw.INFORM, "phone"),
                dw.AtomicAction("hotel", dw.INFORM, "address"),
            }

    def test_no_match_yields_nooffer(self, schema):
        ctx = dw.DialogContext(schema)
        # contradictory constraints: pick values never co-occurring
        dom = schema.domain("hotel")
        target = None
        for area in dom.informable["area"]:
            for price in dom.informable["price"]:
                if not any(e["area"] == area and e["price"] == price for e in dom.entities):
                    target = (area, price)
        assert target is not None, "schema has every area/price pair; pick another"
        dw.apply_user_acts(
            ctx,
            [
                dw.UserAct("hotel", dw.INFORM, "area", target[0]),
                dw.UserAct("hotel", dw.INFORM, "price", target[1]),
            ],
        )
        assert dw.expert_respond(schema, ctx) == {dw.AtomicAction("hotel", dw.NOOFFER)}

    def test_many_matches_one_request(self, schema):
        ctx = dw.DialogContext(schema)
        dw.apply_user_acts(ctx, [dw.UserAct("hotel", dw.REQUEST, "phone")])
        # answer the request first so only narrowing remains
        actions = dw.expert_respond(schema, ctx)
        requests = [a for a in actions if a.act_type == dw.REQUEST]
        assert len(requests) == 1

    def test_discriminative_slot_prefers_splitting_values(self):
        dom = dw.DomainSchema(
            name="hotel",
            informable={"area": ["n", "s"], "price": ["c", "d"]},
            requestable=["phone"],
            entities=[
                {"area": "n", "price": "c", "phone": "p0"},
                {"area": "n", "price": "d", "phone": "p1"},
            ],
        )
        # area is constant across entities, price splits them
        assert dw._most_discriminative_slot(dom, [0, 1], ["area", "price"]) == "price"

    def test_bye_after_user_bye(self, schema):
        ctx = dw.DialogContext(schema)
        dw.apply_user_acts(ctx, [dw.UserAct(dw.GENERAL, dw.BYE)])
        assert dw.expert_respond(schema, ctx) == {dw.AtomicAction(dw.GENERAL, dw.BYE)}

    def test_deterministic_function_of_context(self, schema):
        rng = np.random.default_rng(4)
        goal = dw.sample_goal(schema, rng)
        a, b = [], []
        dw.run_expert_episode(schema, goal, collect=a)
        dw.run_expert_episode(schema, goal, collect=b)
        assert len(a) == len(b)
        for (sa, aa), (sb, ab) in zip(a, b):
            assert np.array_equal(sa, sb) and aa == ab


class TestUser:
    def test_agent_request_answered_next_turn(self, schema):
        goal = dw.UserGoal(
            constraints={"hotel": {"area": "north"}},
            requests={"hotel": ["phone"]},
            booking={"hotel": False},
        )
        ctx = dw.DialogContext(schema)
        ustate = dw.UserState(goal)
        dw.apply_user_acts(ctx, dw.user_open(ustate))
        acts, terminated = dw.user_step(
            ustate, ctx, {dw.AtomicAction("hotel", dw.REQUEST, "price")}
        )
        informs = [a for a in acts if a.act_type == dw.INFORM and a.slot == "price"]
        assert len(informs) == 1
        assert informs[0].value == dw.DONTCARE  # not in the goal constraints

    def test_terminates_when_needs_met(self, schema):
        goal = dw.UserGoal(
            constraints={"hotel": {}},
            requests={"hotel": ["phone"]},
            booking={"hotel": False},
        )
        ctx = dw.DialogContext(schema)
        ustate = dw.UserState(goal)
        dw.apply_user_acts(ctx, dw.user_open(ustate))
        dw.apply_agent_actions(ctx, {dw.AtomicAction("hotel", dw.INFORM, "phone")})
        acts, terminated = dw.user_step(ustate, ctx, set())
        assert terminated and any(a.act_type == dw.BYE for a in acts)

    def test_empty_agent_turn_triggers_retry(self, schema):
        goal = dw.UserGoal(
            constraints={"hotel": {}},
            requests={"hotel": ["phone"]},
            booking={"hotel": False},
        )
        ctx = dw.DialogContext(schema)
        ustate = dw.UserState(goal)
        dw.apply_user_acts(ctx, dw.user_open(ustate))
        # agent does nothing twice; the user re-issues the pending request
        acts1, t1 = dw.user_step(ustate, ctx, set())
        dw.apply_user_acts(ctx, acts1)
        acts2, t2 = dw.user_step(ustate, ctx, set())
        assert not t1 and not t2
        assert any(a.act_type == dw.REQUEST and a.slot == "phone" for a in acts1 + acts2)


class TestEpisodes:
    def test_expert_succeeds_on_sampled_goals(self, schema):
        rng = np.random.default_rng(5)
        for _ in range(100):
            metrics = dw.run_expert_episode(schema, dw.sample_goal(schema, rng))
            assert metrics.success == 1 and metrics.inform_f1 == 1.0

    def test_bye_only_agent_fails(self, schema):
        rng = np.random.default_rng(6)
        goal = dw.sample_goal(schema, rng)
        metrics = dw.run_episode(
            lambda state: {dw.AtomicAction(dw.GENERAL, dw.BYE)}, schema, goal
        )
        assert metrics.success == 0 and metrics.inform_recall == 0.0

    def test_metric_arithmetic(self, schema):
        # 3 informs total, 2 requested and answered: recall 1, precision 2/3
        goal = dw.UserGoal(
            constraints={"hotel": {}},
            requests={"hotel": ["phone", "address"]},
            booking={"hotel": False},
        )

        def agent(state):
            return {
                dw.AtomicAction("hotel", dw.INFORM, "phone"),
                dw.AtomicAction("hotel", dw.INFORM, "address"),
                dw.AtomicAction("hotel", dw.INFORM, "postcode"),
            }

        metrics = dw.run_episode(agent, schema, goal)
        assert metrics.inform_recall == 1.0
        assert abs(metrics.inform_precision - 2.0 / 3.0) < 1e-12
        assert abs(metrics.inform_f1 - 0.8) < 1e-12

    def test_turn_cap(self, schema):
        rng = np.random.default_rng(8)
        goal = dw.sample_goal(schema, rng)
        metrics = dw.run_episode(lambda s: set(), schema, goal, max_turns=5)
        assert metrics.turns <= 5 and metrics.success == 0

    def test_success_requires_recall_and_match(self, schema):
        rng = np.random.default_rng(9)
        for _ in range(50):
            m = dw.run_expert_episode(schema, dw.sample_goal(schema, rng))
            assert m.success == (1 if m.inform_recall == 1.0 and m.match == 1 else 0)

    def test_trace_records_turns(self, schema):
        rng = np.random.default_rng(10)
        goal = dw.sample_goal(schema, rng)
        trace = []
        dw.run_episode(
            lambda state: {dw.AtomicAction(dw.GENERAL, dw.BYE)},
            schema, goal, max_turns=3, trace=trace,
        )
        assert len(trace) == 3 and all("agent" in row and "user" in row for row in trace)


class TestExpertOracleExhaustive:
    def test_tiny_schema_all_goals_perfect(self, tiny):
        goals = dw.enumerate_goals(tiny)
        assert len(goals) >= 12
        for goal in goals:
            metrics = dw.run_expert_episode(tiny, goal)
            assert metrics.success == 1, goal
            assert metrics.inform_f1 == 1.0, goal
            assert metrics.match == 1, goal


class TestAggregate:
    def test_single_episode_zero_std(self):
        m = dw.EpisodeMetrics(5, 1, 1.0, 1.0, 1.0, 1)
        agg = dw.compute_aggregate([m])
        for mean_value, std_value in agg.values():
            assert std_value == 0.0

    def test_success_mean_and_population_std(self):
        episodes = [
            dw.EpisodeMetrics(5, 1, 1.0, 1.0, 1.0, 1),
            dw.EpisodeMetrics(7, 0, 0.5, 0.5, 0.5, 0),
        ]
        agg = dw.compute_aggregate(episodes)
        assert agg["success"] == (50.0, 50.0)
        assert agg["turns"] == (6.0, 1.0)

    def test_empty_rejected(self):
        with pytest.raises(dw.WorldError):
            dw.compute_aggregate([])

    def test_report_format(self):
        import re

        assert re.fullmatch(r"\d+\.\d+ ± \d+\.\d+", dw.format_metric(76.7, 2.83))
        assert dw.format_metric(76.7, 2.83, digits=1) == "76.7 ± 2.8"
