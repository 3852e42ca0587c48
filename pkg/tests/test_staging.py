import threading

import numpy as np
import pytest

import stageflow as sf
from stageflow.errors import (
    MissingConcreteFunction,
    SignatureMismatch,
    StagingError,
    UnencodableArgument,
    VariableCreationError,
)
from stageflow.serial import serialize
from stageflow.staging import infer_trace_key


class TestBasics:
    def test_staged_call_matches_eager(self):
        def select(vector):
            a = sf.constant([[1.0, 0.0]])
            return sf.matmul(a, vector)

        x = sf.constant([[2.0], [-2.0]])
        staged = sf.stage(select)
        np.testing.assert_array_equal(staged(x).numpy(), select(x).numpy())
        np.testing.assert_array_equal(staged(x).numpy(), [[2.0]])

    def test_empty_cache_before_first_call(self):
        pf = sf.stage(lambda x: x)
        assert pf.cache_size == 0
        with pytest.raises(MissingConcreteFunction):
            pf.get_concrete(sf.TraceKey(("anything",)))

    def test_non_tensor_return_rejected(self):
        pf = sf.stage(lambda x: "nope")
        with pytest.raises(StagingError):
            pf(sf.constant(1.0))


class TestTraceCache:
    def test_same_shape_hits_new_shape_misses(self):
        pf = sf.stage(lambda x: sf.reduce_sum(x))
        a = sf.constant(np.zeros((3, 5), dtype=np.float32))
        b = sf.constant(np.ones((3, 5), dtype=np.float32))
        c = sf.constant(np.ones((4, 5), dtype=np.float32))
        pf(a)
        assert pf.cache_size == 1 and pf.trace_count == 1
        pf(b)  # same key: different payload, equal dtype/shape
        assert pf.cache_size == 1 and pf.trace_count == 1
        pf(c)
        assert pf.cache_size == 2 and pf.trace_count == 2

    def test_value_keying_of_plain_arguments(self):
        key_t = infer_trace_key([sf.constant(1.0), True])
        key_f = infer_trace_key([sf.constant(1.0), False])
        assert key_t != key_f

    def test_payload_independent_keys(self):
        a = sf.constant([1.0, 2.0])
        b = sf.constant([9.0, -9.0])
        assert infer_trace_key([a]) == infer_trace_key([b])

    def test_device_scope_in_key(self, accel_runtime):
        x = sf.constant(1.0)
        plain = infer_trace_key([x])
        with sf.device_scope("/job:local/task:0/device:ACCEL:0"):
            scoped = infer_trace_key([x])
        assert plain != scoped

    def test_unencodable_argument(self):
        with pytest.raises(UnencodableArgument):
            infer_trace_key([object()])

    def test_dropout_boolean_specialization(self):
        def lossy_matmul(w, x, training=True):
            outputs = sf.matmul(w, x)
            if training:
                outputs = sf.dropout(outputs, 0.2)
            return outputs

        pf = sf.stage(lossy_matmul)
        w = sf.random_normal((3, 5))
        x = sf.random_normal((5, 1))
        pf(w, x, training=True)
        pf(w, x, training=False)
        assert pf.cache_size == 2
        ops_by_variant = [
            "dropout" in cf.graph.op_counts() for cf in pf.cached_functions()
        ]
        assert sorted(ops_by_variant) == [False, True]

    def test_host_rng_freezes_into_graph(self):
        def add_noise():
            base = sf.eye(5)
            noise = sf.constant(
                np.random.default_rng().standard_normal((5, 5)).astype(np.float32)
            )
            return sf.add(base, noise)

        staged = sf.stage(add_noise)
        first = staged().numpy()
        for _ in range(3):
            np.testing.assert_array_equal(staged().numpy(), first)
        # while the eager function keeps changing
        assert not np.array_equal(add_noise().numpy(), add_noise().numpy())

    def test_concurrent_same_key_traces_once(self):
        pf = sf.stage(lambda x: sf.mul(x, x))
        x = sf.constant(2.0)
        errors = []

        def call():
            try:
                assert float(pf(x)) == 4.0
            except Exception as e:  # pragma: no cover
                errors.append(e)

        threads = [threading.Thread(target=call) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert pf.cache_size == 1 and pf.trace_count == 1


class TestPinnedSignature:
    def test_wildcard_batch_single_function(self):
        pf = sf.stage(
            lambda x: sf.reduce_sum(x, axes=(1,)),
            signature=[(sf.float32, (None, 5))],
        )
        a = pf(sf.constant(np.ones((2, 5), dtype=np.float32)))
        b = pf(sf.constant(np.ones((7, 5), dtype=np.float32)))
        assert a.shape == (2,) and b.shape == (7,)
        assert pf.cache_size == 1 and pf.trace_count == 1

    def test_signature_violation(self):
        pf = sf.stage(lambda x: x, signature=[(sf.float32, (None, 5))])
        with pytest.raises(SignatureMismatch):
            pf(sf.constant(np.ones((2, 4), dtype=np.float32)))
        with pytest.raises(SignatureMismatch):
            pf(sf.constant(np.ones((2, 5), dtype=np.float64)))
        with pytest.raises(SignatureMismatch):
            pf(3.0)


class TestCapture:
    def test_capture_deduplicated(self):
        outside = sf.constant([1.0, 2.0])

        @sf.stage
        def f(x):
            return sf.add(sf.add(x, outside), outside)

        x = sf.constant([0.5, 0.5])
        f(x)
        graph = f.get_concrete(f.trace_key_for(x)).graph
        # one arg placeholder + exactly one capture despite two uses
        assert len(graph.inputs) == 2

    def test_variable_captured_by_reference(self):
        v = sf.Variable([1.0, 1.0])

        @sf.stage
        def read():
            return v.read_value()

        np.testing.assert_array_equal(read().numpy(), [1.0, 1.0])
        v.assign([5.0, 6.0])
        np.testing.assert_array_equal(read().numpy(), [5.0, 6.0])

    def test_mutate_listing(self):
        v = sf.Variable(0.0)

        @sf.stage
        def mutate():
            v.assign_add(1.0)
            return v.read_value()

        mutate()
        assert float(v.read_value()) == 1.0
        v.assign_add(1.0)
        assert float(v.read_value()) == 2.0
        mutate()
        assert float(v.read_value()) == 3.0

    def test_dead_variable(self):
        v = sf.Variable(1.0)

        @sf.stage
        def read():
            return v.read_value()

        read()
        del v
        import gc

        gc.collect()
        with pytest.raises(sf.errors.DeadVariable):
            read()


class TestStateContract:
    def test_lazy_creation_double_traces(self):
        state = {"v": None}

        def f(x):
            if state["v"] is None:
                state["v"] = sf.Variable(10.0)
            return sf.add(x, state["v"].read_value())

        pf = sf.stage(f)
        assert float(pf(sf.constant(1.0))) == 11.0
        assert pf.trace_count == 2  # create-trace, then the recorded trace
        assert float(pf(sf.constant(2.0))) == 12.0
        assert pf.trace_count == 2
        assert len(list(pf.variables_created)) == 1

    def test_creating_every_call_fails(self):
        def f(x):
            v = sf.Variable(1.0)
            return sf.add(x, v.read_value())

        pf = sf.stage(f)
        with pytest.raises(VariableCreationError):
            pf(sf.constant(1.0))

    def test_creation_on_later_trace_fails(self):
        state = {"v": None}

        def f(x):
            if state["v"] is None or x.shape != (2,):
                state["v"] = sf.Variable(np.zeros(x.shape, dtype=np.float32))
            return sf.add(x, state["v"].read_value())

        pf = sf.stage(f)
        pf(sf.constant(np.zeros(2, dtype=np.float32)))
        with pytest.raises(VariableCreationError):
            pf(sf.constant(np.zeros(3, dtype=np.float32)))

    def test_no_creation_single_trace(self):
        pf = sf.stage(lambda x: sf.neg(x))
        pf(sf.constant(1.0))
        assert pf.trace_count == 1


class TestComposition:
    def test_nested_call_node(self):
        inner = sf.stage(lambda a: sf.relu(a), name="inner_relu")

        @sf.stage
        def outer(a, b):
            return inner(sf.matmul(a, b))

        e = sf.eye(3)
        d = sf.constant(np.diag([-1.0, 1.0, 2.0]).astype(np.float32))
        result = outer(e, d)
        np.testing.assert_array_equal(
            result.numpy(), np.diag([0.0, 1.0, 2.0]).astype(np.float32)
        )
        graph = outer.get_concrete(outer.trace_key_for(e, d)).graph
        call_nodes = [n for n in graph.nodes if n.op == "call_function"]
        assert len(call_nodes) == 1
        callee = call_nodes[0].attrs["function"]
        assert callee in graph.library
        assert "relu" in graph.library[callee].op_counts()

    def test_host_loops_unroll(self):
        n = 11

        @sf.stage
        def f(x):
            for _ in range(n):
                x = sf.add(x, x)
            return x

        x = sf.constant(1.0)
        f(x)
        graph = f.get_concrete(f.trace_key_for(x)).graph
        assert graph.op_counts()["add"] == n

    def test_retrace_serializes_identically(self):
        def f(x):
            inner = sf.stage(lambda a: sf.softplus(a), name="sp")
            return sf.add(inner(x), sf.constant(1.0))

        x = sf.constant([1.0, 2.0])
        pf1, pf2 = sf.stage(f), sf.stage(f)
        pf1(x)
        pf2(x)
        g1 = pf1.get_concrete(pf1.trace_key_for(x)).graph
        g2 = pf2.get_concrete(pf2.trace_key_for(x)).graph
        assert serialize(g1) == serialize(g2)


class TestControlFlow:
    def test_cond_eager_and_staged(self):
        def run(x):
            return sf.cond(
                sf.greater(x, 0.0),
                lambda v: sf.mul(v, 2.0),
                lambda v: sf.neg(v),
                [x],
            )

        assert float(run(sf.constant(3.0))) == 6.0
        assert float(run(sf.constant(-3.0))) == 3.0
        staged = sf.stage(run)
        assert float(staged(sf.constant(3.0))) == 6.0
        assert float(staged(sf.constant(-3.0))) == 3.0

    def test_while_loop_eager_and_staged(self):
        def sum_to(n):
            i, acc = n, sf.constant(0, dtype=sf.int32)
            i, acc = sf.while_loop(
                lambda i, acc: sf.greater(i, 0),
                lambda i, acc: (sf.sub(i, 1), sf.add(acc, i)),
                [i, acc],
            )
            return acc

        n = sf.constant(6, dtype=sf.int32)
        assert int(sum_to(n).item()) == 21
        staged = sf.stage(sum_to)
        assert int(staged(n).item()) == 21
        graph = staged.get_concrete(staged.trace_key_for(n)).graph
        assert "while_loop" in graph.op_counts()
