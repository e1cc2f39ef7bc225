import io
import json
import math

import pytest

from conftest import build_trace
from memtrace.errors import (
    BadDecodeMode,
    EntropyOutOfRange,
    LengthMismatch,
    ParseError,
    TokenOutOfRange,
)
from memtrace.traces import (
    GenerationTrace,
    ModelMeta,
    TraceSet,
    read_trace_stream,
    trace_to_record,
    validate_trace,
    write_traces,
)


def test_minimal_wellformed_trace():
    meta = ModelMeta(label="70m", vocab_size=50304, hidden_size=512)
    trace = build_trace(
        meta=meta,
        context=list(range(32)),
        truth=list(range(100, 116)),
        generated=list(range(100, 116)),
        entropy=[0.1] * 16,
    )
    assert trace.context_len == 32
    assert trace.continuation_len == 16
    assert trace.step_embedding is None


def test_continuation_length_mismatch():
    with pytest.raises(LengthMismatch):
        build_trace(truth=[1] * 16, generated=[1] * 15, entropy=[0.0] * 16)


def test_token_at_vocab_boundary_rejected():
    meta = ModelMeta(label="m", vocab_size=100, hidden_size=1)
    with pytest.raises(TokenOutOfRange):
        build_trace(meta=meta, context=[100], truth=[1], generated=[1], entropy=[0.0])
    # vocab_size - 1 is the last legal id
    build_trace(meta=meta, context=[99], truth=[1], generated=[1], entropy=[0.0])


def test_entropy_bounds():
    meta = ModelMeta(label="m", vocab_size=100, hidden_size=1)
    cap = math.log(100)
    build_trace(meta=meta, context=[0], truth=[1], generated=[1], entropy=[cap])
    with pytest.raises(EntropyOutOfRange):
        build_trace(meta=meta, context=[0], truth=[1], generated=[1], entropy=[cap + 1e-6])
    with pytest.raises(EntropyOutOfRange):
        build_trace(meta=meta, context=[0], truth=[1], generated=[1], entropy=[-1e-3])


def test_decode_mode_restricted():
    record = trace_to_record(build_trace())
    record["decode_mode"] = "sampled"
    with pytest.raises(BadDecodeMode):
        validate_trace(record)


def test_embedding_shape_checked():
    meta = ModelMeta(label="m", vocab_size=10, hidden_size=3)
    emb = [(0.0, 1.0, 2.0), (3.0, 4.0, 5.0)]
    trace = build_trace(meta=meta, context=[1], truth=[2, 3], generated=[2, 3],
                        entropy=[0.0, 0.0], embedding=emb)
    assert trace.step_embedding == ((0.0, 1.0, 2.0), (3.0, 4.0, 5.0))
    with pytest.raises(LengthMismatch):
        build_trace(meta=meta, context=[1], truth=[2, 3], generated=[2, 3],
                    entropy=[0.0, 0.0], embedding=[(0.0, 1.0), (2.0, 3.0)])
    with pytest.raises(LengthMismatch):
        build_trace(meta=meta, context=[1], truth=[2, 3], generated=[2, 3],
                    entropy=[0.0, 0.0], embedding=[(0.0, 1.0, 2.0)])


def test_context_entropy_validated():
    trace = build_trace(context=[1, 2], context_entropy=[0.1, 0.2])
    assert trace.context_entropy == (0.1, 0.2)
    with pytest.raises(LengthMismatch):
        build_trace(context=[1, 2], context_entropy=[0.1])


def test_round_trip_exact():
    emb = [[0.12345678901234567, -1.5e-9], [math.pi, math.e]]
    trace = build_trace(
        meta=ModelMeta(label="x", vocab_size=50, hidden_size=2),
        context=[1, 2, 3],
        truth=[4, 5],
        generated=[4, 9],
        entropy=[1.2345678912345, 0.0],
        embedding=emb,
    )
    buf = io.StringIO()
    write_traces(buf, [trace])
    buf.seek(0)
    (back,) = list(read_trace_stream(buf))
    assert back == trace
    for vec, orig in zip(back.step_embedding, emb):
        for a, b in zip(vec, orig):
            assert abs(a - b) <= 1e-9


def test_stream_order_and_line_numbers(tmp_path):
    traces = [build_trace(sequence_id=f"s{i}", corpus_index=i) for i in range(3)]
    path = tmp_path / "traces.jsonl"
    with open(path, "w") as fp:
        write_traces(fp, traces)
    back = list(read_trace_stream(str(path)))
    assert [t.sequence_id for t in back] == ["s0", "s1", "s2"]

    # malformed middle line is reported with its line number
    lines = path.read_text().splitlines()
    lines[1] = "{not json"
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as exc:
        list(read_trace_stream(str(bad)))
    assert exc.value.line_no == 2

    # validation failures carry the line number too
    rec = trace_to_record(build_trace())
    rec["generated_continuation"] = rec["generated_continuation"][:-1]
    bad2 = tmp_path / "bad2.jsonl"
    bad2.write_text(json.dumps(trace_to_record(traces[0])) + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(LengthMismatch) as exc2:
        list(read_trace_stream(str(bad2)))
    assert exc2.value.line_no == 2


def test_empty_stream():
    assert list(read_trace_stream(io.StringIO(""))) == []


def test_concatenated_files_read_as_one(tmp_path):
    a = [build_trace(sequence_id="a", corpus_index=1)]
    b = [build_trace(sequence_id="b", corpus_index=2)]
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p, traces in ((pa, a), (pb, b)):
        with open(p, "w") as fp:
            write_traces(fp, traces)
    combined = tmp_path / "all.jsonl"
    combined.write_bytes(pa.read_bytes() + pb.read_bytes())
    assert [t.sequence_id for t in read_trace_stream(str(combined))] == ["a", "b"]


def test_missing_field_is_parse_error():
    rec = trace_to_record(build_trace())
    del rec["step_entropy"]
    with pytest.raises(ParseError):
        validate_trace(rec)


def test_trace_set_checks_shared_lengths_and_ids():
    t1 = build_trace(sequence_id="a")
    t2 = build_trace(sequence_id="b")
    ts = TraceSet((t1, t2))
    assert len(ts) == 2 and ts.context_len == 3

    with pytest.raises(ParseError):
        TraceSet((t1, build_trace(sequence_id="a", corpus_index=5)))
    with pytest.raises(LengthMismatch):
        TraceSet((t1, build_trace(sequence_id="c", context=[1, 2, 3, 4])))


def test_traces_are_immutable():
    trace = build_trace()
    with pytest.raises(AttributeError):
        trace.sequence_id = "other"
    assert isinstance(trace, GenerationTrace)
