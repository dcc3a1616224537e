import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dlma.errors import EmptyResponse, GatewayError, TranscriptExhausted, TransportError
from dlma.gateway import (
    ChatRequest,
    LiveEndpoint,
    Transcript,
    count_tokens,
    transcript_from_journal,
    write_transcript,
)
from dlma.journal import Event, Journal, canonical_lines, usage_totals

from conftest import scripted_gateway


def req(tag, text="hello", **kw):
    return ChatRequest(tag, (("user", text),), **kw)


def test_fifo_replay_single_entry(journal):
    gw = scripted_gateway(journal, [("t", "scripted answer")])
    resp = gw.complete(req("t"))
    assert resp.text == "scripted answer"


def test_fifo_ordering_two_entries(journal):
    gw = scripted_gateway(journal, [("t", "first"), ("t", "second")])
    assert gw.complete(req("t")).text == "first"
    assert gw.complete(req("t")).text == "second"


def test_scripted_token_counts(journal):
    # Whitespace tokenizer oracle computed directly on the fixture string.
    fixture = "alpha beta gamma"
    expected = len(fixture.split())
    gw = scripted_gateway(journal, [("t", fixture)])
    resp = gw.complete(req("t", text="one two"))
    assert resp.completion_tokens == expected == 3
    assert resp.prompt_tokens == len("one two".split())


def test_exhausted_tag_raises_never_recycles(journal):
    gw = scripted_gateway(journal, [("t", "only")])
    gw.complete(req("t"))
    with pytest.raises(TranscriptExhausted):
        gw.complete(req("t"))


def test_unknown_tag_raises(journal):
    gw = scripted_gateway(journal, [("t", "only")])
    with pytest.raises(TranscriptExhausted):
        gw.complete(req("other"))


def test_empty_response_text_is_error(journal):
    gw = scripted_gateway(journal, [("t", "   ")])
    with pytest.raises(EmptyResponse):
        gw.complete(req("t"))


@pytest.mark.parametrize("bad", [
    dict(tag=""),
    dict(tag="t", temperature=float("nan")),
    dict(tag="t", temperature=2.5),
    dict(tag="t", max_output_tokens=0),
])
def test_request_invariants(journal, bad):
    kwargs = dict(tag="t", temperature=0.3, max_output_tokens=10)
    kwargs.update(bad)
    r = ChatRequest(kwargs["tag"], (("user", "x"),),
                    kwargs["temperature"], kwargs["max_output_tokens"])
    with pytest.raises(GatewayError):
        scripted_gateway(journal, [("t", "y")]).complete(r)


def test_empty_messages_rejected(journal):
    with pytest.raises(GatewayError):
        scripted_gateway(journal, [("t", "y")]).complete(ChatRequest("t", ()))


def _call_event(seq, prompt_tokens, completion_tokens, ts=None):
    return Event(seq, "provider.call",
                 {"tag": "x", "prompt_tokens": prompt_tokens,
                  "completion_tokens": completion_tokens, "text": "y",
                  "messages": []},
                 {"ts": ts} if ts is not None else {}, "")


def test_usage_totals_sums_tokens():
    events = [_call_event(1, 100, 50), _call_event(2, 200, 25)]
    total, _ = usage_totals(events)
    assert total == 375


def test_usage_totals_empty_journal():
    assert usage_totals([]) == (0, 0.0)


def test_usage_totals_wall_time_from_run_events():
    events = [
        Event(1, "run.start", {}, {"ts": 100.0}, ""),
        _call_event(2, 1, 1, ts=200.0),
        Event(3, "run.end", {}, {"ts": 1658.0}, ""),
    ]
    _, wall = usage_totals(events)
    assert wall == pytest.approx(1558.0)


def test_usage_totals_malformed_entry():
    from dlma.errors import JournalCorrupt

    bad = Event(1, "provider.call", {"tag": "x"}, {}, "")
    with pytest.raises(JournalCorrupt):
        usage_totals([bad])


@given(st.lists(st.tuples(st.integers(0, 10_000), st.integers(0, 10_000)),
                max_size=20),
       st.lists(st.tuples(st.integers(0, 10_000), st.integers(0, 10_000)),
                max_size=20))
def test_usage_totals_additive_under_concatenation(chunk_a, chunk_b):
    ev_a = [_call_event(i + 1, p, c) for i, (p, c) in enumerate(chunk_a)]
    ev_b = [_call_event(i + 1, p, c) for i, (p, c) in enumerate(chunk_b)]
    total_a, _ = usage_totals(ev_a)
    total_b, _ = usage_totals(ev_b)
    total_ab, _ = usage_totals(ev_a + ev_b)
    assert total_ab == total_a + total_b


def test_count_tokens_whitespace():
    assert count_tokens("") == 0
    assert count_tokens("a  b\tc\nd") == 4


def test_transcript_round_trip(tmp_path):
    entries = [("a", "first\nwith newline"), ("b", "second"), ("a", "third")]
    path = tmp_path / "t.jsonl"
    write_transcript(entries, path)
    t = Transcript.from_path(path)
    assert t.pop("a") == "first\nwith newline"
    assert t.pop("b") == "second"
    assert t.pop("a") == "third"


def test_transcript_from_journal_preserves_order(tmp_path):
    journal = Journal.create(tmp_path / "j.jsonl")
    gw = scripted_gateway(journal, [("a", "one"), ("b", "two")])
    gw.complete(req("a"))
    gw.complete(req("b"))
    assert transcript_from_journal(journal.events) == [("a", "one"), ("b", "two")]
    journal.close()


def test_two_identical_scripted_runs_byte_identical(tmp_path):
    entries = [("a", "one"), ("b", "two"), ("a", "three")]
    paths = []
    for name in ("j1.jsonl", "j2.jsonl"):
        journal = Journal.create(tmp_path / name)
        gw = scripted_gateway(journal, entries)
        gw.complete(req("a"))
        gw.complete(req("b"))
        gw.complete(req("a"))
        journal.close()
        paths.append(tmp_path / name)
    assert canonical_lines(paths[0]) == canonical_lines(paths[1])


# -- live transport -----------------------------------------------------------


class FakeResponse:
    def __init__(self, payload, status_code=200):
        self._payload = payload
        self.status_code = status_code

    def json(self):
        return self._payload


def _ok_payload(text="live answer"):
    return {"choices": [{"message": {"content": text}}],
            "usage": {"prompt_tokens": 11, "completion_tokens": 7}}


def test_live_mode_success(journal):
    calls = []

    def post(url, json=None, headers=None, timeout=None):
        calls.append(json)
        return FakeResponse(_ok_payload())

    live = LiveEndpoint("http://x/v1/chat", "m", post=post, sleep=lambda s: None)
    from dlma.gateway import Gateway

    gw = Gateway(journal, live=live)
    resp = gw.complete(req("t", text="ping"))
    assert resp.text == "live answer"
    assert resp.prompt_tokens == 11 and resp.completion_tokens == 7
    assert calls[0]["messages"] == [{"role": "user", "content": "ping"}]


def test_live_mode_retries_with_backoff(journal):
    attempts = []
    sleeps = []

    def post(url, **kw):
        attempts.append(1)
        if len(attempts) < 3:
            raise ConnectionError("boom")
        return FakeResponse(_ok_payload())

    live = LiveEndpoint("http://x", "m", post=post, sleep=sleeps.append)
    from dlma.gateway import Gateway

    gw = Gateway(journal, live=live)
    assert gw.complete(req("t")).text == "live answer"
    assert len(attempts) == 3
    assert sleeps == [1.0, 2.0]


def test_live_mode_fails_after_max_retries(journal):
    def post(url, **kw):
        raise ConnectionError("down")

    live = LiveEndpoint("http://x", "m", max_retries=3, post=post,
                        sleep=lambda s: None)
    from dlma.gateway import Gateway

    gw = Gateway(journal, live=live)
    with pytest.raises(TransportError):
        gw.complete(req("t"))


def test_server_errors_are_retried(journal):
    responses = [FakeResponse({}, status_code=503), FakeResponse(_ok_payload())]

    def post(url, **kw):
        return responses.pop(0)

    live = LiveEndpoint("http://x", "m", post=post, sleep=lambda s: None)
    from dlma.gateway import Gateway

    gw = Gateway(journal, live=live)
    assert gw.complete(req("t")).text == "live answer"


def test_gateway_needs_exactly_one_mode(journal):
    from dlma.errors import ConfigError
    from dlma.gateway import Gateway

    with pytest.raises(ConfigError):
        Gateway(journal)
    with pytest.raises(ConfigError):
        Gateway(journal, transcript=Transcript([]), responder=lambda t, m: "x")
