import http.server
import threading
from concurrent.futures import ThreadPoolExecutor

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oga.llm import (BackendConfig, LlmGateway, LlmRequest, ParseError,
                     PromptError, TransportError, mock_response, parse_labels,
                     render_prompt)


def mock_gateway(**kwargs) -> LlmGateway:
    return LlmGateway(BackendConfig(mode="mock", **kwargs))


class TestPrompts:
    def test_fuse_prompt_carries_format_line(self):
        prompt = render_prompt(LlmRequest("fuse", labels=("a", "b")))
        assert "each enclosed in parentheses" in prompt

    def test_annotate_prompt_includes_all_neighbor_texts(self):
        neighbors = ("first neighbor", "second neighbor", "third neighbor")
        prompt = render_prompt(LlmRequest("annotate", node_text="the node",
                                          neighbor_texts=neighbors))
        assert "the node" in prompt
        for text in neighbors:
            assert text in prompt

    def test_rendering_is_deterministic(self):
        req = LlmRequest("distill", labels=("x", "y", "x"))
        assert render_prompt(req) == render_prompt(req)

    def test_empty_payloads_rejected(self):
        with pytest.raises(PromptError):
            render_prompt(LlmRequest("annotate", node_text=""))
        with pytest.raises(PromptError):
            render_prompt(LlmRequest("distill", labels=()))
        with pytest.raises(PromptError):
            render_prompt(LlmRequest("fuse", labels=("only",)))


class TestParse:
    def test_two_labels_normalized(self):
        assert parse_labels("(Rule Learning), (Neural Networks)") == \
            ["rule_learning", "neural_networks"]

    def test_whitespace_tolerance(self):
        assert parse_labels(" ( a ) ") == ["a"]

    def test_no_parentheses_is_parse_error(self):
        with pytest.raises(ParseError, match="no labels here"):
            parse_labels("no labels here")

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.text(alphabet="abcdefgh_ ", min_size=1, max_size=10)
                    .filter(lambda s: s.strip()), min_size=1, max_size=5))
    def test_render_echo_round_trip(self, labels):
        response = ", ".join(f"({lab})" for lab in labels)
        expected = ["_".join(lab.strip().lower().split()) for lab in labels]
        assert parse_labels(response) == expected


class TestMockRules:
    def test_annotate_top_two_tokens(self):
        # rule: alphabetic tokens len >= 4, stopwords out, rank by
        # (frequency desc, lexicographic asc), join top two with _
        req = LlmRequest("annotate",
                         node_text="neural network training dynamics for neural models")
        assert mock_response(req) == "(neural_dynamics)"

    def test_annotate_frequency_beats_order(self):
        req = LlmRequest("annotate", node_text="zebra apple zebra apple zebra")
        assert mock_response(req) == "(zebra_apple)"

    def test_annotate_skips_stopwords_and_short_tokens(self):
        # "the", "and", "all", "those" are stopwords; "cat" is too short
        req = LlmRequest("annotate", node_text="the cat and all those wavelets")
        assert mock_response(req) == "(wavelets)"

    def test_distill_majority(self):
        gw = mock_gateway()
        assert gw.distill(["a", "a", "b"]) == "a"

    def test_distill_lexicographic_tie(self):
        assert mock_gateway().distill(["b", "a"]) == "a"

    def test_distill_single_input(self):
        assert mock_gateway().distill(["only_one"]) == "only_one"

    def test_fuse_shorter_label(self):
        assert mock_gateway().fuse("longer_label", "tiny") == "tiny"

    def test_fuse_lexicographic_tie(self):
        assert mock_gateway().fuse("bb", "aa") == "aa"


class TestGatewayDispatch:
    def test_cache_hit_does_not_count(self):
        gw = mock_gateway()
        first = gw.annotate("graph community detection for graph community work", [])
        second = gw.annotate("graph community detection for graph community work", [])
        assert first == second
        assert gw.counter.total == 1

    def test_mock_distill_counts_once(self):
        gw = mock_gateway()
        assert gw.distill(["x", "x", "y"]) == "x"
        assert gw.counter.distill == 1
        assert gw.counter.total == 1

    def test_disk_cache_round_trip(self, tmp_path):
        gw1 = mock_gateway(cache_dir=str(tmp_path))
        label = gw1.annotate("persistent caching of prompts for caching tests", [])
        gw2 = mock_gateway(cache_dir=str(tmp_path))
        assert gw2.annotate("persistent caching of prompts for caching tests", []) == label
        assert gw2.counter.total == 0  # served from disk

    def test_single_flight_under_concurrency(self):
        gw = mock_gateway(workers=8)
        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(
                lambda _: gw.annotate("concurrent identical prompt stress", []),
                range(16)))
        assert len(set(results)) == 1
        assert gw.counter.total == 1

    def test_annotate_many_is_order_independent(self):
        items = [(i, f"topic{i} words topic{i} again", []) for i in range(12)]
        seq = mock_gateway(workers=1).annotate_many(items)
        par = mock_gateway(workers=6).annotate_many(items)
        assert seq == par

    def test_counter_is_pure_function_of_unique_prompts(self):
        gw = mock_gateway()
        for text in ["alpha beta alpha beta", "alpha beta alpha beta",
                     "gamma delta gamma delta"]:
            gw.annotate(text, [])
        assert gw.counter.annotate == 2


class _CountingHandler(http.server.BaseHTTPRequestHandler):
    hits = 0
    status = 500
    body = b"{}"

    def do_POST(self):
        type(self).hits += 1
        self.rfile.read(int(self.headers.get("Content-Length", 0)))
        self.send_response(self.status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(self.body)

    def log_message(self, *args):
        pass


@pytest.fixture
def http_server():
    handler = type("Handler", (_CountingHandler,), {"hits": 0})
    server = http.server.HTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield handler, f"http://127.0.0.1:{server.server_port}/v1/chat"
    server.shutdown()


class TestHttpBackend:
    def test_unreachable_backend_attempts_retries_plus_one(self, http_server):
        handler, url = http_server
        gw = LlmGateway(BackendConfig(mode="http", endpoint=url, api_key="k",
                                      model="m", max_retries=2, timeout=5))
        with pytest.raises(TransportError, match="3 attempts"):
            gw.annotate("some node text for retries", [])
        assert handler.hits == 3

    def test_happy_path_parses_first_choice(self, http_server):
        handler, url = http_server
        handler.status = 200
        handler.body = (b'{"choices": [{"message": {"content": '
                        b'"(Graph Mining), (Topic Models)"}}]}')
        gw = LlmGateway(BackendConfig(mode="http", endpoint=url, api_key="k", model="m"))
        labels = gw.call(LlmRequest("distill", labels=("a", "b")))
        assert labels == ["graph_mining", "topic_models"]
        assert gw.counter.distill == 1

    def test_http_mode_requires_endpoint_and_credential(self):
        with pytest.raises(ValueError, match="endpoint"):
            BackendConfig(mode="http", api_key="k").validate()
        with pytest.raises(ValueError, match="credential"):
            BackendConfig(mode="http", endpoint="http://x").validate()
