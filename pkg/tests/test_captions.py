import http.server
import json
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elsa import captions as cp
from elsa.roomsim import SpatialAttributes


def attrs(az=0.0, el=0.0, dist=1.5, area=75.0, t30=500.0):
    return SpatialAttributes(az, el, dist, area, t30)


class TestAttrsToDescriptors:
    def test_near(self):
        assert cp.attrs_to_descriptors(attrs(dist=0.8)).distance == "near"

    def test_far(self):
        assert cp.attrs_to_descriptors(attrs(dist=2.5)).distance == "far"

    def test_mid_distance_absent(self):
        assert cp.attrs_to_descriptors(attrs(dist=1.5)).distance is None

    def test_left_medium_room(self):
        d = cp.attrs_to_descriptors(attrs(az=-90.0, el=0.0, area=75.0))
        assert d.direction == "left"
        assert d.room_size == "medium"
        assert d.elevation is None

    def test_direction_bands(self):
        assert cp.attrs_to_descriptors(attrs(az=90.0)).direction == "right"
        assert cp.attrs_to_descriptors(attrs(az=0.0)).direction == "front"
        assert cp.attrs_to_descriptors(attrs(az=170.0)).direction == "back"
        assert cp.attrs_to_descriptors(attrs(az=-170.0)).direction == "back"
        assert cp.attrs_to_descriptors(attrs(az=45.0)).direction is None
        assert cp.attrs_to_descriptors(attrs(az=-135.0)).direction is None

    def test_elevation_bands(self):
        assert cp.attrs_to_descriptors(attrs(el=45.0)).elevation == "up"
        assert cp.attrs_to_descriptors(attrs(el=-45.0)).elevation == "down"
        assert cp.attrs_to_descriptors(attrs(el=20.0)).elevation is None

    def test_reverb_bands(self):
        assert cp.attrs_to_descriptors(attrs(t30=1500.0)).reverb == "highly reverberant"
        assert cp.attrs_to_descriptors(attrs(t30=150.0)).reverb == "acoustically dampened"
        assert cp.attrs_to_descriptors(attrs(t30=500.0)).reverb is None

    def test_room_size_bands(self):
        assert cp.attrs_to_descriptors(attrs(area=30.0)).room_size == "small"
        assert cp.attrs_to_descriptors(attrs(area=150.0)).room_size == "large"
        assert cp.attrs_to_descriptors(attrs(area=75.0)).room_size == "medium"

    @given(
        st.floats(min_value=-180, max_value=180),
        st.floats(min_value=-90, max_value=90),
        st.floats(min_value=0.0, max_value=5.0),
        st.floats(min_value=5.0, max_value=300.0),
        st.floats(min_value=50.0, max_value=3000.0),
    )
    def test_total_function(self, az, el, dist, area, t30):
        d = cp.attrs_to_descriptors(attrs(az, el, dist, area, t30))
        assert d.room_size in ("small", "medium", "large")


class TestBuildSpatialCaption:
    def test_seed_zero_golden(self):
        d = cp.DescriptorSet(distance="near", direction="left", room_size="small")
        out = cp.build_spatial_caption("a dog barking", d, np.random.default_rng(0))
        assert out == "The sound of a dog barking is coming from the near left of a small room."

    def test_medium_only(self):
        d = cp.DescriptorSet(room_size="medium")
        out = cp.build_spatial_caption("a dog barking", d, np.random.default_rng(0))
        assert out == "The sound of a dog barking is coming from a medium room."
        assert "medium room" in out

    def test_same_seed_same_caption(self):
        d = cp.DescriptorSet(distance="far", direction="back", room_size="large")
        a = cp.build_spatial_caption("rain falling", d, np.random.default_rng(42))
        b = cp.build_spatial_caption("rain falling", d, np.random.default_rng(42))
        assert a == b

    def test_empty_caption_rejected(self):
        with pytest.raises(ValueError):
            cp.build_spatial_caption("", cp.DescriptorSet(), np.random.default_rng(0))

    def test_every_template_contains_original(self):
        d = cp.DescriptorSet("near", "right", "down", "large", "highly reverberant")
        for t in cp._TEMPLATES:
            out = t("a kettle whistling", d)
            assert "a kettle whistling" in out.lower()

    @settings(max_examples=200, deadline=None)
    @given(
        st.sampled_from([None, "near", "far"]),
        st.sampled_from([None, "left", "right", "front", "back"]),
        st.sampled_from([None, "up", "down"]),
        st.sampled_from(["small", "medium", "large"]),
        st.sampled_from([None, "highly reverberant", "acoustically dampened"]),
        st.integers(min_value=0, max_value=10_000),
    )
    def test_roundtrip_all_templates(self, dist, direction, elev, size, reverb, seed):
        d = cp.DescriptorSet(dist, direction, elev, size, reverb)
        caption = cp.build_spatial_caption(
            "a kettle whistling", d, np.random.default_rng(seed)
        )
        assert cp.parse_descriptors(caption) == d


class TestBuildLLMPrompt:
    def test_far_medium_sample(self):
        d = cp.DescriptorSet(distance="far", room_size="medium")
        p = cp.build_llm_prompt("A bird is loudly making a lot of noises.", d)
        assert "is coming from the far of a medium room." in p
        assert p.startswith("The sound: A bird is loudly making a lot of noises.")

    def test_descriptor_free_still_grammatical(self):
        p = cp.build_llm_prompt("wind blowing", cp.DescriptorSet(room_size="medium"))
        assert "is coming from a medium room." in p
        assert "  " not in p

    def test_instruction_suffix(self):
        for d in (cp.DescriptorSet(), cp.DescriptorSet("near", "left", "up", "small", None)):
            p = cp.build_llm_prompt("x", d)
            assert p.endswith(
                "Rephrase as a short English sentence describing the sound "
                "and all the details of its source."
            )

    def test_full_slots(self):
        d = cp.DescriptorSet("near", "left", "up", "small", "highly reverberant")
        p = cp.build_llm_prompt("a dog barking", d)
        assert "is coming from the near up left of a small highly reverberant room." in p


class TestProbeCaption:
    def test_far(self):
        assert cp.probe_caption("far") == "A sound coming from far away"

    def test_left(self):
        assert cp.probe_caption("left") == "A sound coming from the left"

    def test_unknown_label(self):
        with pytest.raises(cp.UnknownLabelError):
            cp.probe_caption("behind-left")

    def test_all_distinct(self):
        caps = [cp.probe_caption(k) for k in cp._PROBE_PHRASES]
        assert len(set(caps)) == len(caps)


class _StubHandler(http.server.BaseHTTPRequestHandler):
    last_request = None

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _StubHandler.last_request = body
        out = json.dumps({"text": "ECHO: " + body["prompt"][:20]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


@pytest.fixture()
def stub_server():
    server = http.server.HTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/"
    server.shutdown()


class TestRephraseExternal:
    def test_unreachable_falls_back(self):
        ep = cp.RephraserEndpoint(url="http://127.0.0.1:1/", timeout_s=0.3)
        text, fell_back = cp.rephrase_external("prompt text", ep, "fallback caption")
        assert fell_back is True
        assert text == "fallback caption"

    def test_echo_stub_pass_through(self, stub_server):
        ep = cp.RephraserEndpoint(url=stub_server, timeout_s=5.0)
        text, fell_back = cp.rephrase_external("hello prompt", ep, "fallback")
        assert fell_back is False
        assert text.startswith("ECHO: hello prompt")

    def test_request_body_parameters(self, stub_server):
        ep = cp.RephraserEndpoint(url=stub_server, timeout_s=5.0)
        cp.rephrase_external("check body", ep, "fallback")
        body = _StubHandler.last_request
        assert body["temperature"] == 0.9
        assert body["max_tokens"] == 1024
        assert body["prompt"] == "check body"


class TestDescriptorSetValidation:
    def test_bad_values_rejected(self):
        with pytest.raises(ValueError):
            cp.DescriptorSet(distance="close")
        with pytest.raises(ValueError):
            cp.DescriptorSet(room_size="tiny")

    def test_caption_record_nonempty(self):
        with pytest.raises(ValueError):
            cp.CaptionRecord("orig", "", cp.DescriptorSet(), attrs())
