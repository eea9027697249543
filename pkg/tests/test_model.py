import numpy as np
import pytest

from ssmlab.core import lti_scan
from ssmlab.model import (
    LtiLayer,
    StackedModel,
    forward_model,
    load_model,
    model_to_json,
    save_model,
)


def token_model(seed=0, n_layers=2, n_state=8, d_model=4):
    return StackedModel.build(n_layers=n_layers, n_state=n_state, d_model=d_model,
                              alphabet="ACGT", step=0.05, seed=seed)


class TestForward:
    def test_deterministic(self):
        model = token_model()
        r1 = forward_model(model, "ACGTTGCA")
        r2 = forward_model(model, "ACGTTGCA")
        assert np.array_equal(r1.logits, r2.logits)
        for t1, t2 in zip(r1.trajectories, r2.trajectories):
            assert np.array_equal(t1.states, t2.states)

    def test_trajectories_for_every_layer(self):
        model = token_model(n_layers=3)
        res = forward_model(model, "ACGT")
        assert len(res.trajectories) == 3
        assert all(len(t) == 5 for t in res.trajectories)

    def test_single_lti_layer_reproduces_scan(self):
        rng = np.random.default_rng(4)
        lyr = LtiLayer(6, 2, step=0.1, rng=rng, residual=False,
                       activation=False, feedthrough=True)
        lyr.d = rng.standard_normal((2, 2))
        model = StackedModel([lyr], d_model=2, rng=rng)
        u = rng.standard_normal((20, 2))
        res = forward_model(model, u)
        y_ref, traj_ref = lti_scan(lyr.discretize(), u)
        assert np.allclose(res.y_seq, y_ref, atol=1e-12)
        assert np.allclose(res.trajectories[0].states, traj_ref.states, atol=1e-12)

    def test_unknown_token_rejected(self):
        model = token_model()
        with pytest.raises(ValueError):
            forward_model(model, "ACGX")

    def test_empty_input_rejected(self):
        model = token_model()
        with pytest.raises(ValueError):
            forward_model(model, "")
        with pytest.raises(ValueError):
            forward_model(model, np.empty((0, 4)))

    def test_stateful_resume_matches_full_run(self):
        model = token_model(n_layers=2)
        full = forward_model(model, "ACGTACGT")
        first = forward_model(model, "ACGT")
        second = forward_model(model, "ACGT", initial_states=first.final_states)
        assert np.allclose(second.y_seq, full.y_seq[4:], atol=1e-12)


class TestSerialization:
    def test_round_trip_bitwise(self, tmp_path):
        model = StackedModel.build(n_layers=2, n_state=6, d_model=3,
                                   layer_kind="selective", alphabet="ACGT", seed=9)
        path = tmp_path / "model.ssm"
        save_model(model, path)
        loaded = load_model(path)
        for (n1, p1), (n2, p2) in zip(model.parameters(), loaded.parameters()):
            assert n1 == n2
            assert np.array_equal(p1, p2)
        x = "ACGTAC"
        assert np.array_equal(forward_model(model, x).logits,
                              forward_model(loaded, x).logits)

    def test_header_is_json_and_payload_le(self, tmp_path):
        import json
        import struct
        model = token_model(n_layers=1, n_state=3, d_model=2)
        path = tmp_path / "m.ssm"
        save_model(model, path)
        raw = path.read_bytes()
        assert raw.startswith(b"SSMLAB1\x00")
        version, hlen = struct.unpack("<II", raw[8:16])
        header = json.loads(raw[16:16 + hlen])
        assert version == 1
        total = sum(int(np.prod(a["shape"])) for a in header["arrays"])
        assert len(raw) == 16 + hlen + 8 * total
        first = header["arrays"][0]
        count = int(np.prod(first["shape"]))
        arr = np.frombuffer(raw[16 + hlen:16 + hlen + 8 * count], dtype="<f8")
        assert np.array_equal(arr.reshape(first["shape"]), model.parameters()[0][1])

    def test_json_dump_parses(self):
        import json
        model = token_model(n_layers=1)
        payload = json.loads(model_to_json(model))
        assert "arrays" in payload and "embedding" in payload["arrays"]

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ssm"
        path.write_bytes(b"NOTAMODEL")
        with pytest.raises(ValueError):
            load_model(path)
