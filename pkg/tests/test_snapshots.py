"""Tests for binary parameter snapshots and their JSON sidecars."""

import json

import numpy as np
import pytest

from meanode.errors import SnapshotError
from meanode.resnet import init_net
from meanode.snapshots import HEADER, load_snapshot, save_snapshot, sidecar_path
from tests.conftest import tiny_config


@pytest.fixture
def saved(tmp_path):
    config = tiny_config(block="matrix_post")
    net = init_net(config)
    path = save_snapshot(tmp_path / "k000003.bin", net, 3, config, reference=True)
    return path, net, config


class TestSnapshots:
    """Tests for save_snapshot / load_snapshot."""

    def test_load_restores_everything(self, saved):
        """Loading gives back the params, iteration, config and reference flag."""
        path, net, config = saved

        snap = load_snapshot(path)

        np.testing.assert_array_equal(snap.net.params, net.params)
        assert snap.net.kind.tag == "matrix_post"
        assert snap.iteration == 3
        assert snap.config == config
        assert snap.reference is True

    def test_header_layout(self, saved):
        """Little-endian D, L, M, p, a 16-byte tag, the iteration, then f8 params."""
        path, net, _ = saved
        raw = path.read_bytes()

        D, L, M, p, tag, iteration = HEADER.unpack_from(raw)

        assert (D, L, M, p, iteration) == (4, 3, 2, 16, 3)
        assert tag.rstrip(b"\0") == b"matrix_post"
        assert len(raw) == HEADER.size + 8 * net.params.size

    def test_sidecar(self, saved):
        """The JSON sidecar holds the config and the iteration."""
        path, _, config = saved

        meta = json.loads(sidecar_path(path).read_text())

        assert meta["config"]["block"] == "matrix_post"
        assert meta["iteration"] == 3
        assert meta["reference"] is True

    def test_missing_file(self, tmp_path):
        """A missing file is a snapshot error."""
        with pytest.raises(SnapshotError):
            load_snapshot(tmp_path / "nope.bin")

    def test_truncated_body(self, saved):
        """A short body is reported with the expected size."""
        path, _, _ = saved
        path.write_bytes(path.read_bytes()[:-8])

        with pytest.raises(SnapshotError, match="expected"):
            load_snapshot(path)

    def test_truncated_header(self, saved):
        """A short header is reported."""
        path, _, _ = saved
        path.write_bytes(b"\0" * 4)

        with pytest.raises(SnapshotError, match="header"):
            load_snapshot(path)

    def test_tag_mismatch(self, saved):
        """The header tag must match the sidecar's block."""
        path, _, config = saved
        meta = json.loads(sidecar_path(path).read_text())
        meta["config"]["block"] = "matrix_pre"
        sidecar_path(path).write_text(json.dumps(meta))

        with pytest.raises(SnapshotError, match="tag"):
            load_snapshot(path)

    def test_malformed_sidecar(self, saved):
        """A broken sidecar is a snapshot error."""
        path, _, _ = saved
        sidecar_path(path).write_text("{not json")

        with pytest.raises(SnapshotError):
            load_snapshot(path)

    def test_snapshot_error_is_os_error(self, tmp_path):
        """The CLI maps snapshot failures to the I/O exit code."""
        with pytest.raises(OSError):
            load_snapshot(tmp_path / "nope.bin")
