import pytest
import torch

from rcad import checkpoint, container
from rcad.detector import Detector, DetectorConfig, encoder_checksum
from rcad.diffusion import Denoiser, weights_checksum
from rcad.errors import ContainerError


def test_denoiser_round_trip(tiny_denoiser, tmp_path):
    path = tmp_path / "d.ckpt"
    n = checkpoint.save(tiny_denoiser, path)
    assert n == path.stat().st_size
    back = checkpoint.load(path)
    assert isinstance(back, Denoiser) and back.config == tiny_denoiser.config
    assert weights_checksum(back) == weights_checksum(tiny_denoiser)
    assert not any(p.requires_grad for p in back.parameters())
    assert checkpoint.to_bytes(back) == checkpoint.to_bytes(tiny_denoiser)


def test_detector_round_trip(tmp_path):
    det = Detector(DetectorConfig(widths=(4, 4, 4), gen_width=8, bottleneck=4))
    with torch.no_grad():
        for p in det.generator.parameters():
            p.add_(0.01)
    det.train_log = {"probe_start": 1.0}
    path = tmp_path / "det.ckpt"
    checkpoint.save(det, path)
    back = checkpoint.load(path)
    assert isinstance(back, Detector) and back.train_log == {"probe_start": 1.0}
    assert encoder_checksum(back) == det.encoder_checksum
    for a, b in zip(det.state_dict().values(), back.state_dict().values()):
        assert torch.equal(a, b)


def test_checkpoint_corruption_names_block(tiny_denoiser):
    data = bytearray(checkpoint.to_bytes(tiny_denoiser))
    data[-3] ^= 0x55
    with pytest.raises(ContainerError) as exc:
        checkpoint.from_bytes(bytes(data))
    assert exc.value.block not in (None, "header", "meta")
    with pytest.raises(ContainerError) as exc:
        checkpoint.from_bytes(bytes(data[:40]))
    assert exc.value.block is not None


def test_checkpoint_rejects_foreign_magic(tiny_denoiser):
    blob = container.pack(b"NOTACKPT", 1, 1, [("meta", b"{}")])
    with pytest.raises(ContainerError):
        checkpoint.from_bytes(blob)
    with pytest.raises(TypeError):
        checkpoint.to_bytes(torch.nn.Linear(2, 2))


def test_container_layout():
    blob = container.pack(b"RCADTEST", 3, 7, [("a", b"xyz"), ("bb", b"")])
    version, ident, blocks = container.unpack(blob, b"RCADTEST", (3,))
    assert (version, ident, dict(blocks)) == (3, 7, {"a": b"xyz", "bb": b""})
    assert blob[:8] == b"RCADTEST" and int.from_bytes(blob[8:12], "little") == 3
    assert len(blob) == container.header_size(["a", "bb"]) + 3
    with pytest.raises(ValueError):
        container.pack(b"RCADTEST", 1, 0, [("a", b""), ("a", b"")])
    with pytest.raises(ContainerError):
        container.unpack(blob, b"RCADTEST", (1,))
