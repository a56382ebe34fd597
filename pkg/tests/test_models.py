import zipfile

import numpy as np
import pytest
import torch

from geossl import models as M
from geossl.errors import CheckpointIncompatible, ConfigError, FormatError, VersionError

SMALL = M.EncoderConfig("small_conv", 32, 32)
SMALL_PROJ = M.ProjectionHeadConfig(16, 8)


def test_resnet50_pretext_output_dim():
    torch.manual_seed(0)
    model = M.build_pretext_model(M.EncoderConfig(), M.ProjectionHeadConfig())
    with torch.no_grad():
        out = model(torch.rand(2, 3, 64, 64))
    assert out.shape == (2, 1024)
    assert model.num_parameters() > 23_000_000


def test_small_conv_config_propagation():
    model = M.build_pretext_model(M.EncoderConfig("small_conv", 128, 64), M.ProjectionHeadConfig(64, 32))
    out = model(torch.rand(4, 3, 64, 64))
    assert out.shape == (4, 32)


@pytest.mark.parametrize("size", [32, 48, 64, 96])
def test_shapes_for_input_sizes(size):
    enc = M.build_encoder(M.EncoderConfig("small_conv", 64, size))
    assert enc(torch.rand(2, 3, size, size)).shape == (2, 64)
    assert enc.feature_map(torch.rand(1, 3, size, size)).shape == (1, 64, size // 8, size // 8)


@pytest.mark.parametrize(
    "cfg",
    [M.EncoderConfig("vgg", 128, 64), M.EncoderConfig("small_conv", 0, 64), M.EncoderConfig("resnet50", 512, 224),
     M.EncoderConfig("small_conv", 12, 64), M.EncoderConfig("small_conv", 64, 16)],
)
def test_bad_encoder_config(cfg):
    with pytest.raises(ConfigError):
        M.build_encoder(cfg)


def test_bad_head_configs():
    with pytest.raises(ConfigError):
        M.build_pretext_model(SMALL, M.ProjectionHeadConfig(0, 8))
    with pytest.raises(ConfigError):
        M.build_downstream_model(SMALL, M.ClassifierHeadConfig(1))
    with pytest.raises(ConfigError):
        M.build_downstream_model(SMALL, M.ClassifierHeadConfig(3), mode="partial")


def test_downstream_from_pretext_checkpoint():
    torch.manual_seed(1)
    pre = M.build_pretext_model(SMALL, SMALL_PROJ)
    ckpt = M.checkpoint_from_model(pre)
    down = M.build_downstream_model(SMALL, M.ClassifierHeadConfig(21), ckpt, "finetune")
    for k, v in down.encoder.state_dict().items():
        assert torch.equal(v, pre.encoder.state_dict()[k])
    assert down(torch.rand(3, 3, 32, 32)).shape == (3, 21)
    assert not hasattr(down, "projection")


def test_classifier_head_layout():
    down = M.build_downstream_model(SMALL, M.ClassifierHeadConfig(5))
    linears = [m for m in down.classifier if isinstance(m, torch.nn.Linear)]
    assert [(l.in_features, l.out_features) for l in linears] == [(32, 512), (512, 5)]


def test_linear_mode_freezes_encoder():
    torch.manual_seed(2)
    down = M.build_downstream_model(SMALL, M.ClassifierHeadConfig(3), mode="linear")
    before = {k: v.clone() for k, v in down.encoder.state_dict().items()}
    opt = torch.optim.SGD([p for p in down.parameters() if p.requires_grad], lr=0.1)
    down.train()
    for _ in range(3):
        loss = torch.nn.functional.cross_entropy(down(torch.rand(4, 3, 32, 32)), torch.tensor([0, 1, 2, 0]))
        opt.zero_grad()
        loss.backward()
        opt.step()
    for p in down.encoder.parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0
    for k, v in down.encoder.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_finetune_mode_trains_encoder():
    down = M.build_downstream_model(SMALL, M.ClassifierHeadConfig(3), mode="finetune")
    assert all(p.requires_grad for p in down.parameters())


def test_init_none_is_random():
    torch.manual_seed(0)
    a = M.build_downstream_model(SMALL, M.ClassifierHeadConfig(3))
    b = M.build_downstream_model(SMALL, M.ClassifierHeadConfig(3))
    wa = a.encoder.backbone[0][0].weight
    wb = b.encoder.backbone[0][0].weight
    assert not torch.equal(wa, wb)


def test_checkpoint_mismatch():
    ckpt = M.checkpoint_from_model(M.build_pretext_model(SMALL, SMALL_PROJ))
    with pytest.raises(CheckpointIncompatible):
        M.build_downstream_model(M.EncoderConfig("small_conv", 64, 32), M.ClassifierHeadConfig(3), ckpt)


def test_checkpoint_round_trip_bytes(tmp_path):
    torch.manual_seed(3)
    model = M.build_pretext_model(SMALL, SMALL_PROJ)
    model.encoder.normalize.set_stats([0.1, 0.2, 0.3], [0.5, 0.6, 0.7])
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    M.save_checkpoint(p1, model, {"source_dataset": "syn_a", "seed": 0, "epoch": 3})
    ckpt = M.load_checkpoint(p1)
    M.save_checkpoint(p2, ckpt)
    assert p1.read_bytes() == p2.read_bytes()
    assert ckpt.provenance == {"source_dataset": "syn_a", "seed": 0, "epoch": 3}
    assert ckpt.normalization["mean"] == pytest.approx([0.1, 0.2, 0.3])
    for k, v in model.encoder.state_dict().items():
        np.testing.assert_array_equal(ckpt.encoder_state[k], v.numpy())
    restored = M.build_pretext_model(SMALL, SMALL_PROJ, ckpt)
    x = torch.rand(2, 3, 32, 32)
    model.eval()
    restored.eval()
    assert torch.equal(model(x), restored(x))


def test_downstream_checkpoint_restore(tmp_path):
    torch.manual_seed(4)
    down = M.build_downstream_model(SMALL, M.ClassifierHeadConfig(4), mode="linear").eval()
    M.save_checkpoint(tmp_path / "d.ckpt", down)
    again = M.restore_downstream_model(M.load_checkpoint(tmp_path / "d.ckpt")).eval()
    x = torch.rand(2, 3, 32, 32)
    assert torch.equal(down(x), again(x))
    assert again.mode == "linear"


def test_checkpoint_version_error(tmp_path):
    path = tmp_path / "a.ckpt"
    M.save_checkpoint(path, M.build_pretext_model(SMALL, SMALL_PROJ))
    with zipfile.ZipFile(path) as zf:
        members = {n: zf.read(n) for n in zf.namelist()}
    members["manifest.json"] = members["manifest.json"].replace(b'"format_version": 1', b'"format_version": 2')
    bumped = tmp_path / "bumped.ckpt"
    with zipfile.ZipFile(bumped, "w") as zf:
        for n, data in members.items():
            zf.writestr(n, data)
    with pytest.raises(VersionError):
        M.load_checkpoint(bumped)


def test_checkpoint_corrupt(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"definitely not a zip")
    with pytest.raises(FormatError):
        M.load_checkpoint(path)
    good = tmp_path / "good.ckpt"
    M.save_checkpoint(good, M.build_pretext_model(SMALL, SMALL_PROJ))
    data = good.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(data[: len(data) // 2])
    with pytest.raises(FormatError):
        M.load_checkpoint(tmp_path / "cut.ckpt")


def test_external_resnet_weights(tmp_path):
    from torchvision.models import resnet50

    torch.manual_seed(5)
    ref = resnet50(weights=None)
    torch.save(ref.state_dict(), tmp_path / "imagenet.pth")
    enc = M.build_encoder(M.EncoderConfig())
    M.load_external_encoder_weights(enc, tmp_path / "imagenet.pth")
    assert torch.equal(enc.backbone[0].weight, ref.conv1.weight)
    assert torch.equal(enc.backbone[7][2].conv3.weight, ref.layer4[2].conv3.weight)
    with pytest.raises(CheckpointIncompatible):
        M.load_external_encoder_weights(M.build_encoder(SMALL), tmp_path / "imagenet.pth")
