import pytest
import torch
import torchvision
from torch import nn

from puregaze.errors import ConfigurationError
from puregaze.models import (GazeHead, SAModule, UpConv, attach_sa, build_puregaze, count_parameters,
                             infer_sa_depth, stop_gradient_boundaries)


@pytest.mark.parametrize("res,feat", [(224, 7), (64, 2)])
def test_shape_contract(res, feat):
    model = build_puregaze(res)
    model.eval()
    with torch.no_grad():
        f, g, r = model(torch.rand(1, 3, res, res))
    assert f.shape == (1, 512, feat, feat)
    assert g.shape == (1, 2)
    assert r.shape == (1, 3, res, res)


def test_zero_batch_contract():
    model = build_puregaze(64, width=16)
    with torch.no_grad():
        _, g, r = model(torch.zeros(4, 3, 64, 64))
    assert g.shape == (4, 2) and torch.isfinite(g).all()
    assert r.shape == (4, 3, 64, 64) and r.min() >= 0 and r.max() <= 1


@pytest.mark.parametrize("res", [0, 48, 100])
def test_indivisible_resolution_rejected_at_build(res):
    with pytest.raises(ConfigurationError):
        build_puregaze(res)


def test_backbone_matches_torchvision_resnet18():
    ours = build_puregaze(224).backbone
    ref = torchvision.models.resnet18(weights=None)
    ref_conv = sum(p.numel() for n, p in ref.named_parameters() if not n.startswith("fc."))
    assert count_parameters(ours) == ref_conv
    state = {k: v for k, v in ref.state_dict().items() if not k.startswith("fc.")}
    ours.load_state_dict(state)
    ours.eval(), ref.eval()
    x = torch.rand(2, 3, 64, 64)
    body = nn.Sequential(*list(ref.children())[:-2])
    torch.testing.assert_close(ours(x), body(x))


def test_head_and_sa_layout():
    head = GazeHead(512)
    assert (head.fc1.out_features, head.fc2.out_features) == (1000, 2)
    sa = SAModule(512)
    widths = [block[0].conv.out_channels for block in sa.blocks]
    assert widths == [256, 128, 64, 32, 16]
    assert sa.to_rgb.out_channels == 3 and sa.to_rgb.kernel_size == (1, 1)


def test_upconv_equals_upsample_then_conv():
    torch.manual_seed(0)
    up = UpConv(6, 5).double()
    x = torch.randn(3, 6, 4, 7, dtype=torch.float64)
    ref = up.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))
    torch.testing.assert_close(up(x), ref, rtol=0, atol=1e-12)


def test_sa_output_bounded_for_extreme_features():
    sa = SAModule(8, depth=2)
    out = sa(1e3 * torch.randn(2, 8, 3, 3))
    assert out.min() >= 0 and out.max() <= 1


def test_single_backbone_instance():
    model = build_puregaze(64, width=8)
    assert model.gaze_network()[0] is model.reconstruction_network()[0] is model.backbone


class ToyExtractor(nn.Module):
    def __init__(self):
        super().__init__()
        self.c1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.bn = nn.BatchNorm2d(16)
        self.c2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)

    def forward(self, x):
        return self.c2(torch.relu(self.bn(self.c1(x))))


def test_attach_to_resnet_reproduces_puregaze():
    torch.manual_seed(0)
    direct = build_puregaze(224)
    attached = attach_sa(build_puregaze(224).backbone, 512)
    assert count_parameters(attached) == count_parameters(direct)
    assert attached.sa.depth == 5


def test_attach_to_toy_extractor():
    extractor = ToyExtractor()
    head = GazeHead(32, 64)
    estimator = nn.Sequential(extractor, head)
    before = count_parameters(estimator)
    x = torch.rand(2, 3, 32, 32)
    extractor.eval()
    out_before = extractor(x).detach().clone()
    extractor.train()
    state_before = {k: v.clone() for k, v in extractor.state_dict().items()}

    bundle = attach_sa(extractor, 32, head)
    assert bundle.sa.depth == 2
    assert bundle.inference_parameter_count() == before
    assert bundle.backbone is extractor and extractor.training
    for k, v in extractor.state_dict().items():
        assert torch.equal(v, state_before[k])
    extractor.eval()
    assert torch.equal(extractor(x), out_before)
    _, g, r = bundle(x)
    assert g.shape == (2, 2) and r.shape == x.shape


def test_attach_stride_mismatch():
    odd = nn.Conv2d(3, 8, 3, stride=3)
    with pytest.raises(ConfigurationError):
        attach_sa(odd, 8)
    with pytest.raises(ConfigurationError):
        attach_sa(ToyExtractor(), 64)
    too_deep = nn.Sequential(*[nn.MaxPool2d(2)] * 7)
    with pytest.raises(ConfigurationError):
        infer_sa_depth(too_deep)


def test_routing_descriptor():
    routes = stop_gradient_boundaries(build_puregaze(64, width=8))
    assert routes["sa"].updates == ("sa",)
    assert routes["mlp"].updates == ("head",)
    assert routes["backbone"].updates == ("backbone",)
    assert set(routes) == {"sa", "mlp", "backbone"}
