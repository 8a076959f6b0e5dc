# tests/test_networks.py
import pytest
import torch
import torch.nn as nn

from wmcloak.core.errors import ShapeError
from wmcloak.core.imagedata import render_watermark
from wmcloak.core.networks import (Discriminator, Generator, ResnetBlock, discriminator_forward,
                                   generator_forward, init_networks, parameter_checksum)


def test_init_is_deterministic():
    g1, d1 = init_networks(0, (64, 64))
    g2, d2 = init_networks(0, (64, 64))
    assert parameter_checksum(g1) == parameter_checksum(g2)
    assert parameter_checksum(d1) == parameter_checksum(d2)
    g3, _ = init_networks(1, (64, 64))
    assert parameter_checksum(g3) != parameter_checksum(g1)


def test_discriminator_final_kernel_for_512():
    d = Discriminator((512, 512))
    assert d.model[-1].kernel_size == (16, 16)


def test_init_rejects_indivisible_size():
    with pytest.raises(ValueError):
        init_networks(0, (480, 480))


def test_generator_layout():
    g = Generator()
    convs = [m for m in g.modules() if isinstance(m, nn.Conv2d)]
    assert convs[0].in_channels == 4
    assert [c.out_channels for c in convs[:3]] == [64, 128, 256]
    assert sum(isinstance(m, ResnetBlock) for m in g.modules()) == 4
    assert convs[-1].out_channels == 3 and convs[-1].kernel_size == (3, 3)
    assert isinstance(g.model[-1], nn.Tanh)
    ups = [m for m in g.modules() if isinstance(m, nn.ConvTranspose2d)]
    assert [(u.out_channels, u.stride) for u in ups] == [(128, (2, 2)), (64, (2, 2))]
    assert not any(isinstance(m, nn.ConvTranspose2d) for m in Generator(upsampling='resize').modules())


def test_generator_rejects_unknown_upsampling():
    with pytest.raises(NotImplementedError):
        Generator(upsampling='bilinear')


def test_discriminator_layout():
    d = Discriminator((64, 64))
    convs = [m for m in d.model if isinstance(m, nn.Conv2d)]
    assert [c.out_channels for c in convs[:5]] == [64, 128, 256, 512, 1024]
    assert all(c.kernel_size == (4, 4) and c.stride == (2, 2) for c in convs[:5])
    # first block: conv then activation, no normalisation
    assert isinstance(d.model[1], nn.LeakyReLU)
    assert all(m.negative_slope == 0.2 for m in d.model if isinstance(m, nn.LeakyReLU))


def test_generator_output_bounded_and_shaped():
    g, _ = init_networks(0, (64, 64))
    x = torch.rand(2, 3, 64, 64)
    m = torch.from_numpy(render_watermark("VAN_GOGH", (64, 64)).mask)
    out = generator_forward(g, x, m)
    assert out.shape == (2, 3, 64, 64)
    assert out.abs().max() < 1.0
    assert torch.equal(out, generator_forward(g, x, m))


def test_generator_accepts_domain_types(natural_image, watermark):
    g, _ = init_networks(0, (64, 64))
    assert generator_forward(g, natural_image, watermark).shape == (1, 3, 64, 64)


def test_generator_shape_mismatch():
    g, _ = init_networks(0, (64, 64))
    with pytest.raises(ShapeError):
        generator_forward(g, torch.rand(1, 3, 64, 64), torch.zeros(1, 1, 32, 32))


def test_generator_is_differentiable():
    g, _ = init_networks(0, (32, 32))
    x = torch.rand(1, 3, 32, 32, requires_grad=True)
    generator_forward(g, x, torch.ones(1, 1, 32, 32)).sum().backward()
    assert x.grad is not None and x.grad.abs().sum() > 0
    assert all(p.grad is not None for p in g.parameters())


def test_discriminator_probabilities():
    _, d = init_networks(0, (64, 64))
    p = discriminator_forward(d, torch.rand(5, 3, 64, 64))
    assert p.shape == (5,)
    assert torch.all((p > 0) & (p < 1))


def test_discriminator_zero_logit_is_half():
    d = Discriminator((32, 32))
    with torch.no_grad():
        d.model[-1].weight.zero_()
        d.model[-1].bias.zero_()
    assert torch.allclose(discriminator_forward(d, torch.rand(3, 3, 32, 32)), torch.full((3,), 0.5))


def test_discriminator_size_mismatch():
    _, d = init_networks(0, (64, 64))
    with pytest.raises(ShapeError):
        discriminator_forward(d, torch.rand(1, 3, 32, 32))


def test_generator_translation_equivariant_with_circular_padding():
    # circular padding removes border effects; shifts by multiples of 8 commute with G
    g = Generator(padding_type='circular', upsampling='resize').eval()
    x = torch.rand(1, 3, 64, 64)
    m = (torch.rand(1, 1, 64, 64) > 0.7).float()
    with torch.no_grad():
        shifted = g(torch.roll(x, (8, 16), (2, 3)), torch.roll(m, (8, 16), (2, 3)))
        expected = torch.roll(g(x, m), (8, 16), (2, 3))
    assert torch.allclose(shifted, expected, atol=1e-4)


def test_instance_norm_outputs_are_standardised():
    g = Generator()
    outputs = []
    hooks = [m.register_forward_hook(lambda _m, _i, out: outputs.append(out.detach().clone()))
             for m in g.modules() if isinstance(m, nn.InstanceNorm2d)]
    with torch.no_grad():
        g(torch.rand(2, 3, 64, 64), (torch.rand(2, 1, 64, 64) > 0.5).float())
    for hook in hooks:
        hook.remove()
    assert outputs
    for out in outputs:
        mean = out.mean(dim=(2, 3))
        var = out.var(dim=(2, 3), unbiased=False)
        assert mean.abs().max() < 1e-4
        assert (var - 1).abs().max() < 1e-3


def test_discriminator_gradient_matches_finite_differences():
    _, d = init_networks(0, (32, 32))
    d = d.double()
    h = 1e-6
    for i in range(50):
        gen = torch.Generator().manual_seed(i)
        x = torch.rand(1, 3, 32, 32, dtype=torch.float64, generator=gen, requires_grad=True)
        direction = torch.randn(x.shape, dtype=torch.float64, generator=gen)
        direction /= direction.norm()
        discriminator_forward(d, x).sum().backward()
        with torch.no_grad():
            plus = discriminator_forward(d, x + h * direction).sum()
            minus = discriminator_forward(d, x - h * direction).sum()
        numeric = float((plus - minus) / (2 * h))
        analytic = float((x.grad * direction).sum())
        assert numeric == pytest.approx(analytic, rel=1e-3, abs=1e-9)


@pytest.mark.slow
def test_reflect_generator_crop_covariance():
    # instance norm pools over the whole image, so the crop check runs the convolutional stack without it;
    # margin exceeds the receptive radius (about 90 px); the offset is a multiple of the ×8 downsampling
    torch.manual_seed(0)
    g = Generator(norm_layer=nn.Identity).double().eval()
    x = torch.rand(1, 3, 384, 384, dtype=torch.float64)
    m = (torch.rand(1, 1, 384, 384) > 0.7).double()
    offset, crop, margin = 32, 320, 112
    with torch.no_grad():
        full = g(x, m)
        window = (Ellipsis, slice(offset, offset + crop), slice(offset, offset + crop))
        cropped = g(x[window], m[window])
    inner = slice(margin, crop - margin)
    outer = slice(offset + margin, offset + crop - margin)
    assert full[..., outer, outer].std() > 1e-6
    assert torch.allclose(cropped[..., inner, inner], full[..., outer, outer], atol=1e-10, rtol=0)
    # border pixels see the reflected padding and do differ
    assert not torch.allclose(cropped[..., :4, :4], full[..., offset:offset + 4, offset:offset + 4], atol=1e-9, rtol=0)
