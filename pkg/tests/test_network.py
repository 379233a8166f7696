import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from deoccl.network import (
    GROUPS,
    AttentionMaps,
    ConfigError,
    NetworkConfig,
    attention_fuse,
    decode_to_site,
    discriminator_forward,
    encode,
    generator_forward,
    init_network,
)

from oracles import fuse_loop

DESK = NetworkConfig(image_size=64, base_filters=8)
TINY = NetworkConfig(image_size=16, base_filters=4, bottleneck_dim=8, batchnorm=False)


def rand_image(cfg, n=2, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(n, 3, cfg.image_size, cfg.image_size, generator=g, dtype=dtype) * 2 - 1)


def test_config_defaults_match_architecture():
    cfg = NetworkConfig()
    assert (cfg.image_size, cfg.base_filters, cfg.bottleneck_dim) == (256, 64, 99)
    assert cfg.encoder_depth == 6 and cfg.attention_site_size == 64
    assert cfg.channels() == [64, 64, 128, 256, 512, 512]


def test_config_validation():
    assert NetworkConfig(image_size=64, attention_site_size=16).attention_site_size == 16
    with pytest.raises(ConfigError):
        NetworkConfig(image_size=64, attention_site_size=32)
    with pytest.raises(ConfigError):
        NetworkConfig(image_size=64, encoder_depth=5)
    with pytest.raises(ConfigError):
        NetworkConfig(image_size=30)


def test_init_seeded_checksums():
    a, b, c = init_network(DESK, 7), init_network(DESK, 7), init_network(DESK, 8)
    assert a.checksum() == b.checksum()
    assert a.checksum() != c.checksum()
    assert set(a.trainable) == set(GROUPS) and all(a.trainable.values())


def test_groups_partition_parameters():
    p = init_network(DESK, 0)
    grouped = [name for g in GROUPS for name, _ in p.named_group_parameters(g)]
    assert sorted(grouped) == sorted(name for name, _ in p.named_parameters())
    assert len(grouped) == len(set(grouped))


def test_init_statistics():
    p = init_network(NetworkConfig(image_size=32, base_filters=16), 0)
    w = p.encoder.blocks[1].conv2.weight
    assert abs(float(w.detach().mean())) < 0.02
    assert float(w.detach().std()) == pytest.approx((2 / (16 * 9)) ** 0.5, rel=0.1)
    assert float(p.encoder.blocks[1].conv2.bias.detach().abs().max()) == 0.0


@pytest.mark.slow
def test_encode_default_config_shapes():
    p = init_network(NetworkConfig(), 0)
    p.eval()
    with torch.no_grad():
        z, f_enc = encode(p, rand_image(NetworkConfig(), n=1))
        x_rec, maps = generator_forward(p, rand_image(NetworkConfig(), n=1), "attention")
    assert z.shape == (1, 99) and f_enc.shape == (1, 64, 64, 64)
    assert x_rec.shape == (1, 3, 256, 256) and maps.attn_enc.shape == (1, 64, 64, 64)
    assert x_rec.abs().max() <= 1


def test_encode_desk_and_determinism():
    p = init_network(DESK, 0)
    p.eval()
    x = rand_image(DESK)
    z1, f1 = encode(p, x)
    z2, f2 = encode(p, x)
    assert f1.shape == (2, 8, 16, 16) and z1.shape == (2, 99)
    assert torch.equal(z1, z2) and torch.equal(f1, f2)
    with pytest.raises(ValueError):
        encode(p, torch.zeros(1, 3, 32, 32))


def test_decode_to_site():
    p = init_network(DESK, 1)
    p.eval()
    f = decode_to_site(p, torch.zeros(99))
    assert f.shape == (1, 8, 16, 16) and torch.isfinite(f).all()
    g = torch.Generator().manual_seed(0)
    a = decode_to_site(p, torch.randn(1, 99, generator=g))
    b = decode_to_site(p, torch.randn(1, 99, generator=g))
    assert not torch.equal(a, b)
    with pytest.raises(ValueError):
        decode_to_site(p, torch.zeros(98))


def test_attention_fuse_forced_maps():
    p = init_network(DESK, 0)
    g = torch.Generator().manual_seed(3)
    f_enc, f_dec = torch.randn(2, 8, 16, 16, generator=g), torch.randn(2, 8, 16, 16, generator=g)
    one, zero = torch.ones_like(f_enc), torch.zeros_like(f_enc)
    assert torch.equal(attention_fuse(p, f_enc, f_dec, AttentionMaps(one, zero))[0], f_enc)
    assert torch.equal(attention_fuse(p, f_enc, f_dec, AttentionMaps(zero, one))[0], f_dec)
    with pytest.raises(ValueError):
        attention_fuse(p, f_enc, f_dec[:, :, :8])


def test_attention_module_layout():
    p = init_network(DESK, 0)
    convs = p.attention.convs
    assert [c.out_channels for c in convs] == [32, 32, 64, 16]
    assert all(c.kernel_size == (3, 3) and c.stride == (1, 1) and c.padding == (1, 1) for c in convs)
    assert convs[0].in_channels == 16


def test_attention_fuse_matches_loop_oracle():
    p = init_network(DESK, 0)
    g = torch.Generator().manual_seed(5)
    f_enc, f_dec = torch.randn(1, 8, 16, 16, generator=g), torch.randn(1, 8, 16, 16, generator=g)
    fused, maps = attention_fuse(p, f_enc, f_dec)
    expect = fuse_loop(f_enc, f_dec, maps.attn_enc.detach(), maps.attn_dec.detach())
    np.testing.assert_allclose(fused.detach().numpy(), expect, rtol=1e-6, atol=1e-6)
    # attention maps are the two channel halves of the last conv
    raw = p.attention(torch.cat([f_enc, f_dec], 1))
    assert torch.equal(maps.attn_enc, raw[:, :8]) and torch.equal(maps.attn_dec, raw[:, 8:])


def test_bypass_ignores_attention_parameters():
    p = init_network(DESK, 0)
    p.eval()
    x = rand_image(DESK)
    before, maps = generator_forward(p, x, "bypass")
    assert maps is None
    with torch.no_grad():
        for q in p.attention.parameters():
            q.add_(torch.randn_like(q) * 10)
    after, _ = generator_forward(p, x, "bypass")
    assert torch.equal(before, after)
    attn_out, _ = generator_forward(p, x, "attention")
    assert not torch.equal(attn_out, after)


def test_generator_outputs_bounded_and_finite():
    p = init_network(DESK, 2)
    x_rec, maps = generator_forward(p, rand_image(DESK, 3), "attention")
    assert x_rec.shape == (3, 3, 64, 64)
    assert x_rec.min() >= -1 and x_rec.max() <= 1
    assert all(torch.isfinite(t).all() for t in (x_rec, *maps))


def test_discriminator_desk_layout_and_range():
    p = init_network(DESK, 0)
    assert p.discriminator.n_strided == 4
    assert p.discriminator.out.kernel_size == (4, 4)
    p.eval()
    x = rand_image(DESK, 4)
    prob = discriminator_forward(p, x)
    assert prob.shape == (4,) and (prob > 0).all() and (prob < 1).all()
    assert torch.equal(prob, discriminator_forward(p, x))


def test_mask_input_variant():
    cfg = NetworkConfig(image_size=16, base_filters=4, bottleneck_dim=8, mask_input=True)
    p = init_network(cfg, 0)
    x = rand_image(cfg)
    with pytest.raises(ValueError):
        generator_forward(p, x)
    out, _ = generator_forward(p, x, mask=torch.zeros(2, 1, 16, 16))
    assert out.shape == x.shape


valid_configs = st.builds(
    lambda depth_extra, logsize, m, bdim: NetworkConfig(
        image_size=2**logsize, base_filters=m, bottleneck_dim=bdim, encoder_depth=min(2 + depth_extra, logsize - 2)
    ),
    depth_extra=st.integers(0, 3),
    logsize=st.integers(4, 6),
    m=st.integers(1, 6),
    bdim=st.integers(1, 12),
)


@settings(max_examples=20, deadline=None)
@given(cfg=valid_configs)
def test_shape_covariance(cfg):
    p = init_network(cfg, 0)
    p.eval()
    with torch.no_grad():
        z, f_enc = encode(p, rand_image(cfg, 1))
        f_dec = decode_to_site(p, z)
        fused, maps = attention_fuse(p, f_enc, f_dec)
        x_rec, _ = generator_forward(p, rand_image(cfg, 1))
    site = cfg.image_size // 4
    assert z.shape == (1, cfg.bottleneck_dim)
    assert f_enc.shape == f_dec.shape == fused.shape == maps.attn_dec.shape == (1, cfg.base_filters, site, site)
    assert x_rec.shape == (1, 3, cfg.image_size, cfg.image_size)
