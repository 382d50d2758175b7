import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import matgen.vq as vqmod
from matgen.material import generate_toy_material
from matgen.renderer import sample_lighting
from matgen.vq import (
    Codebook, LossWeights, PatchDiscriminator, RandomFeatures, VQConfig, VQModel,
    adaptive_adversarial_weight, codebook_mode, compression_loss, discriminate, hinge_d_loss, quantize,
)

SMALL = dict(widths=(8, 16, 16), disc_widths=(8, 16), codebook_size=64)


def book_of(rows):
    b = Codebook(len(rows), len(rows[0]))
    with torch.no_grad():
        b.weight.copy_(torch.tensor(rows, dtype=torch.float64))
    return b


def grid(vectors):
    """(n, c) vectors to a (1, c, 1, n) latent."""
    return torch.tensor(vectors, dtype=torch.float64).T[None, :, None, :]


@pytest.fixture(scope="module")
def model():
    return VQModel(VQConfig(**SMALL))


@pytest.fixture(scope="module")
def batch():
    return torch.stack([generate_toy_material(s, "stripes", 32).to_tensor() for s in range(2)])


def test_latent_shapes(model, batch):
    zs = model.encode(batch)
    assert len(zs) == 4 and all(z.shape == (2, 4, 4, 4) for z in zs)
    single = VQModel(VQConfig(mode="single", **SMALL))
    (z,) = single.encode(batch)
    assert z.shape == (2, 16, 4, 4)
    assert single.latents(batch).shape == model.latents(batch).shape
    with pytest.raises(ValueError, match="divisible"):
        model.encode(torch.zeros(1, 12, 20, 20, dtype=torch.float64))


def test_encode_deterministic(model, batch):
    assert all(torch.equal(a, b) for a, b in zip(model.encode(batch), model.encode(batch)))


def test_map_independence(model, batch):
    base = model.encode(batch)
    for j in range(4):
        bumped = batch.clone()
        bumped[:, 3 * j : 3 * j + 3] = torch.rand_like(bumped[:, :3])
        moved = model.encode(bumped)
        for i in range(4):
            diff = float((moved[i] - base[i]).abs().max().detach())
            if i == j:
                assert diff > 0
            else:
                assert diff <= 1e-12


def test_nearest_neighbour_and_tie_break():
    book = book_of([[0.0, 0.0], [1.0, 1.0]])
    q = quantize(grid([[0.2, 0.1], [0.5, 0.5], [0.9, 0.8]]), book)
    assert q.indices.reshape(-1).tolist() == [0, 0, 1]
    assert torch.equal(q.z_q[0, :, 0, 0], torch.zeros(2, dtype=torch.float64))
    with pytest.raises(ValueError, match="channels"):
        quantize(torch.zeros(1, 3, 1, 1, dtype=torch.float64), book)


def test_fixed_point_losses_vanish():
    book = book_of([[0.0, 0.0], [1.0, 1.0], [0.3, -0.2]])
    q = quantize(grid([[1.0, 1.0], [0.3, -0.2]]), book)
    assert q.loss_q.item() == 0.0 and q.loss_c.item() == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_quantization_idempotent_and_losses_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    book = Codebook(8, 3, g)
    z = torch.randn(2, 3, 3, 3, generator=g, dtype=torch.float64) * 0.2
    q = quantize(z, book)
    again = quantize(q.z_q.detach(), book)
    assert torch.equal(q.indices, again.indices)
    assert torch.equal(q.z_q, book.weight.detach()[q.indices].permute(0, 3, 1, 2))
    assert again.loss_q.item() == 0.0 and again.loss_c.item() == 0.0
    assert q.loss_q.item() >= 0 and q.loss_c.item() >= 0


def test_straight_through_gradient():
    g = torch.Generator().manual_seed(0)
    book = Codebook(8, 3, g)
    z = torch.randn(1, 3, 2, 2, generator=g, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 3, 2, 2, generator=g, dtype=torch.float64)
    q = quantize(z, book)
    zq = q.z_q
    zq.retain_grad()
    (zq * w).sum().backward()
    assert torch.equal(z.grad, zq.grad)


def test_usage_counters_sum_to_grid(model, batch):
    z, qs = model.quantize(model.encode(batch))
    for book, q in zip(model.codebooks, qs):
        book.record_usage(q.indices)
        assert float(book.usage.sum()) == q.indices.numel()


def test_reseed_dead_entries():
    g = torch.Generator().manual_seed(0)
    book = Codebook(4, 2, g)
    idx = torch.zeros(5, dtype=torch.long)
    for _ in range(3):
        book.record_usage(idx)
    flat = torch.randn(10, 2, generator=g, dtype=torch.float64)
    assert book.reseed_dead(flat, dead_after=3, generator=g) == 3
    assert all(any(torch.equal(row, f) for f in flat) for row in book.weight[1:])


def test_decode_range_and_channel_check(model):
    z = torch.randn(2, 16, 4, 4, dtype=torch.float64) * 50
    with torch.no_grad():
        out = model.decode(z)
    assert out.shape == (2, 12, 32, 32)
    assert float(out.min()) >= 0 and float(out.max()) <= 1
    with pytest.raises(ValueError):
        model.decode(torch.zeros(1, 8, 4, 4, dtype=torch.float64))


def test_codebook_modes():
    assert codebook_mode(VQConfig(codebook_size=256)) == [(64, 4)] * 4
    assert codebook_mode(VQConfig(mode="single", codebook_size=256)) == [(256, 16)]
    for bad in (VQConfig(codebook_size=2), VQConfig(codebook_size=100), VQConfig(mode="both")):
        with pytest.raises(ValueError):
            codebook_mode(bad)


def test_identity_reconstruction_terms_vanish(batch):
    lw = LossWeights(use_adversarial=False)
    out = compression_loss(batch, batch.clone(), [], lw, sample_lighting(0, k=2))
    assert out.pixel.item() == out.render.item() == out.perceptual.item() == 0.0


def test_total_weighting(monkeypatch):
    monkeypatch.setattr(vqmod, "render_loss", lambda a, b, lights: torch.tensor(0.2, dtype=torch.float64))
    monkeypatch.setattr(RandomFeatures, "distance", lambda self, a, b: torch.tensor(0.3, dtype=torch.float64))
    maps = torch.full((1, 12, 16, 16), 0.4, dtype=torch.float64)
    out = compression_loss(maps, maps + 0.1, [], LossWeights(use_adversarial=False), sample_lighting(0, k=1))
    assert abs(out.total.item() - 0.46) < 1e-12


def test_adversarial_gated(batch):
    d = PatchDiscriminator(widths=(8, 16)).to(torch.float64)
    lw = LossWeights(use_render=False, use_perceptual=False)
    recon = batch.flip(-1)
    off = compression_loss(batch, recon, [], lw, discriminator=d, adversarial_active=False)
    on = compression_loss(batch, recon, [], lw, discriminator=d, adversarial_active=True)
    assert off.adversarial.item() == 0.0
    assert on.total.item() == pytest.approx(off.total.item() + 0.1 * on.adversarial.item(), abs=1e-12)


def test_adaptive_adversarial_weight_is_gradient_ratio():
    w = torch.tensor([[3.0, -4.0]], dtype=torch.float64, requires_grad=True)
    rec = 2.0 * (w * torch.tensor([3.0, -4.0], dtype=torch.float64)).sum()  # grad (6, -8), norm 10
    adv = (w * torch.tensor([0.6, 0.8], dtype=torch.float64)).sum()  # grad norm 1
    lam = adaptive_adversarial_weight(rec, adv, w, eps=0.0)
    assert lam.item() == pytest.approx(10.0, abs=1e-12) and not lam.requires_grad
    flat = adaptive_adversarial_weight(rec, adv * 0.0, w)
    assert flat.item() == 1e4  # clamped when the adversarial gradient vanishes


def test_shape_mismatch_rejected(batch):
    with pytest.raises(ValueError):
        compression_loss(batch, batch[:, :, :16, :16], [], LossWeights())


def test_perceptual_distance():
    f = RandomFeatures()
    a = torch.rand(2, 12, 16, 16, dtype=torch.float64)
    b = torch.rand(2, 12, 16, 16, dtype=torch.float64)
    assert float(f.distance(a, a)) == 0.0
    assert float(f.distance(a, b)) > 0.0


def test_discriminator_shape_and_learning():
    torch.manual_seed(0)
    d = PatchDiscriminator(widths=(8, 16)).to(torch.float64)
    real = torch.rand(8, 12, 16, 16, dtype=torch.float64) * 0.2 + 0.8
    fake = torch.rand(8, 12, 16, 16, dtype=torch.float64) * 0.2
    logits = discriminate(d, real)
    assert logits.shape[-1] < 16 and logits.shape[-2] < 16
    assert torch.equal(logits, discriminate(d, real))
    opt = torch.optim.Adam(d.parameters(), lr=1e-3)
    for _ in range(50):
        opt.zero_grad()
        hinge_d_loss(d(real), d(fake)).backward()
        opt.step()
    with torch.no_grad():
        assert float(d(real).mean() - d(fake).mean()) > 0
