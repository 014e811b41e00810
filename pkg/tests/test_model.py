import pytest
import torch

from mixsegdec.losses import classification_loss, segmentation_loss, total_loss
from mixsegdec.model import (
    ConfigError,
    InputError,
    ModelConfig,
    build_model,
    forward,
    load_checkpoint,
    save_checkpoint,
)


def test_shapes(toy_config):
    model = build_model(toy_config).eval()
    out = forward(model, torch.rand(2, 1, 64, 64))
    assert out.seg_features.shape == (2, 1024, 8, 8)
    assert out.seg_logits.shape == (2, 1, 8, 8)
    assert out.cls_logit.shape == (2,)
    assert model.cls_head.in_features == 66
    assert model.cls_body[1].in_channels == 1025


def test_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig(input_height=100)
    with pytest.raises(ConfigError):
        ModelConfig(input_channels=2)
    with pytest.raises(ConfigError):
        ModelConfig(input_width=0)


def test_input_mismatch(toy_config):
    model = build_model(toy_config).eval()
    with pytest.raises(InputError):
        model(torch.rand(1, 3, 64, 64))
    with pytest.raises(InputError):
        model(torch.rand(1, 1, 128, 64))
    with pytest.raises(InputError):
        model(torch.rand(1, 64, 64))


def test_score(toy_config):
    model = build_model(toy_config).eval()
    images = torch.rand(3, 1, 64, 64)
    with torch.no_grad():
        expected = torch.sigmoid(model(images).cls_logit)
    scores = model.score(images)
    assert torch.equal(scores, expected)
    assert ((scores >= 0) & (scores <= 1)).all()


def test_seeded_init(toy_config):
    a, b = build_model(toy_config), build_model(toy_config)
    c = build_model(ModelConfig(input_height=64, input_width=64, seed=1))
    for (name, pa), pb, pc in zip(a.state_dict().items(), b.state_dict().values(),
                                  c.state_dict().values()):
        assert torch.equal(pa, pb), name
    assert not torch.equal(a.seg_head.weight, c.seg_head.weight)


@pytest.mark.parametrize("stop", [True, False])
def test_gradient_stop(stop):
    model = build_model(ModelConfig(input_height=64, input_width=64,
                                    stop_gradient_flow=stop)).eval()
    torch.manual_seed(0)
    out = model(torch.rand(2, 1, 64, 64))
    classification_loss(out.cls_logit, torch.tensor([1.0, 0.0])).backward()
    seg = model.parameter_groups()['segmentation']
    zero = [p.grad is None or not p.grad.any() for p in seg]
    if stop:
        assert all(zero)
    else:
        assert not all(zero)
    assert any(p.grad is not None and p.grad.any()
               for p in model.parameter_groups()['classification'])


def test_gradient_stop_segmentation_loss():
    images = torch.rand(2, 1, 64, 64, generator=torch.Generator().manual_seed(1))
    target = torch.zeros(2, 1, 8, 8)
    target[0, 0, 2:5, 3:6] = 1
    grads = []
    for stop in (True, False):
        model = build_model(ModelConfig(input_height=64, input_width=64,
                                        stop_gradient_flow=stop)).eval()
        out = model(images)
        segmentation_loss(out.seg_logits, target, torch.ones_like(target)).backward()
        grads.append([p.grad for p in model.parameter_groups()['segmentation']])
    # the toggle only cuts classification gradients
    for on, off in zip(*grads):
        assert torch.allclose(on, off, rtol=1e-6, atol=1e-9)


@pytest.mark.timeout(5 * 60)
def test_finite_differences():
    model = build_model(ModelConfig(input_height=64, input_width=64,
                                    stop_gradient_flow=False)).double().eval()
    gen = torch.Generator().manual_seed(0)
    images = torch.rand(1, 1, 64, 64, generator=gen, dtype=torch.float64)
    target = (torch.rand(1, 1, 8, 8, generator=gen) > 0.7).double()
    weights = torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64) + 0.5
    label = torch.tensor([1.0], dtype=torch.float64)

    def loss():
        out = model(images)
        return total_loss(segmentation_loss(out.seg_logits, target, weights),
                          classification_loss(out.cls_logit, label), 0.4, 1, 0.7)

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters() if p.dim() > 1]
    eps = 1e-6
    checked = 0
    for _ in range(20):
        prm = params[torch.randint(len(params), (1,), generator=gen).item()]
        idx = torch.randint(prm.numel(), (1,), generator=gen).item()
        flat = prm.data.view(-1)
        analytic = prm.grad.view(-1)[idx].item()
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + eps
            plus = loss().item()
            flat[idx] = orig - eps
            minus = loss().item()
            flat[idx] = orig
        numeric = (plus-minus) / (2*eps)
        assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric)) + 1e-7
        checked += 1
    assert checked == 20


def test_checkpoint(tmp_path, toy_config):
    model = build_model(toy_config).eval()
    fout = save_checkpoint(model, tmp_path / "model.pt", epoch=3)
    loaded = load_checkpoint(fout, toy_config).eval()
    images = torch.rand(2, 1, 64, 64)
    assert torch.equal(model.score(images), loaded.score(images))

    with pytest.raises(ConfigError, match="does not match"):
        load_checkpoint(fout, ModelConfig(input_height=64, input_width=64, seed=5))
    with pytest.raises(ConfigError, match="not found"):
        load_checkpoint(tmp_path / "missing.pt")
    torch.save({'version': 99, 'config': {}, 'state_dict': {}}, tmp_path / "old.pt")
    with pytest.raises(ConfigError, match="version"):
        load_checkpoint(tmp_path / "old.pt")
