import pytest
import torch

from ibcln.model import (
    IBCLN,
    CascadeState,
    ConvLSTMCell,
    SubnetConfig,
    build_discriminator,
    build_subnet,
    cascade_forward,
    count_parameters,
    discriminate,
    subnet_step,
)

SMALL = SubnetConfig(base_channels=4, lstm_channels=8)


@pytest.fixture
def nets():
    torch.manual_seed(0)
    return build_subnet(SMALL).eval(), build_subnet(SMALL).eval()


def test_config_rejects_other_layouts():
    with pytest.raises(ValueError):
        SubnetConfig(encoder_blocks=10)
    with pytest.raises(ValueError):
        SubnetConfig(base_channels=0)


def test_default_widths():
    assert SubnetConfig().encoder_widths == [64, 64, 64, 128, 128, 128, 128, 256, 256, 256, 256]


def test_subnet_layer_counts():
    net = build_subnet(SMALL)
    assert len(net.encoder) == 11
    decoder = [net.dec1, net.dec2, net.dec3, net.dec4, net.dec5, net.dec6, net.dec7, net.dec8]
    assert len(decoder) == 8
    assert net.encoder[0][0].in_channels == 9
    assert net.dec8.out_channels == 3


def test_twin_subnets_same_size(nets):
    G_T, G_R = nets
    assert count_parameters(G_T) == count_parameters(G_R)
    assert any(not torch.equal(a, b) for a, b in zip(G_T.parameters(), G_R.parameters()))


def test_multiscale_shapes(nets):
    G_T, _ = nets
    out, state, (half, quarter) = G_T(torch.rand(1, 9, 64, 64))
    assert out.shape == (1, 3, 64, 64)
    assert half.shape == (1, 3, 32, 32)
    assert quarter.shape == (1, 3, 16, 16)
    assert state.hidden.shape == state.cell.shape == (1, 8, 16, 16)


def test_rejects_wrong_channels(nets):
    with pytest.raises(ValueError):
        nets[0](torch.rand(1, 6, 32, 32))


def test_lstm_gate_ranges():
    torch.manual_seed(1)
    cell = ConvLSTMCell(5, 6)
    x = torch.randn(2, 5, 8, 8)
    i, f, o, g = cell.gate_values(x, cell.zero_state(x))
    for gate in (i, f, o):
        assert gate.min() > 0 and gate.max() < 1
    assert g.min() > -1 and g.max() < 1


def test_zero_state_equals_no_state(nets):
    G_T, _ = nets
    x = torch.rand(1, 9, 32, 32)
    a = G_T(x)[0]
    hidden = torch.zeros(1, 8, 8, 8)
    b = G_T(x, CascadeState(hidden, hidden.clone()))[0]
    assert torch.equal(a, b)


def test_state_shapes_must_agree():
    with pytest.raises(ValueError):
        CascadeState(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 4, 4))


class TestSubnetStep:
    def test_finite_at_first_step(self, nets):
        I = torch.rand(1, 3, 32, 32)
        pred, state, _ = subnet_step(nets[0], I, I, torch.full_like(I, 0.1))
        assert torch.isfinite(pred).all()
        assert torch.isfinite(state.cell).all()

    def test_pure(self, nets):
        I = torch.rand(1, 3, 32, 32)
        a = subnet_step(nets[0], I, I, torch.full_like(I, 0.1))[0]
        b = subnet_step(nets[0], I, I, torch.full_like(I, 0.1))[0]
        assert torch.equal(a, b)

    def test_sensitive_to_reflection_input(self, nets):
        I = torch.rand(1, 3, 32, 32)
        a = subnet_step(nets[0], I, I, torch.full_like(I, 0.1))[0]
        b = subnet_step(nets[0], I, I, torch.full_like(I, 0.1) + 0.05 * torch.rand_like(I))[0]
        assert (a - b).abs().max() > 1e-6

    def test_spatial_mismatch(self, nets):
        with pytest.raises(ValueError):
            subnet_step(nets[0], torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32), torch.rand(1, 3, 16, 16))


class TestCascade:
    def test_first_step_inputs(self, nets):
        G_T, G_R = nets
        I = torch.rand(1, 3, 32, 32)
        trace = cascade_forward(G_T, G_R, I, 1)
        assert len(trace.transmissions) == len(trace.residuals) == 1
        x = torch.cat([I, I, torch.full_like(I, 0.1)], dim=1)
        assert torch.equal(trace.transmissions[0], G_T(x)[0])
        assert torch.equal(trace.residuals[0], G_R(x)[0])

    def test_lengths_and_shapes(self, nets):
        trace = cascade_forward(*nets, torch.rand(1, 3, 64, 64), 3)
        assert len(trace.transmissions) == len(trace.residuals) == 3
        assert all(t.shape == (1, 3, 64, 64) for t in trace.transmissions + trace.residuals)
        assert [m.shape[-1] for m in trace.multiscale] == [64, 32, 16]
        assert torch.equal(trace.final, trace.transmissions[2])

    def test_feedback(self, nets):
        G_T, G_R = nets
        I = torch.rand(1, 3, 32, 32)
        trace = cascade_forward(G_T, G_R, I, 2)
        out1, state, _ = G_T(torch.cat([I, I, torch.full_like(I, 0.1)], 1))
        x2 = torch.cat([I, trace.transmissions[0], trace.residuals[0]], 1)
        assert torch.equal(trace.transmissions[1], G_T(x2, state)[0])

    def test_rejects_zero_steps(self, nets):
        with pytest.raises(ValueError):
            cascade_forward(*nets, torch.rand(1, 3, 32, 32), 0)

    def test_non_multiple_of_four(self, nets):
        trace = cascade_forward(*nets, torch.rand(1, 3, 30, 21), 2)
        assert trace.final.shape == (1, 3, 30, 21)
        assert trace.multiscale[1].shape[-2:] == (15, 11)
        assert trace.multiscale[2].shape[-2:] == (8, 6)

    def test_parameter_count_independent_of_steps(self):
        counts = set()
        for n in (1, 2, 3, 5):
            torch.manual_seed(0)
            counts.add(count_parameters(IBCLN(SMALL, n)))
        assert len(counts) == 1

    def test_without_reflection_net(self):
        torch.manual_seed(0)
        model = IBCLN(SMALL, 3, use_reflection_net=False)
        trace = model(torch.rand(1, 3, 32, 32))
        assert len(trace.transmissions) == 3 and trace.residuals == []
        assert count_parameters(model) < count_parameters(IBCLN(SMALL, 3))

    def test_gradient_reaches_first_step(self):
        torch.manual_seed(0)
        model = IBCLN(SMALL, 3)
        I = torch.rand(1, 3, 32, 32, requires_grad=True)
        seen = {}

        def hook(module, args):
            if "x" not in seen:
                args[0].retain_grad()
                seen["x"] = args[0]

        handle = model.G_T.encoder[0].register_forward_pre_hook(hook)
        trace = model(I)
        handle.remove()
        trace.transmissions[2].square().mean().backward()
        assert seen["x"].grad is not None and seen["x"].grad.abs().sum() > 0


class TestDiscriminator:
    def test_scores_in_unit_interval(self):
        torch.manual_seed(0)
        D = build_discriminator((8, 8, 8, 8))
        s = discriminate(D, torch.rand(2, 3, 64, 64), 5 * torch.randn(2, 3, 64, 64))
        assert s.min() > 0 and s.max() < 1

    def test_shape(self):
        D = build_discriminator()
        s = discriminate(D, torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64))
        assert D.stride == 16
        assert s.shape == (1, 1, 4, 4)

    def test_small_input(self):
        D = build_discriminator((8, 8, 8, 8))
        assert D(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)).shape == (1, 1, 1, 1)

    def test_deterministic(self):
        D = build_discriminator((8, 8, 8, 8)).eval()
        a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
        assert torch.equal(D(a, b), D(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            build_discriminator((8, 8, 8, 8))(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 16, 16))
