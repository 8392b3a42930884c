import math

import numpy as np
import pytest
import torch

from strl import tensor as T
from strl.neural import (
    Actor,
    ActorDims,
    ConfigurationError,
    Critic,
    DegenerateNeighborhoodError,
    Gat,
    Gru,
    MlpHead,
    TemporalAttention,
    Variant,
    critic_forward,
    gat_forward,
    gru_forward,
    reshape_to_nodes,
    temporal_attention,
)
from strl.topology import aarnet, parse_edge_list


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_zero_gru_stays_at_zero():
    gru = Gru(5, 7)
    with torch.no_grad():
        for p in gru.parameters():
            p.zero_()
    X = torch.randn(12, 5, dtype=T.DTYPE)
    assert torch.equal(gru_forward(X, gru), torch.zeros(12, 7, dtype=T.DTYPE))


def test_gru_default_shape():
    assert Gru(5, 95)(torch.zeros(40, 5, dtype=T.DTYPE)).shape == (40, 95)


def test_gru_scalar_step_by_hand():
    gru = Gru(1, 1)
    vals = {"W_z": 0.5, "U_z": -0.3, "W_r": 0.2, "U_r": 0.7, "W": -1.1, "U": 0.4, "b": 0.05}
    with torch.no_grad():
        for name, v in vals.items():
            getattr(gru, name).fill_(v)
    x, h = 0.8, 0.6
    z = sig(0.5 * x - 0.3 * h)
    r = sig(0.2 * x + 0.7 * h)
    cand = math.tanh(-1.1 * x + r * 0.4 * h + 0.05)
    expected = z * h + (1 - z) * cand
    out = gru(T.tensor([[x]]), T.tensor([h]))
    assert out.item() == pytest.approx(expected, abs=1e-14)


def test_gru_rejects_bad_input():
    with pytest.raises(T.ShapeError):
        Gru(3, 4)(torch.zeros(5, 2, dtype=T.DTYPE))


def test_attention_single_step():
    att = TemporalAttention(4, 3, 3, 4, 4, seed=1)
    H = torch.randn(1, 4, dtype=T.DTYPE)
    out, alpha = temporal_attention(H, att)
    assert alpha.item() == 1.0
    expected = (H * (H @ att.W_V.T)) @ att.W_A.T
    assert torch.allclose(out, expected, atol=1e-14)


def test_attention_uniform_on_identical_states():
    att = TemporalAttention(4, 3, 3, 4, 4, seed=2)
    H = torch.randn(1, 4, dtype=T.DTYPE).repeat(6, 1)
    _, alpha = temporal_attention(H, att)
    for i in range(6):
        np.testing.assert_allclose(alpha[i, : i + 1].detach().numpy(), 1.0 / (i + 1), atol=1e-14)
        assert torch.all(alpha[i, i + 1:] == 0)


def test_attention_weights_by_hand():
    att = TemporalAttention(2, 2, 2, 2, 2, seed=0)
    with torch.no_grad():
        att.W_Q.copy_(T.tensor([[1.0, 0.5], [0.0, -1.0]]))
        att.W_K.copy_(T.tensor([[0.3, 0.2], [1.0, 0.1]]))
    H = np.array([[0.1, 0.4], [-0.5, 0.2], [0.9, -0.3]])
    Q = H @ np.array([[1.0, 0.5], [0.0, -1.0]]).T
    K = H @ np.array([[0.3, 0.2], [1.0, 0.1]]).T
    expected = np.zeros((3, 3))
    for i in range(3):
        logits = [Q[i] @ K[j] for j in range(i + 1)]
        m = max(logits)
        e = [math.exp(l - m) for l in logits]
        expected[i, : i + 1] = [v / sum(e) for v in e]
    _, alpha = temporal_attention(T.tensor(H), att)
    np.testing.assert_allclose(alpha.detach().numpy(), expected, atol=1e-14)


def test_attention_dimension_checks():
    with pytest.raises(ConfigurationError):
        TemporalAttention(4, 3, 2, 4, 4)
    with pytest.raises(ConfigurationError):
        TemporalAttention(4, 3, 3, 5, 4)


def test_reshape_identity_layout():
    S, dp, N, K = 2, 6, 3, 4
    flat = torch.arange(S * dp, dtype=T.DTYPE)
    out = reshape_to_nodes(flat.reshape(S, dp), torch.eye(N * K, dtype=T.DTYPE), N, K)
    for i in range(N):
        for k in range(K):
            assert out[i, k].item() == flat[i * K + k].item()


def test_reshape_zero_and_shape():
    proj = T.xavier_uniform((17 * 5, 41 * 95), 0)
    assert torch.equal(reshape_to_nodes(torch.zeros(41, 95, dtype=T.DTYPE), proj, 17, 5),
                       torch.zeros(17, 5, dtype=T.DTYPE))
    with pytest.raises(T.ShapeError):
        reshape_to_nodes(torch.zeros(40, 95, dtype=T.DTYPE), proj, 17, 5)


def test_gat_single_neighbor_gets_full_weight():
    gat = Gat(2, 2, self_loops=False)
    adj = torch.tensor([[0, 1], [1, 0]])
    _, alpha = gat_forward(torch.randn(2, 2, dtype=T.DTYPE), adj, gat)
    assert alpha[0].tolist() == [0.0, 1.0]


def test_gat_symmetric_neighbors_split_evenly():
    gat = Gat(2, 2, self_loops=False, seed=4)
    adj = torch.tensor([[0, 1, 1], [1, 0, 0], [1, 0, 0]])
    x = T.tensor([[0.3, -0.2], [1.0, 2.0], [1.0, 2.0]])
    _, alpha = gat_forward(x, adj, gat)
    assert alpha[0, 1].item() == pytest.approx(0.5, abs=1e-15)
    assert alpha[0, 2].item() == pytest.approx(0.5, abs=1e-15)


def test_gat_path_graph_by_hand():
    gat = Gat(1, 1, slope=0.2)
    w, a1, a2 = 0.7, 0.9, -0.4
    with torch.no_grad():
        gat.W.fill_(w)
        gat.a.copy_(T.tensor([a1, a2]))
    xs = [0.5, -1.2, 2.0]
    adj = torch.tensor([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    out, alpha = gat_forward(T.tensor([[v] for v in xs]), adj, gat)
    z = [w * v for v in xs]
    lrelu = lambda v: v if v > 0 else 0.2 * v
    elu = lambda v: v if v > 0 else math.exp(v) - 1
    for i in range(3):
        nbrs = [j for j in range(3) if j == i or adj[i, j]]
        e = {j: math.exp(lrelu(a1 * z[i] + a2 * z[j])) for j in nbrs}
        tot = sum(e.values())
        for j in range(3):
            assert alpha[i, j].item() == pytest.approx(e.get(j, 0.0) / tot, abs=1e-14)
        assert out[i, 0].item() == pytest.approx(elu(sum(e[j] / tot * z[j] for j in nbrs)), abs=1e-14)


def test_gat_isolated_node_without_self_loops_rejected():
    gat = Gat(2, 2, self_loops=False)
    with pytest.raises(DegenerateNeighborhoodError):
        gat(torch.zeros(2, 2, dtype=T.DTYPE), torch.zeros(2, 2))


def _dims(topo, **kw):
    base = dict(n_nodes=topo.n, max_degree=topo.max_degree(), window=6, hidden=8, d_q=8,
                d_k=8, d_v=8, d_out=8, mlp_hidden=16)
    return ActorDims(**{**base, **kw})


def _actor(variant="STRL", seed=0, **kw):
    topo = aarnet()
    actor = Actor(_dims(topo, **kw), variant, seed)
    actor.set_adjacency(topo.adjacency)
    return actor


def test_actor_output_length_and_determinism():
    actor = _actor()
    state = torch.rand(actor.dims.state_shape, dtype=T.DTYPE)
    a = actor(state)
    assert a.shape == (17,)
    assert torch.equal(a, actor(state))


def test_actor_batched_matches_single():
    actor = _actor()
    states = torch.rand((3,) + actor.dims.state_shape, dtype=T.DTYPE)
    batched = actor(states)
    for i in range(3):
        assert torch.allclose(batched[i], actor(states[i]), atol=1e-12)


def test_actor_dropout_only_in_train_mode():
    actor = _actor()
    state = torch.rand(actor.dims.state_shape, dtype=T.DTYPE)
    g1, g2 = torch.Generator().manual_seed(1), torch.Generator().manual_seed(1)
    assert torch.equal(actor(state, True, g1), actor(state, True, g2))
    assert not torch.equal(actor(state, True, torch.Generator().manual_seed(2)), actor(state))


def test_srl_matches_strl_on_zero_history():
    strl, srl = _actor("STRL", 3), _actor("SRL", 3)
    zero = torch.zeros(strl.dims.state_shape, dtype=T.DTYPE)
    assert torch.equal(strl.node_features(zero), srl.node_features(zero))
    assert torch.equal(strl(zero), srl(zero))


def test_variant_parameter_sets():
    names = {v: {n for n, _ in _actor(v).named_parameters()} for v in Variant}
    assert any(n.startswith("gat.") for n in names[Variant.STRL])
    assert not any(n.startswith("gat.") for n in names[Variant.TRL])
    assert not any(n.startswith(("gru.", "attn.")) for n in names[Variant.SRL])
    assert any(n.startswith("gru.") for n in names[Variant.TRL])


def test_shared_parameters_identical_across_variants():
    strl, trl = dict(_actor("STRL", 5).named_parameters()), dict(_actor("TRL", 5).named_parameters())
    assert torch.equal(strl["gru.W_z"], trl["gru.W_z"])
    assert torch.equal(strl["attn.W_Q"], trl["attn.W_Q"])


def test_actor_accepts_mutated_adjacency():
    from strl.topology import apply_mutation, armidale_mutation

    actor = _actor()
    state = torch.rand(actor.dims.state_shape, dtype=T.DTYPE)
    before = actor(state)
    actor.set_adjacency(apply_mutation(aarnet(), armidale_mutation()).adjacency)
    assert not torch.equal(before, actor(state))
    with pytest.raises(T.ShapeError):
        actor.set_adjacency(np.zeros((3, 3)))


def test_actor_rejects_wrong_state_shape():
    actor = _actor()
    with pytest.raises(T.ShapeError):
        actor(torch.zeros(17, 3, 7, dtype=T.DTYPE))


def test_paper_scale_actor_shape():
    topo = aarnet()
    actor = Actor(ActorDims(topo.n, topo.max_degree()), "STRL", 0)
    actor.set_adjacency(topo.adjacency)
    assert actor.dims.state_shape == (17, topo.max_degree() + 1, 41)
    assert actor(torch.zeros(actor.dims.state_shape, dtype=T.DTYPE)).shape == (17,)


def test_critic_zero_final_layer():
    critic = Critic((4, 3, 5), 4, hidden=8, zero_final=True)
    for s in range(5):
        g = torch.Generator().manual_seed(s)
        q = critic_forward(torch.rand(4, 3, 5, generator=g, dtype=T.DTYPE),
                           torch.randn(4, generator=g, dtype=T.DTYPE), critic)
        assert q.item() == 0.0


def test_critic_action_gradient_matches_finite_differences():
    critic = Critic((4, 3, 5), 4, hidden=8, seed=2)
    state = torch.rand(4, 3, 5, dtype=T.DTYPE)
    action = torch.randn(4, dtype=T.DTYPE, requires_grad=True)
    assert T.finite_difference_check(lambda: critic(state, action), [action]) <= 1e-4


def test_critic_finite_over_seeds():
    critic = Critic((17, 6, 11), 17, hidden=32, seed=1)
    for s in range(100):
        g = torch.Generator().manual_seed(s)
        state = torch.rand(17, 6, 11, generator=g, dtype=T.DTYPE) * 10 ** (s % 6)
        action = torch.randn(17, generator=g, dtype=T.DTYPE) * 10
        assert torch.isfinite(critic(state, action)).all()


def test_mlp_head_layer_count():
    head = MlpHead(10, 6, 3, layers=3)
    assert len(head.weights) == 3
    assert head(torch.zeros(10, dtype=T.DTYPE)).shape == (3,)


def test_edge_list_helper_used_in_gat():
    topo = parse_edge_list("a b\nb c\n")
    gat = Gat(2, 2)
    out = gat(torch.randn(3, 2, dtype=T.DTYPE), torch.as_tensor(np.array(topo.adjacency)))
    assert out.shape == (3, 2)
