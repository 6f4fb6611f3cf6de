import numpy as np
import numpy.testing as npt
import pytest

from wxpower import models as M
from wxpower import tensor as T
from wxpower.layers import Rng

from fd import numeric_grad, max_rel_err

GRAD_TOL = 1e-5


def tiny_resnet_spec(dtype_hw=(16, 16), channels=2):
    return M.ArchitectureSpec("resnet", channels, dtype_hw, outputs=2,
                              stem_width=8, stage_blocks=(1, 1),
                              stage_widths=(8, 8), head_hidden=4)


# ---------------------------------------------------------------------------
# architecture spec

def test_spec_text_roundtrip():
    spec = tiny_resnet_spec()
    again = M.ArchitectureSpec.from_text(spec.to_text())
    assert again == spec
    lin = M.ArchitectureSpec("linear", 6, (8, 9), fc_widths=(16, 8), dropout_p=0.1)
    assert M.ArchitectureSpec.from_text(lin.to_text()) == lin


def test_spec_validation():
    with pytest.raises(ValueError):
        M.ArchitectureSpec("dense", 6)
    with pytest.raises(ValueError):
        M.ArchitectureSpec("linear", 0)
    with pytest.raises(ValueError):
        M.ArchitectureSpec("linear", 6, fc_widths=())
    with pytest.raises(ValueError):
        M.ArchitectureSpec("resnet", 6, stage_widths=(64, 127, 256, 512))
    with pytest.raises(ValueError):
        M.ArchitectureSpec("resnet", 6, stage_blocks=(3, 3), stage_widths=(64,))
    with pytest.raises(ValueError):
        M.ArchitectureSpec.from_text("family=linear\ninput_channels=6\nbogus=1\n")


def test_resnet_rejects_too_small_grid():
    # stem halves 2x2 to 1x1 and the inter-stage pool cannot run
    with pytest.raises(ValueError):
        M.build_model(tiny_resnet_spec(dtype_hw=(2, 2)), Rng(0))


# ---------------------------------------------------------------------------
# parameter counts (hand-computed totals)

def test_linear_param_count_single_frame():
    model = M.build_linear(6, Rng(0))
    assert M.param_count(model) == 60_017_802


def test_resnet_param_count_single_frame():
    model = M.build_resnet(6, Rng(0))
    assert M.param_count(model) == 947_010


def test_resnet_param_count_stacked():
    model = M.build_resnet(30, Rng(0))
    # only the stem kernel widens: + (30-6)*32*49 entries
    assert M.param_count(model) == 947_010 + 24 * 32 * 49


def test_resnet_is_far_smaller_than_linear():
    assert 947_010 * 50 < 60_017_802


def test_resnet_conv_and_bn_inventory():
    model = M.build_resnet(6, Rng(0))
    kernels = [k for k in model.params if k.endswith(".kernel")]
    assert len(kernels) == 35  # stem + 30 block convs + 4 projections
    gammas = [k for k in model.params if k.endswith(".gamma")]
    assert len(gammas) == 35
    assert len(model.buffers) == 70  # mean+var per batchnorm
    fcs = [k for k in model.params if k.endswith(".weight")]
    assert len(fcs) == 2


def test_projection_exactly_at_width_changes():
    model = M.build_resnet(6, Rng(0))
    projs = sorted(k for k in model.params if k.endswith("proj.kernel"))
    assert projs == ["s1.b1.proj.kernel", "s2.b1.proj.kernel",
                     "s3.b1.proj.kernel", "s4.b1.proj.kernel"]


def test_param_count_small_linear_formula():
    model = M.build_linear(2, Rng(0), input_hw=(5, 4), fc_widths=(8, 4), outputs=2)
    expect = (8 * 40 + 8) + (4 * 8 + 4) + (2 * 4 + 2)
    assert M.param_count(model) == expect


# ---------------------------------------------------------------------------
# init determinism

def test_same_seed_same_weights():
    a = M.build_resnet(2, Rng(7), input_hw=(16, 16), stem_width=8,
                       stage_blocks=(1, 1), stage_widths=(8, 8), head_hidden=4)
    b = M.build_resnet(2, Rng(7), input_hw=(16, 16), stem_width=8,
                       stage_blocks=(1, 1), stage_widths=(8, 8), head_hidden=4)
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        npt.assert_array_equal(a.params[k].data, b.params[k].data)


def test_conv_biases_zero_fc_biases_zero():
    model = M.build_resnet(2, Rng(3), input_hw=(16, 16), stem_width=8,
                           stage_blocks=(1, 1), stage_widths=(8, 8), head_hidden=4)
    for name, p in model.params.items():
        if name.endswith(".bias"):
            npt.assert_array_equal(p.data, 0.0)


# ---------------------------------------------------------------------------
# forward

def test_linear_forward_matches_numpy_eval():
    model = M.build_linear(2, Rng(5), input_hw=(4, 4), fc_widths=(8, 4),
                           outputs=2, dtype=np.float64).eval()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 2, 4, 4))
    out = M.model_forward(model, T.from_array(x, dtype=np.float64))
    h = x.reshape(3, -1)
    for i in (1, 2, 3):
        w = model.params[f"fc{i}.weight"].data
        b = model.params[f"fc{i}.bias"].data
        h = np.maximum(h @ w.T + b, 0.0)
    npt.assert_allclose(out.data, h, atol=1e-12)


def test_outputs_nonnegative_both_families():
    rng = np.random.default_rng(1)
    lin = M.build_linear(2, Rng(1), input_hw=(6, 6), fc_widths=(16, 8)).eval()
    x = T.from_array(rng.normal(size=(4, 2, 6, 6)).astype(np.float32))
    assert M.model_forward(lin, x).data.min() >= 0.0
    res = M.build_model(tiny_resnet_spec(), Rng(1)).eval()
    x2 = T.from_array(rng.normal(size=(4, 2, 16, 16)).astype(np.float32))
    assert M.model_forward(res, x2).data.min() >= 0.0


def test_resnet_forward_shape_full_geometry():
    # full-size spatial plan at reduced widths to keep it quick
    model = M.build_resnet(6, Rng(2), stem_width=8, stage_blocks=(1, 1, 1, 1),
                           stage_widths=(8, 8, 8, 8), head_hidden=4).eval()
    x = T.create([1, 6, 115, 108], 0.1)
    out = M.model_forward(model, x)
    assert out.shape == (1, 2)


def test_forward_rejects_wrong_shape():
    model = M.build_model(tiny_resnet_spec(), Rng(0)).eval()
    with pytest.raises(T.ShapeError):
        M.model_forward(model, T.create([1, 3, 16, 16], 0.0))
    with pytest.raises(T.ShapeError):
        M.model_forward(model, T.create([1, 2, 8, 16], 0.0))


def test_linear_train_forward_needs_rng():
    model = M.build_linear(2, Rng(0), input_hw=(4, 4), fc_widths=(4,)).train()
    x = T.create([2, 2, 4, 4], 1.0)
    with pytest.raises(ValueError):
        M.model_forward(model, x)
    out = M.model_forward(model, x, rng=Rng(1))
    assert out.shape == (2, 2)


def test_eval_forward_is_repeatable_and_pure():
    model = M.build_model(tiny_resnet_spec(), Rng(4)).eval()
    x = T.from_array(np.random.default_rng(2).normal(size=(2, 2, 16, 16)).astype(np.float32))
    before = {k: v.data.copy() for k, v in model.buffers.items()}
    a = M.model_forward(model, x)
    b = M.model_forward(model, x)
    npt.assert_array_equal(a.data, b.data)
    for k, v in model.buffers.items():
        npt.assert_array_equal(v.data, before[k])


def test_train_forward_updates_bn_buffers():
    model = M.build_model(tiny_resnet_spec(), Rng(4)).train()
    x = T.from_array(np.random.default_rng(3).normal(size=(2, 2, 16, 16)).astype(np.float32))
    before = model.buffers["stem.bn.running_mean"].data.copy()
    M.model_forward(model, x)
    assert not np.array_equal(model.buffers["stem.bn.running_mean"].data, before)


def test_resnet_gradients_match_fd():
    spec = tiny_resnet_spec(dtype_hw=(8, 8))
    x = np.random.default_rng(8).normal(size=(2, 2, 8, 8))

    def fresh():
        m = M.build_model(spec, Rng(11), dtype=np.float64).eval()
        return m

    # spot-check three parameters end to end in eval mode (pure function)
    for pname in ["head.fc2.weight", "stem.conv.bias", "s2.b1.bn3.gamma"]:
        model = fresh()
        xt = T.from_array(x, dtype=np.float64)
        with T.Tape() as tape:
            out = M.model_forward(model, xt)
            T.reduce_sum(out)
            T.backward(tape, T.create([1], 1.0, dtype=np.float64))
        analytic = model.params[pname].grad
        base = model.params[pname].data.copy()

        def f(pv):
            m2 = fresh()
            m2.params[pname].data[...] = pv
            o = M.model_forward(m2, T.from_array(x, dtype=np.float64))
            return float(o.data.sum())

        numeric = numeric_grad(f, [base], 0)
        assert max_rel_err(analytic, numeric) < GRAD_TOL, pname


def test_input_gradient_flows_to_leaf():
    model = M.build_model(tiny_resnet_spec(), Rng(6), dtype=np.float64).eval()
    x = T.from_array(np.random.default_rng(5).normal(size=(1, 2, 16, 16)),
                     dtype=np.float64, requires_grad=True)
    with T.Tape() as tape:
        T.reduce_sum(M.model_forward(model, x))
        T.backward(tape, T.create([1], 1.0, dtype=np.float64))
    assert x.grad is not None
    assert x.grad.shape == x.shape
    assert np.abs(x.grad).max() > 0.0


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = M.build_model(tiny_resnet_spec(), Rng(9))
    # move the buffers off their init values first
    x = T.from_array(np.random.default_rng(4).normal(size=(2, 2, 16, 16)).astype(np.float32))
    M.model_forward(model.train(), x)
    path = tmp_path / "m.wxpm"
    M.save_checkpoint(model, path)
    loaded = M.load_checkpoint(path)
    assert loaded.spec == model.spec
    assert loaded.mode == "eval"
    assert loaded.params.keys() == model.params.keys()
    for k in model.params:
        npt.assert_array_equal(loaded.params[k].data, model.params[k].data)
    for k in model.buffers:
        npt.assert_array_equal(loaded.buffers[k].data, model.buffers[k].data)
    out_a = M.model_forward(model.eval(), x)
    out_b = M.model_forward(loaded, x)
    npt.assert_array_equal(out_a.data, out_b.data)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.wxpm"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(p)


def test_checkpoint_rejects_truncation(tmp_path):
    model = M.build_model(tiny_resnet_spec(), Rng(9))
    p = tmp_path / "m.wxpm"
    M.save_checkpoint(model, p)
    whole = p.read_bytes()
    p.write_bytes(whole[:len(whole) // 2])
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(p)


def test_checkpoint_rejects_trailing_bytes(tmp_path):
    model = M.build_model(tiny_resnet_spec(), Rng(9))
    p = tmp_path / "m.wxpm"
    M.save_checkpoint(model, p)
    p.write_bytes(p.read_bytes() + b"x")
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(p)


def test_checkpoint_refuses_float64_model(tmp_path):
    model = M.build_model(tiny_resnet_spec(), Rng(9), dtype=np.float64)
    with pytest.raises(ValueError):
        M.save_checkpoint(model, tmp_path / "m.wxpm")
