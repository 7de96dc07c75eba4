import numpy as np
import pytest

from mrsynth.dataio import PhantomSpec, Volume, make_phantom_pair
from mrsynth.kspace import UndersampleSpec, undersample_volume
from mrsynth.model import NetworkConfig, Parameter, build_model
from mrsynth.train import (
    Adam,
    OptimizerConfig,
    SliceData,
    StageDependencyError,
    TrainingDivergence,
    batch_loss,
    concat_slices,
    slices_from_volumes,
    stage_spec,
    train_stage,
    train_step,
)

NET = NetworkConfig(base_channels=4, encoder_blocks=2, sbm_depth=2, rm_channels=4)
OPT = OptimizerConfig(learning_rate=1e-3, batch_size=2, seed=3)


def payloads(ckpt, group):
    arrays = ckpt.groups[group]
    return [arrays[name].tobytes() for name in sorted(arrays)]


@pytest.fixture(scope="module")
def data():
    pair = make_phantom_pair(PhantomSpec(seed=0, dims=(6, 16, 16), lesion_count=0))
    us = Volume(undersample_volume(pair.t2.voxels, UndersampleSpec("1/8")))
    return slices_from_volumes(pair.t1, pair.t2, us)


@pytest.fixture(scope="module")
def stages(data):
    s1, h1 = train_stage(stage_spec(1, True), OPT, data, NET, steps=3)
    s2, h2 = train_stage(stage_spec(2, True, s1), OPT, data, NET, steps=3)
    return s1, s2, h1, h2


def test_stage_specs():
    s1 = stage_spec(1, rm_enabled=True)
    assert s1.groups_present == s1.groups_trainable == ("encoder", "decoder", "rm")
    assert stage_spec(1, rm_enabled=False).groups_present == ("encoder", "decoder")
    fake = object()
    s2 = stage_spec(2, True, fake)
    assert s2.groups_present == ("encoder", "sbm1", "decoder", "rm")
    assert s2.groups_trainable == ("sbm1",)
    s3 = stage_spec(3, True, fake, fake)
    assert s3.groups_trainable == ("encoder", "sbm1", "sbm2", "decoder", "rm")
    assert s3.init_from["sbm2"][1] == "sbm1"


def test_stage_dependencies_enforced():
    with pytest.raises(StageDependencyError, match="stage-1"):
        stage_spec(2, True)
    with pytest.raises(StageDependencyError, match="stage-1"):
        stage_spec(3, True, stage2=object())
    with pytest.raises(StageDependencyError, match="stage-2"):
        stage_spec(3, True, stage1=object())


def test_stage2_keeps_stage1_groups_bytewise(stages):
    s1, s2, _, _ = stages
    for g in ("encoder", "decoder", "rm"):
        assert s2.group_bytes(g) == s1.group_bytes(g)
    assert "sbm1" in s2.groups


def test_stage3_copies_then_diverge(stages, data):
    s1, s2, _, _ = stages
    spec = stage_spec(3, True, s1, s2)
    init, _ = train_stage(spec, OPT, data, NET, steps=0)
    assert payloads(init, "sbm1") == payloads(init, "sbm2") == payloads(s2, "sbm1")
    stepped, _ = train_stage(spec, OPT, data, NET, steps=1)
    assert payloads(stepped, "sbm1") != payloads(stepped, "sbm2")


def test_history_finite_and_nonnegative(stages):
    for h in stages[2:]:
        assert len(h) == 3
        assert all(np.isfinite(v) and v >= 0 for v in h)


def test_seeded_training_is_reproducible(data):
    _, a = train_stage(stage_spec(1, True), OPT, data, NET, steps=3)
    _, b = train_stage(stage_spec(1, True), OPT, data, NET, steps=3)
    assert a == b


def test_empty_data_rejected():
    empty = SliceData(np.zeros((0, 3, 16, 16)), np.zeros((0, 3, 16, 16)), np.zeros((0, 1, 16, 16)), None)
    with pytest.raises(ValueError, match="empty"):
        train_stage(stage_spec(1, False), OPT, empty, NET, steps=1)


def test_rm_requires_undersampled_data(data):
    no_us = SliceData(data.t1, data.t2, data.mask, None)
    with pytest.raises(ValueError):
        train_stage(stage_spec(1, True), OPT, no_us, NET, steps=1)


def test_zero_learning_rate_repeats_loss(data):
    model = build_model(NET.replace(sbm_count=0), seed=0)
    opt = Adam(model.parameters(), OptimizerConfig(learning_rate=0.0))
    batch = data.batch(np.array([0, 1]))
    first = train_step(model, batch, opt)
    assert train_step(model, batch, opt) == first


def test_perfect_prediction_zero_loss_and_gradient(data):
    model = build_model(NET.replace(sbm_count=0), seed=0)
    t1, us, _, mask = data.batch(np.array([2]))
    pred = model(t1, us).data
    from mrsynth.preproc import gradient_channels_np

    target = gradient_channels_np(pred)
    loss = batch_loss(model, (t1, us, target, mask))
    assert loss.item() == 0.0
    model.zero_grad()
    loss.backward()
    assert all(np.all(p.grad == 0) for p in model.parameters())


def test_adam_single_step_closed_form():
    w = Parameter(np.array([0.5]), name="w")
    x, t = 2.0, 3.0
    w.grad = np.array([2 * x * (0.5 * x - t)])  # d/dw (w x - t)^2 = -8
    opt = Adam([w], OptimizerConfig(learning_rate=0.1))
    opt.step()
    # bias-corrected moments equal g and g^2 after one step
    expected = 0.5 - 0.1 * (-8.0) / (8.0 + 1e-8)
    assert w.data[0] == pytest.approx(expected, abs=1e-7)


def test_adam_two_steps_closed_form():
    w = Parameter(np.array([1.0], dtype=np.float64))
    opt = Adam([w], OptimizerConfig(learning_rate=0.01))
    g1, g2 = 4.0, -2.0
    w.grad = np.array([g1])
    opt.step()
    w.grad = np.array([g2])
    opt.step()
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1**2 + 0.001 * g2**2
    mhat, vhat = m / (1 - 0.9**2), v / (1 - 0.999**2)
    expected = 1.0 - 0.01 * g1 / (abs(g1) + 1e-8) - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
    assert w.data[0] == pytest.approx(expected, rel=1e-12)


def test_frozen_parameters_get_no_state_or_update():
    a = Parameter(np.ones(3))
    b = Parameter(np.ones(3), frozen=True)
    a.grad = np.ones(3)
    b.grad = np.ones(3)
    before = b.data.tobytes()
    opt = Adam([a, b], OptimizerConfig(learning_rate=0.5))
    opt.step()
    assert b.data.tobytes() == before
    assert id(b) not in opt.state and id(a) in opt.state


def test_divergence_reports_step(data):
    model = build_model(NET.replace(sbm_count=0), seed=0)
    opt = Adam(model.parameters(), OPT)
    t1, us, t2, mask = data.batch(np.array([0, 1]))
    bad = t1.copy()
    bad[0, 0, 3, 3] = np.nan
    with pytest.raises(TrainingDivergence, match="step 7"):
        train_step(model, (bad, us, t2, mask), opt, step=7)


def test_empty_mask_slices_are_skipped():
    t1 = np.ones((3, 8, 8), dtype=np.float32)
    t2 = np.ones((3, 8, 8), dtype=np.float32)
    t2[1] = 0
    data = slices_from_volumes(Volume(t1), Volume(t2))
    assert len(data) == 2
    assert np.all(data.mask.reshape(2, -1).any(axis=1))


def test_concat_requires_consistent_rm_inputs(data):
    no_us = SliceData(data.t1, data.t2, data.mask, None)
    with pytest.raises(ValueError):
        concat_slices([data, no_us])
    assert len(concat_slices([data, data])) == 2 * len(data)


def test_batches_cover_epoch(data):
    stream = data.batches(2, seed=0)
    seen = []
    for _ in range(len(data) // 2):
        seen.append(next(stream)[0])
    assert sum(len(b) for b in seen) == 2 * (len(data) // 2)


def test_reconstruction_zeroes_background_and_clips():
    from mrsynth.train import reconstruct_volume

    pair = make_phantom_pair(PhantomSpec(seed=2, dims=(4, 16, 16), lesion_count=0))
    model = build_model(NET.replace(sbm_count=0, rm_enabled=False), seed=0)
    for p in model.parameters():
        p.data[...] = 0.0
    model.group_parameters("decoder")["decoder.head.bias"].data[...] = 0.5
    out = reconstruct_volume(model, pair.t1).voxels
    inside = pair.t1.voxels > 0
    np.testing.assert_array_equal(out[~inside], 0.0)
    np.testing.assert_allclose(out[inside], 0.5)
    raw = reconstruct_volume(model, pair.t1, mask_background=False).voxels
    np.testing.assert_allclose(raw, 0.5)
    model.group_parameters("decoder")["decoder.head.bias"].data[...] = -0.5
    assert np.all(reconstruct_volume(model, pair.t1).voxels == 0.0)
