import numpy as np
import pytest
from dataclasses import replace

from hasa.autodiff.optim import Adam
from hasa.autodiff.tensor import Tensor, backward
from hasa.cell import CellGenotype, Genotype
from hasa.errors import AssemblyError, ConfigError
from hasa.losses import cross_entropy_loss
from hasa.model import (
    Backbone,
    BackboneClassifier,
    BackboneSpec,
    ModelSpec,
    HybridModel,
    StageSpec,
    _pretext_state,
    build_backbone,
    build_classifier,
    build_segmenter,
    default_reductions,
    profile_stages,
)
from hasa.ops import OpKind
from hasa.pipeline import random_genotype

SPEC32 = BackboneSpec(pretext_steps=2, image_size=32)
SEG32 = BackboneSpec(pretext_steps=2, image_size=32, pretext_corpus="segmentation")


def uniform(kind, reduction=False):
    return CellGenotype(tuple(((0, kind), (1, kind)) for _ in range(4)), reduction)


SEP = Genotype(uniform(OpKind.SEP_CONV_3X3), uniform(OpKind.SEP_CONV_3X3, True))
SKIP = Genotype(uniform(OpKind.SKIP_CONNECT), uniform(OpKind.SKIP_CONNECT, True))


@pytest.fixture(scope="module")
def bb():
    return build_backbone(SPEC32)


def test_downsample_product():
    spec = BackboneSpec()
    assert spec.cumulative_downsample(2) == 4 == 2 * 2
    assert spec.cumulative_downsample(3) == 8
    assert all(spec.cumulative_downsample(k) & (spec.cumulative_downsample(k) - 1) == 0 for k in range(1, 6))
    with pytest.raises(ConfigError):
        BackboneSpec(stages=(StageSpec(8, downsample=3),))


def test_pretext_is_deterministic():
    a = _pretext_state.__wrapped__(SPEC32)
    b = _pretext_state.__wrapped__(SPEC32)
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    c = _pretext_state.__wrapped__(replace(SPEC32, pretext_seed=1))
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_pretext_disabled_needs_checkpoint():
    with pytest.raises(ConfigError):
        build_backbone(replace(SPEC32, pretext=False))
    state = build_backbone(SPEC32).state_dict()
    net = build_backbone(replace(SPEC32, pretext=False), stem_state=state)
    assert all(np.array_equal(net.state_dict()[k], state[k]) for k in state)


def test_frozen_parameters_survive_training(bb):
    model = build_classifier(bb, SEP, 3, 4, 9)
    frozen = {p.name: p.data.copy() for p in model.frozen_parameters()}
    assert frozen and all(p.frozen for s in model.backbone.stages for p in s.parameters())
    trainable = [p for p in model.parameters() if not p.frozen]
    opt = Adam(trainable, lr=1e-2)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 1, 32, 32)).astype(np.float32)
    y = rng.integers(0, 9, size=4)
    first = None
    for _ in range(100):
        loss = cross_entropy_loss(model(Tensor(x)), y)
        backward(loss, trainable)
        opt.step()
        first = float(loss.data) if first is None else first
    assert float(loss.data) < first
    for p in model.frozen_parameters():
        assert np.array_equal(p.data, frozen[p.name])


def test_classifier_logits_shape(bb):
    model = build_classifier(bb, SEP, 3, 4, 9)
    assert model(Tensor(np.zeros((2, 1, 32, 32), dtype=np.float32))).shape == (2, 9)
    assert model.spec.reductions == default_reductions(3, 2) == (0, 1)


def test_classifier_shape_holds_for_other_sizes(bb):
    model = build_classifier(bb, SKIP, 4, 4, 9)
    for size in (32, 64):
        assert model(Tensor(np.zeros((1, 1, size, size), dtype=np.float32))).shape == (1, 9)


def test_param_count_increases_with_cells(bb):
    counts = [build_classifier(bb, SEP, n, 4, 9).param_count() for n in range(3, 10)]
    assert all(b > a for a, b in zip(counts, counts[1:]))


def test_stage5_only_variant():
    spec = replace(SPEC32, frozen_through=4)
    model = build_classifier(build_backbone(spec), SEP, 3, 4, 9)
    assert len(model.backbone.stages) == 4
    assert sum(c.reduction for c in model.stack.cells) == 1
    assert model(Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32))).shape == (1, 9)


def test_classifier_assembly_errors(bb):
    with pytest.raises(AssemblyError):
        build_classifier(bb, SEP, 1, 4, 9)
    with pytest.raises(AssemblyError):
        build_classifier(bb, SEP, 3, 4, 9, reductions=(5,))
    with pytest.raises(AssemblyError):
        HybridModel(ModelSpec("classification", SPEC32), bb)
    with pytest.raises(AssemblyError):
        HybridModel(ModelSpec("detection", SPEC32), bb, SEP)


def test_identical_seeds_identical_initialisation(bb):
    a = build_classifier(bb, SEP, 3, 4, 9, seed=5).state_dict()
    b = build_classifier(bb, SEP, 3, 4, 9, seed=5).state_dict()
    c = build_classifier(bb, SEP, 3, 4, 9, seed=6).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a if not k.startswith("backbone"))


@pytest.fixture(scope="module")
def seg_bb():
    return build_backbone(SEG32)


def test_segmenter_output_resolution(seg_bb):
    for geno in (SEP, SKIP):
        model = build_segmenter(seg_bb, Genotype(geno.normal), 2, 4)
        assert len(model.blocks) == 2
        out = model(Tensor(np.zeros((2, 1, 32, 32), dtype=np.float32)))
        assert out.shape == (2, 3, 32, 32)


def test_segmenter_64(seg_bb):
    model = build_segmenter(build_backbone(replace(SEG32, image_size=64)), Genotype(SEP.normal), 2, 4)
    assert model(Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32))).shape == (1, 3, 64, 64)


def test_segmenter_tap_mismatch():
    spec = BackboneSpec(stages=(StageSpec(8), StageSpec(16, downsample=1), StageSpec(32)), frozen_through=3,
                        pretext_steps=1, image_size=32)
    with pytest.raises(AssemblyError):
        build_segmenter(build_backbone(spec), Genotype(SEP.normal), 2, 4)


# ---------------------------------------------------------------- profiling


def test_profile_partition(bb):
    model = build_classifier(bb, SEP, 5, 4, 9)
    prof = profile_stages(model, np.zeros((1, 1, 32, 32), dtype=np.float32))
    assert prof.total_params == model.param_count()
    assert [r["name"] for r in prof.rows][:3] == ["stage1", "stage2", "stage3"]
    assert all(r["activation_bytes"] >= 0 for r in prof.rows)
    assert prof.to_dict()["total_params"] == sum(r["params"] for r in prof.rows)


def test_profile_segmenter_partition(seg_bb):
    model = build_segmenter(seg_bb, Genotype(SEP.normal), 2, 4, cells_per_block=2)
    prof = profile_stages(model, np.zeros((1, 1, 32, 32), dtype=np.float32))
    assert prof.total_params == model.param_count()


def test_profile_without_cells_is_backbone_and_head(bb):
    full = build_backbone(replace(SPEC32, frozen_through=5))
    prof = profile_stages(BackboneClassifier(full, 9), np.zeros((1, 1, 32, 32), dtype=np.float32))
    assert [r["name"] for r in prof.rows] == ["stage1", "stage2", "stage3", "stage4", "stage5", "head"]


def test_profile_of_toy_model_matches_hand_count():
    spec = BackboneSpec(stages=(StageSpec(4, res_blocks=0), StageSpec(6, res_blocks=0)), frozen_through=2,
                        pretext_steps=1, image_size=16)
    net = Backbone(spec, np.random.default_rng(0))
    model = BackboneClassifier(net, 3)
    prof = profile_stages(model, np.zeros((1, 1, 16, 16), dtype=np.float32))
    # conv 3x3 without bias + norm scale/shift; dense with bias
    expected = {"stage1": 1 * 4 * 9 + 2 * 4, "stage2": 4 * 6 * 9 + 2 * 6, "head": 6 * 3 + 3}
    assert {r["name"]: r["params"] for r in prof.rows} == expected
    # stage1: conv, norm and relu outputs at 8x8x4, float32
    assert prof.rows[0]["activation_bytes"] == 3 * 4 * 8 * 8 * 4


def test_replacing_deep_stages_saves_parameters():
    spec = BackboneSpec(image_size=64)
    backbone = build_backbone(spec)
    full = BackboneClassifier(build_backbone(replace(spec, frozen_through=5)), 9)
    x = np.zeros((1, 1, 64, 64), dtype=np.float32)
    p_f = profile_stages(full, x).total_params
    rng = np.random.default_rng(0)
    for _ in range(5):
        hybrid = build_classifier(backbone, random_genotype(rng), 5, 8, 9)
        assert profile_stages(hybrid, x).total_params <= 0.7 * p_f
