"""Metric oracles and the sampling protocols over a tiny trained model."""

import numpy as np
import pytest
import torch

from controldiff import training
from controldiff.conditions import (SceneDataset, edge_condition,
                                    extract_conditions, global_condition,
                                    render_scene, scene_for_index)
from controldiff.config import SamplerConfig
from controldiff.diffusion import NoiseSchedule
from controldiff.errors import ConfigurationError, DomainError
from controldiff.evaluation import (composability, conditioned_samples,
                                    conflict_matrix, controllability_gain,
                                    count_inversions, edge_alignment,
                                    encode_prompt, global_similarity,
                                    global_similarity_gap, lambda_sweep,
                                    prompt_consistency, restricted_stack,
                                    save_condition_sample_grid, write_csv)
from controldiff.text import encode

SIZE = 32


def two_color_image(split_col, left=0.1, right=0.9, size=16):
    img = np.full((3, size, size), left, dtype=np.float32)
    img[:, :, split_col:] = right
    return img


# --------------------------------------------------------------------------
# edge alignment


def test_edge_alignment_self_consistency():
    for index in range(12):
        img = render_scene(scene_for_index(17, index, SIZE), SIZE)
        conds = extract_conditions(img)
        assert edge_alignment(img, conds.map_for("edge")[0]) >= 0.95


def test_edge_alignment_exact_match_is_one():
    img = two_color_image(8)
    assert edge_alignment(img, edge_condition(img)) == 1.0


def test_edge_alignment_respects_match_radius():
    # generated edges sit at the step between columns; a condition edge one
    # column over is inside the 2px radius, five columns over is not
    near = edge_alignment(two_color_image(8), edge_condition(two_color_image(9)))
    far = edge_alignment(two_color_image(8), edge_condition(two_color_image(13)))
    assert near == 1.0
    assert far == 0.0


def test_edge_alignment_constant_image_scores_zero():
    cond = edge_condition(two_color_image(8))
    flat = np.full((3, 16, 16), 0.5, dtype=np.float32)
    assert edge_alignment(flat, cond) == 0.0


def test_edge_alignment_empty_condition_rejected():
    with pytest.raises(DomainError):
        edge_alignment(two_color_image(8), np.zeros((16, 16)))


def test_edge_alignment_is_color_blind():
    img = render_scene(scene_for_index(17, 1, SIZE), SIZE)
    cond = extract_conditions(img).map_for("edge")[0]
    permuted = img[[2, 0, 1]]
    assert edge_alignment(img, cond) == edge_alignment(permuted, cond)


# --------------------------------------------------------------------------
# global similarity and prompt consistency


def test_global_similarity_of_own_descriptor_is_one():
    img = render_scene(scene_for_index(19, 0, SIZE), SIZE)
    assert global_similarity(img, global_condition(img)) == pytest.approx(1.0, abs=1e-5)


def test_global_similarity_orthogonal_is_zero():
    img = render_scene(scene_for_index(19, 1, SIZE), SIZE)
    vec = global_condition(img)
    ortho = np.zeros_like(vec)
    ortho[np.argmin(np.abs(vec))] = 1.0
    ortho -= vec * float(vec @ ortho)
    assert abs(global_similarity(img, ortho)) < 1e-4


def test_global_similarity_zero_reference_is_zero():
    img = render_scene(scene_for_index(19, 2, SIZE), SIZE)
    assert global_similarity(img, np.zeros(32)) == 0.0


def test_global_similarity_reference_scale_invariant():
    img = render_scene(scene_for_index(19, 3, SIZE), SIZE)
    ref = global_condition(render_scene(scene_for_index(19, 4, SIZE), SIZE))
    assert global_similarity(img, ref) == pytest.approx(
        global_similarity(img, 5.0 * ref), abs=1e-5)


def test_same_palette_scores_higher_on_average():
    gaps = []
    for i in range(100):
        img = render_scene(scene_for_index(23, i, SIZE), SIZE)
        own = global_similarity(img, global_condition(img))
        other = render_scene(scene_for_index(24, i + 500, SIZE), SIZE)
        cross = global_similarity(img, global_condition(other))
        gaps.append(own - cross)
    assert np.mean(gaps) > 0


def test_prompt_consistency_on_true_caption():
    hits = []
    for index in range(15):
        scene = scene_for_index(29, index, SIZE)
        img = render_scene(scene, SIZE)
        hits.append(prompt_consistency(img, np.asarray(encode(scene.caption))))
    assert np.mean(hits) >= 0.9


def test_prompt_consistency_penalizes_wrong_description():
    scene = scene_for_index(29, 3, SIZE)
    img = render_scene(scene, SIZE)
    words = scene.caption.split()
    wrong_color = "red" if words[0] != "red" else "blue"
    words[0] = wrong_color
    score_true = prompt_consistency(img, np.asarray(encode(scene.caption)))
    score_wrong = prompt_consistency(img, np.asarray(encode(" ".join(words))))
    assert score_wrong < score_true


def test_prompt_consistency_empty_caption_rejected():
    img = render_scene(scene_for_index(29, 0, SIZE), SIZE)
    with pytest.raises(DomainError):
        prompt_consistency(img, np.asarray(encode("")))


# --------------------------------------------------------------------------
# helpers


def test_restricted_stack_keeps_only_named_channels():
    img = render_scene(scene_for_index(31, 0, SIZE), SIZE)
    conds = extract_conditions(img)
    stack = restricted_stack(conds, ["edge", "sketch"])
    np.testing.assert_array_equal(stack[0], conds.local[0])
    np.testing.assert_array_equal(stack[5], conds.local[5])
    assert stack[1:5].sum() == 0
    assert restricted_stack(conds, []).sum() == 0
    with pytest.raises(ConfigurationError):
        restricted_stack(conds, ["global"])


def test_count_inversions():
    assert count_inversions([0.1, 0.2, 0.3]) == 0
    assert count_inversions([0.3, 0.2, 0.5]) == 1
    assert count_inversions([3, 2, 1]) == 2
    assert count_inversions([0.5, 0.5 - 1e-12]) == 0  # within tolerance
    assert count_inversions([]) == 0


def test_write_csv(tmp_path):
    rows = [{"a": 1, "b": "x"}, {"a": 2, "b": "y"}]
    path = write_csv(tmp_path / "t.csv", rows)
    text = path.read_text().strip().splitlines()
    assert text[0] == "a,b"
    assert text[1] == "1,x" and text[2] == "2,y"


def test_encode_prompt_round_trip():
    ids = encode_prompt("red circle above blue square")
    assert ids.dtype == np.int64 and ids.shape == (8,)
    from controldiff.text import decode
    assert decode(ids.tolist()) == "red circle above blue square"


def test_grid_file_written(tmp_path):
    img = render_scene(scene_for_index(31, 1, SIZE), SIZE)
    conds = extract_conditions(img)
    path = tmp_path / "pairs.png"
    save_condition_sample_grid([conds.map_for("edge")[0]], [img], path)
    assert path.exists()


# --------------------------------------------------------------------------
# protocols over a tiny trained model


@pytest.fixture(scope="module")
def tiny_model(tiny_pipeline):
    model, cfg = training.merge_adapters(tiny_pipeline["base"],
                                         tiny_pipeline["local"],
                                         tiny_pipeline["global"])
    schedule = NoiseSchedule(cfg.schedule)
    dataset = SceneDataset(cfg.data, cfg.backbone.image_size)
    sampler_cfg = SamplerConfig(num_steps=2, cfg_scale=2.0)
    return model, cfg, schedule, dataset, sampler_cfg


def test_conditioned_samples_shapes_and_determinism(tiny_model):
    model, cfg, schedule, dataset, sampler_cfg = tiny_model
    indices = list(dataset.heldout_indices)[:3]
    a, scenes, cond_sets = conditioned_samples(
        model, schedule, sampler_cfg, dataset, indices, use=("edge", "global"),
        seed=5, batch_size=2)
    b, _, _ = conditioned_samples(
        model, schedule, sampler_cfg, dataset, indices, use=("edge", "global"),
        seed=5, batch_size=2)
    assert a.shape == (3, 3, 16, 16)
    assert len(scenes) == 3 and len(cond_sets) == 3
    assert torch.equal(a, b)
    assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0


def test_controllability_gain_schema(tiny_model):
    model, cfg, schedule, dataset, sampler_cfg = tiny_model
    indices = list(dataset.heldout_indices)[:2]
    result = controllability_gain(model, schedule, sampler_cfg, dataset, indices,
                                  seed=1, batch_size=2)
    assert set(result) == {"conditional", "baseline", "gain"}
    assert result["gain"] == pytest.approx(result["conditional"] - result["baseline"])


def test_global_similarity_gap_schema(tiny_model):
    model, cfg, schedule, dataset, sampler_cfg = tiny_model
    indices = list(dataset.heldout_indices)[:3]
    result = global_similarity_gap(model, schedule, sampler_cfg, dataset, indices,
                                   seed=1, batch_size=3)
    assert set(result) == {"own", "shuffled", "gap"}
    assert -1.0 <= result["own"] <= 1.0


def test_lambda_sweep_schema_and_flag(tiny_model):
    model, cfg, schedule, dataset, sampler_cfg = tiny_model
    _, _, conds = dataset.sample(0)
    rows = lambda_sweep(model, schedule, sampler_cfg, conds.global_embed,
                        encode_prompt("red circle"), batch_size=2, seed=3)
    assert [row["lambda"] for row in rows] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert [row["default_with_prompt"] for row in rows] == \
        [False, False, False, True, False]
    for row in rows:
        assert -1.0 <= row["global_similarity"] <= 1.0
        assert 0.0 <= row["prompt_consistency"] <= 1.0
    again = lambda_sweep(model, schedule, sampler_cfg, conds.global_embed,
                         encode_prompt("red circle"), batch_size=2, seed=3)
    assert rows == again


def test_composability_schema(tiny_model):
    model, cfg, schedule, dataset, sampler_cfg = tiny_model
    indices = list(dataset.heldout_indices)[:2]
    result = composability(model, schedule, sampler_cfg, dataset, indices,
                           seed=2, batch_size=2)
    assert set(result) == {"edge_local_only", "edge_combined",
                           "global_global_only", "global_combined",
                           "edge_drop", "global_drop"}


def test_conflict_matrix_is_square_with_intervals(tiny_model):
    model, cfg, schedule, dataset, sampler_cfg = tiny_model
    rows = conflict_matrix(model, schedule, sampler_cfg, dataset, 0, 1,
                           batch_size=2, seed=0)
    assert len(rows) == 16
    pairs = {(r["type_a"], r["type_b"]) for r in rows}
    assert len(pairs) == 16
    for row in rows:
        assert -1.0 <= row["dominance"] <= 1.0
        assert row["ci95"] >= 0.0
        assert row["align_a"] >= 0.0 and row["align_b"] >= 0.0
