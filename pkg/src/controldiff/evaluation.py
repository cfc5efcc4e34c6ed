"""Controllability metrics and the sampling protocols built on them.

Replaces large-model perceptual metrics (FID, CLIP score) with two
self-contained scores: `edge_alignment`, the fraction of condition edge
pixels that have a generated edge within 2px, and `global_similarity`, the
cosine between a sample's palette descriptor and the conditioning reference.
`prompt_consistency` checks whether the shapes a caption describes actually
appear with the right kind and color.

The protocol helpers (controllability gain, similarity gap, lambda sweep,
composability, conflict matrix) each sample a fixed seeded batch and reduce
it to a small table, emitted as CSV rows plus optional PNG grids laid out as
condition | sample pairs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .composite import sample_batch
from .conditions import (COLOR_RGB, LOCAL_CONDITIONS, condition_slices,
                         edge_condition, global_condition,
                         segmentation_condition)
from .errors import ConfigurationError, DomainError
from .images import save_grid
from .text import KIND_WORDS, PAD_ID, decode, encode

EDGE_MATCH_RADIUS = 2.0

_SLICES = condition_slices()


def edge_alignment(generated, condition_edge):
    """Fraction of condition edge pixels with a generated edge within 2px."""
    generated = np.asarray(generated, dtype=np.float32)
    condition_edge = np.asarray(condition_edge) > 0.5
    if not condition_edge.any():
        raise DomainError("condition edge map has no edge pixels")
    gen_edges = edge_condition(generated) > 0.5
    if not gen_edges.any():
        return 0.0
    distance = ndimage.distance_transform_edt(~gen_edges)
    return float((distance[condition_edge] <= EDGE_MATCH_RADIUS).mean())


def global_similarity(generated, reference):
    """Cosine similarity between the sample's palette descriptor and a reference."""
    reference = np.asarray(reference, dtype=np.float32)
    norm = np.linalg.norm(reference)
    if norm == 0:
        return 0.0
    descriptor = global_condition(np.asarray(generated, dtype=np.float32))
    return float(descriptor @ (reference / norm))


def _described_shapes(words):
    # captions follow [color kind (relation color kind)*]
    shapes = []
    for i in range(0, len(words), 3):
        if i + 1 < len(words):
            shapes.append((words[i], words[i + 1]))
    return shapes


def prompt_consistency(generated, token_ids):
    """Fraction of caption-described shapes present with matching kind and color."""
    words = decode(np.asarray(token_ids).tolist()).split()
    described = _described_shapes(words)
    if not described:
        raise DomainError("caption describes no shapes")
    generated = np.asarray(generated, dtype=np.float32)
    seg = segmentation_condition(generated)
    palette = {name: np.asarray(rgb, dtype=np.float32) for name, rgb in COLOR_RGB.items()}
    found = []
    for k, kind in enumerate(KIND_WORDS):
        labels, count = ndimage.label(seg[k] > 0.5)
        for idx in range(1, count + 1):
            component = labels == idx
            mean_color = generated[:, component].mean(axis=1)
            nearest = min(palette, key=lambda n: float(np.linalg.norm(palette[n] - mean_color)))
            found.append((nearest, kind))
    matched = 0
    available = list(found)
    for want in described:
        if want in available:
            available.remove(want)
            matched += 1
    return matched / len(described)


def restricted_stack(conditions, use):
    """Copy of the local stack with only the named condition channels kept."""
    stack = np.zeros_like(conditions.local)
    for name in use:
        if name not in LOCAL_CONDITIONS:
            raise ConfigurationError(f"unknown local condition {name!r}")
        stack[_SLICES[name]] = conditions.local[_SLICES[name]]
    return stack


def conditioned_samples(model, schedule, sampler_config, dataset, indices, *,
                        use=(), with_prompt=False, weight=1.0, seed=0,
                        batch_size=32):
    """Sample one image per scene index under the selected condition subset.

    `use` may contain local condition names and/or "global". Returns
    (samples (N, 3, H, W) in [0, 1], scenes, condition sets).
    """
    local_names = [u for u in use if u != "global"]
    use_global = "global" in use
    scenes, cond_sets, rows = [], [], []
    generator = torch.Generator()
    generator.manual_seed(seed)
    indices = list(indices)
    for lo in range(0, len(indices), batch_size):
        chunk = indices[lo:lo + batch_size]
        ids, stacks, embeds = [], [], []
        for i in chunk:
            image, token_ids, conds = dataset.sample(i)
            scenes.append(dataset.scene(i))
            cond_sets.append(conds)
            ids.append(token_ids)
            stacks.append(restricted_stack(conds, local_names))
            embeds.append(conds.global_embed)
        kwargs = {
            "token_ids": torch.from_numpy(np.stack(ids)) if with_prompt else None,
            "local_stack": torch.from_numpy(np.stack(stacks)) if local_names else None,
            "global_embed": torch.from_numpy(np.stack(embeds)) if use_global else None,
        }
        if all(v is None for v in kwargs.values()):
            kwargs["token_ids"] = torch.full((len(chunk), len(ids[0])), PAD_ID,
                                             dtype=torch.long)
        rows.append(sample_batch(model, schedule, sampler_config, weight=weight,
                                 generator=generator, **kwargs))
    return torch.cat(rows), scenes, cond_sets


def controllability_gain(model, schedule, sampler_config, dataset, indices, *,
                         seed=0, batch_size=32):
    """Edge alignment of edge-conditioned samples vs unconditional ones."""
    cond, _, cond_sets = conditioned_samples(
        model, schedule, sampler_config, dataset, indices, use=("edge",),
        seed=seed, batch_size=batch_size)
    free, _, _ = conditioned_samples(
        model, schedule, sampler_config, dataset, indices, use=(),
        seed=seed + 1, batch_size=batch_size)
    edges = [cs.map_for("edge")[0] for cs in cond_sets]
    conditional = float(np.mean([edge_alignment(s, e) for s, e in zip(cond.numpy(), edges)]))
    baseline = float(np.mean([edge_alignment(s, e) for s, e in zip(free.numpy(), edges)]))
    return {"conditional": conditional, "baseline": baseline,
            "gain": conditional - baseline}


def global_similarity_gap(model, schedule, sampler_config, dataset, indices, *,
                          seed=0, batch_size=32, weight=1.0):
    """Similarity to own reference vs shuffled references, no text prompts."""
    samples, _, cond_sets = conditioned_samples(
        model, schedule, sampler_config, dataset, indices, use=("global",),
        weight=weight, seed=seed, batch_size=batch_size)
    refs = [cs.global_embed for cs in cond_sets]
    own = [global_similarity(s, r) for s, r in zip(samples.numpy(), refs)]
    shuffled = [global_similarity(s, refs[(i + 1) % len(refs)])
                for i, s in enumerate(samples.numpy())]
    return {"own": float(np.mean(own)), "shuffled": float(np.mean(shuffled)),
            "gap": float(np.mean(own)) - float(np.mean(shuffled))}


def lambda_sweep(model, schedule, sampler_config, reference_embed, prompt_ids,
                 lambdas=(0.0, 0.25, 0.5, 0.75, 1.0), *, batch_size=32, seed=0):
    """Global similarity and prompt consistency per weight, fixed noise seeds.

    The reference and the prompt deliberately disagree; rising weight should
    pull samples toward the reference palette.
    """
    reference = np.asarray(reference_embed, dtype=np.float32)
    ids = torch.from_numpy(np.tile(np.asarray(prompt_ids, dtype=np.int64),
                                   (batch_size, 1)))
    embeds = torch.from_numpy(np.tile(reference, (batch_size, 1)))
    rows = []
    for lam in lambdas:
        generator = torch.Generator()
        generator.manual_seed(seed)
        samples = sample_batch(model, schedule, sampler_config, token_ids=ids,
                               global_embed=embeds, weight=float(lam),
                               generator=generator)
        sims = [global_similarity(s, reference) for s in samples.numpy()]
        consistency = [prompt_consistency(s, prompt_ids) for s in samples.numpy()]
        rows.append({
            "lambda": float(lam),
            "global_similarity": float(np.mean(sims)),
            "prompt_consistency": float(np.mean(consistency)),
            "default_with_prompt": lam == 0.75,
        })
    return rows


def count_inversions(values):
    """Adjacent decreases in a supposedly non-decreasing sequence."""
    return sum(1 for a, b in zip(values, values[1:]) if b < a - 1e-9)


def composability(model, schedule, sampler_config, dataset, indices, *,
                  seed=0, batch_size=32, weight=1.0):
    """Edge and palette scores for single-condition vs combined sampling."""
    local, _, cond_sets = conditioned_samples(
        model, schedule, sampler_config, dataset, indices, use=("edge",),
        seed=seed, batch_size=batch_size)
    global_, _, _ = conditioned_samples(
        model, schedule, sampler_config, dataset, indices, use=("global",),
        weight=weight, seed=seed, batch_size=batch_size)
    both, _, _ = conditioned_samples(
        model, schedule, sampler_config, dataset, indices, use=("edge", "global"),
        weight=weight, seed=seed, batch_size=batch_size)
    edges = [cs.map_for("edge")[0] for cs in cond_sets]
    refs = [cs.global_embed for cs in cond_sets]
    result = {
        "edge_local_only": float(np.mean(
            [edge_alignment(s, e) for s, e in zip(local.numpy(), edges)])),
        "edge_combined": float(np.mean(
            [edge_alignment(s, e) for s, e in zip(both.numpy(), edges)])),
        "global_global_only": float(np.mean(
            [global_similarity(s, r) for s, r in zip(global_.numpy(), refs)])),
        "global_combined": float(np.mean(
            [global_similarity(s, r) for s, r in zip(both.numpy(), refs)])),
    }
    result["edge_drop"] = result["edge_local_only"] - result["edge_combined"]
    result["global_drop"] = result["global_global_only"] - result["global_combined"]
    return result


def conflict_matrix(model, schedule, sampler_config, dataset, index_a, index_b, *,
                    batch_size=8, seed=0):
    """Dominance table for pairs of local condition types from two scenes.

    Cell (row, col) samples with the row-type map taken from scene A and the
    col-type map from scene B (the diagonal uses scene A only) and reports
    mean edge alignment against each scene with a 95% interval.
    """
    image_a, _, conds_a = dataset.sample(index_a)
    image_b, _, conds_b = dataset.sample(index_b)
    edges = {"a": conds_a.map_for("edge")[0], "b": conds_b.map_for("edge")[0]}
    rows = []
    for type_a in LOCAL_CONDITIONS:
        for type_b in LOCAL_CONDITIONS:
            stack = np.zeros_like(conds_a.local)
            stack[_SLICES[type_a]] = conds_a.local[_SLICES[type_a]]
            if type_b != type_a:
                stack[_SLICES[type_b]] = conds_b.local[_SLICES[type_b]]
            batch = torch.from_numpy(np.tile(stack, (batch_size, 1, 1, 1)))
            generator = torch.Generator()
            generator.manual_seed(seed)
            samples = sample_batch(model, schedule, sampler_config,
                                   local_stack=batch, generator=generator)
            align_a = [edge_alignment(s, edges["a"]) for s in samples.numpy()]
            align_b = [edge_alignment(s, edges["b"]) for s in samples.numpy()]
            dominance = np.asarray(align_a) - np.asarray(align_b)
            half_width = 1.96 * dominance.std(ddof=1) / np.sqrt(batch_size)
            rows.append({
                "type_a": type_a, "type_b": type_b,
                "align_a": float(np.mean(align_a)),
                "align_b": float(np.mean(align_b)),
                "dominance": float(dominance.mean()),
                "ci95": float(half_width),
            })
    return rows


def write_csv(path, rows, fieldnames=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames = fieldnames or list(rows[0].keys())
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return path


def save_condition_sample_grid(conditions, samples, path):
    """PNG grid of condition | sample pairs, one pair per row."""
    tiles = []
    for cond, sample in zip(conditions, samples):
        cond = np.asarray(cond, dtype=np.float32)
        if cond.ndim == 2:
            cond = np.repeat(cond[None], 3, axis=0)
        tiles.append(cond)
        tiles.append(np.asarray(sample, dtype=np.float32))
    save_grid(tiles, path, columns=2)
    return path


def encode_prompt(text):
    """Caption string -> padded token id array."""
    return np.asarray(encode(text), dtype=np.int64)
