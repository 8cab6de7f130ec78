import json
import math

import numpy as np
from pytest import mark, raises
from scipy import ndimage

from .config import GeneratorConfig, SyntheticSpec
from .data import generate_sample
from .errors import ContractError
from .keypatch import (
    BoundaryPoint,
    KeyPatchMap,
    circle_proportion,
    disc_offsets,
    generate_keypatch_map,
    nms_filter,
    score_boundary,
    to_patch_index,
    trace_boundary,
)


def random_blobs(seed: int, side: int = 64, margin: int = 0) -> np.ndarray:
    """A union of a few random discs and boxes."""
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[:side, :side]
    mask = np.zeros((side, side), dtype=np.uint8)
    lo, hi = margin + 4, side - margin - 4
    for _ in range(rng.integers(1, 4)):
        r0, c0 = rng.integers(lo, hi, size=2)
        if rng.random() < 0.5:
            radius = rng.integers(3, max(4, min(r0 - margin, hi - r0, 14)))
            mask[(rows - r0) ** 2 + (cols - c0) ** 2 <= radius**2] = 1
        else:
            h, w = rng.integers(2, 10, size=2)
            mask[max(r0 - h, margin) : r0 + h, max(c0 - w, margin) : c0 + w] = 1
    return mask


# Brute-force oracle, written with plain loops.


def oracle_boundary(mask):
    h, w = mask.shape
    out = set()
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < h and 0 <= cc < w) or not mask[rr, cc]:
                    out.add((r, c))
                    break
    return out


# the 8 neighbour offsets sorted clockwise on screen, west first
RING = sorted(
    ((dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)),
    key=lambda o: (math.pi - math.atan2(-o[0], o[1])) % (2 * math.pi),
)


def oracle_contours(mask):
    """Boundary pixels as lists of (row, col), one list per contour."""
    h, w = mask.shape

    def lesion(r, c):
        return 0 <= r < h and 0 <= c < w and bool(mask[r, c])

    boundary = oracle_boundary(mask)
    claimed = set()
    contours = []
    for r in range(h):
        for c in range(w):
            if (r, c) not in boundary or (r, c) in claimed:
                continue
            for dr, dc in ((0, -1), (-1, 0), (0, 1), (1, 0)):
                if not lesion(r + dr, c + dc):
                    back = (r + dr, c + dc)
                    break

            p = (r, c)
            walk = [p]
            states = set()
            while (p, back) not in states:
                states.add((p, back))
                i = RING.index((back[0] - p[0], back[1] - p[1]))
                previous, found = back, None
                for step in range(1, 9):
                    dr, dc = RING[(i + step) % 8]
                    candidate = (p[0] + dr, p[1] + dc)
                    if lesion(*candidate):
                        found = candidate
                        break
                    previous = candidate
                if found is None:
                    break
                p, back = found, previous
                walk.append(p)

            contour = []
            for q in walk:
                if q in boundary and q not in claimed:
                    claimed.add(q)
                    contour.append(q)
            contours.append(contour)
    return contours


def oracle_proportion(mask, row, col, radius):
    lesion = total = 0
    for r in range(row - radius, row + radius + 1):
        for c in range(col - radius, col + radius + 1):
            if (r - row) ** 2 + (c - col) ** 2 > radius**2:
                continue
            if 0 <= r < mask.shape[0] and 0 <= c < mask.shape[1]:
                total += 1
                lesion += int(mask[r, c])
    return lesion / total


def oracle_nms(scores, k):
    n = len(scores)
    keep = []
    for i in range(n):
        ok = True
        for j in range(n):
            if j == i:
                continue
            distance = min(abs(i - j), n - abs(i - j))
            if distance > k:
                continue
            if scores[j] > scores[i] or (scores[j] == scores[i] and j < i):
                ok = False
                break
        keep.append(ok)
    return keep


def oracle_keypatch(mask, cfg):
    grid_rows = mask.shape[0] // cfg.patch_side
    grid_cols = mask.shape[1] // cfg.patch_side
    values = np.zeros(grid_rows * grid_cols, dtype=np.uint8)
    for contour in oracle_contours(mask):
        scores = [
            abs(oracle_proportion(mask, r, c, cfg.radius) - 0.5) for r, c in contour
        ]
        for (r, c), keep in zip(contour, oracle_nms(scores, cfg.nms_neighbors)):
            if keep:
                values[(r // cfg.patch_side) * grid_cols + c // cfg.patch_side] = 1
    return values


def generated_mask(seed, **kwargs):
    return generate_sample(SyntheticSpec(seed=seed, **kwargs), 0).mask


def traced(mask):
    contours = {}
    for p in trace_boundary(mask):
        contours.setdefault(p.contour, []).append(p)
    for k, points in contours.items():
        assert [p.position for p in points] == list(range(len(points)))
    return [[(p.row, p.col) for p in contours[k]] for k in sorted(contours)]


def test_empty_mask_has_no_boundary():
    assert trace_boundary(np.zeros((32, 32), dtype=np.uint8)) == []


def test_isolated_pixel():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[5, 7] = 1
    assert [(p.row, p.col) for p in trace_boundary(mask)] == [(5, 7)]


def test_square_perimeter_clockwise():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[8:18, 8:18] = 1
    points = trace_boundary(mask)
    coords = [(p.row, p.col) for p in points]

    assert len(coords) == 36
    assert set(coords) == oracle_boundary(mask)
    assert coords[0] == (8, 8)
    assert coords[1] == (8, 9)  # clockwise: east along the top edge first
    assert coords[-1] == (9, 8)
    assert [p.position for p in points] == list(range(36))
    assert {p.contour for p in points} == {0}


def test_contours_ordered_by_start():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[20:24, 2:6] = 1
    mask[3:7, 25:29] = 1
    points = trace_boundary(mask)
    starts = [next(p for p in points if p.contour == k) for k in (0, 1)]
    assert [(p.row, p.col) for p in starts] == [(3, 25), (20, 2)]


def test_boundary_with_hole():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[4:20, 4:20] = 1
    mask[10:12, 10:12] = 0
    points = trace_boundary(mask)
    coords = [(p.row, p.col) for p in points]
    assert len(coords) == len(set(coords))
    assert set(coords) == oracle_boundary(mask)


@mark.parametrize("seed", range(10))
def test_trace_matches_brute_force_scan(seed):
    mask = random_blobs(seed)
    coords = [(p.row, p.col) for p in trace_boundary(mask)]
    assert len(coords) == len(set(coords))
    assert set(coords) == oracle_boundary(mask)
    assert traced(mask) == oracle_contours(mask)


@mark.parametrize("seed", range(1, 21))
def test_trace_matches_contour_walker(seed):
    mask = generated_mask(seed, boundary_roughness=0.4)
    assert traced(mask) == oracle_contours(mask)


def test_trace_matches_contour_walker_with_hole():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[4:20, 4:20] = 1
    mask[10:12, 10:12] = 0
    mask[22, 22] = 1
    contours = traced(mask)
    assert contours == oracle_contours(mask)
    assert len(contours) == 3


@mark.parametrize("seed", range(1, 21))
def test_outer_contour_runs_clockwise(seed):
    (outer, *_) = traced(generated_mask(seed))
    # shoelace sum in (col, row) screen coordinates, rows growing downwards
    area = sum(
        c0 * r1 - c1 * r0
        for (r0, c0), (r1, c1) in zip(outer, outer[1:] + outer[:1])
    )
    assert area > 0


def test_disc_has_317_pixels_for_radius_10():
    assert len(disc_offsets(10)) == 317


def test_circle_proportion_trivial():
    ones = np.ones((32, 32), dtype=np.uint8)
    zeros = np.zeros((32, 32), dtype=np.uint8)
    assert circle_proportion(ones, 16, 16, 10) == 1.0
    assert circle_proportion(zeros, 16, 16, 10) == 0.0
    assert circle_proportion(zeros, 0, 0, 10) == 0.0


def test_circle_proportion_half_plane():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[16:] = 1
    p = circle_proportion(mask, 16, 16, 10)
    assert p == oracle_proportion(mask, 16, 16, 10)
    assert p == 169 / 317
    assert abs(p - 0.5) < 0.05


def test_circle_proportion_clips_to_image():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[:3, :3] = 1
    assert circle_proportion(mask, 0, 0, 10) == oracle_proportion(mask, 0, 0, 10)


def test_circle_proportion_outside_image():
    with raises(ValueError):
        circle_proportion(np.zeros((16, 16), dtype=np.uint8), 16, 0, 10)


@mark.parametrize("seed", range(5))
def test_circle_proportion_monotone_under_dilation(seed):
    mask = random_blobs(seed)
    dilated = ndimage.binary_dilation(mask).astype(np.uint8)
    rng = np.random.default_rng(seed)
    for row, col in rng.integers(0, 64, size=(20, 2)):
        assert circle_proportion(dilated, row, col, 10) >= circle_proportion(
            mask, row, col, 10
        )


def test_score_isolated_pixel():
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[32, 32] = 1
    (point,) = score_boundary(trace_boundary(mask), mask, GeneratorConfig())
    assert point.proportion == 1 / 317
    assert point.score == abs(1 / 317 - 0.5)


def test_score_half_plane_straight_edge():
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[32:] = 1
    points = score_boundary(trace_boundary(mask), mask, GeneratorConfig())
    middle = next(p for p in points if (p.row, p.col) == (32, 32))
    assert middle.score == abs(oracle_proportion(mask, 32, 32, 10) - 0.5)
    assert middle.score < 0.05


def test_score_definition():
    assert BoundaryPoint(row=0, col=0, proportion=0.5).score == 0.0
    with raises(ValueError):
        BoundaryPoint(row=0, col=0).score


def contour_points(scores, contour=0):
    return [
        BoundaryPoint(row=0, col=i, contour=contour, position=i, proportion=0.5 + s)
        for i, s in enumerate(scores)
    ]


def test_nms_equal_scores_keeps_contour_start():
    points = contour_points([0.1] * 100)
    assert nms_filter(points, 30) == points[:1]


def test_nms_single_point():
    points = contour_points([0.2])
    assert nms_filter(points, 30) == points


def test_nms_increasing_scores():
    scores = np.linspace(0.0, 0.4, 80)
    points = contour_points(scores)
    kept = nms_filter(points, 10)
    assert [p.position for p in kept] == [79]
    expected = oracle_nms([p.score for p in points], 10)
    assert [p.position for p in kept] == [i for i, k in enumerate(expected) if k]


@mark.parametrize("k", [1, 3, 30])
@mark.parametrize("seed", range(5))
def test_nms_matches_window_oracle(seed, k):
    rng = np.random.default_rng(seed)
    # few distinct levels so that ties are common
    scores = rng.integers(0, 5, size=rng.integers(1, 90)) / 10
    points = contour_points(scores)
    expected = oracle_nms([p.score for p in points], k)
    kept = nms_filter(points, k)
    assert [p.position for p in kept] == [i for i, e in enumerate(expected) if e]


def test_nms_contours_are_independent():
    points = contour_points([0.1, 0.2, 0.1], contour=0) + contour_points(
        [0.3, 0.3], contour=1
    )
    kept = nms_filter(points, 30)
    assert [(p.contour, p.position) for p in kept] == [(0, 1), (1, 0)]


@mark.parametrize("seed", range(5))
def test_retained_points_dominate_their_window(seed):
    mask = random_blobs(seed)
    cfg = GeneratorConfig()
    scored = score_boundary(trace_boundary(mask), mask, cfg)
    kept = nms_filter(scored, cfg.nms_neighbors)
    for p in kept:
        contour = [q for q in scored if q.contour == p.contour]
        n = len(contour)
        for q in contour:
            d = abs(p.position - q.position)
            if min(d, n - d) <= cfg.nms_neighbors:
                assert p.score >= q.score


@mark.parametrize(
    "row, col, side, grid_cols, expected",
    [
        (0, 0, 16, 4, 0),
        (0, 0, 8, 9, 0),
        (35, 20, 16, 16, 33),
        (63, 63, 16, 4, 15),
    ],
)
def test_to_patch_index(row, col, side, grid_cols, expected):
    assert to_patch_index(row, col, side, grid_cols) == expected


def test_to_patch_index_constant_within_and_distinct_across_patches():
    side, grid = 16, 4
    seen = {}
    for row in range(side * grid):
        for col in range(side * grid):
            index = to_patch_index(row, col, side, grid)
            patch = (row // side, col // side)
            assert seen.setdefault(patch, index) == index
    assert len(set(seen.values())) == grid * grid


def test_keypatch_empty_mask():
    kp = generate_keypatch_map(np.zeros((64, 64), dtype=np.uint8))
    assert (kp.grid_rows, kp.grid_cols) == (4, 4)
    assert not kp.values.any()


def test_keypatch_single_pixel():
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[5, 7] = 1
    kp = generate_keypatch_map(mask)
    expected = np.zeros(16, dtype=np.uint8)
    expected[to_patch_index(5, 7, 16, 4)] = 1
    assert np.array_equal(kp.values, expected)


def test_keypatch_rejects_bad_masks():
    with raises(ContractError):
        generate_keypatch_map(np.zeros((60, 64), dtype=np.uint8))
    with raises(ContractError):
        generate_keypatch_map(np.full((64, 64), 2, dtype=np.uint8))


@mark.parametrize("seed", range(1, 51))
def test_keypatch_matches_oracle(seed):
    mask = generated_mask(seed, boundary_roughness=0.3)
    cfg = GeneratorConfig()
    kp = generate_keypatch_map(mask, cfg)
    assert kp.values.tobytes() == oracle_keypatch(mask, cfg).tobytes()


@mark.parametrize("seed", range(10))
def test_keypatch_of_several_blobs_matches_oracle(seed):
    mask = random_blobs(seed)
    cfg = GeneratorConfig(radius=6, nms_neighbors=12)
    kp = generate_keypatch_map(mask, cfg)
    assert kp.values.tobytes() == oracle_keypatch(mask, cfg).tobytes()


@mark.parametrize("seed", range(5))
def test_keypatch_is_deterministic(seed):
    mask = random_blobs(seed)
    assert generate_keypatch_map(mask) == generate_keypatch_map(mask.copy())


@mark.parametrize("seed", range(5))
def test_keypatch_translation_by_one_patch(seed):
    cfg = GeneratorConfig()
    mask = np.zeros((128, 128), dtype=np.uint8)
    mask[24:88, 24:88] = random_blobs(seed, side=64, margin=0)
    shifted = np.roll(mask, 16, axis=0)

    kp = generate_keypatch_map(mask, cfg)
    kp_shifted = generate_keypatch_map(shifted, cfg)
    assert np.array_equal(np.roll(kp.values, kp.grid_cols), kp_shifted.values)


def test_keypatch_json_round_trip():
    mask = random_blobs(3)
    kp = generate_keypatch_map(mask)
    assert KeyPatchMap.from_json(kp.to_json()) == kp


def test_keypatch_map_shape_contract():
    with raises(ContractError):
        KeyPatchMap(np.zeros(5, dtype=np.uint8), 2, 2)
    with raises(ContractError):
        KeyPatchMap(np.array([0, 1, 2, 0], dtype=np.uint8), 2, 2)


@mark.parametrize("values", [[0, 2, 0, 1], [0, 0.5, 0, 1], [0, -1, 0, 1], [0, 256, 0, 1]])
def test_keypatch_json_rejects_non_binary_values(values):
    text = json.dumps({"grid_rows": 2, "grid_cols": 2, "values": values})
    with raises(ContractError):
        KeyPatchMap.from_json(text)
