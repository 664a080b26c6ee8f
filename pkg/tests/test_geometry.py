from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudedit.errors import (
    DegenerateCloudError,
    EmptyRegionError,
    FormatError,
    LengthMismatchError,
)
from cloudedit.geometry import (
    PointCloud,
    apply_mask,
    chamfer,
    load_pcb1,
    masked_chamfer,
    normalize,
    save_pcb1,
)


def brute_chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Scalar-loop oracle: exhaustive nearest neighbors, squared, sum of means."""
    fwd = 0.0
    for p in a:
        best = min(float(((p - q) ** 2).sum()) for q in b)
        fwd += best
    bwd = 0.0
    for q in b:
        best = min(float(((q - p) ** 2).sum()) for p in a)
        bwd += best
    return fwd / len(a) + bwd / len(b)


def random_cloud(rng: np.random.Generator, k: int) -> np.ndarray:
    return rng.normal(size=(k, 3))


def test_normalize_two_point_case() -> None:
    out = normalize(PointCloud(np.array([[1.0, 1.0, 1.0], [3.0, 1.0, 1.0]])))
    np.testing.assert_array_equal(out.points, [[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])


def test_normalize_invariants_and_idempotence() -> None:
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(256, 3)) * 3.0 + 1.0)
    out = normalize(cloud)
    assert np.linalg.norm(out.points.mean(axis=0)) < 1e-6
    max_norm = np.sqrt((out.points**2).sum(axis=1)).max()
    assert 0.999 < max_norm <= 1.001
    again = normalize(out)
    np.testing.assert_allclose(again.points, out.points, atol=1e-12)


def test_normalize_preserves_labels_and_order() -> None:
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 4, size=16).astype(np.uint8)
    cloud = PointCloud(rng.normal(size=(16, 3)), labels)
    out = normalize(cloud)
    np.testing.assert_array_equal(out.labels, labels)
    # order preserved: ranks of x coordinate unchanged
    np.testing.assert_array_equal(
        np.argsort(cloud.points[:, 0]), np.argsort(out.points[:, 0])
    )


def test_normalize_degenerate() -> None:
    with pytest.raises(DegenerateCloudError):
        normalize(PointCloud(np.ones((5, 3))))


def test_chamfer_identity_and_hand_values() -> None:
    rng = np.random.default_rng(2)
    x = PointCloud(random_cloud(rng, 32))
    assert chamfer(x, x) == 0.0
    assert chamfer(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]])) == 2.0
    # frozen from the scalar oracle: fwd mean (0+1)/2, bwd 0
    a = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    b = np.array([[0.0, 0.0, 0.0]])
    assert chamfer(a, b) == 0.5
    a = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    assert chamfer(a, b) == brute_chamfer(a, b) == 2.0


def test_chamfer_matches_brute_force_oracle() -> None:
    rng = np.random.default_rng(3)
    for k_a, k_b in [(1, 1), (5, 9), (64, 64), (33, 17)]:
        a = random_cloud(rng, k_a)
        b = random_cloud(rng, k_b)
        assert abs(chamfer(a, b) - brute_chamfer(a, b)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 40))
def test_chamfer_symmetric_bitwise(seed: int, ka: int, kb: int) -> None:
    rng = np.random.default_rng(seed)
    a, b = random_cloud(rng, ka), random_cloud(rng, kb)
    assert chamfer(a, b) == chamfer(b, a)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_chamfer_scaling_quadratic(seed: int, s: float) -> None:
    rng = np.random.default_rng(seed)
    a, b = random_cloud(rng, 12), random_cloud(rng, 15)
    base = chamfer(a, b)
    scaled = chamfer(a * s, b * s)
    assert scaled == pytest.approx(base * s * s, rel=1e-9)


def test_chamfer_zero_iff_coincident() -> None:
    a = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    b = a[::-1].copy()
    assert chamfer(a, b) == 0.0
    b2 = b.copy()
    b2[0, 0] += 1e-3
    assert chamfer(a, b2) > 0.0


def test_masked_chamfer_subset_semantics() -> None:
    rng = np.random.default_rng(4)
    a = PointCloud(random_cloud(rng, 40))
    b = PointCloud(random_cloud(rng, 40))
    ma = rng.random(40) < 0.3
    mb = rng.random(40) < 0.3
    expected = brute_chamfer(a.points[~ma], b.points[~mb])
    assert masked_chamfer(a, b, ma, mb) == pytest.approx(expected, abs=1e-12)


def test_masked_chamfer_identities() -> None:
    rng = np.random.default_rng(5)
    pts = random_cloud(rng, 30)
    m = rng.random(30) < 0.4
    a = PointCloud(pts)
    b_pts = pts.copy()
    b_pts[m] += rng.normal(size=(int(m.sum()), 3))  # differ only inside M
    b = PointCloud(b_pts)
    assert masked_chamfer(a, b, m, m) == 0.0
    none = np.zeros(30, dtype=bool)
    assert masked_chamfer(a, b, none, none) == chamfer(a, b)


def test_masked_chamfer_empty_region() -> None:
    a = PointCloud(np.zeros((3, 3)) + np.arange(3)[:, None])
    with pytest.raises(EmptyRegionError):
        masked_chamfer(a, a, np.ones(3, dtype=bool), np.zeros(3, dtype=bool))


def test_apply_mask_contract() -> None:
    rng = np.random.default_rng(6)
    cloud = PointCloud(random_cloud(rng, 20))
    m = rng.random(20) < 0.5
    cc = apply_mask(cloud, m)
    np.testing.assert_array_equal(cc.coords[m], 0.0)
    np.testing.assert_array_equal(cc.flags[m], 1.0)
    np.testing.assert_array_equal(cc.flags[~m], 0.0)
    # unmasked coords bit-identical
    assert (cc.coords[~m] == cloud.points[~m]).all()
    # round-trip: overwrite masked coords with originals
    rec = cc.coords.copy()
    rec[m] = cloud.points[m]
    assert (rec == cloud.points).all()


def test_apply_mask_degenerate_masks() -> None:
    cloud = PointCloud(np.arange(12, dtype=float).reshape(4, 3))
    cc = apply_mask(cloud, np.zeros(4, dtype=bool))
    assert (cc.coords == cloud.points).all() and (cc.flags == 0.0).all()
    cc = apply_mask(cloud, np.ones(4, dtype=bool))
    assert (cc.coords == 0.0).all() and (cc.flags == 1.0).all()
    with pytest.raises(LengthMismatchError):
        apply_mask(cloud, np.zeros(5, dtype=bool))


def test_pcb1_round_trip(tmp_path) -> None:
    rng = np.random.default_rng(7)
    pts = random_cloud(rng, 17).astype(np.float32).astype(np.float64)
    labels = rng.integers(0, 9, size=17).astype(np.uint8)
    mask = rng.random(17) < 0.5
    p = tmp_path / "c.pcb1"
    save_pcb1(p, PointCloud(pts, labels), mask)
    cloud, m = load_pcb1(p)
    np.testing.assert_array_equal(cloud.points, pts)
    np.testing.assert_array_equal(cloud.labels, labels)
    np.testing.assert_array_equal(m, mask)
    # writing the same content twice is byte-identical
    p2 = tmp_path / "c2.pcb1"
    save_pcb1(p2, PointCloud(pts, labels), mask)
    assert p.read_bytes() == p2.read_bytes()


def test_pcb1_optional_sections(tmp_path) -> None:
    pts = np.zeros((3, 3))
    pts[:, 0] = [0, 1, 2]
    p = tmp_path / "bare.pcb1"
    save_pcb1(p, PointCloud(pts))
    cloud, m = load_pcb1(p)
    assert cloud.labels is None and m is None


def test_pcb1_rejects_bad_files(tmp_path) -> None:
    good = tmp_path / "good.pcb1"
    save_pcb1(good, PointCloud(np.eye(3)))
    raw = bytearray(good.read_bytes())

    bad_magic = tmp_path / "magic.pcb1"
    bad_magic.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(FormatError):
        load_pcb1(bad_magic)

    bad_flags = tmp_path / "flags.pcb1"
    tampered = bytearray(raw)
    tampered[9] = 0x80
    bad_flags.write_bytes(bytes(tampered))
    with pytest.raises(FormatError):
        load_pcb1(bad_flags)

    truncated = tmp_path / "trunc.pcb1"
    truncated.write_bytes(bytes(raw[:-5]))
    with pytest.raises(FormatError):
        load_pcb1(truncated)
