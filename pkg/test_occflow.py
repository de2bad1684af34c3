import numpy as np
import pytest

from errors import FileFormatError
from imgcore import to_gray
from models import FlowField, FlowParams, SceneSpec
from occflow import (build_system, combined_mask, estimate_flow, flow_to_color, phi_prime, read_flo,
                     solve_increment, write_flo)
from synthbench import endpoint_error, make_texture, render_scene


def textured_pair(shift, size=96, seed=0):
    """(y_ref, y_t) with y_t(p + shift) == y_ref(p) for integer shifts"""
    dx, dy = shift
    pad = 16
    canvas = to_gray(make_texture('noise', size + 2 * pad, size + 2 * pad, np.random.default_rng(seed)))
    y_t = canvas[pad:pad + size, pad:pad + size]
    y_ref = canvas[pad + dy:pad + dy + size, pad + dx:pad + dx + size]
    return y_ref, y_t


def small_system(seed=0, occluded=None, shape=(10, 12)):
    rng = np.random.default_rng(seed)
    y_ref, y_t = textured_pair((1, 0), size=max(shape), seed=seed)
    y_ref, y_t = y_ref[:shape[0], :shape[1]], y_t[:shape[0], :shape[1]]
    w = FlowField(rng.normal(0, 0.3, shape), rng.normal(0, 0.3, shape))
    O = np.zeros(shape, dtype=bool) if occluded is None else occluded
    return y_ref, y_t, w, O


class TestPenalty:
    def test_values(self):
        assert phi_prime(0.0, 0.001) == pytest.approx(500.0)
        assert phi_prime(1.0, 0.001) == pytest.approx(0.5, rel=1e-6)

    def test_array(self):
        np.testing.assert_allclose(phi_prime(np.array([0.0, 3.0]), 1.0), [0.5, 0.25])

    @pytest.mark.parametrize('s,eps', [(-1.0, 0.001), (1.0, 0.0)])
    def test_rejects(self, s, eps):
        with pytest.raises(ValueError):
            phi_prime(s, eps)


class TestCombinedMask:
    def test_target_mask_is_pulled_back(self):
        o_ref = np.zeros((20, 20), dtype=bool)
        o_t = np.zeros((20, 20), dtype=bool)
        o_t[10, 10] = True
        w = FlowField.uniform((20, 20), 2, 0)
        O = combined_mask(o_ref, o_t, w, np.zeros((20, 20), dtype=bool), dilation=0)
        assert O[10, 8] and O.sum() == 1
        dilated = combined_mask(o_ref, o_t, w, np.zeros((20, 20), dtype=bool), dilation=1)
        assert dilated.sum() == 5 and dilated[10, 7] and dilated[9, 8]

    def test_zero_flow_same_masks(self):
        m = np.zeros((15, 15), dtype=bool)
        m[5:7, :] = True
        O = combined_mask(m, m, FlowField.zeros(m.shape), np.zeros_like(m), dilation=1)
        expected = np.zeros_like(m)
        expected[4:8, :] = True
        np.testing.assert_array_equal(O, expected)

    def test_invalid_pixels_join(self):
        invalid = np.zeros((6, 6), dtype=bool)
        invalid[:, -1] = True
        none = np.zeros((6, 6), dtype=bool)
        O = combined_mask(none, none, FlowField.zeros((6, 6)), invalid)
        np.testing.assert_array_equal(O, invalid)


class TestLinearSystem:
    def test_fully_occluded_is_pure_smoothness(self):
        y_ref, y_t, _, _ = small_system()
        O = np.ones(y_ref.shape, dtype=bool)
        system = build_system(y_ref, y_t, FlowField.zeros(y_ref.shape), O, FlowParams())
        assert not system.rhs.any()
        step = solve_increment(system, FlowParams())
        assert step.converged and step.iterations == 0
        assert not step.du.any() and not step.dv.any()

    def test_operator_symmetric_positive(self):
        occluded = np.zeros((10, 12), dtype=bool)
        occluded[4, :] = True
        system = build_system(*small_system(1, occluded), FlowParams())
        A = system.to_dense()
        np.testing.assert_allclose(A, A.T, atol=1e-10)
        assert np.linalg.eigvalsh(0.5 * (A + A.T)).min() > -1e-10

    def test_cg_matches_dense_solve(self):
        params = FlowParams(cg_tol=1e-12, cg_iters=2000)
        system = build_system(*small_system(2), params)
        step = solve_increment(system, params)
        oracle = np.linalg.solve(system.to_dense(), system.rhs)
        got = np.concatenate([step.du.ravel(), step.dv.ravel()])
        assert np.linalg.norm(got - oracle) <= 1e-6 * np.linalg.norm(oracle)
        assert step.converged

    def test_irls_energy_never_increases(self):
        params = FlowParams(cg_tol=1e-12, cg_iters=2000)
        y_ref, y_t = textured_pair((1, 1), size=24, seed=3)
        w = FlowField.uniform(y_ref.shape, 0.5, 0.5)
        O = np.zeros(y_ref.shape, dtype=bool)
        O[10:12, :] = True
        dw = FlowField.zeros(y_ref.shape)
        energies = []
        for _ in range(5):
            system = build_system(y_ref, y_t, w, O, params, dw)
            energies.append(system.energy(dw.u, dw.v))
            step = solve_increment(system, params)
            dw = FlowField(step.du, step.dv)
        energies.append(system.energy(dw.u, dw.v))
        assert all(b <= a + 1e-9 for a, b in zip(energies, energies[1:]))

    def test_rejects_colour(self):
        with pytest.raises(ValueError):
            build_system(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)), FlowField.zeros((8, 8)),
                         np.zeros((8, 8), dtype=bool), FlowParams())


class TestEstimateFlow:
    def test_recovers_translation(self):
        y_ref, y_t = textured_pair((3, -2))
        flow = estimate_flow(y_ref, y_t)
        assert endpoint_error(flow, FlowField.uniform(flow.shape, 3, -2)) <= 0.3

    def test_constant_image(self):
        flow = estimate_flow(np.full((32, 32), 0.4), np.random.default_rng(0).random((32, 32)))
        assert flow.low_confidence
        assert not flow.u.any() and not flow.v.any()

    def test_fully_masked_gives_zero_flow(self):
        y_ref, y_t = textured_pair((1, 0), size=32)
        full = np.ones((32, 32), dtype=bool)
        flow = estimate_flow(y_ref, y_t, full, full)
        np.testing.assert_allclose(flow.u, 0.0)
        np.testing.assert_allclose(flow.v, 0.0)

    def test_occlusion_masks_help_behind_fence(self):
        spec = SceneSpec(width=96, height=96, motions=[(3.0, -2.0), (0.0, 0.0)], noise_sigma=0.0, seed=4)
        frames, gt = render_scene(spec)
        truth = gt.flows[0]
        aware = estimate_flow(frames[0], frames[1], gt.masks[0], gt.masks[1])
        unaware = estimate_flow(frames[0], frames[1])
        aware_epe = endpoint_error(aware, truth)
        assert aware_epe <= 0.5
        assert aware_epe < endpoint_error(unaware, truth)

    def test_mask_size_mismatch(self):
        with pytest.raises(ValueError):
            estimate_flow(np.zeros((32, 32)), np.zeros((32, 32)), np.zeros((16, 16), dtype=bool))


class TestFlowFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        flow = FlowField(rng.normal(size=(7, 9)).astype(np.float32), rng.normal(size=(7, 9)).astype(np.float32))
        write_flo(tmp_path / 'f.flo', flow)
        assert (tmp_path / 'f.flo').read_bytes()[:4] == b'PIEH'
        back = read_flo(tmp_path / 'f.flo')
        np.testing.assert_array_equal(back.u, flow.u)
        np.testing.assert_array_equal(back.v, flow.v)

    def test_bad_magic(self, tmp_path):
        (tmp_path / 'x.flo').write_bytes(b'\x00' * 20)
        with pytest.raises(FileFormatError):
            read_flo(tmp_path / 'x.flo')

    def test_truncated(self, tmp_path):
        write_flo(tmp_path / 'f.flo', FlowField.zeros((4, 4)))
        data = (tmp_path / 'f.flo').read_bytes()
        (tmp_path / 't.flo').write_bytes(data[:-8])
        with pytest.raises(FileFormatError):
            read_flo(tmp_path / 't.flo')

    def test_colour_coding(self):
        rgb = flow_to_color(FlowField.zeros((5, 6)))
        assert rgb.shape == (5, 6, 3)
        np.testing.assert_allclose(rgb, 1.0)
        moving = flow_to_color(FlowField.uniform((5, 6), 1.0, 0.0))
        np.testing.assert_allclose(moving[0, 0], [1.0, 0.0, 0.0], atol=1e-12)
