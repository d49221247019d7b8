import math

import numpy as np
import pytest

from pdmicro.objects import ObjectSpec, generate_object
from pdmicro.optics import OpticalConfig, make_frequency_grid, psf_from_phase
from pdmicro.simulate import (
    AberrationSample,
    DiversityStack,
    NoiseParams,
    PhaseNoiseParams,
    SpatialVarianceParams,
    apply_noise,
    apply_phase_noise,
    convolve_cropped,
    default_diversity_z,
    draw_tile_perturbations,
    sample_aberration,
    simulate_spatially_variant_stack,
    simulate_stack,
    _tile_windows,
)
from pdmicro.zernike import ZernikeVector, normalized_norms, wrms


@pytest.fixture(scope="module")
def small_cfg():
    return OpticalConfig(grid_size=64)


@pytest.fixture(scope="module")
def norms():
    grid = make_frequency_grid(OpticalConfig(grid_size=128))
    return normalized_norms(range(4, 46), grid)


# ---------------------------------------------------------------- objects

def test_object_determinism():
    spec = ObjectSpec(kind="cells-dense", canvas_size=128, seed=11)
    assert np.array_equal(generate_object(spec), generate_object(spec))


@pytest.mark.parametrize("kind", ["cells-dense", "cells-sparse", "filaments", "texture"])
def test_object_range_and_content(kind):
    field = generate_object(ObjectSpec(kind=kind, canvas_size=128, seed=3))
    assert field.shape == (128, 128)
    assert field.min() >= 0.0 and field.max() <= 1.0
    assert field.max() == 1.0  # non-degenerate


def test_object_zero_count():
    field = generate_object(ObjectSpec(kind="cells-dense", canvas_size=64, cell_count=0))
    assert np.array_equal(field, np.zeros((64, 64)))


def test_sparse_peaks_higher_at_equal_total():
    dense = generate_object(ObjectSpec(kind="cells-dense", canvas_size=256, seed=5))
    sparse = generate_object(ObjectSpec(kind="cells-sparse", canvas_size=256, seed=5))
    total = 1000.0
    dense = dense * (total / dense.sum())
    sparse = sparse * (total / sparse.sum())
    assert sparse.max() > dense.max()


def test_object_margin_band_is_empty():
    spec = ObjectSpec(kind="cells-dense", canvas_size=128, margin_fraction=0.25, seed=2)
    field = generate_object(spec)
    m = 32
    border = np.concatenate([field[:m].ravel(), field[-m:].ravel(),
                             field[:, :m].ravel(), field[:, -m:].ravel()])
    assert border.max() == 0.0


def test_object_spec_validation():
    with pytest.raises(ValueError):
        ObjectSpec(kind="mitochondria")
    with pytest.raises(ValueError):
        ObjectSpec(cell_count=-1)
    with pytest.raises(ValueError):
        ObjectSpec(margin_fraction=0.6)


# ---------------------------------------------------------------- sampling

def test_sample_aberration_block_scaling(norms):
    rng = np.random.default_rng(0)
    target = 2.0
    sample = sample_aberration(target, rng, norms)
    assert sample.coeffs.indices == tuple(range(4, 46))
    low = ZernikeVector({j: sample.coeffs[j] for j in range(4, 16)})
    high = ZernikeVector({j: sample.coeffs[j] for j in range(16, 46)})
    assert abs(wrms(low, norms) - target) < 1e-6
    assert abs(wrms(high, norms) - target / 2.0) < 1e-6


def test_sample_aberration_zero_target(norms):
    sample = sample_aberration(0.0, np.random.default_rng(1), norms)
    assert all(c == 0.0 for _, c in sample.coeffs.items())


def test_sample_aberration_deterministic(norms):
    a = sample_aberration(1.0, np.random.default_rng(42), norms)
    b = sample_aberration(1.0, np.random.default_rng(42), norms)
    assert a.coeffs == b.coeffs


def test_aberration_sample_validation():
    with pytest.raises(ValueError):
        AberrationSample(ZernikeVector({4: 0.1}), 1.0)


# ---------------------------------------------------------------- convolution

def _direct_crop_convolution(canvas, psf, out):
    """Independent oracle: explicit sum over signed psf offsets."""
    m = canvas.shape[0]
    n = psf.shape[0]
    lo = m // 2 - out // 2
    res = np.zeros((out, out))
    for dy in range(-n // 2, n // 2):
        for dx in range(-n // 2, n // 2):
            w = psf[dy % n, dx % n]
            if w == 0.0:
                continue
            for yy in range(out):
                for xx in range(out):
                    res[yy, xx] += w * canvas[(lo + yy - dy) % m, (lo + xx - dx) % m]
    return res


def test_convolve_cropped_matches_direct_sum():
    rng = np.random.default_rng(9)
    canvas = rng.random((32, 32))
    psf = rng.random((8, 8))
    got = convolve_cropped(canvas, psf, 8)
    want = _direct_crop_convolution(canvas, psf, 8)
    assert np.allclose(got, want, atol=1e-12)


def test_convolve_cropped_delta_psf_is_center_crop():
    rng = np.random.default_rng(1)
    canvas = rng.random((64, 64))
    psf = np.zeros((16, 16))
    psf[0, 0] = 1.0
    got = convolve_cropped(canvas, psf, 16)
    assert np.allclose(got, canvas[24:40, 24:40], atol=1e-12)


def test_convolve_cropped_impulse_object_gives_centered_psf(small_cfg):
    grid = make_frequency_grid(small_cfg)
    psf = psf_from_phase(np.zeros((64, 64)), None, grid)
    canvas = np.zeros((160, 160))
    canvas[80, 80] = 1.0
    got = convolve_cropped(canvas, psf, 64)
    assert np.allclose(got, np.fft.fftshift(psf), atol=1e-12)


def test_convolve_cropped_canvas_too_small():
    with pytest.raises(ValueError):
        convolve_cropped(np.ones((20, 20)), np.ones((16, 16)), 16)


def test_crop_vs_cyclic_interior_agreement(small_cfg):
    # with content strictly inside the field of view, the cyclic model of the
    # cropped view agrees with the crop-convolution; a full canvas does not
    grid = make_frequency_grid(small_cfg)
    rng = np.random.default_rng(4)
    psf = psf_from_phase(rng.normal(0, 0.3, (64, 64)), None, grid)
    import scipy.fft as sfft

    def cyclic(img):
        return sfft.irfft2(sfft.rfft2(img) * sfft.rfft2(np.fft.ifftshift(np.fft.fftshift(psf))), s=img.shape)

    interior = generate_object(ObjectSpec(kind="cells-dense", canvas_size=128,
                                          margin_fraction=0.38, seed=8))
    crop_conv = convolve_cropped(interior, psf, 64)
    fov = interior[32:96, 32:96]
    cyc = cyclic(fov)
    q = slice(16, 48)
    rel = np.abs(crop_conv[q, q] - cyc[q, q]).max() / crop_conv.max()
    assert rel < 1e-8

    full = generate_object(ObjectSpec(kind="cells-dense", canvas_size=128, seed=8))
    crop_full = convolve_cropped(full, psf, 64)
    cyc_full = cyclic(full[32:96, 32:96])
    rel_edge = np.abs(crop_full - cyc_full).max() / crop_full.max()
    assert rel_edge > 1e-4  # edges genuinely differ once content surrounds the view


# ---------------------------------------------------------------- noise

def test_apply_noise_rescales_to_mean_photons():
    rng = np.random.default_rng(0)
    img = np.abs(rng.random((64, 64))) + 0.2
    noise = NoiseParams(photons_per_pixel=200.0, read_sigma=0.0, dark_mean=0.0,
                        quantum_efficiency=1.0)
    out = apply_noise(img, noise, np.random.default_rng(0))
    assert out.mean() == pytest.approx(200.0, rel=0.02)


def test_apply_noise_moments_rough():
    mu = 120.0
    noise = NoiseParams(photons_per_pixel=mu, quantum_efficiency=0.6,
                        dark_mean=5.0, read_sigma=3.0)
    img = np.full((100, 100), 1.0)
    out = apply_noise(img, noise, np.random.default_rng(12))
    want_mean = 0.6 * mu + 5.0
    want_var = 0.36 * mu + 5.0 + 9.0
    assert out.mean() == pytest.approx(want_mean, rel=0.02)
    assert out.var() == pytest.approx(want_var, rel=0.1)


def test_apply_noise_can_go_negative():
    noise = NoiseParams(photons_per_pixel=1.0, dark_mean=0.0, read_sigma=10.0)
    out = apply_noise(np.full((50, 50), 1.0), noise, np.random.default_rng(5))
    assert out.min() < 0.0


def test_apply_noise_rejects_empty_image():
    with pytest.raises(ValueError):
        apply_noise(np.zeros((8, 8)), NoiseParams(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        apply_noise(-np.ones((8, 8)), NoiseParams(), np.random.default_rng(0))


def test_noise_params_validation():
    with pytest.raises(ValueError):
        NoiseParams(photons_per_pixel=0.0)
    with pytest.raises(ValueError):
        NoiseParams(quantum_efficiency=1.5)
    with pytest.raises(ValueError):
        NoiseParams(read_sigma=-1.0)
    assert NoiseParams.high_additive(10.0).dark_mean == 100.0


# ---------------------------------------------------------------- stacks

def test_default_diversity_scheme(small_cfg):
    assert default_diversity_z(small_cfg) == pytest.approx((1.8, 0.0, -1.8))


def test_simulate_stack_shapes_and_truth(small_cfg, norms):
    rng = np.random.default_rng(2)
    sample = sample_aberration(1.0, rng, norms)
    spec = ObjectSpec(canvas_size=128, seed=1)
    stack = simulate_stack(spec, sample, default_diversity_z(small_cfg),
                           NoiseParams(), small_cfg, rng, seed=7)
    assert stack.images.shape == (3, 64, 64)
    assert stack.truth == sample.coeffs
    assert stack.seed == 7
    # aberrated diversity planes are pairwise distinct
    assert not np.array_equal(stack.images[0], stack.images[1])
    assert not np.array_equal(stack.images[1], stack.images[2])


def test_simulate_stack_deterministic(small_cfg, norms):
    spec = ObjectSpec(canvas_size=128, seed=1)
    sample = sample_aberration(1.0, np.random.default_rng(3), norms)

    def run():
        return simulate_stack(spec, sample, default_diversity_z(small_cfg),
                              NoiseParams(), small_cfg, np.random.default_rng(99))

    assert np.array_equal(run().images, run().images)


def test_simulate_stack_noiseless_zero_aberration(small_cfg):
    # in-focus plane of an unaberrated stack is the diffraction-limited image
    spec = ObjectSpec(canvas_size=128, seed=6)
    stack = simulate_stack(spec, ZernikeVector(), (0.0,), None, small_cfg,
                           np.random.default_rng(0))
    grid = make_frequency_grid(small_cfg)
    psf = psf_from_phase(np.zeros((64, 64)), None, grid)
    want = convolve_cropped(generate_object(spec), psf, 64)
    assert np.allclose(stack.images[0], want, atol=1e-12)


def test_simulate_stack_rejects_small_canvas(small_cfg):
    with pytest.raises(ValueError):
        simulate_stack(np.ones((100, 100)), ZernikeVector(), (0.0,), None,
                       small_cfg, np.random.default_rng(0))


def test_stack_validation(small_cfg):
    with pytest.raises(ValueError):
        DiversityStack(images=np.ones((2, 32, 32)), diversity_z=(0.0, 1.0),
                       config=small_cfg)
    with pytest.raises(ValueError):
        DiversityStack(images=np.full((1, 64, 64), np.nan), diversity_z=(0.0,),
                       config=small_cfg)


# ---------------------------------------------------------------- spatial variance

def test_tile_windows_partition_of_unity():
    for tiles in (2, 4):
        w = _tile_windows(64, tiles)
        assert w.shape == (tiles, tiles, 64, 64)
        assert np.allclose(w.sum(axis=(0, 1)), 1.0, atol=1e-12)
        assert w.min() >= 0.0


def test_tile_perturbations_recentred(norms):
    rng = np.random.default_rng(0)
    tiles = draw_tile_perturbations(4, 0.5, rng, norms)
    arr = np.array([[tiles[ty][tx].to_array(range(4, 46)) for tx in range(4)]
                    for ty in range(4)])
    assert np.abs(arr.mean(axis=(0, 1))).max() < 1e-12


def test_spatially_variant_zero_magnitude_delegates(small_cfg, norms):
    spec = ObjectSpec(canvas_size=128, seed=4)
    sample = sample_aberration(1.0, np.random.default_rng(5), norms)
    sv = SpatialVarianceParams(correlation="low-frequency", magnitude=0.0)
    a = simulate_spatially_variant_stack(spec, sample, default_diversity_z(small_cfg),
                                         NoiseParams(), small_cfg, sv,
                                         np.random.default_rng(10))
    b = simulate_stack(spec, sample, default_diversity_z(small_cfg),
                       NoiseParams(), small_cfg, np.random.default_rng(10))
    assert np.array_equal(a.images, b.images)


def test_spatially_variant_stack_runs_and_differs(small_cfg, norms):
    spec = ObjectSpec(canvas_size=128, seed=4)
    sample = sample_aberration(1.0, np.random.default_rng(5), norms)
    sv = SpatialVarianceParams(correlation="low-frequency", magnitude=1.0)
    a = simulate_spatially_variant_stack(spec, sample, default_diversity_z(small_cfg),
                                         None, small_cfg, sv, np.random.default_rng(10))
    b = simulate_stack(spec, sample, default_diversity_z(small_cfg),
                       None, small_cfg, np.random.default_rng(10))
    assert a.images.shape == b.images.shape
    assert not np.allclose(a.images, b.images)


def test_spatially_variant_tile_size_guard(small_cfg, norms):
    sv = SpatialVarianceParams(correlation="high-frequency", magnitude=0.5)  # 8 px tiles at 64
    sample = sample_aberration(1.0, np.random.default_rng(5), norms)
    with pytest.raises(ValueError):
        simulate_spatially_variant_stack(ObjectSpec(canvas_size=128, seed=0), sample,
                                         (0.0, 1.8), None, small_cfg, sv,
                                         np.random.default_rng(0))


def test_sv_params_validation():
    with pytest.raises(ValueError):
        SpatialVarianceParams(correlation="none")
    with pytest.raises(ValueError):
        SpatialVarianceParams(magnitude=-0.1)
    assert SpatialVarianceParams(correlation="high-frequency").tiles == 8


# ---------------------------------------------------------------- phase noise

def test_phase_noise_zero_sigma_copies(norms):
    sample = sample_aberration(1.0, np.random.default_rng(0), norms)
    fronts = apply_phase_noise(sample, 3, PhaseNoiseParams(0.0), np.random.default_rng(1))
    assert all(f == sample.coeffs for f in fronts)


def test_phase_noise_recentred(norms):
    sample = sample_aberration(1.0, np.random.default_rng(0), norms)
    fronts = apply_phase_noise(sample, 5, PhaseNoiseParams(0.2), np.random.default_rng(1))
    arr = np.array([f.to_array(range(4, 46)) for f in fronts])
    mean_dev = arr.mean(axis=0) - sample.coeffs.to_array(range(4, 46))
    assert np.abs(mean_dev).max() < 1e-12
    assert not np.allclose(arr[0], arr[1])


def test_phase_noise_in_stack(small_cfg, norms):
    sample = sample_aberration(0.5, np.random.default_rng(0), norms)
    fronts = apply_phase_noise(sample, 3, PhaseNoiseParams(0.3), np.random.default_rng(2))
    spec = ObjectSpec(canvas_size=128, seed=3)
    stack = simulate_stack(spec, sample, default_diversity_z(small_cfg), None,
                           small_cfg, np.random.default_rng(0), per_image_coeffs=fronts)
    plain = simulate_stack(spec, sample, default_diversity_z(small_cfg), None,
                           small_cfg, np.random.default_rng(0))
    assert stack.truth == sample.coeffs
    assert not np.allclose(stack.images, plain.images)


# ---------------------------------------------------------------- stack io

def test_stack_roundtrip(tmp_path, small_cfg, norms):
    from pdmicro.stack_io import load_stack, save_stack

    rng = np.random.default_rng(8)
    sample = sample_aberration(1.0, rng, norms)
    stack = simulate_stack(ObjectSpec(canvas_size=128, seed=2), sample,
                           default_diversity_z(small_cfg), NoiseParams(),
                           small_cfg, rng, seed=55)
    save_stack(stack, tmp_path / "stack")
    back = load_stack(tmp_path / "stack")
    assert back.config == stack.config
    assert back.diversity_z == stack.diversity_z
    assert back.seed == 55
    assert back.noise == stack.noise
    assert np.allclose(back.truth.to_array(range(4, 46)),
                       stack.truth.to_array(range(4, 46)), atol=1e-7)
    assert np.allclose(back.images, stack.images.astype(np.float32), atol=0)


def test_stack_io_partial_metadata(tmp_path, small_cfg):
    from pdmicro.stack_io import load_stack, save_stack

    stack = simulate_stack(ObjectSpec(canvas_size=128, seed=2), ZernikeVector({4: 0.5}),
                           (0.0, 1.8), None, small_cfg, np.random.default_rng(0))
    save_stack(stack, tmp_path / "s2")
    back = load_stack(tmp_path / "s2")
    assert back.noise is None
    assert back.truth.as_dict() == {4: 0.5}


def test_stack_io_missing_metadata(tmp_path):
    from pdmicro.stack_io import load_stack

    with pytest.raises(FileNotFoundError):
        load_stack(tmp_path)
