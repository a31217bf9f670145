import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdet import spectral as S


# -- initializers ------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), which=st.integers(0, 2), frac=st.floats(0.0, 0.999))
def test_initializers_have_unit_max(seed, which, frac):
    if which == 0:
        u = S.ic_truncated_fourier((32, 32), 2 + int(frac * 9), seed)
    elif which == 1:
        u = S.ic_grf((32, 32), 2.3 + 1.3 * frac, seed)
    else:
        u = S.ic_diffused_noise((32, 32), 0.00005 + 0.00995 * frac, seed)
    assert u.dtype == np.float64 and np.isrealobj(u)
    assert abs(np.max(np.abs(u)) - 1.0) < 1e-6


def test_initializers_are_deterministic():
    for fn, arg in ((S.ic_truncated_fourier, 5), (S.ic_grf, 3.0), (S.ic_diffused_noise, 0.001)):
        a = fn((16, 16), arg, 7)
        b = fn((16, 16), arg, 7)
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, fn((16, 16), arg, 8))


@pytest.mark.parametrize("fn,bad", [
    (S.ic_truncated_fourier, 1), (S.ic_truncated_fourier, 11),
    (S.ic_grf, 2.2), (S.ic_grf, 3.6),
    (S.ic_diffused_noise, 0.00001), (S.ic_diffused_noise, 0.01),
])
def test_initializer_ranges(fn, bad):
    with pytest.raises(ValueError):
        fn((16, 16), bad, 0)


@pytest.mark.parametrize("cutoff", [2, 5, 10])
def test_truncated_fourier_has_no_energy_above_cutoff(cutoff):
    u = S.ic_truncated_fourier((64, 64), cutoff, 3)
    spec = np.fft.fft2(u)
    i = np.abs(np.fft.fftfreq(64, 1 / 64))
    outside = np.maximum(i[:, None], i[None, :]) >= cutoff
    assert np.max(np.abs(spec[outside])) < 1e-10 * np.max(np.abs(spec))


def test_grf_radial_spectrum_slope():
    n = 256
    u = S.ic_grf((n, n), 3.0, 11)
    power = np.abs(np.fft.fft2(u)) ** 2
    i = np.fft.fftfreq(n, 1 / n)
    shell = np.rint(np.sqrt(i[:, None] ** 2 + i[None, :] ** 2)).astype(int)
    ks = np.arange(4, n // 2 - 8)
    mean_power = np.array([power[shell == k].mean() for k in ks])
    slope = np.polyfit(np.log(ks), np.log(mean_power), 1)[0]
    assert abs(slope + 3.0) < 0.3, slope


def test_gaussian_blobs_properties():
    c_a, c_b, centers = S.ic_gaussian_blobs((64, 64), 4, 0.6, seed=1, return_centers=True)
    assert np.array_equal(c_a + c_b, np.ones((64, 64)))
    assert c_b.min() >= 0.0 and c_b.max() <= 1.0
    assert len(centers) == 4
    for cx, cy in centers:
        assert 0.2 <= cx <= 0.8 and 0.2 <= cy <= 0.8
    _, _, centers = S.ic_gaussian_blobs((64, 64), 4, 0.2, seed=2, return_centers=True)
    assert all(0.4 <= c <= 0.6 for xy in centers for c in xy)
    c_a, c_b = S.ic_gaussian_blobs((16, 16), 0, 0.6, seed=0)
    assert np.all(c_b == 0.0) and np.all(c_a == 1.0)


# -- time stepping ---------------------------------------------------------------------

def test_single_diffusion_step_is_exact():
    grid = S.SpectralGrid((32, 32))
    u0 = S.ic_grf((32, 32), 2.5, 0)[None]
    op = S.diffusion_operator(grid, 0.01, 0.03)
    state = S.SpectralState.from_physical(u0, grid)
    out = S.etdrk_step(state, op.linear, op.nonlinear, 0.05)
    expect = state.coeffs * np.exp(-(0.01 * grid.kx ** 2 + 0.03 * grid.ky ** 2) * 0.05)
    err = np.linalg.norm(out.coeffs - expect) / np.linalg.norm(expect)
    assert err < 1e-12


def test_zero_operator_is_identity():
    grid = S.SpectralGrid((8, 8))
    u_hat = grid.fft(np.random.default_rng(0).standard_normal((1, 8, 8)))
    out = S.etdrk_step(u_hat, np.zeros((1,) + grid.k2.shape), None, 0.3)
    np.testing.assert_array_equal(out, u_hat)
    out4 = S.etdrk_step(u_hat, np.zeros((1,) + grid.k2.shape), lambda v: 0 * v, 0.3, order=4)
    np.testing.assert_allclose(out4, u_hat, rtol=1e-14, atol=1e-14)


def logistic(u0, r, t):
    return u0 * np.exp(r * t) / (1 + u0 * (np.exp(r * t) - 1))


def run_constant_fisher(r, dt, t_end, u0=0.3, order=2):
    grid = S.SpectralGrid((8, 8))
    op = S.fisher_operator(grid, 0.01, r)
    u_hat = grid.fft(np.full((1, 8, 8), u0))
    for _ in range(int(round(t_end / dt))):
        u_hat = S.etdrk_step(u_hat, op.linear, op.nonlinear, dt, order)
    return grid.ifft(u_hat)


def test_fisher_matches_logistic():
    u = run_constant_fisher(5.0, 0.001, 0.15)
    exact = logistic(0.3, 5.0, 0.15)
    assert np.max(np.abs(u - exact)) / exact < 1e-5
    u4 = run_constant_fisher(15.0, 0.001, 0.15, order=4)
    assert np.max(np.abs(u4 - logistic(0.3, 15.0, 0.15))) < 1e-8


def test_etdrk2_convergence_order():
    exact = logistic(0.3, 10.0, 0.2)
    errs = [abs(run_constant_fisher(10.0, dt, 0.2)[0, 0, 0] - exact) for dt in (0.02, 0.01, 0.005)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.8), orders


def test_non_finite_step_names_pde_and_dt():
    grid = S.SpectralGrid((8, 8))
    lin = np.full((1,) + grid.k2.shape, 1e4)
    with np.errstate(all="ignore"), pytest.raises(S.SimulationBlowUp, match=r"heat.*dt=0\.5"):
        S.etdrk_step(grid.fft(np.ones((1, 8, 8))), lin, None, 0.5, name="heat")


# -- full simulations ----------------------------------------------------------------

def diff_spec(**kw):
    base = dict(pde_kind="diff", resolution=(64, 64), dt_store=0.01, substeps=1,
                params={"nu_x": 0.01, "nu_y": 0.02}, num_steps=30, seed=4)
    base.update(kw)
    return S.SolverSpec(**base)


def test_diffusion_trajectory_matches_heat_kernel():
    spec = diff_spec()
    tr = S.simulate(spec)
    assert tr.data.shape == (30, 1, 64, 64)
    grid = S.SpectralGrid((64, 64))
    u0_hat = np.fft.rfft2(tr.data[0, 0])
    decay = -(0.01 * grid.kx ** 2 + 0.02 * grid.ky ** 2)
    for k in range(30):
        exact = np.fft.irfft2(u0_hat * np.exp(decay * k * 0.01), s=(64, 64))
        err = np.linalg.norm(tr.data[k, 0] - exact) / np.linalg.norm(exact)
        assert err < 1e-10, (k, err)


def test_burgers_conserves_mean():
    tr = S.simulate(S.sample_spec("burgers", 3, resolution=64, num_steps=30))
    means = tr.data.mean(axis=(2, 3))
    assert np.max(np.abs(means - means[0])) < 1e-8


def test_inviscid_kdv_conserves_mean():
    spec = S.sample_spec("kdv", 1, resolution=32, num_steps=10)
    spec.params["viscosity"] = 0.0
    tr = S.simulate(spec)
    means = tr.data.mean(axis=(2, 3))
    assert np.max(np.abs(means - means[0])) < 1e-8


def test_shear_mode_decays_exactly():
    n, nu, dt = 32, 0.01, 0.1
    _, y = S.SpectralGrid((n, n)).coords()
    omega = np.sin(2 * np.pi * 3 * y)
    w = omega
    for _ in range(5):
        w = S.vorticity_solver_step(w, nu, dt)
    exact = omega * np.exp(-nu * (2 * np.pi * 3) ** 2 * 5 * dt)
    assert np.linalg.norm(w - exact) / np.linalg.norm(exact) < 1e-10


def test_zero_vorticity_stays_zero():
    assert np.all(S.vorticity_solver_step(np.zeros((16, 16)), 0.01, 0.1) == 0.0)


def test_kolmogorov_forcing_drives_zero_state():
    grid = S.SpectralGrid((16, 16))
    w = S.vorticity_solver_step(np.zeros((16, 16)), 0.001, 0.1, forcing=S.kolmogorov_forcing(grid))
    assert np.max(np.abs(w)) > 0.0
    assert np.allclose(w.std(axis=0), 0.0, atol=1e-12)  # forcing depends on y only


def test_decaying_turbulence_enstrophy_non_increasing():
    tr = S.simulate(S.sample_spec("decay-turb", 0, resolution=64, num_steps=12))
    ens = np.array([S.enstrophy(f) for f in tr.data[:, 0]])
    assert np.all(np.diff(ens) <= 1e-12 * ens[0]), ens


def test_vorticity_velocity_is_divergence_free():
    grid = S.SpectralGrid((32, 32))
    omega = S.ic_grf((32, 32), 3.0, 2)
    u, v = S.velocity_from_vorticity(omega)
    div = grid.ifft(1j * grid.kx_odd * grid.fft(u) + 1j * grid.ky_odd * grid.fft(v))
    assert np.max(np.abs(div)) < 1e-10


@pytest.mark.parametrize("kind", ["burgers", "fisher", "ks"])
def test_periodic_translation_equivariance(kind):
    spec = S.sample_spec(kind, 5, resolution=32, num_steps=4)
    spec.warmup_steps = 0
    u0, _ = S.initial_condition(spec)
    shift = (5, -11)
    a = S.simulate(spec, np.roll(u0, shift, axis=(1, 2))).data
    b = np.roll(S.simulate(spec, u0).data, shift, axis=(2, 3))
    assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-10


@pytest.mark.parametrize("kind", ["diff", "burgers", "gs-alpha"])
def test_fixed_seed_is_bitwise_reproducible(kind):
    spec = S.sample_spec(kind, 2, resolution=32, num_steps=3)
    a = S.simulate(spec)
    b = S.simulate(S.sample_spec(kind, 2, resolution=32, num_steps=3))
    assert a.data.tobytes() == b.data.tobytes()
    assert a.meta == b.meta


def test_blow_up_is_reported():
    spec = diff_spec(params={"nu_x": -5.0, "nu_y": -5.0}, dt_store=0.5, resolution=(16, 16))
    with np.errstate(all="ignore"), pytest.raises(S.SimulationBlowUp, match="diff"):
        S.simulate(spec)


def test_warmup_is_discarded():
    spec = diff_spec(warmup_steps=3, num_steps=2, resolution=(16, 16))
    tr = S.simulate(spec)
    full = S.simulate(diff_spec(num_steps=5, resolution=(16, 16)))
    np.testing.assert_allclose(tr.data, full.data[3:], rtol=1e-12)
    assert tr.t0 == pytest.approx(0.03)


def test_stored_fields_per_kind():
    assert S.FIELDS["decay-turb"] == S.FIELDS["kolm-flow"] and len(S.FIELDS["kolm-flow"]) == 1
    assert len(S.FIELDS["burgers"]) == 2 and len(S.FIELDS["gs-alpha"]) == 2
    assert len(S.PDE_KINDS) == 16


def test_spec_validation():
    with pytest.raises(ValueError, match="powers of two"):
        diff_spec(resolution=(48, 64)).validate()
    with pytest.raises(ValueError, match="substeps"):
        diff_spec(substeps=0).validate()
    with pytest.raises(ValueError, match="missing"):
        diff_spec(params={"nu_x": 0.01}).validate()
    with pytest.raises(ValueError, match="unknown"):
        S.sample_spec("navier", 0)


@pytest.mark.parametrize("kind", S.PDE_KINDS)
def test_sampled_specs_are_valid(kind):
    spec = S.sample_spec(kind, 0)
    assert spec.validate() is spec
    assert spec.order == S.DEFAULT_ORDER.get(kind, 2)
