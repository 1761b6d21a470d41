"""Decay synthesis against closed-form values; phase-graph simulation against
a per-spin Bloch (isochromat) oracle."""

import numpy as np
import pytest

from qfit import autodiff as ad
from qfit.errors import ConfigError, QfitError, ShapeError
from qfit.signal_models import (DEFAULT_STATE_CAP, EchoProtocol, FispSchedule,
                                default_schedule, default_t1_grid_ms,
                                default_t2_grid_ms, epg_fisp, epg_fisp_batch,
                                generate_dictionary, mono_exp_synth,
                                synth_stack)

from oracles import isochromat_fisp, mono_exp_direct


# ---------------------------------------------------------------------------
# protocols and mono-exponential synthesis
# ---------------------------------------------------------------------------

def test_protocol_echo_times():
    p10 = EchoProtocol.t2_mapping_10echo()
    np.testing.assert_allclose(p10.te_ms, 6.0 + 6.0 * np.arange(10))
    p4 = EchoProtocol.t2star_mapping_4echo()
    np.testing.assert_allclose(p4.te_ms, [43.0, 67.0, 91.0, 115.0])
    with pytest.raises(ConfigError):
        EchoProtocol(te_first_ms=0.0, te_step_ms=6.0, n_echoes=4)
    with pytest.raises(ConfigError):
        EchoProtocol(te_first_ms=6.0, te_step_ms=6.0, n_echoes=1)


def test_mono_exp_matches_direct():
    proto = EchoProtocol.t2_mapping_10echo()
    m0 = np.array([[[[1.5]]]])
    t2 = np.array([[[[80.0]]]])
    got = mono_exp_synth(ad.Tensor(m0), ad.Tensor(t2), proto).data[0, :, 0, 0]
    want = mono_exp_direct(1.5, 80.0, proto.te_ms)
    np.testing.assert_allclose(got, want, rtol=1e-14)


def test_mono_exp_gradcheck():
    proto = EchoProtocol(te_first_ms=5.0, te_step_ms=10.0, n_echoes=4)
    rng = np.random.default_rng(0)
    m0 = rng.uniform(0.5, 2.0, size=(1, 1, 3, 3))
    t2 = rng.uniform(30.0, 200.0, size=(1, 1, 3, 3))
    wgt = rng.normal(size=(1, 4, 3, 3))

    def f(m, t):
        return ad.reduce_sum(ad.mul(mono_exp_synth(m, t, proto), ad.Tensor(wgt)))

    res = ad.gradcheck(f, [m0, t2], name="mono_exp")
    assert res.passed, f"max rel err {res.max_rel_err:.3e}"


def test_mono_exp_validation():
    proto = EchoProtocol.t2_mapping_10echo()
    with pytest.raises(ShapeError):
        mono_exp_synth(ad.Tensor(np.ones((1, 1, 2, 2))),
                       ad.Tensor(np.zeros((1, 1, 2, 2))), proto)  # t2 = 0
    with pytest.raises(ShapeError):
        mono_exp_synth(ad.Tensor(np.ones((1, 2, 2, 2))),
                       ad.Tensor(np.ones((1, 2, 2, 2))), proto)   # 2 channels


def test_synth_stack_mask_and_errors():
    proto = EchoProtocol(te_first_ms=10.0, te_step_ms=10.0, n_echoes=3)
    m0 = np.array([[1.0, 2.0], [3.0, 4.0]])
    t2 = np.array([[50.0, 100.0], [150.0, -1.0]])
    mask = np.array([[True, True], [True, False]])
    stack = synth_stack(m0, t2, proto, mask=mask)
    assert stack.shape == (3, 2, 2)
    np.testing.assert_allclose(stack[:, 1, 1], 0.0)
    np.testing.assert_allclose(stack[1, 0, 1], 2.0 * np.exp(-20.0 / 100.0))
    with pytest.raises(ShapeError):
        synth_stack(m0, t2, proto)  # negative t2 now inside the mask


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def test_default_schedule_shape_and_values():
    s = default_schedule()
    assert s.n_tr == 600
    assert s.tr_ms == 12.0 and s.te_ms == 2.0 and s.inversion
    np.testing.assert_allclose(s.flip_deg[0], 10.0)
    np.testing.assert_allclose(s.flip_deg[125], 60.0)   # |sin| peak
    np.testing.assert_allclose(s.flip_deg[250], 10.0, atol=1e-9)
    assert s.flip_deg.min() >= 10.0 and s.flip_deg.max() <= 60.0


def test_schedule_validation():
    with pytest.raises(ConfigError):
        FispSchedule(flip_deg=np.array([200.0]))
    with pytest.raises(ConfigError):
        FispSchedule(flip_deg=np.array([30.0]), tr_ms=5.0, te_ms=5.0)
    with pytest.raises(ConfigError):
        FispSchedule(flip_deg=np.array([]))


# ---------------------------------------------------------------------------
# phase-graph simulation vs the isochromat oracle
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("t1,t2", [(800.0, 80.0), (1400.0, 90.0), (300.0, 40.0)])
def test_epg_matches_isochromats_no_truncation(t1, t2):
    # 40 repetitions keep every populated order below the cap, so the two
    # simulations agree to floating-point accuracy
    sched = default_schedule(40)
    got = epg_fisp(t1, t2, sched)
    want = isochromat_fisp(t1, t2, sched.flip_deg, sched.tr_ms, sched.te_ms,
                           inversion=True, n_spins=128)
    assert got.shape == (40,)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_epg_matches_isochromats_with_inv_delay():
    sched = FispSchedule(flip_deg=default_schedule(30).flip_deg, tr_ms=12.0,
                         te_ms=2.0, inversion=True, inv_delay_ms=20.0)
    got = epg_fisp(1000.0, 100.0, sched)
    want = isochromat_fisp(1000.0, 100.0, sched.flip_deg, 12.0, 2.0,
                           inversion=True, inv_delay_ms=20.0, n_spins=64)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_epg_truncation_stays_close():
    # orders above the cap carry little signal; truncation error is tiny
    sched = default_schedule(200)
    full = epg_fisp(1000.0, 150.0, sched, max_states=200)
    capped = epg_fisp(1000.0, 150.0, sched, max_states=60)
    rel = np.linalg.norm(full - capped) / np.linalg.norm(full)
    assert rel < 1e-2


def test_epg_linear_in_m0():
    sched = default_schedule(50)
    one = epg_fisp(900.0, 70.0, sched, m0=1.0)
    scaled = epg_fisp(900.0, 70.0, sched, m0=2.5)
    np.testing.assert_allclose(scaled, 2.5 * one, rtol=1e-13)


def test_epg_batch_matches_scalar_bitwise():
    sched = default_schedule(60)
    t1s = np.array([500.0, 1000.0, 2000.0])
    t2s = np.array([50.0, 90.0, 250.0])
    batch = epg_fisp_batch(t1s, t2s, sched)
    for i in range(3):
        single = epg_fisp(t1s[i], t2s[i], sched)
        assert np.array_equal(batch[i], single)


def test_epg_inversion_flips_first_echo():
    flips = 10.0 + 50.0 * np.abs(np.sin(np.pi * np.arange(20) / 250.0))
    inv = epg_fisp(800.0, 80.0, FispSchedule(flip_deg=flips, inversion=True))
    no = epg_fisp(800.0, 80.0, FispSchedule(flip_deg=flips, inversion=False))
    np.testing.assert_allclose(inv[0], -no[0], rtol=1e-13)


def test_epg_signal_is_purely_imaginary_and_bounded():
    sched = default_schedule(100)
    sig = epg_fisp(1200.0, 110.0, sched, m0=0.8)
    assert np.all(sig.real == 0.0)
    assert np.abs(sig).max() <= 0.8 + 1e-12


def test_epg_determinism():
    sched = default_schedule(80)
    a = epg_fisp_batch([600.0, 1500.0], [60.0, 200.0], sched)
    b = epg_fisp_batch([600.0, 1500.0], [60.0, 200.0], sched)
    assert np.array_equal(a, b)


def test_epg_validation():
    sched = default_schedule(10)
    with pytest.raises(ConfigError):
        epg_fisp(-1.0, 50.0, sched)
    with pytest.raises(ConfigError):
        epg_fisp(1000.0, 0.0, sched)
    with pytest.raises(ConfigError):
        epg_fisp(1000.0, 50.0, sched, max_states=0)


# ---------------------------------------------------------------------------
# dictionary generation
# ---------------------------------------------------------------------------

def test_dictionary_prunes_and_orders():
    sched = default_schedule(20)
    t1g = np.array([100.0, 300.0])
    t2g = np.array([50.0, 150.0, 400.0])
    d = generate_dictionary(t1g, t2g, sched)
    # admissible pairs in t1-major order: (100,50), (300,50), (300,150)
    np.testing.assert_allclose(d.t1_ms, [100.0, 300.0, 300.0])
    np.testing.assert_allclose(d.t2_ms, [50.0, 50.0, 150.0])
    assert d.n_atoms == 3
    np.testing.assert_allclose(np.linalg.norm(d.atoms_unit, axis=1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(d.norms, np.linalg.norm(d.atoms, axis=1))


def test_dictionary_atoms_match_single_simulations():
    sched = default_schedule(25)
    d = generate_dictionary(np.array([800.0]), np.array([60.0, 80.0]), sched)
    np.testing.assert_array_equal(d.atoms[1], epg_fisp(800.0, 80.0, sched))


def test_default_grid_admissible_count():
    # independent count of pairs with t2 <= t1 over the default grids
    t1g, t2g = default_t1_grid_ms(), default_t2_grid_ms()
    want = sum(int((t2g <= t1).sum()) for t1 in t1g)
    assert want == 20766  # frozen: computed from the grid definitions
    assert t1g.size == 146 and t2g.size == 146
    assert t1g[0] == 100.0 and t1g[-1] == 3000.0
    assert t2g[0] == 10.0 and t2g[-1] == 300.0


def test_dictionary_empty_admissible_set():
    sched = default_schedule(10)
    with pytest.raises(ConfigError):
        generate_dictionary(np.array([50.0]), np.array([100.0]), sched)


def test_state_cap_default():
    assert DEFAULT_STATE_CAP == 100
