use nalgebra::DMatrix;
use proptest::prelude::*;
use spinfluor_core::spin::*;
use spinfluor_core::units::{ghz, khz};

fn cavity() -> CavityParams {
    CavityParams::new(ghz(7.7492), khz(640.0), khz(4.5)).unwrap()
}

/// (ω_I, A, B) with |ω_I| > 5·max(|A|, |B|).
fn high_field() -> impl Strategy<Value = (f64, f64, f64)> {
    (200.0f64..2000.0, prop::bool::ANY, -1.0f64..1.0, 0.0f64..1.0).prop_map(|(wi, neg, a, b)| {
        let w = khz(wi) * if neg { -1.0 } else { 1.0 };
        (w, a * w.abs() / 5.5, b * w.abs() / 5.5)
    })
}

fn sx(n: usize) -> DMatrix<f64> {
    let dim = 2usize << n;
    DMatrix::from_fn(dim, dim, |i, j| if i ^ j == 1 << n { 0.5 } else { 0.0 })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn closed_forms_match_diagonalization((wi, a, b) in high_field()) {
        let p = SpinParams::single(ghz(7.7492), wi, a, b);
        let sys = build_system(&p, &cavity()).unwrap();
        let c = p.coupling(0);
        let ws = p.omega_s;
        let tol = 1e-6 * wi.abs();
        let (up, down) = c.allowed_offsets().unwrap();
        let (dq, zq) = c.forbidden_frequencies().unwrap();
        let all_up = NuclearConfig::ALL_UP;
        prop_assert!((sys.transition(sys.allowed(all_up)).frequency - ws - up).abs() < tol);
        prop_assert!((sys.transition(sys.allowed(NuclearConfig(1))).frequency - ws - down).abs() < tol);
        prop_assert!((sys.transition(sys.double_quantum(0, all_up)).frequency - ws - dq).abs() < tol);
        prop_assert!((sys.transition(sys.zero_quantum(0, all_up)).frequency - ws - zq).abs() < tol);
        let (m_a, m_f) = c.matrix_elements().unwrap();
        prop_assert!((sys.transition(sys.allowed(all_up)).matrix_element - m_a).abs() < 1e-6 * m_a);
        let m_dq = sys.transition(sys.double_quantum(0, all_up)).matrix_element;
        prop_assert!((m_dq - m_f).abs() <= 1e-6 * m_a);
    }

    #[test]
    fn matrix_elements_from_eigenvectors((wi, a, b) in high_field()) {
        let p = SpinParams::single(ghz(7.7492), wi, a, b);
        let sys = build_system(&p, &cavity()).unwrap();
        let v = sys.eigenvectors();
        let m = v.transpose() * sx(1) * v;
        let half = sys.n_levels() / 2;
        for upper in half..sys.n_levels() {
            let mut total = 0.0;
            for &t in sys.decay_channels(upper) {
                let tr = sys.transition(t);
                prop_assert!((tr.matrix_element - m[(tr.lower, tr.upper)].abs()).abs() < 1e-12);
                prop_assert!((0.0..=0.5).contains(&tr.matrix_element));
                total += tr.matrix_element.powi(2);
            }
            let exact: f64 = (0..half).map(|l| m[(l, upper)].powi(2)).sum();
            prop_assert!((total - exact).abs() < 1e-12);
            prop_assert!((total - 0.25).abs() < 0.25 * (b / wi).powi(2) + 1e-12);
        }
    }

    #[test]
    fn forbidden_element_is_b_over_four_omega_i(wi in 500.0f64..2000.0, a in -20.0f64..20.0, b in 1.0f64..40.0) {
        let c = Coupling { omega_i: khz(-wi), a: khz(a), b: khz(b) };
        let exact = c.matrix_elements().unwrap().1;
        prop_assert!((exact - c.forbidden_matrix_element_approx()).abs() < 0.02 * exact);
    }

    #[test]
    fn branching_sums_to_one((wi, a, b) in high_field()) {
        let p = SpinParams::single(ghz(7.7492), wi, a, b);
        let sys = build_system(&p, &cavity()).unwrap();
        for upper in sys.n_levels() / 2..sys.n_levels() {
            let s: f64 = sys.decay_channels(upper).iter().map(|&t| sys.transition(t).rate).sum();
            prop_assert!((s - sys.total_decay_rate(upper)).abs() <= 1e-12 * s);
        }
        let x = sys.cross_relaxation_exact(0);
        prop_assert!((0.0..1.0).contains(&x.eta_d) && (0.0..1.0).contains(&x.eta_z));
    }

    #[test]
    fn purcell_filter_is_even(d in -1e8f64..1e8) {
        let c = cavity();
        prop_assert_eq!(purcell_rate(&c, d), purcell_rate(&c, -d));
    }

    #[test]
    fn ac_zeeman_solution_satisfies_its_equation(wi in 300.0f64..1500.0, a in -40.0f64..40.0, b in 0.0f64..110.0, frac in 0.0f64..0.6) {
        // Beyond Ω ≈ |ω_I|/√2 the continuous root ceases to exist.
        let om = frac * wi;
        let c = Coupling { omega_i: khz(-wi), a: khz(a), b: khz(b) };
        prop_assume!(c.nuclear_splittings().is_ok());
        let (wp, wm) = c.nuclear_splittings().unwrap();
        let (d0, z0) = c.forbidden_frequencies().unwrap();
        let (d, z) = c.ac_zeeman_frequencies(khz(om)).unwrap();
        let dw = wp - wm;
        prop_assert!(ac_zeeman_residual(d, d0, dw, khz(om)).abs() < 1e-10 * d0.abs());
        prop_assert!(ac_zeeman_residual(z, z0, dw, khz(om)).abs() < 1e-10 * z0.abs());
        // The drive pulls both lines toward ω_S.
        prop_assert!(d.abs() <= d0.abs() * (1.0 + 1e-12));
        prop_assert!(z.abs() <= z0.abs() * (1.0 + 1e-12));
    }
}

#[test]
fn ac_zeeman_without_continuous_root_is_an_error() {
    let c = Coupling { omega_i: khz(-300.0), a: 0.0, b: 0.0 };
    assert!(c.ac_zeeman_frequencies(khz(290.0)).is_err());
}

#[test]
fn eta_is_monotone_in_b_and_omega_i() {
    let c = cavity();
    let eta = |wi: f64, b: f64| {
        let p = SpinParams::single(c.omega_0, khz(-wi), khz(34.5), khz(b));
        build_system(&p, &c).unwrap().cross_relaxation_exact(0).eta_d
    };
    let bs: Vec<f64> = (1..40).map(|k| eta(788.1, 3.0 * k as f64)).collect();
    assert!(bs.windows(2).all(|w| w[1] > w[0]));
    let ws: Vec<f64> = (0..40).map(|k| eta(500.0 + 25.0 * k as f64, 74.0)).collect();
    assert!(ws.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn zero_quantum_sideband_resonance_opens_the_channel() {
    let mut c = cavity();
    let p = SpinParams::single(c.omega_0, khz(-788.1), khz(34.5), khz(74.0));
    // Put the zero-quantum sideband, at ω_S − ω_I, on the resonator.
    c.omega_0 = p.omega_s - p.omega_i;
    let sys = build_system(&p, &c).unwrap();
    let x = cross_relaxation(&sys, &c);
    let expect = c.purcell_max() * p.nuclei[0].b.powi(2) / (4.0 * p.omega_i.powi(2));
    assert!((x.gamma_x_z - expect).abs() < 1e-12 * expect);
}

#[test]
fn two_nuclei_tensor_product() {
    let p = SpinParams::new(
        ghz(7.7492),
        khz(-788.1),
        vec![Nucleus::new(khz(35.8), khz(40.0)), Nucleus::new(khz(19.0), khz(11.0))],
    )
    .unwrap();
    let sys = build_system(&p, &cavity()).unwrap();
    assert_eq!(sys.n_levels(), 8);
    assert!(sys.reconstruction_error() < 1e-12);
    // Allowed lines sit at ±(A₁ ± A₂)/2 to first order.
    let mut offs: Vec<f64> = (0..4)
        .map(|c| (sys.transition(sys.allowed(NuclearConfig(c))).frequency - p.omega_s) / khz(1.0))
        .collect();
    offs.sort_by(f64::total_cmp);
    let expect = [-27.4, -8.4, 8.4, 27.4];
    for (o, e) in offs.iter().zip(expect) {
        assert!((o - e).abs() < 0.3, "{offs:?}");
    }
}
