use proptest::prelude::*;
use svflow::analysis::{flow_sse, ncc};
use svflow::grid::{compose_deformations, warp};
use svflow::insilico::{BsplineDeformationSpec, BsplineField};
use svflow::io::{decode_svol, encode_svol, Volume};
use svflow::svf::{bchd_compose, lie_bracket, BchdConfig};
use svflow::train::{sgd_momentum_step, MomentumState, PlateauScheduler};
use svflow::autodiff::Tensor;
use svflow::{FieldKind, GridGeometry, ScalarVolume, VectorField};

fn geom() -> GridGeometry {
    GridGeometry::cube(8).unwrap()
}

/// Sum of low-frequency sinusoids per component.
fn field(c: &[f64]) -> VectorField {
    VectorField::from_fn(geom(), FieldKind::Velocity, |[i, j, k]| {
        let (x, y, z) = (i as f64, j as f64, k as f64);
        std::array::from_fn(|d| {
            let a = &c[4 * d..4 * d + 4];
            a[0] * (0.4 * x + a[3]).sin() + a[1] * (0.5 * y - a[3]).cos() + a[2] * (0.3 * z + 0.2 * x).sin()
        })
    })
}

fn coeffs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5..1.5f64, 12)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bracket_is_antisymmetric(a in coeffs(), b in coeffs()) {
        let (v, w) = (field(&a), field(&b));
        let vw = lie_bracket(&v, &w).unwrap();
        let wv = lie_bracket(&w, &v).unwrap();
        let neg: Vec<f64> = wv.data().iter().map(|x| -x).collect();
        prop_assert!(max_abs_diff(vw.data(), &neg) <= 1e-12);
        prop_assert!(lie_bracket(&v, &v).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn bracket_is_bilinear(a in coeffs(), b in coeffs(), c in coeffs(), s in -2.0..2.0f64, t in -2.0..2.0f64) {
        let (u, v, w) = (field(&a), field(&b), field(&c));
        let mix = u.scaled(s).try_add(&v.scaled(t)).unwrap();
        let lhs = lie_bracket(&mix, &w).unwrap();
        let rhs = lie_bracket(&u, &w).unwrap().scaled(s).try_add(&lie_bracket(&v, &w).unwrap().scaled(t)).unwrap();
        let scale = 1.0 + rhs.max_abs();
        prop_assert!(max_abs_diff(lhs.data(), rhs.data()) <= 1e-10 * scale);
    }

    #[test]
    fn bch_with_zero_is_identity(a in coeffs(), order in 1u8..=4) {
        let v = field(&a);
        let zero = VectorField::zeros(geom(), FieldKind::Velocity);
        let cfg = BchdConfig::new(order).unwrap();
        prop_assert_eq!(bchd_compose(&v, &zero, cfg).unwrap().into_data(), v.data().to_vec());
        prop_assert_eq!(bchd_compose(&zero, &v, cfg).unwrap().into_data(), v.data().to_vec());
    }

    #[test]
    fn bch_order_one_is_summation(a in coeffs(), b in coeffs()) {
        let (v, w) = (field(&a), field(&b));
        let z = bchd_compose(&v, &w, BchdConfig::summation()).unwrap();
        prop_assert_eq!(z.into_data(), v.try_add(&w).unwrap().into_data());
    }

    #[test]
    fn bch_of_commuting_fields_is_the_sum(a in coeffs(), s in -1.0..1.0f64) {
        let v = field(&a);
        let w = v.scaled(s);
        let z = bchd_compose(&v, &w, BchdConfig::new(4).unwrap()).unwrap();
        prop_assert!(max_abs_diff(z.data(), v.try_add(&w).unwrap().data()) <= 1e-10);
    }

    #[test]
    fn flow_sse_is_a_symmetric_semimetric(a in coeffs(), b in coeffs()) {
        let (p, q) = (field(&a).with_kind(FieldKind::Displacement), field(&b).with_kind(FieldKind::Displacement));
        let pq = flow_sse(&p, &q).unwrap();
        prop_assert_eq!(pq, flow_sse(&q, &p).unwrap());
        prop_assert!(pq >= 0.0);
        prop_assert_eq!(flow_sse(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn svol_round_trip(vals in prop::collection::vec(-1e6..1e6f32, 3 * 4 * 5 * 6), comps in prop::sample::select(vec![1u8, 3])) {
        let g = GridGeometry::new([4, 5, 6], [1.0, 0.5, 2.0]).unwrap();
        let n = comps as usize * g.num_voxels();
        let data: Vec<f64> = vals[..n].iter().map(|&v| f64::from(v)).collect();
        let bytes = encode_svol(&g, comps, &data);
        let back = decode_svol(&bytes).unwrap();
        prop_assert_eq!(back.geometry(), &g);
        let got = match back {
            Volume::Scalar(s) => s.into_data(),
            Volume::Field(f) => f.into_data(),
        };
        prop_assert_eq!(&got, &data);
        prop_assert_eq!(encode_svol(&g, comps, &got), bytes);
    }

    #[test]
    fn generator_is_linear_in_its_weights(
        c1 in prop::collection::vec(-2.0..2.0f64, 81),
        c2 in prop::collection::vec(-2.0..2.0f64, 81),
        s in -3.0..3.0f64,
    ) {
        let g = geom();
        let spec = BsplineDeformationSpec { scale: 1.3, ..BsplineDeformationSpec::default_for(&g) };
        let split = |c: &[f64]| -> [Vec<f64>; 3] { std::array::from_fn(|d| c[27 * d..27 * (d + 1)].to_vec()) };
        let mixed: Vec<f64> = c1.iter().zip(&c2).map(|(x, y)| x + s * y).collect();
        let f1 = BsplineField::from_coeffs(spec, g, split(&c1)).unwrap().sample(FieldKind::Displacement);
        let f2 = BsplineField::from_coeffs(spec, g, split(&c2)).unwrap().sample(FieldKind::Displacement);
        let fm = BsplineField::from_coeffs(spec, g, split(&mixed)).unwrap().sample(FieldKind::Displacement);
        let expect = f1.try_add(&f2.scaled(s)).unwrap();
        prop_assert!(max_abs_diff(fm.data(), expect.data()) <= 1e-10 * (1.0 + expect.max_abs()));
    }

    #[test]
    fn ncc_ignores_positive_affine_intensity_maps(a in coeffs(), scale in 0.1..10.0f64, shift in -5.0..5.0f64) {
        let f = field(&a);
        let x = ScalarVolume::new(geom(), f.component(0).to_vec()).unwrap();
        let y = ScalarVolume::new(geom(), f.component(1).iter().zip(f.component(2)).map(|(p, q)| p + 0.3 * q).collect()).unwrap();
        prop_assume!(x.data().iter().any(|v| (v - x.data()[0]).abs() > 1e-3));
        prop_assume!(y.data().iter().any(|v| (v - y.data()[0]).abs() > 1e-3));
        let y2 = ScalarVolume::new(geom(), y.data().iter().map(|v| scale * v + shift).collect()).unwrap();
        let r = ncc(&x, &y).unwrap();
        prop_assert!((r - ncc(&x, &y2).unwrap()).abs() <= 1e-9);
        prop_assert!(r.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn identity_warp_and_compose_are_exact(a in coeffs()) {
        let f = field(&a);
        let img = ScalarVolume::new(geom(), f.component(0).to_vec()).unwrap();
        let id = VectorField::identity(geom());
        prop_assert_eq!(warp(&img, &id).unwrap().into_data(), img.data().to_vec());
        let phi = f.with_kind(FieldKind::Displacement);
        prop_assert_eq!(compose_deformations(&phi, &id).unwrap().into_data(), phi.data().to_vec());
        prop_assert_eq!(compose_deformations(&id, &phi).unwrap().into_data(), phi.data().to_vec());
    }

    #[test]
    fn momentum_recurrence(g in prop::collection::vec(-1.0..1.0f64, 1..20), lr in 0.0..0.1f64, beta in 0.0..0.99f64) {
        let n = g.len();
        let mut params = vec![Tensor::new(vec![n], vec![0.5; n]).unwrap()];
        let mut state = MomentumState::zeros_like(&params);
        let grads = vec![g.clone()];
        sgd_momentum_step(&mut params, &grads, &mut state, lr, beta).unwrap();
        sgd_momentum_step(&mut params, &grads, &mut state, lr, beta).unwrap();
        for (i, gi) in g.iter().enumerate() {
            // m1 = g, m2 = βg + g
            let expect = 0.5 - lr * gi - lr * (beta * gi + gi);
            prop_assert!((params[0].data()[i] - expect).abs() <= 1e-15);
            prop_assert!((state.buffers[0][i] - (beta * gi + gi)).abs() <= 1e-15);
        }
    }

    #[test]
    fn plateau_learning_rate_never_increases(losses in prop::collection::vec(0.0..10.0f64, 1..80)) {
        let mut s = PlateauScheduler::new(1e-2, 0.5, 3, 1e-4, 1e-9);
        let mut prev = 1e-2;
        for l in losses {
            let (lr, _) = s.step(l).unwrap();
            prop_assert!(lr <= prev);
            prop_assert!(lr == prev || lr == prev * 0.5);
            prev = lr;
        }
    }
}
