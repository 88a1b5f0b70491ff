use proptest::prelude::*;

use crreg::affine::{build_matrix, compose, decompose, invert, AffineMatrix, AffineParams};
use crreg::nifti::{read_nifti, write_nifti, Datatype};
use crreg::similarity::{
    correlation_ratio, cr_loss_symmetric, discrete_cr_oracle, mutual_information, ParzenConfig,
};
use crreg::volume::Volume;
use crreg::warp::{warp, Interpolation};

fn params() -> impl Strategy<Value = AffineParams> {
    (
        prop::array::uniform3(-0.3..0.3f64),
        prop::array::uniform3(-0.5..0.5f64),
        prop::array::uniform3(0.8..1.2f64),
        prop::array::uniform3(-0.15..0.15f64),
    )
        .prop_map(|(translation, rotation, scale, shear)| AffineParams {
            translation,
            rotation,
            scale,
            shear,
        })
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (8usize..200).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0..=1.0f64, n),
            prop::collection::vec(0.0..=1.0f64, n),
        )
    })
}

fn non_constant(v: &[f64]) -> bool {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64 > 1e-6
}

fn volume() -> impl Strategy<Value = Volume> {
    (prop::array::uniform3(1usize..6), prop::array::uniform3(0.5..3.0f64)).prop_flat_map(|(dims, spacing)| {
        prop::collection::vec(-1e3..1e3f64, dims.iter().product::<usize>())
            .prop_map(move |d| Volume::new(dims, spacing, d).unwrap())
    })
}

fn close(a: &AffineMatrix, b: &AffineMatrix, tol: f64) -> bool {
    a.rows().iter().flatten().zip(b.rows().iter().flatten()).all(|(x, y)| (x - y).abs() < tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn decompose_inverts_build(p in params()) {
        let q = decompose(&build_matrix(&p).unwrap()).unwrap();
        for (a, b) in p.to_array().iter().zip(q.to_array()) {
            prop_assert!((a - b).abs() < 1e-9, "{:?} vs {:?}", p, q);
        }
    }

    #[test]
    fn inverse_composes_to_identity(p in params(), r in params()) {
        let m = build_matrix(&p).unwrap();
        let n = build_matrix(&r).unwrap();
        let inv = invert(&m).unwrap();
        prop_assert!(close(&compose(&m, &inv), &AffineMatrix::identity(), 1e-12));
        prop_assert!(close(&compose(&inv, &m), &AffineMatrix::identity(), 1e-12));
        let mn = compose(&m, &n);
        let x = [0.3, -0.2, 0.7];
        let direct = mn.apply(x);
        let nested = m.apply(n.apply(x));
        for a in 0..3 {
            prop_assert!((direct[a] - nested[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_loss_is_symmetric((x, y) in pair()) {
        prop_assume!(non_constant(&x) && non_constant(&y));
        let cfg = ParzenConfig::new(16, 0.5).unwrap();
        let a = cr_loss_symmetric(&x, &y, &cfg).unwrap();
        let b = cr_loss_symmetric(&y, &x, &cfg).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn eta_is_bounded((x, y) in pair(), bins in 2usize..64, ratio in 0.1..1.0f64) {
        prop_assume!(non_constant(&y));
        let eta = correlation_ratio(&x, &y, &ParzenConfig::new(bins, ratio).unwrap()).unwrap();
        prop_assert!((0.0..=1.02).contains(&eta), "{}", eta);
        let hard = discrete_cr_oracle(&x, &y, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&hard), "{}", hard);
    }

    #[test]
    fn mutual_information_is_symmetric_and_nonnegative((x, y) in pair(), bins in 2usize..40) {
        let cfg = ParzenConfig::new(bins, 0.5).unwrap();
        let a = mutual_information(&x, &y, &cfg).unwrap();
        let b = mutual_information(&y, &x, &cfg).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert!(a >= -1e-9);
    }

    #[test]
    fn float32_nifti_roundtrips(v in volume(), gz in any::<bool>()) {
        let v = v.with_data(v.data().iter().map(|&x| x as f32 as f64).collect()).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join(if gz { "v.nii.gz" } else { "v.nii" });
        write_nifti(&v, &path, Datatype::F32).unwrap();
        let back = read_nifti(&path).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.data(), v.data());
        for a in 0..3 {
            prop_assert!((back.spacing()[a] - v.spacing()[a]).abs() <= 1e-6 * v.spacing()[a]);
        }
    }

    #[test]
    fn identity_warp_reproduces_the_volume(v in volume()) {
        let id = AffineParams::identity();
        for interp in [Interpolation::Trilinear, Interpolation::Nearest] {
            let w = warp(&v, &v, &id, interp).unwrap();
            prop_assert_eq!(w.valid_fraction(), 1.0);
            for (a, b) in w.image.data().iter().zip(v.data()) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }
}
