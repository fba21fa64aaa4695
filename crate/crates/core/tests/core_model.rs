mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use shrinknet::data::{back_transform, build_problem, standardize, svd_reduce, ExpressionMatrix, RegressionProblem};

fn matrix_strategy() -> impl Strategy<Value = DMatrix<f64>> {
    (3usize..12, 2usize..10, any::<u64>()).prop_map(|(n, p, seed)| {
        let mut rng = common::rng(seed);
        common::normal_matrix(&mut rng, n, p)
    })
}

proptest! {
    #[test]
    fn standardize_is_idempotent(values in matrix_strategy(), scale in any::<bool>()) {
        let m = ExpressionMatrix::with_default_ids(values).unwrap();
        let once = standardize(&m, scale).unwrap();
        let twice = standardize(&once, scale).unwrap();
        prop_assert!((once.values() - twice.values()).amax() <= 1e-12);
    }

    #[test]
    fn design_never_contains_response(values in matrix_strategy(), pick in any::<usize>()) {
        let mut values = values;
        let p = values.ncols();
        let j = pick % p;
        for i in 0..values.nrows() {
            values[(i, j)] = 1e6 + i as f64;
        }
        let m = ExpressionMatrix::with_default_ids(values).unwrap();
        let prob = build_problem(&m, j).unwrap();
        prop_assert_eq!(prob.design.ncols(), p - 1);
        prop_assert!(prob.design.iter().all(|&v| v < 1e5));
    }

    #[test]
    fn reduction_reconstructs_design(n in 2usize..12, q in 1usize..40, seed in any::<u64>(), centered in any::<bool>()) {
        let mut rng = common::rng(seed);
        let mut x = common::normal_matrix(&mut rng, n, q);
        if centered {
            for mut c in x.column_iter_mut() {
                let m = c.mean();
                c.add_scalar_mut(-m);
            }
        }
        let prob = RegressionProblem { response: DVector::zeros(n), design: x.clone(), target_gene: 0 };
        let red = svd_reduce(&prob).unwrap();
        let recon = &red.reduced_design * red.right_factors.transpose();
        prop_assert!((recon - &x).norm() <= 1e-8 * x.norm());
        let vtv = red.right_factors.tr_mul(&red.right_factors);
        prop_assert!((vtv - DMatrix::identity(red.rank(), red.rank())).amax() <= 1e-10);
        prop_assert!(red.rank() <= n.min(q));
    }

    #[test]
    fn back_transform_matches_full_product(q in 1usize..15, r in 1usize..6, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let v = common::normal_matrix(&mut rng, q, r);
        let a = common::normal_matrix(&mut rng, r, r);
        let cov = &a * a.transpose();
        let theta = DVector::from_column_slice(common::normal_matrix(&mut rng, r, 1).as_slice());
        let (mean, var) = back_transform(&theta, &cov, &v).unwrap();
        let full = &v * &cov * v.transpose();
        prop_assert!((mean - &v * &theta).amax() <= 1e-12);
        for k in 0..q {
            prop_assert!((var[k] - full[(k, k)]).abs() <= 1e-10 * full[(k, k)].abs().max(1.0));
        }
    }
}

#[test]
fn proportional_columns_lose_rank() {
    let x = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 0.5, 2.0, 4.0, -1.0, -1.0, -2.0, 3.0, 0.0, 0.0, 1.0]);
    let prob = RegressionProblem { response: DVector::zeros(4), design: x.clone(), target_gene: 0 };
    let red = svd_reduce(&prob).unwrap();
    assert_eq!(red.rank(), 2);
    let recon = &red.reduced_design * red.right_factors.transpose();
    assert!((recon - &x).norm() <= 1e-8 * x.norm());
}
