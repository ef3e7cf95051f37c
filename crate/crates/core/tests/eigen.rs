//! Power iteration against a dense symmetric eigensolve of the Hessian
//! assembled from gradient differences.

use hessquant::hessian::{eig_distribution, landscape_grid, power_iteration, power_iteration_deflated, PowerOptions};
use hessquant::model::data::{synth_dataset, Split};
use hessquant::model::transformer::{build_model, DatasetLoss};
use hessquant::model::{Mlp, ModelConfig, Task};
use hessquant::objective::{evaluate_loss, group_gradient, Objective, Quadratic, Scaled};
use hessquant::{ComputeMode, ParamSet, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};

/// Hessian block of `group`, column `i` being the central difference of
/// the gradient along coordinate `i`, symmetrised.
fn dense_hessian<O: Objective>(obj: &O, params: &ParamSet, group: &str) -> DMatrix<f64> {
    let n = params.group_len(group).unwrap();
    let eps = 1e-4;
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = eps;
        let mut up = params.clone();
        up.axpy_group(group, 1.0, &e).unwrap();
        let mut dn = params.clone();
        dn.axpy_group(group, -1.0, &e).unwrap();
        let gu = group_gradient(obj, &up, group).unwrap();
        let gd = group_gradient(obj, &dn, group).unwrap();
        for r in 0..n {
            h[(r, i)] = (gu[r] - gd[r]) / (2.0 * eps);
        }
    }
    (&h + h.transpose()) * 0.5
}

/// Eigenvalues sorted by magnitude, largest first.
fn spectrum(h: DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(h).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    ev
}

fn tight() -> PowerOptions {
    PowerOptions { max_iters: 2000, tol: 1e-9 }
}

#[test]
fn mlp_top_eigenvalue_matches_dense_solve() {
    for seed in 0..4 {
        let (mlp, p) = Mlp::random(8, 3, 4, 3, seed).unwrap();
        assert!(p.total_elements() <= 50);
        for group in ["fc1", "fc2"] {
            let top = spectrum(dense_hessian(&mlp, &p, group))[0];
            let est = power_iteration(&mlp, &p, group, tight(), seed).unwrap();
            assert!(est.converged);
            assert!((est.lambda - top).abs() <= 1e-3 * top.abs(), "seed {seed} {group}: {} vs {top}", est.lambda);
        }
    }
}

#[test]
fn negated_loss_has_negative_dominant_eigenvalue() {
    let (mlp, p) = Mlp::random(8, 3, 4, 3, 5).unwrap();
    let neg = Scaled { inner: &mlp, factor: -1.0 };
    let top = spectrum(dense_hessian(&neg, &p, "fc2"))[0];
    assert!(top < 0.0);
    let est = power_iteration(&neg, &p, "fc2", tight(), 9).unwrap();
    assert!((est.lambda - top).abs() <= 1e-3 * top.abs(), "{} vs {top}", est.lambda);
}

#[test]
fn indefinite_quadratic_reports_the_signed_dominant_value() {
    let q = Quadratic::diagonal("w", &[-5.0, 2.0, 1.0, -0.5]).unwrap();
    let p = q.params(&[0.3, -0.2, 0.1, 0.4]).unwrap();
    let est = power_iteration(&q, &p, "w", tight(), 0).unwrap();
    assert!((est.lambda + 5.0).abs() < 1e-6);
}

#[test]
fn deflation_recovers_the_second_eigenvalue() {
    let (mlp, p) = Mlp::random(8, 3, 4, 3, 2).unwrap();
    let ev = spectrum(dense_hessian(&mlp, &p, "fc1"));
    let v1 = power_iteration(&mlp, &p, "fc1", tight(), 1).unwrap();
    let v2 = power_iteration_deflated(&mlp, &p, "fc1", tight(), 2, std::slice::from_ref(&v1)).unwrap();
    let overlap: f64 = v1.eigvec.iter().zip(&v2.eigvec).map(|(a, b)| a * b).sum();
    assert!(overlap.abs() <= 1e-6);
    assert!((v2.lambda - ev[1]).abs() <= 1e-3 * ev[1].abs(), "{} vs {}", v2.lambda, ev[1]);
}

#[test]
fn transformer_layer_eigenvalue_matches_dense_solve() {
    let cfg = ModelConfig { vocab: 8, max_len: 4, d_model: 4, n_heads: 2, n_layers: 1, ffn_dim: 2, seed: 4, ..Default::default() };
    let (m, p) = build_model(&cfg).unwrap();
    let data = synth_dataset(Task::MajorityToken, 8, &cfg, 3, Split::Train).unwrap();
    let obj = DatasetLoss::new(&m, &data).unwrap();
    let top = spectrum(dense_hessian(&obj, &p, "layer1"))[0];
    let est = power_iteration(&obj, &p, "layer1", tight(), 7).unwrap();
    assert!((est.lambda - top).abs() <= 1e-3 * top.abs(), "{} vs {top}", est.lambda);
}

#[test]
fn eigen_distribution_is_reproducible_and_independent_of_threads() {
    let cfg = ModelConfig { vocab: 8, max_len: 4, d_model: 4, n_heads: 2, n_layers: 2, ffn_dim: 4, seed: 1, ..Default::default() };
    let (m, p) = build_model(&cfg).unwrap();
    let data = synth_dataset(Task::MajorityToken, 40, &cfg, 3, Split::Train).unwrap();
    let run = || eig_distribution(&p, &data, "layer2", 0.25, 6, PowerOptions::default(), 17, |d| DatasetLoss::new(&m, d)).unwrap();
    let a = run();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = single.install(run);
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert!(a.windows(2).any(|w| w[0] != w[1]), "shards should differ");
}

#[test]
fn landscape_centre_is_the_unperturbed_loss() {
    let (mlp, p) = Mlp::random(8, 3, 4, 3, 6).unwrap();
    let v1 = power_iteration(&mlp, &p, "fc1", tight(), 1).unwrap();
    let v2 = power_iteration_deflated(&mlp, &p, "fc1", tight(), 2, std::slice::from_ref(&v1)).unwrap();
    let grid = landscape_grid(&mlp, &p, "fc1", &v1.eigvec, &v2.eigvec, 0.3, 7, ComputeMode::F64).unwrap();
    let l0 = evaluate_loss(&mlp, &p, ComputeMode::F64).unwrap();
    assert_eq!(grid.center().to_bits(), l0.to_bits());
    // Near the centre the grid follows the local quadratic model.
    let h = grid.coords[4] - grid.coords[3];
    let curvature = (grid.losses[4][3] - 2.0 * l0 + grid.losses[2][3]) / (h * h);
    assert!((curvature - v1.lambda).abs() < 0.05 * v1.lambda.abs().max(1e-3), "{curvature} vs {}", v1.lambda);
}

#[test]
fn quadratic_grid_matches_closed_form() {
    let a = [4.0, 1.0, 0.0, 1.0, 3.0, 0.0, 0.0, 0.0, 1.0];
    let q = Quadratic::new("w", Tensor::new(vec![3, 3], a.to_vec()).unwrap()).unwrap();
    let p = q.params(&[0.0, 0.0, 0.0]).unwrap();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(3, 3, &a));
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let dir = |k: usize| eig.eigenvectors.column(order[k]).iter().copied().collect::<Vec<f64>>();
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    let grid = landscape_grid(&q, &p, "w", &dir(0), &dir(1), 2.0, 9, ComputeMode::F64).unwrap();
    for (i, a) in grid.coords.iter().enumerate() {
        for (j, b) in grid.coords.iter().enumerate() {
            let expected = 0.5 * l1 * a * a + 0.5 * l2 * b * b;
            assert!((grid.losses[i][j] - expected).abs() <= 1e-8, "({a}, {b})");
        }
    }
    // The power-iteration directions agree with the dense ones.
    let v1 = power_iteration(&q, &p, "w", tight(), 0).unwrap();
    let cos: f64 = v1.eigvec.iter().zip(dir(0)).map(|(x, y)| x * y).sum();
    assert!((cos.abs() - 1.0).abs() < 1e-8);
}
