//! Matrix-free eigen-analysis of per-layer Hessian blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::objective::{evaluate_loss, hvp, ComputeMode, Objective};
use crate::params::ParamSet;
use crate::derive_seed;

const MAX_RESTARTS: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerOptions {
    pub max_iters: usize,
    /// Stop once `|λ_t − λ_{t−1}| ≤ tol · max(1, |λ_t|)`.
    pub tol: f64,
}

impl Default for PowerOptions {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenEstimate {
    pub layer: String,
    /// Signed Rayleigh quotient `vᵀHv` of the returned direction.
    pub lambda: f64,
    /// Unit vector over the layer's flattened parameters.
    pub eigvec: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Removes the components along each (unit) vector in `basis`.
fn project_out(v: &mut [f64], basis: &[&[f64]]) {
    for u in basis {
        let c = dot(v, u);
        for (x, y) in v.iter_mut().zip(u.iter()) {
            *x -= c * y;
        }
    }
}

/// Dominant-magnitude eigenpair of the Hessian block of `layer`.
pub fn power_iteration<O: Objective + ?Sized>(
    obj: &O,
    params: &ParamSet,
    layer: &str,
    opts: PowerOptions,
    seed: u64,
) -> Result<EigenEstimate> {
    power_iteration_deflated(obj, params, layer, opts, seed, &[])
}

/// Power iteration on `H − Σ λ_j v_j v_jᵀ` (Hotelling deflation), with the
/// iterate kept orthogonal to every `v_j`.
pub fn power_iteration_deflated<O: Objective + ?Sized>(
    obj: &O,
    params: &ParamSet,
    layer: &str,
    opts: PowerOptions,
    seed: u64,
    found: &[EigenEstimate],
) -> Result<EigenEstimate> {
    if opts.max_iters == 0 || opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::invalid("power iteration needs max_iters ≥ 1 and tol > 0"));
    }
    let n = params.group_len(layer)?;
    if let Some(f) = found.iter().find(|f| f.eigvec.len() != n) {
        return Err(Error::shape("power_iteration", format!("deflation vector of {} for a {n}-parameter layer", f.eigvec.len())));
    }
    let basis: Vec<&[f64]> = found.iter().map(|f| f.eigvec.as_slice()).collect();
    let apply = |v: &[f64]| -> Result<Vec<f64>> {
        let mut hv = hvp(obj, params, layer, v)?;
        for f in found {
            let c = f.lambda * dot(&f.eigvec, v);
            for (h, u) in hv.iter_mut().zip(&f.eigvec) {
                *h -= c * u;
            }
        }
        project_out(&mut hv, &basis);
        Ok(hv)
    };

    for restart in 0..=MAX_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, restart));
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        project_out(&mut v, &basis);
        let nv = norm(&v);
        if nv == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let mut hv = apply(&v)?;
        if norm(&hv) == 0.0 {
            continue;
        }
        let mut lambda = dot(&v, &hv);
        let mut converged = false;
        let mut iterations = 0;
        while iterations < opts.max_iters {
            iterations += 1;
            let nh = norm(&hv);
            if nh == 0.0 {
                // v is an exact null vector of the operator.
                lambda = 0.0;
                converged = true;
                break;
            }
            v = hv.iter().map(|x| x / nh).collect();
            hv = apply(&v)?;
            let next = dot(&v, &hv);
            let done = (next - lambda).abs() <= opts.tol * next.abs().max(1.0);
            lambda = next;
            if done {
                converged = true;
                break;
            }
        }
        return Ok(EigenEstimate { layer: layer.to_string(), lambda, eigvec: v, iterations, converged });
    }
    Err(Error::NonFinite(format!("Hv vanished for every start vector on `{layer}`")))
}

/// Top eigenvalue of `layer` on `runs` independently drawn data shards.
/// Run `r` uses seed `derive_seed(seed, r)` both for its shard and its
/// start vector, so the list is ordered by run and independent of thread
/// scheduling.
#[allow(clippy::too_many_arguments)]
pub fn eig_distribution<O, F>(
    params: &ParamSet,
    data: &Dataset,
    layer: &str,
    shard_fraction: f64,
    runs: usize,
    opts: PowerOptions,
    seed: u64,
    objective_for: F,
) -> Result<Vec<f64>>
where
    O: Objective,
    F: Fn(&Dataset) -> Result<O> + Sync,
{
    if runs == 0 {
        return Err(Error::invalid("runs must be at least 1"));
    }
    params.group_members(layer)?;
    (0..runs as u64)
        .into_par_iter()
        .map(|r| {
            let run_seed = derive_seed(seed, r);
            let shard = data.shard(shard_fraction, run_seed)?;
            let obj = objective_for(&shard)?;
            power_iteration(&obj, params, layer, opts, derive_seed(run_seed, u64::MAX)).map(|e| e.lambda)
        })
        .collect()
}

/// `(mean, population std)`.
pub fn mean_std(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("no eigenvalue samples"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Ω = |mean(λ)| + std(λ), population standard deviation.
pub fn sensitivity(samples: &[f64]) -> Result<f64> {
    let (m, s) = mean_std(samples)?;
    Ok(m.abs() + s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub layer: String,
    pub samples: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub omega: f64,
}

impl LayerSensitivity {
    pub fn from_samples(layer: impl Into<String>, samples: Vec<f64>) -> Result<Self> {
        let (mean, std) = mean_std(&samples)?;
        Ok(Self { layer: layer.into(), omega: mean.abs() + std, samples, mean, std })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub task: String,
    pub layers: Vec<LayerSensitivity>,
}

impl SensitivityReport {
    pub fn omegas(&self) -> Vec<(String, f64)> {
        self.layers.iter().map(|l| (l.layer.clone(), l.omega)).collect()
    }
}

/// Losses at `W + a·v1 + b·v2` over a square grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub layer: String,
    pub extent: f64,
    pub resolution: usize,
    /// Offsets along both axes, symmetric around an exact 0.
    pub coords: Vec<f64>,
    /// `losses[i][j]` at `a = coords[i]`, `b = coords[j]`; NaN where the
    /// loss was not finite.
    pub losses: Vec<Vec<f64>>,
}

impl LandscapeGrid {
    pub fn center(&self) -> f64 {
        let c = self.resolution / 2;
        self.losses[c][c]
    }
}

pub fn grid_coords(extent: f64, resolution: usize) -> Vec<f64> {
    if resolution == 1 {
        return vec![0.0];
    }
    let r = (resolution - 1) as f64;
    (0..resolution).map(|i| extent * (2.0 * i as f64 - r) / r).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn landscape_grid<O: Objective + ?Sized>(
    obj: &O,
    params: &ParamSet,
    layer: &str,
    v1: &[f64],
    v2: &[f64],
    extent: f64,
    resolution: usize,
    mode: ComputeMode,
) -> Result<LandscapeGrid> {
    if resolution.is_multiple_of(2) {
        return Err(Error::invalid(format!("grid resolution {resolution} must be odd")));
    }
    if !(extent >= 0.0 && extent.is_finite()) {
        return Err(Error::invalid(format!("grid extent {extent} must be finite and non-negative")));
    }
    let w0 = params.flatten_group(layer)?;
    if v1.len() != w0.len() || v2.len() != w0.len() {
        return Err(Error::shape("landscape_grid", format!("directions must have {} entries", w0.len())));
    }
    let coords = grid_coords(extent, resolution);
    let center = resolution / 2;
    let cells: Vec<(usize, usize)> = (0..resolution).flat_map(|i| (0..resolution).map(move |j| (i, j))).collect();
    let values = cells
        .par_iter()
        .map(|&(i, j)| {
            let res = if i == center && j == center {
                evaluate_loss(obj, params, mode)
            } else {
                let (a, b) = (coords[i], coords[j]);
                let w: Vec<f64> = w0.iter().zip(v1).zip(v2).map(|((w, x), y)| w + a * x + b * y).collect();
                let mut p = params.clone();
                p.set_group(layer, &w)?;
                evaluate_loss(obj, &p, mode)
            };
            match res {
                Ok(l) => Ok(l),
                Err(e) if e.is_numeric() => Ok(f64::NAN),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let losses = values.chunks(resolution).map(<[f64]>::to_vec).collect();
    Ok(LandscapeGrid { layer: layer.to_string(), extent, resolution, coords, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{Quadratic, Scaled};

    #[test]
    fn diagonal_fixtures() {
        let q = Quadratic::diagonal("w", &[3.0, 1.0, 0.5]).unwrap();
        let p = q.params(&[0.1, 0.2, 0.3]).unwrap();
        let e = power_iteration(&q, &p, "w", PowerOptions::default(), 1).unwrap();
        assert!((e.lambda - 3.0).abs() < 1e-3);
        assert!(e.eigvec[0].abs() > 0.999);
        assert!(e.converged);

        let q = Quadratic::diagonal("w", &[-5.0, 2.0]).unwrap();
        let p = q.params(&[0.0, 0.0]).unwrap();
        let e = power_iteration(&q, &p, "w", PowerOptions::default(), 1).unwrap();
        assert!((e.lambda + 5.0).abs() < 5e-3, "{}", e.lambda);
    }

    #[test]
    fn zero_hessian_errors_after_restarts() {
        let q = Quadratic::diagonal("w", &[0.0, 0.0]).unwrap();
        let p = q.params(&[1.0, 1.0]).unwrap();
        assert!(power_iteration(&q, &p, "w", PowerOptions::default(), 1).is_err());
    }

    #[test]
    fn deflation_finds_second_direction() {
        let q = Quadratic::diagonal("w", &[4.0, -2.0, 1.0]).unwrap();
        let p = q.params(&[0.0; 3]).unwrap();
        let opts = PowerOptions { tol: 1e-10, max_iters: 500 };
        let e1 = power_iteration(&q, &p, "w", opts, 7).unwrap();
        let e2 = power_iteration_deflated(&q, &p, "w", opts, 8, std::slice::from_ref(&e1)).unwrap();
        assert!((e1.lambda - 4.0).abs() < 1e-8);
        assert!((e2.lambda + 2.0).abs() < 1e-6);
        assert!(dot(&e1.eigvec, &e2.eigvec).abs() <= 1e-6);
    }

    #[test]
    fn omega_examples() {
        assert_eq!(sensitivity(&[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(sensitivity(&[-2.0, -2.0, -2.0]).unwrap(), 2.0);
        assert_eq!(sensitivity(&[-1.0, 3.0]).unwrap(), 3.0);
        assert!(sensitivity(&[]).is_err());
    }

    #[test]
    fn grid_coordinates_are_symmetric() {
        let c = grid_coords(0.5, 5);
        assert_eq!(c, vec![-0.5, -0.25, 0.0, 0.25, 0.5]);
        assert_eq!(grid_coords(1.0, 21)[10], 0.0);
    }

    #[test]
    fn quadratic_landscape_closed_form() {
        let q = Quadratic::diagonal("w", &[3.0, 0.5]).unwrap();
        let p = q.params(&[0.0, 0.0]).unwrap();
        let g = landscape_grid(&q, &p, "w", &[1.0, 0.0], &[0.0, 1.0], 1.0, 7, ComputeMode::F64).unwrap();
        for (i, a) in g.coords.iter().enumerate() {
            for (j, b) in g.coords.iter().enumerate() {
                let want = 0.5 * 3.0 * a * a + 0.5 * 0.5 * b * b;
                assert!((g.losses[i][j] - want).abs() <= 1e-8);
            }
        }
        let flat = landscape_grid(&q, &p, "w", &[1.0, 0.0], &[0.0, 1.0], 0.0, 3, ComputeMode::F64).unwrap();
        assert!(flat.losses.iter().flatten().all(|&l| l == 0.0));
        assert!(landscape_grid(&q, &p, "w", &[1.0, 0.0], &[0.0, 1.0], 1.0, 4, ComputeMode::F64).is_err());
    }

    #[test]
    fn scaled_loss_scales_lambda() {
        let q = Quadratic::diagonal("w", &[3.0, 1.0]).unwrap();
        let p = q.params(&[0.0, 0.0]).unwrap();
        let a = power_iteration(&q, &p, "w", PowerOptions::default(), 4).unwrap();
        let s = Scaled { inner: &q, factor: 2.5 };
        let b = power_iteration(&s, &p, "w", PowerOptions::default(), 4).unwrap();
        assert!((b.lambda - 2.5 * a.lambda).abs() <= 1e-12 * b.lambda.abs());
    }
}
