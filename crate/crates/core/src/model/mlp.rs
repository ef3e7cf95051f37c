//! Two-layer tanh perceptron with a softmax cross-entropy head. Small enough
//! that its full Hessian can be assembled column by column.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::objective::{Objective, ParamVars};
use crate::params::ParamSet;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Mlp {
    pub inputs: Tensor<f64>,
    pub labels: Vec<usize>,
    pub hidden: usize,
    pub classes: usize,
}

impl Mlp {
    /// Random inputs and labels plus randomly initialised parameters, all
    /// drawn from one seed.
    pub fn random(batch: usize, features: usize, hidden: usize, classes: usize, seed: u64) -> Result<(Self, ParamSet)> {
        if batch == 0 || features == 0 || hidden == 0 || classes < 2 {
            return Err(Error::invalid("mlp dims must be positive with at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let inputs = Tensor::from_fn(&[batch, features], |_| normal.sample(&mut rng));
        let labels = (0..batch).map(|i| (i * 7 + seed as usize) % classes).collect();
        let mut params = ParamSet::new();
        let s1 = (1.0 / features as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        params.insert("fc1.weight", Tensor::from_fn(&[hidden, features], |_| s1 * normal.sample(&mut rng)), true)?;
        params.insert("fc1.bias", Tensor::from_fn(&[hidden], |_| 0.1 * normal.sample(&mut rng)), true)?;
        params.insert("fc2.weight", Tensor::from_fn(&[classes, hidden], |_| s2 * normal.sample(&mut rng)), true)?;
        params.insert("fc2.bias", Tensor::from_fn(&[classes], |_| 0.1 * normal.sample(&mut rng)), true)?;
        Ok((Self { inputs, labels, hidden, classes }, params))
    }

    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, vars: &ParamVars) -> Result<NodeId> {
        let x = tape.constant(Tensor::from_f64(&self.inputs))?;
        let h = tape.matmul(x, vars.get("fc1.weight")?, true)?;
        let h = tape.add_bias(h, vars.get("fc1.bias")?)?;
        let h = tape.tanh(h)?;
        let z = tape.matmul(h, vars.get("fc2.weight")?, true)?;
        tape.add_bias(z, vars.get("fc2.bias")?)
    }
}

impl Objective for Mlp {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, vars: &ParamVars) -> Result<NodeId> {
        let z = self.logits(tape, vars)?;
        tape.softmax_cross_entropy(z, &self.labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{evaluate_loss, ComputeMode};

    #[test]
    fn parameter_count_is_small() {
        let (_, p) = Mlp::random(4, 3, 4, 2, 1).unwrap();
        assert_eq!(p.total_elements(), 4 * 3 + 4 + 2 * 4 + 2);
    }

    #[test]
    fn loss_matches_straight_line_evaluation() {
        let (m, p) = Mlp::random(4, 3, 4, 2, 11).unwrap();
        let got = evaluate_loss(&m, &p, ComputeMode::F64).unwrap();

        // Plain loops, no tape.
        let w1 = p.get("fc1.weight").unwrap().data();
        let b1 = p.get("fc1.bias").unwrap().data();
        let w2 = p.get("fc2.weight").unwrap().data();
        let b2 = p.get("fc2.bias").unwrap().data();
        let x = m.inputs.data();
        let mut total = 0.0;
        for b in 0..4 {
            let h: Vec<f64> = (0..4)
                .map(|j| ((0..3).map(|i| x[b * 3 + i] * w1[j * 3 + i]).sum::<f64>() + b1[j]).tanh())
                .collect();
            let z: Vec<f64> = (0..2).map(|c| (0..4).map(|j| h[j] * w2[c * 4 + j]).sum::<f64>() + b2[c]).collect();
            let lse = (z[0].exp() + z[1].exp()).ln();
            total += lse - z[m.labels[b]];
        }
        assert!((got - total / 4.0).abs() < 1e-12, "{got} vs {}", total / 4.0);
    }
}
