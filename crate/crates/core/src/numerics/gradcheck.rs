//! Central finite differences as an independent gradient oracle.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named collection of parameter tensors.
pub trait ParamSet {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;
}

impl ParamSet for Tensor {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("x".to_string(), self)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("x".to_string(), self)]
    }
}

impl ParamSet for Vec<(String, Tensor)> {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.iter_mut().map(|(n, t)| (n.clone(), t)).collect()
    }
}

/// Which coordinates of each tensor to probe.
#[derive(Debug, Clone, Copy)]
pub enum Probe {
    All,
    /// At most `per_tensor` coordinates per tensor, chosen with `seed`.
    Sample { per_tensor: usize, seed: u64 },
}

/// Finite-difference gradient for the probed coordinates of one tensor.
#[derive(Debug, Clone)]
pub struct FdGradient {
    pub name: String,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub param_name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε` over the probed coordinates.
pub fn finite_diff_gradient<P, F>(
    mut loss_fn: F,
    params: &P,
    epsilon: f64,
    probe: Probe,
) -> Result<Vec<FdGradient>>
where
    P: ParamSet + Clone,
    F: FnMut(&P) -> f64,
{
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(Error::config(format!(
            "finite-difference epsilon {epsilon} outside [1e-6, 1e-4]"
        )));
    }
    let base = loss_fn(params);
    if loss_fn(params).to_bits() != base.to_bits() {
        return Err(Error::Contract(
            "loss function is not deterministic".to_string(),
        ));
    }

    let mut work = params.clone();
    let plan: Vec<(String, Vec<usize>)> = params
        .params()
        .into_iter()
        .enumerate()
        .map(|(k, (name, t))| {
            let indices = match probe {
                Probe::All => (0..t.len()).collect(),
                Probe::Sample { per_tensor, seed } if per_tensor < t.len() => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let mut idx = sample(&mut rng, t.len(), per_tensor).into_vec();
                    idx.sort_unstable();
                    idx
                }
                Probe::Sample { .. } => (0..t.len()).collect(),
            };
            (name, indices)
        })
        .collect();

    let mut out = Vec::with_capacity(plan.len());
    for (k, (name, indices)) in plan.into_iter().enumerate() {
        let mut values = Vec::with_capacity(indices.len());
        for &i in &indices {
            let orig = work.params()[k].1.data()[i];
            set_coord(&mut work, k, i, orig + epsilon);
            let plus = loss_fn(&work);
            set_coord(&mut work, k, i, orig - epsilon);
            let minus = loss_fn(&work);
            set_coord(&mut work, k, i, orig);
            values.push((plus - minus) / (2.0 * epsilon));
        }
        out.push(FdGradient {
            name,
            indices,
            values,
        });
    }
    Ok(out)
}

fn set_coord<P: ParamSet>(p: &mut P, tensor: usize, index: usize, value: f64) {
    let mut all = p.params_mut();
    all[tensor].1.data_mut()[index] = value;
}

/// Compares analytic gradients against finite differences, grouping tensors
/// into families with `family_of`.
///
/// Per coordinate the relative error is `|a − n| / max(|a|, |n|, abs_floor)`.
pub fn compare_gradients<P: ParamSet>(
    analytic: &P,
    numeric: &[FdGradient],
    family_of: impl Fn(&str) -> String,
    tolerance: f64,
    abs_floor: f64,
) -> Vec<GradCheckReport> {
    let analytic: BTreeMap<String, &Tensor> = analytic.params().into_iter().collect();
    let mut families: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for fd in numeric {
        let family = family_of(&fd.name);
        let entry = families.entry(family).or_insert((0.0, 0.0));
        let Some(grad) = analytic.get(&fd.name) else {
            entry.0 = f64::INFINITY;
            entry.1 = f64::INFINITY;
            continue;
        };
        for (&i, &n) in fd.indices.iter().zip(&fd.values) {
            let a = grad.data()[i];
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(abs_floor);
            entry.0 = entry.0.max(rel);
            entry.1 = entry.1.max(abs);
        }
    }
    families
        .into_iter()
        .map(|(param_name, (max_rel_err, max_abs_err))| GradCheckReport {
            passed: max_rel_err < tolerance || max_abs_err < abs_floor,
            param_name,
            max_rel_err,
            max_abs_err,
        })
        .collect()
}
