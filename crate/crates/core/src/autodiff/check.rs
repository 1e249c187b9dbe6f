use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::Result;
use crate::imagedata::Rng;

/// Largest relative disagreement between tape gradients and central finite
/// differences of `f` at `params`.
///
/// `f` builds a scalar from the given parameter handles. Up to `samples`
/// coordinates are checked (every coordinate when there are fewer); the
/// relative error of one coordinate is `|analytic - numeric| / max(1e-6, |numeric|)`.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], eps: f64, samples: usize, rng: &mut Rng) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
        .collect();
    if coords.len() > samples {
        let order = rng.permutation(coords.len());
        coords = order[..samples].iter().map(|&k| coords[k]).collect();
    }

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item()?.as_f64())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = T::from_f64(orig.as_f64() + eps);
        let plus = eval(&work)?;
        work[i].data_mut()[j] = T::from_f64(orig.as_f64() - eps);
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].data()[j].as_f64();
        let rel = (a - numeric).abs() / numeric.abs().max(1e-6);
        worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }
    Ok(worst)
}
