//! Finite-difference oracle shared by unit tests.

use crate::autodiff::{Graph, Result, Value};

/// Central-difference check of `f` at `inputs`; returns the worst relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn max_grad_error<F>(inputs: &[(Vec<usize>, Vec<f64>)], h: f64, floor: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Value]) -> Result<Value>,
{
    let eval = |vals: &[(Vec<usize>, Vec<f64>)]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Value> = vals
            .iter()
            .map(|(s, d)| g.constant(s, d.clone()).unwrap())
            .collect();
        let out = f(&mut g, &vs).unwrap();
        g.item(out)
    };
    let mut g = Graph::new();
    let vs: Vec<Value> = inputs
        .iter()
        .map(|(s, d)| g.variable(s, d.clone()).unwrap())
        .collect();
    let out = f(&mut g, &vs).unwrap();
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vs.iter().enumerate() {
        let analytic = g.grad(*v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].1.len()]);
        for i in 0..inputs[k].1.len() {
            let mut plus = inputs.to_vec();
            plus[k].1[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].1[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}
