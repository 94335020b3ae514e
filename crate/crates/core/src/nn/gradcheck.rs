//! Central finite-difference utilities used by the gradient test suites.
//! The closures rebuild the graph per evaluation, so the analytic and
//! numeric paths share nothing beyond the forward definition.

use ndarray::ArrayD;

use crate::nn::graph::{Graph, Var};

/// Norm-based relative error between two tensors.
pub fn rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel_err shape mismatch");
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let na = a.mapv(|v| v * v).sum().sqrt();
    let nb = b.mapv(|v| v * v).sum().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Central finite differences of `f` at `x`.
pub fn finite_diff(f: &dyn Fn(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, h: f64) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = x.as_slice().expect("standard layout")[idx];
        let step = h * (1.0 + orig.abs());
        xp.as_slice_mut().expect("standard layout")[idx] = orig + step;
        let fp = f(&xp);
        xp.as_slice_mut().expect("standard layout")[idx] = orig - step;
        let fm = f(&xp);
        xp.as_slice_mut().expect("standard layout")[idx] = orig;
        grad.as_slice_mut().expect("standard layout")[idx] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Compare the analytic gradient of a scalar function of one input tensor
/// against central differences; returns the relative error.
///
/// `build` returns `(graph, input_var, loss_var)` for a given input value.
pub fn check_grad_input<F>(build: &F, x0: &ArrayD<f64>) -> f64
where
    F: Fn(&ArrayD<f64>) -> (Graph, Var, Var),
{
    let (g, input, loss) = build(x0);
    let grads = g.backward(loss);
    let analytic = grads
        .of(input)
        .cloned()
        .unwrap_or_else(|| ArrayD::zeros(x0.raw_dim()));
    let f = |x: &ArrayD<f64>| {
        let (g, _, loss) = build(x);
        g.scalar_value(loss)
    };
    let numeric = finite_diff(&f, x0, 1e-5);
    rel_err(&analytic, &numeric)
}
