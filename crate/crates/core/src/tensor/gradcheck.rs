//! Central finite-difference verification of analytic gradients.

use rand::seq::index;

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::rng::chacha;

/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Which coordinates of each point to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// Up to this many coordinates per point, chosen by `seed`.
    Sample { per_point: usize, seed: u64 },
}

fn pick(len: usize, coords: Coords, point: usize) -> Vec<usize> {
    match coords {
        Coords::Sample { per_point, seed } if per_point < len => {
            let mut idx = index::sample(&mut chacha(seed, &[point as u64]), len, per_point).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Largest relative error between `analytic[i]` and the central difference
/// `(loss(p + h·e) − loss(p − h·e)) / 2h` over the probed coordinates of
/// every point.
pub fn compare(
    points: &[Tensor],
    analytic: &[&[f64]],
    h: f64,
    coords: Coords,
    loss: impl Fn(&[Tensor]) -> Result<f64>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut probe = points.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        for i in pick(points[p].len(), coords, p) {
            let orig = points[p].data()[i];
            probe[p].data_mut()[i] = orig + h;
            let up = loss(&probe)?;
            probe[p].data_mut()[i] = orig - h;
            let down = loss(&probe)?;
            probe[p].data_mut()[i] = orig;
            worst = worst.max(rel_error(grad[i], (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphCheck {
    pub max_rel_error: f64,
    /// Distance of the checked point from the nearest ReLU kink, if any.
    pub relu_margin: Option<f64>,
}

/// Checks the gradient of the scalar built by `f` with respect to every input.
pub fn check_graph(
    inputs: &[Tensor],
    h: f64,
    coords: Coords,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GraphCheck> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let relu_margin = g.min_relu_input_magnitude();
    g.backward(out)?;
    let grads: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).expect("leaf requires grad").to_vec()).collect();
    let refs: Vec<&[f64]> = grads.iter().map(|v| v.as_slice()).collect();
    let max_rel_error = compare(inputs, &refs, h, coords, |pts| {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    })?;
    Ok(GraphCheck { max_rel_error, relu_margin })
}
