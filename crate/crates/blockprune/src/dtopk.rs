//! Differentiable top-k operator.
//!
//! Maps N scores to soft keep-probabilities in (0,1) that sum to exactly k:
//!
//! ```text
//! f_i = sigmoid(x_i / tau + t),   sum_i f_i = k
//! ```
//!
//! The threshold offset `t` is solved per invocation by bisection (the sum is
//! strictly monotone in `t`). As the temperature `tau` shrinks, `f` converges
//! to the exact 0/1 top-k indicator, which is what makes the operator usable
//! as a pruning mask relaxation: gradients flow at warm temperatures, and the
//! mask hardens as the schedule cools.
//!
//! The Jacobian has the closed form
//!
//! ```text
//! J = (1/tau) * (diag(v) - v v^T / ||v||_1),   v_i = sigmoid'(x_i/tau + t)
//! ```
//!
//! which is symmetric with zero row sums, so the vector-Jacobian product runs
//! in O(N) without materializing J.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Tensor};

/// Below this l1 mass of sigmoid slopes the operator is saturated: every f_i
/// has collapsed to 0 or 1 and the true Jacobian has vanished, so we return
/// exact zeros instead of dividing 0 by 0.
const SATURATION_FLOOR: f64 = 1e-300;

const MAX_BISECT_ITERS: usize = 200;

/// Numerically stable logistic function; arguments reach magnitude ~1e6 at
/// tau = 1e-6, where the naive form overflows.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Solved relaxation: threshold offset and the soft mask itself.
#[derive(Debug, Clone)]
pub struct TopkSolution {
    pub t: f64,
    pub f: Vec<f64>,
}

fn check_inputs(x: &[f64], tau: f64) -> Result<()> {
    if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArg(format!(
            "top-k input must be finite, element {bad} is {}",
            x[bad]
        )));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArg(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Exact binary top-k: ones at the k largest entries, ties broken by keeping
/// the lower index.
pub fn hard_topk(x: &[f64], k: usize) -> Result<Vec<f64>> {
    if k > x.len() {
        return Err(Error::InvalidArg(format!("k = {k} exceeds {} inputs", x.len())));
    }
    if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArg(format!(
            "top-k input must be finite, element {bad} is {}",
            x[bad]
        )));
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap().then(a.cmp(&b)));
    let mut out = vec![0.0; x.len()];
    for &i in &idx[..k] {
        out[i] = 1.0;
    }
    Ok(out)
}

/// Find `t` such that `sum_i sigmoid(x_i/tau + t) = k`.
///
/// Bracket by symmetric doubling around `logit(k/N) - mean(x)/tau` (exact for
/// constant inputs), then bisect on strict signs. Two exits:
///
/// - The sum hits k exactly in f64. At small tau this happens on a wide flat
///   plateau spanning the gap between the k-th and (k+1)-th sorted inputs
///   (every sigmoid has rounded to 0 or 1); we locate both plateau edges and
///   return the midpoint, i.e. the center of the gap scaled by 1/tau, which
///   is where the exact-arithmetic solution sits up to exponentially small
///   corrections.
/// - The bracket collapses to one ulp, giving the root at f64 resolution.
///
/// Either way the constraint residual |sum f - k| ends far below the
/// 1e-12 * k acceptance the caller relies on, and well within the 200
/// iteration cap.
pub fn solve_threshold(x: &[f64], k: usize, tau: f64) -> Result<f64> {
    check_inputs(x, tau)?;
    let n = x.len();
    if n < 2 || k == 0 || k >= n {
        return Err(Error::InvalidArg(format!(
            "threshold solve needs N >= 2 and 1 <= k <= N-1, got N = {n}, k = {k}"
        )));
    }
    let kf = k as f64;
    let g = |t: f64| x.iter().map(|&xi| sigmoid(xi / tau + t)).sum::<f64>() - kf;

    let mean = x.iter().sum::<f64>() / n as f64;
    let center = logit(kf / n as f64) - mean / tau;
    let mut step = 1.0;
    let (mut lo, mut hi);
    loop {
        lo = center - step;
        hi = center + step;
        // Strictly signed anchors; g(-inf) = -k and g(inf) = N-k, both of
        // magnitude >= 1, so the doubling terminates.
        if g(lo) < 0.0 && g(hi) > 0.0 {
            break;
        }
        step *= 2.0;
        if !step.is_finite() {
            return Err(Error::Numeric(format!(
                "threshold bracket diverged (N = {n}, k = {k}, tau = {tau})"
            )));
        }
    }

    let mut mid = 0.5 * (lo + hi);
    for _ in 0..MAX_BISECT_ITERS {
        mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            return Ok(mid); // bracket exhausted: root at f64 resolution
        }
        let gm = g(mid);
        if gm == 0.0 {
            // Saturated plateau: return its center.
            let inside = |t: f64| g(t) == 0.0;
            let left = boundary_bisect(inside, lo, mid);
            let right = boundary_bisect(inside, hi, mid);
            return Ok(0.5 * (left + right));
        }
        if gm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

/// `pred(inside)` holds, `pred(outside)` does not; bisect to the boundary and
/// return the inside endpoint.
fn boundary_bisect(pred: impl Fn(f64) -> bool, mut outside: f64, mut inside: f64) -> f64 {
    for _ in 0..MAX_BISECT_ITERS {
        let mid = 0.5 * (outside + inside);
        if mid == outside || mid == inside {
            break;
        }
        if pred(mid) {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    inside
}

/// Evaluate the relaxation. `k = 0` and `k = N` short-circuit to the constant
/// 0- and 1-vectors: each sigmoid is strictly inside (0,1), so the sum
/// constraint is infeasible for finite t at those extremes, yet sparsity 0
/// and 1 must still be valid configurations. The reported threshold is 0 in
/// the short-circuit cases.
pub fn topk_forward(x: &[f64], k: usize, tau: f64) -> Result<TopkSolution> {
    check_inputs(x, tau)?;
    let n = x.len();
    if k > n {
        return Err(Error::InvalidArg(format!("k = {k} exceeds {n} inputs")));
    }
    if k == 0 {
        return Ok(TopkSolution { t: 0.0, f: vec![0.0; n] });
    }
    if k == n {
        return Ok(TopkSolution { t: 0.0, f: vec![1.0; n] });
    }
    let t = solve_threshold(x, k, tau)?;
    let f = x.iter().map(|&xi| sigmoid(xi / tau + t)).collect();
    Ok(TopkSolution { t, f })
}

/// Sigmoid slopes at the solved threshold; the common ingredient of the
/// Jacobian and the VJP.
fn slopes(sol: &TopkSolution) -> Vec<f64> {
    sol.f.iter().map(|&fi| fi * (1.0 - fi)).collect()
}

/// Dense N x N Jacobian `(1/tau)(diag(v) - v v^T / ||v||_1)`.
pub fn topk_jacobian(x: &[f64], k: usize, tau: f64) -> Result<Vec<Vec<f64>>> {
    let n = x.len();
    let sol = topk_forward(x, k, tau)?;
    if k == 0 || k == n {
        return Ok(vec![vec![0.0; n]; n]);
    }
    let v = slopes(&sol);
    let s: f64 = v.iter().sum();
    if s < SATURATION_FLOOR {
        return Ok(vec![vec![0.0; n]; n]);
    }
    let mut jac = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { v[i] } else { 0.0 };
            jac[i][j] = (delta - v[i] * v[j] / s) / tau;
        }
    }
    Ok(jac)
}

/// `J * upstream` in O(N) time and space. J is symmetric, so this is both
/// the JVP and the VJP.
pub fn topk_vjp(x: &[f64], k: usize, tau: f64, upstream: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    if upstream.len() != n {
        return Err(Error::InvalidArg(format!(
            "upstream length {} does not match {} inputs",
            upstream.len(),
            n
        )));
    }
    let sol = topk_forward(x, k, tau)?;
    if k == 0 || k == n {
        return Ok(vec![0.0; n]);
    }
    let v = slopes(&sol);
    let s: f64 = v.iter().sum();
    if s < SATURATION_FLOOR {
        return Ok(vec![0.0; n]);
    }
    let dot: f64 = v.iter().zip(upstream).map(|(a, b)| a * b).sum();
    Ok(v.iter()
        .zip(upstream)
        .map(|(&vi, &ui)| vi * (ui - dot / s) / tau)
        .collect())
}

/// Tape node wrapping the operator so mask scores can sit inside a compute
/// graph. Backward re-solves the threshold; the solve is deterministic, so
/// the result is bit-identical to the forward pass's.
#[derive(Debug)]
pub struct TopkOp {
    pub k: usize,
    pub tau: f64,
}

impl TopkOp {
    pub fn node(k: usize, tau: f64) -> Rc<dyn CustomOp> {
        Rc::new(TopkOp { k, tau })
    }
}

impl CustomOp for TopkOp {
    fn name(&self) -> &'static str {
        "topk"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let sol = topk_forward(x.data(), self.k, self.tau)?;
        Tensor::new(x.shape().to_vec(), sol.f)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, upstream: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let g = topk_vjp(x.data(), self.k, self.tau, upstream.data())?;
        Ok(vec![Tensor::new(x.shape().to_vec(), g)?])
    }
}
