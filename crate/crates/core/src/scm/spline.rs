//! Monotone rational-quadratic splines on a bounded interval.
//!
//! A spline is parameterized by unnormalized bin widths and heights plus
//! interior knot derivatives. Softmax turns widths/heights into a partition
//! of `[-bound, bound]` on each axis, softplus makes the interior
//! derivatives positive, and the two boundary derivatives are fixed at 1 so
//! the map continues as the identity outside the interval. Each bin carries
//! a monotone rational-quadratic segment, giving a cheap invertible scalar
//! flow with a closed-form inverse.
//!
//! Two implementations live here: a plain scalar one (used by the data
//! generator and as the test oracle) and a taped composite over rows of
//! per-scalar parameters (used inside likelihoods, where the parameters come
//! from hypernetworks and need gradients). Bin membership enters the tape
//! only through detached masks, and every division is clamped away from zero
//! so that rows routed to other bins cannot produce non-finite values.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Number of rational-quadratic bins per spline.
pub const SPLINE_BINS: usize = 8;
/// Half-width of the identity-tailed support interval.
pub const SPLINE_BOUND: f64 = 5.0;
/// Raw parameter count per scalar spline: widths + heights + interior derivs.
pub const SPLINE_RAW_PARAMS: usize = 3 * SPLINE_BINS - 1;

/// Smallest fraction of the interval a bin may occupy after normalization.
/// Keeps slopes finite when a softmax logit runs away during training; with
/// `SPLINE_BINS` bins the correction is exactly zero for equal-width inputs.
const MIN_BIN_FRACTION: f64 = 1e-3;

/// Raw (unconstrained) parameters of one scalar spline.
#[derive(Debug, Clone)]
pub struct SplineParams {
    pub widths_raw: Vec<f64>,
    pub heights_raw: Vec<f64>,
    pub derivs_raw: Vec<f64>,
    pub bound: f64,
}

struct Knots {
    /// Knot abscissae, `SPLINE_BINS + 1` values from `-bound` to `bound`.
    x: Vec<f64>,
    y: Vec<f64>,
    /// Derivatives at the knots, boundary entries pinned to 1.
    d: Vec<f64>,
}

fn softmax_partition(raw: &[f64], bound: f64) -> Vec<f64> {
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let k = raw.len() as f64;
    exps.iter()
        .map(|&e| {
            let p = e / sum;
            let p = MIN_BIN_FRACTION + (1.0 - MIN_BIN_FRACTION * k) * p;
            2.0 * bound * p
        })
        .collect()
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

impl SplineParams {
    pub fn new(widths_raw: Vec<f64>, heights_raw: Vec<f64>, derivs_raw: Vec<f64>, bound: f64) -> Result<Self> {
        if widths_raw.len() != SPLINE_BINS
            || heights_raw.len() != SPLINE_BINS
            || derivs_raw.len() != SPLINE_BINS - 1
        {
            return Err(Error::shape(
                "spline params",
                format!(
                    "expected {}/{}/{} raw values, got {}/{}/{}",
                    SPLINE_BINS,
                    SPLINE_BINS,
                    SPLINE_BINS - 1,
                    widths_raw.len(),
                    heights_raw.len(),
                    derivs_raw.len()
                ),
            ));
        }
        if !(bound > 0.0) {
            return Err(Error::domain("spline params", "bound must be positive"));
        }
        Ok(Self { widths_raw, heights_raw, derivs_raw, bound })
    }

    /// Flat raw layout `[widths | heights | derivs]`, the order hypernetwork
    /// outputs are sliced in.
    pub fn from_flat(raw: &[f64], bound: f64) -> Result<Self> {
        if raw.len() != SPLINE_RAW_PARAMS {
            return Err(Error::shape(
                "spline params",
                format!("expected {SPLINE_RAW_PARAMS} raw values, got {}", raw.len()),
            ));
        }
        Self::new(
            raw[..SPLINE_BINS].to_vec(),
            raw[SPLINE_BINS..2 * SPLINE_BINS].to_vec(),
            raw[2 * SPLINE_BINS..].to_vec(),
            bound,
        )
    }

    /// The identity map: equal bins, unit derivatives everywhere.
    pub fn identity(bound: f64) -> Self {
        // softplus(ln(e - 1)) = 1 exactly.
        let raw_one = (std::f64::consts::E - 1.0).ln();
        Self {
            widths_raw: vec![0.0; SPLINE_BINS],
            heights_raw: vec![0.0; SPLINE_BINS],
            derivs_raw: vec![raw_one; SPLINE_BINS - 1],
            bound,
        }
    }

    fn knots(&self) -> Knots {
        let widths = softmax_partition(&self.widths_raw, self.bound);
        let heights = softmax_partition(&self.heights_raw, self.bound);
        let mut x = Vec::with_capacity(SPLINE_BINS + 1);
        let mut y = Vec::with_capacity(SPLINE_BINS + 1);
        x.push(-self.bound);
        y.push(-self.bound);
        for k in 0..SPLINE_BINS {
            x.push(x[k] + widths[k]);
            y.push(y[k] + heights[k]);
        }
        let mut d = Vec::with_capacity(SPLINE_BINS + 1);
        d.push(1.0);
        for &v in &self.derivs_raw {
            d.push(softplus(v));
        }
        d.push(1.0);
        Knots { x, y, d }
    }

    /// Forward map: returns `(f(x), ln f'(x))`. Identity with zero log-det
    /// outside `[-bound, bound)`.
    pub fn forward(&self, x: f64) -> (f64, f64) {
        if !(x >= -self.bound && x < self.bound) {
            return (x, 0.0);
        }
        let kn = self.knots();
        let k = find_bin(&kn.x, x);
        let (xk, xk1) = (kn.x[k], kn.x[k + 1]);
        let (yk, yk1) = (kn.y[k], kn.y[k + 1]);
        let (dk, dk1) = (kn.d[k], kn.d[k + 1]);
        let w = xk1 - xk;
        let h = yk1 - yk;
        let s = h / w;
        let xi = ((x - xk) / w).clamp(0.0, 1.0);
        let m = dk1 + dk - 2.0 * s;
        let denom = s + m * xi * (1.0 - xi);
        let y = yk + h * (s * xi * xi + dk * xi * (1.0 - xi)) / denom;
        let num = s * s * (dk1 * xi * xi + 2.0 * s * xi * (1.0 - xi) + dk * (1.0 - xi) * (1.0 - xi));
        (y, num.ln() - 2.0 * denom.ln())
    }

    /// Inverse map: returns `(f^{-1}(y), ln f'(f^{-1}(y)))`, solving the
    /// rational-quadratic with the numerically stable root.
    pub fn inverse(&self, y: f64) -> (f64, f64) {
        if !(y >= -self.bound && y < self.bound) {
            return (y, 0.0);
        }
        let kn = self.knots();
        let k = find_bin(&kn.y, y);
        let (xk, xk1) = (kn.x[k], kn.x[k + 1]);
        let (yk, yk1) = (kn.y[k], kn.y[k + 1]);
        let (dk, dk1) = (kn.d[k], kn.d[k + 1]);
        let w = xk1 - xk;
        let h = yk1 - yk;
        let s = h / w;
        let m = dk1 + dk - 2.0 * s;
        let dy = y - yk;
        let a = h * (s - dk) + dy * m;
        let b = h * dk - dy * m;
        let c = -s * dy;
        let disc = (b * b - 4.0 * a * c).max(0.0);
        let xi = (2.0 * c / (-b - disc.sqrt())).clamp(0.0, 1.0);
        let x = xk + xi * w;
        let denom = s + m * xi * (1.0 - xi);
        let num = s * s * (dk1 * xi * xi + 2.0 * s * xi * (1.0 - xi) + dk * (1.0 - xi) * (1.0 - xi));
        (x, num.ln() - 2.0 * denom.ln())
    }
}

fn find_bin(knots: &[f64], v: f64) -> usize {
    // knots are sorted with knots[0] <= v < knots[last]; linear scan is fine
    // for eight bins.
    let mut k = 0;
    while k + 2 < knots.len() && v >= knots[k + 1] {
        k += 1;
    }
    k
}

/// Per-row raw spline parameters on the tape. Row `i` of each tensor holds
/// the parameters of the spline applied to element `i` of the input.
#[derive(Clone, Copy)]
pub struct SplineVarsRows {
    /// `(M, SPLINE_BINS)` raw widths.
    pub widths: Var,
    /// `(M, SPLINE_BINS)` raw heights.
    pub heights: Var,
    /// `(M, SPLINE_BINS - 1)` raw interior derivatives.
    pub derivs: Var,
}

/// Splits a hypernetwork output of shape `(M, 3 * SPLINE_BINS - 1)` into the
/// width/height/derivative blocks.
pub fn split_spline_rows(tape: &Tape, raw: Var) -> Result<SplineVarsRows> {
    let shape = tape.shape_of(raw);
    if shape.len() != 2 || shape[1] != SPLINE_RAW_PARAMS {
        return Err(Error::shape(
            "split spline rows",
            format!("expected (M, {SPLINE_RAW_PARAMS}), got {shape:?}"),
        ));
    }
    Ok(SplineVarsRows {
        widths: tape.slice(raw, 1, 0, SPLINE_BINS)?,
        heights: tape.slice(raw, 1, SPLINE_BINS, 2 * SPLINE_BINS)?,
        derivs: tape.slice(raw, 1, 2 * SPLINE_BINS, SPLINE_RAW_PARAMS)?,
    })
}

struct KnotVars {
    /// `(M, SPLINE_BINS)` bin widths after softmax scaling.
    widths: Var,
    heights: Var,
    /// `(M, SPLINE_BINS + 1)` knot positions.
    kx: Var,
    ky: Var,
    /// `(M, SPLINE_BINS + 1)` knot derivatives.
    kd: Var,
}

fn partition_on_tape(tape: &Tape, raw: Var, rows: usize, bound: f64) -> Result<(Var, Var)> {
    // Stable softmax: subtract the detached per-row max.
    let vals = tape.value(raw);
    let mut maxes = Tensor::full(&[rows, 1], f64::NEG_INFINITY);
    for i in 0..rows {
        for k in 0..SPLINE_BINS {
            let v = vals.data()[i * SPLINE_BINS + k];
            if v > maxes.data()[i] {
                maxes.data_mut()[i] = v;
            }
        }
    }
    let maxc = tape.constant(maxes);
    let e = tape.exp(tape.sub(raw, maxc)?);
    let sum = tape.sum_axes(e, &[1], true)?;
    let p = tape.div(e, sum)?;
    let k = SPLINE_BINS as f64;
    let p = tape.add_scalar(tape.scale(p, 1.0 - MIN_BIN_FRACTION * k), MIN_BIN_FRACTION);
    let widths = tape.scale(p, 2.0 * bound);
    // Inclusive cumulative sum via an upper-triangular ones matrix.
    let mut tri = Tensor::zeros(&[SPLINE_BINS, SPLINE_BINS]);
    for i in 0..SPLINE_BINS {
        for j in i..SPLINE_BINS {
            tri.data_mut()[i * SPLINE_BINS + j] = 1.0;
        }
    }
    let cums = tape.matmul(widths, tape.constant(tri))?;
    let lead = tape.constant(Tensor::full(&[rows, 1], -bound));
    let knots = tape.concat(&[lead, tape.add_scalar(cums, -bound)], 1)?;
    Ok((widths, knots))
}

fn knots_on_tape(tape: &Tape, params: &SplineVarsRows, rows: usize, bound: f64) -> Result<KnotVars> {
    let (widths, kx) = partition_on_tape(tape, params.widths, rows, bound)?;
    let (heights, ky) = partition_on_tape(tape, params.heights, rows, bound)?;
    let ones = tape.constant(Tensor::full(&[rows, 1], 1.0));
    let interior = tape.softplus(params.derivs);
    let kd = tape.concat(&[ones, interior, ones], 1)?;
    Ok(KnotVars { widths, heights, kx, ky, kd })
}

/// Replaces entries of `v` whose magnitude is below `eps` with `eps`,
/// through detached masks. A no-op for healthy rows; keeps divisions inside
/// unselected spline branches finite.
fn clamp_magnitude(tape: &Tape, v: Var, eps: f64) -> Result<Var> {
    let vals = tape.value(v);
    let mask = vals.map(|x| if x.abs() >= eps { 1.0 } else { 0.0 });
    let floor = tape.constant(Tensor::full(tape.shape_of(v).as_slice(), eps));
    tape.where_mask(&mask, v, floor)
}

fn column(tape: &Tape, m: Var, k: usize, rows: usize) -> Result<Var> {
    tape.reshape(tape.slice(m, 1, k, k + 1)?, &[rows])
}

/// Inverse pass of per-row splines with log-determinant of the *forward*
/// map evaluated at the preimage: returns `(x, ln f'(x))` where `f(x) = y`.
///
/// `y` has shape `(M,)` and `params` carries one raw parameter row per
/// element. Rows with `y` outside `[-bound, bound)` pass through unchanged
/// with zero log-det.
pub fn spline_inverse_on_tape(
    tape: &Tape,
    y: Var,
    params: &SplineVarsRows,
    bound: f64,
) -> Result<(Var, Var)> {
    let shape = tape.shape_of(y);
    if shape.len() != 1 {
        return Err(Error::shape("spline inverse", format!("expected (M,), got {shape:?}")));
    }
    let rows = shape[0];
    let kn = knots_on_tape(tape, params, rows, bound)?;
    let yv = tape.value(y);

    let mut x_acc = y;
    let mut ld_acc = tape.constant(Tensor::zeros(&[rows]));
    let ky_vals = tape.value(kn.ky);
    for k in 0..SPLINE_BINS {
        // Detached membership mask: ky[k] <= y < ky[k+1]. The first and last
        // knots sit at +-bound up to rounding, so clamp the outer edges to
        // the exact interval used by the scalar implementation.
        let lo: Vec<f64> = if k == 0 {
            vec![-bound; rows]
        } else {
            ky_vals.data()[k..].iter().step_by(SPLINE_BINS + 1).cloned().collect()
        };
        let hi: Vec<f64> = if k + 1 == SPLINE_BINS {
            vec![bound; rows]
        } else {
            ky_vals.data()[k + 1..].iter().step_by(SPLINE_BINS + 1).cloned().collect()
        };
        let mut mask = Tensor::zeros(&[rows]);
        for i in 0..rows {
            if yv.data()[i] >= lo[i] && yv.data()[i] < hi[i] {
                mask.data_mut()[i] = 1.0;
            }
        }
        if mask.data().iter().all(|&m| m == 0.0) {
            continue;
        }

        let xk = column(tape, kn.kx, k, rows)?;
        let yk = column(tape, kn.ky, k, rows)?;
        let dk = column(tape, kn.kd, k, rows)?;
        let dk1 = column(tape, kn.kd, k + 1, rows)?;
        let w = clamp_magnitude(tape, column(tape, kn.widths, k, rows)?, 1e-12)?;
        let h = clamp_magnitude(tape, column(tape, kn.heights, k, rows)?, 1e-12)?;
        let s = tape.div(h, w)?;

        let dy = tape.sub(y, yk)?;
        let m2s = tape.sub(tape.add(dk1, dk)?, tape.scale(s, 2.0))?;
        let a = tape.add(tape.mul(h, tape.sub(s, dk)?)?, tape.mul(dy, m2s)?)?;
        let b = tape.sub(tape.mul(h, dk)?, tape.mul(dy, m2s)?)?;
        let c = tape.neg(tape.mul(s, dy)?);

        let disc = tape.sub(tape.square(b), tape.scale(tape.mul(a, c)?, 4.0))?;
        let disc_vals = tape.value(disc);
        let pos = disc_vals.map(|v| if v >= 1e-30 { 1.0 } else { 0.0 });
        let disc_floor = tape.constant(Tensor::full(&[rows], 1e-30));
        let disc = tape.where_mask(&pos, disc, disc_floor)?;
        let denom = clamp_magnitude(tape, tape.sub(tape.neg(b), tape.sqrt(disc)?)?, 1e-30)?;
        let xi = tape.div(tape.scale(c, 2.0), denom)?;
        // Clamp xi to [0, 1]; keeps the rational-quadratic denominator
        // bounded below by s/2 on every row, selected or not.
        let zero = tape.constant(Tensor::zeros(&[rows]));
        let one = tape.constant(Tensor::full(&[rows], 1.0));
        let xi = tape.where_mask(&tape.ge_mask(xi, zero)?, xi, zero)?;
        let xi = tape.where_mask(&tape.ge_mask(one, xi)?, xi, one)?;
        let xi1 = tape.sub(one, xi)?;

        let x_bin = tape.add(xk, tape.mul(xi, w)?)?;
        let rq_den = tape.add(s, tape.mul(m2s, tape.mul(xi, xi1)?)?)?;
        let num = tape.mul(
            tape.square(s),
            tape.add_many(&[
                tape.mul(dk1, tape.square(xi))?,
                tape.scale(tape.mul(s, tape.mul(xi, xi1)?)?, 2.0),
                tape.mul(dk, tape.square(xi1))?,
            ])?,
        )?;
        let ld_bin = tape.sub(
            tape.ln(tape.add_scalar(num, 1e-300))?,
            tape.scale(tape.ln(tape.add_scalar(rq_den, 1e-300))?, 2.0),
        )?;

        x_acc = tape.where_mask(&mask, x_bin, x_acc)?;
        ld_acc = tape.where_mask(&mask, ld_bin, ld_acc)?;
    }
    Ok((x_acc, ld_acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn random_params(rng: &mut StdRng) -> SplineParams {
        let draw = |rng: &mut StdRng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        SplineParams::new(
            draw(rng, SPLINE_BINS),
            draw(rng, SPLINE_BINS),
            draw(rng, SPLINE_BINS - 1),
            SPLINE_BOUND,
        )
        .unwrap()
    }

    #[test]
    fn identity_params_give_identity_map() {
        let sp = SplineParams::identity(SPLINE_BOUND);
        for &x in &[-4.9, -2.5, -0.3, 0.0, 1.7, 4.99, 6.0, -8.0] {
            let (y, ld) = sp.forward(x);
            assert_relative_eq!(y, x, max_relative = 1e-12, epsilon = 1e-12);
            assert!(ld.abs() < 1e-12, "log-det {ld} at {x}");
        }
    }

    #[test]
    fn forward_inverse_roundtrip() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let sp = random_params(&mut rng);
            let x: f64 = rng.random_range(-6.0..6.0);
            let (y, ld_f) = sp.forward(x);
            let (x_back, ld_i) = sp.inverse(y);
            assert_relative_eq!(x_back, x, max_relative = 1e-8, epsilon = 1e-8);
            assert_relative_eq!(ld_i, ld_f, max_relative = 1e-8, epsilon = 1e-8);
        }
    }

    #[test]
    fn forward_is_monotone_and_continuous_at_boundary() {
        let mut rng = StdRng::seed_from_u64(11);
        let sp = random_params(&mut rng);
        let mut prev = f64::NEG_INFINITY;
        let n = 2000;
        for i in 0..=n {
            let x = -6.0 + 12.0 * i as f64 / n as f64;
            let (y, _) = sp.forward(x);
            assert!(y > prev, "not monotone at x = {x}");
            prev = y;
        }
        let (y_in, _) = sp.forward(-SPLINE_BOUND);
        assert_relative_eq!(y_in, -SPLINE_BOUND, epsilon = 1e-9);
        let eps = 1e-9;
        let (y_near, _) = sp.forward(SPLINE_BOUND - eps);
        assert!((y_near - SPLINE_BOUND).abs() < 1e-6);
    }

    #[test]
    fn log_det_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..20 {
            let sp = random_params(&mut rng);
            let x: f64 = rng.random_range(-4.5..4.5);
            let h = 1e-6;
            let (yp, _) = sp.forward(x + h);
            let (ym, _) = sp.forward(x - h);
            let fd = ((yp - ym) / (2.0 * h)).ln();
            let (_, ld) = sp.forward(x);
            assert_relative_eq!(ld, fd, max_relative = 1e-4, epsilon = 1e-6);
        }
    }

    #[test]
    fn inverse_matches_bisection_oracle() {
        // Independent root-finder: bisect forward(x) = y on [-bound, bound].
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..20 {
            let sp = random_params(&mut rng);
            let y: f64 = rng.random_range(-4.9..4.9);
            let (mut lo, mut hi) = (-SPLINE_BOUND, SPLINE_BOUND);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if sp.forward(mid).0 < y {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let x_oracle = 0.5 * (lo + hi);
            let (x, _) = sp.inverse(y);
            assert_relative_eq!(x, x_oracle, epsilon = 1e-9);
        }
    }

    #[test]
    fn tape_inverse_matches_scalar() {
        let mut rng = StdRng::seed_from_u64(23);
        let rows = 16;
        let mut w = Vec::new();
        let mut h = Vec::new();
        let mut d = Vec::new();
        let mut ys = Vec::new();
        let mut params = Vec::new();
        for _ in 0..rows {
            let sp = random_params(&mut rng);
            w.extend_from_slice(&sp.widths_raw);
            h.extend_from_slice(&sp.heights_raw);
            d.extend_from_slice(&sp.derivs_raw);
            ys.push(rng.random_range(-6.5..6.5));
            params.push(sp);
        }
        let tape = Tape::default();
        let yv = tape.constant(Tensor::from_vec(vec![rows], ys.clone()).unwrap());
        let vars = SplineVarsRows {
            widths: tape.param(Tensor::from_vec(vec![rows, SPLINE_BINS], w).unwrap()),
            heights: tape.param(Tensor::from_vec(vec![rows, SPLINE_BINS], h).unwrap()),
            derivs: tape.param(Tensor::from_vec(vec![rows, SPLINE_BINS - 1], d).unwrap()),
        };
        let (x, ld) = spline_inverse_on_tape(&tape, yv, &vars, SPLINE_BOUND).unwrap();
        let xv = tape.value(x);
        let ldv = tape.value(ld);
        for i in 0..rows {
            let (x_ref, ld_ref) = params[i].inverse(ys[i]);
            assert_relative_eq!(xv.data()[i], x_ref, max_relative = 1e-9, epsilon = 1e-9);
            assert_relative_eq!(ldv.data()[i], ld_ref, max_relative = 1e-9, epsilon = 1e-9);
        }
    }

    #[test]
    fn tape_inverse_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(29);
        let rows = 4;
        let mut raws = Vec::new();
        for _ in 0..rows {
            let sp = random_params(&mut rng);
            raws.push(sp);
        }
        let ys: Vec<f64> = (0..rows).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut w = Vec::new();
        let mut h = Vec::new();
        let mut d = Vec::new();
        for sp in &raws {
            w.extend_from_slice(&sp.widths_raw);
            h.extend_from_slice(&sp.heights_raw);
            d.extend_from_slice(&sp.derivs_raw);
        }
        let params = vec![
            Tensor::from_vec(vec![rows, SPLINE_BINS], w).unwrap(),
            Tensor::from_vec(vec![rows, SPLINE_BINS], h).unwrap(),
            Tensor::from_vec(vec![rows, SPLINE_BINS - 1], d).unwrap(),
        ];
        let ys2 = ys.clone();
        let report = grad_check(
            |tape, vars| {
                let y = tape.constant(Tensor::from_vec(vec![rows], ys2.clone()).unwrap());
                let sv = SplineVarsRows { widths: vars[0], heights: vars[1], derivs: vars[2] };
                let (x, ld) = spline_inverse_on_tape(tape, y, &sv, SPLINE_BOUND)?;
                // Mixed objective exercises both outputs.
                tape.add(tape.sum_all(tape.square(x)), tape.sum_all(ld))
            },
            &params,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn out_of_range_rows_pass_through() {
        let tape = Tape::default();
        let rows = 3;
        let sp = SplineParams::identity(SPLINE_BOUND);
        let rep = |v: &[f64]| {
            let mut out = Vec::new();
            for _ in 0..rows {
                out.extend_from_slice(v);
            }
            out
        };
        let vars = SplineVarsRows {
            widths: tape.param(Tensor::from_vec(vec![rows, SPLINE_BINS], rep(&sp.widths_raw)).unwrap()),
            heights: tape.param(Tensor::from_vec(vec![rows, SPLINE_BINS], rep(&sp.heights_raw)).unwrap()),
            derivs: tape.param(Tensor::from_vec(vec![rows, SPLINE_BINS - 1], rep(&sp.derivs_raw)).unwrap()),
        };
        let ys = vec![-7.25, 0.5, 12.0];
        let y = tape.constant(Tensor::from_vec(vec![rows], ys.clone()).unwrap());
        let (x, ld) = spline_inverse_on_tape(&tape, y, &vars, SPLINE_BOUND).unwrap();
        let xv = tape.value(x);
        let ldv = tape.value(ld);
        for i in 0..rows {
            assert_relative_eq!(xv.data()[i], ys[i], epsilon = 1e-9);
        }
        assert!(ldv.data()[0].abs() < 1e-12);
        assert!(ldv.data()[2].abs() < 1e-12);
    }

    #[test]
    fn flat_layout_roundtrip() {
        let mut rng = StdRng::seed_from_u64(31);
        let sp = random_params(&mut rng);
        let mut flat = sp.widths_raw.clone();
        flat.extend_from_slice(&sp.heights_raw);
        flat.extend_from_slice(&sp.derivs_raw);
        let sp2 = SplineParams::from_flat(&flat, SPLINE_BOUND).unwrap();
        let (y1, l1) = sp.forward(1.234);
        let (y2, l2) = sp2.forward(1.234);
        assert_eq!(y1, y2);
        assert_eq!(l1, l2);
    }
}
