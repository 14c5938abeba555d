//! Spatial grids, metrics, and kernel-based spatial factors.
//!
//! A factor column is a kernel bump evaluated at every grid point: variate
//! `d`'s spatial footprint. Factors exist in two forms: a plain evaluation
//! for generation/inspection, and a tape-based construction whose gradients
//! flow back into kernel parameters during training.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metric {
    Euclidean,
    /// Great-circle distance on a sphere of the given radius; coordinates
    /// are (latitude, longitude) in radians.
    Haversine { radius: f64 },
}

#[derive(Clone, Debug)]
pub struct GridSpec {
    pub dims: (usize, usize),
    /// L x 2 coordinates, row-major over the grid (first axis slowest).
    pub coords: Tensor,
    pub metric: Metric,
}

impl GridSpec {
    /// Regular grid with cell-center coordinates in [0,1]^2.
    pub fn regular(l1: usize, l2: usize) -> Self {
        let mut data = Vec::with_capacity(l1 * l2 * 2);
        for i in 0..l1 {
            for j in 0..l2 {
                data.push((i as f64 + 0.5) / l1 as f64);
                data.push((j as f64 + 0.5) / l2 as f64);
            }
        }
        GridSpec {
            dims: (l1, l2),
            coords: Tensor::from_vec(vec![l1 * l2, 2], data).unwrap(),
            metric: Metric::Euclidean,
        }
    }

    /// Regular latitude/longitude grid covering the sphere, cell centers in
    /// radians: lat in (-pi/2, pi/2), lon in (-pi, pi).
    pub fn latlon(n_lat: usize, n_lon: usize, radius: f64) -> Self {
        let mut data = Vec::with_capacity(n_lat * n_lon * 2);
        for i in 0..n_lat {
            for j in 0..n_lon {
                data.push(((i as f64 + 0.5) / n_lat as f64) * std::f64::consts::PI - std::f64::consts::FRAC_PI_2);
                data.push(((j as f64 + 0.5) / n_lon as f64) * 2.0 * std::f64::consts::PI - std::f64::consts::PI);
            }
        }
        GridSpec {
            dims: (n_lat, n_lon),
            coords: Tensor::from_vec(vec![n_lat * n_lon, 2], data).unwrap(),
            metric: Metric::Haversine { radius },
        }
    }

    pub fn len(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-axis affine map taking unit-square center coordinates onto this
    /// grid's coordinate domain. Identity for Euclidean grids.
    pub fn unit_to_domain(&self) -> ([f64; 2], [f64; 2]) {
        match self.metric {
            Metric::Euclidean => ([1.0, 1.0], [0.0, 0.0]),
            Metric::Haversine { .. } => (
                [std::f64::consts::PI, 2.0 * std::f64::consts::PI],
                [-std::f64::consts::FRAC_PI_2, -std::f64::consts::PI],
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelFamily {
    Rbf,
    AnisoRbf,
    Matern15,
    Matern25,
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Rbf => "rbf",
            KernelFamily::AnisoRbf => "aniso_rbf",
            KernelFamily::Matern15 => "matern15",
            KernelFamily::Matern25 => "matern25",
        }
    }
}

/// Raw anisotropy parameters: covariance is `A A^T + diag(exp(B))` per node.
#[derive(Clone, Debug)]
pub struct AnisoRaw {
    /// D x 2 x 2
    pub a: Tensor,
    /// D x 2
    pub b: Tensor,
}

#[derive(Clone, Debug)]
pub struct KernelParams {
    /// D x 2 kernel centers in grid-domain coordinates.
    pub rho: Tensor,
    /// D log-scales; the squared kernel scale is exp(gamma).
    pub gamma: Tensor,
    pub aniso: Option<AnisoRaw>,
}

impl KernelParams {
    pub fn num_nodes(&self) -> usize {
        self.rho.shape()[0]
    }

    pub fn validate(&self, family: KernelFamily) -> Result<()> {
        let d = self.num_nodes();
        if self.rho.ndim() != 2 || self.rho.shape()[1] != 2 {
            return Err(Error::Validation(format!("centers must be D x 2, got {:?}", self.rho.shape())));
        }
        if self.gamma.shape() != [d] {
            return Err(Error::Validation(format!(
                "log-scales must be length {}, got {:?}",
                d,
                self.gamma.shape()
            )));
        }
        match (family, &self.aniso) {
            (KernelFamily::AnisoRbf, None) => {
                Err(Error::Validation("anisotropic kernel needs A/B parameters".to_string()))
            }
            (KernelFamily::AnisoRbf, Some(an)) => {
                if an.a.shape() != [d, 2, 2] || an.b.shape() != [d, 2] {
                    return Err(Error::Validation(format!(
                        "anisotropy shapes must be ({d},2,2) and ({d},2), got {:?} and {:?}",
                        an.a.shape(),
                        an.b.shape()
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Distance between two points under the metric.
pub fn distance(metric: &Metric, x: &[f64], y: &[f64]) -> f64 {
    match metric {
        Metric::Euclidean => x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        Metric::Haversine { radius } => {
            let (phi1, lam1) = (x[0], x[1]);
            let (phi2, lam2) = (y[0], y[1]);
            let sp = ((phi2 - phi1) / 2.0).sin();
            let sl = ((lam2 - lam1) / 2.0).sin();
            let u = sp * sp + phi1.cos() * phi2.cos() * sl * sl;
            2.0 * radius * u.sqrt().min(1.0).asin()
        }
    }
}

/// Plain factor evaluation: L x D matrix, one kernel bump per column.
/// Every kernel equals 1 at its own center, so column d attains its maximum
/// at the grid point nearest rho_d (exactly 1 when the center lies on it).
pub fn evaluate_factor(grid: &GridSpec, family: KernelFamily, params: &KernelParams) -> Result<Tensor> {
    params.validate(family)?;
    if family == KernelFamily::AnisoRbf && grid.metric != Metric::Euclidean {
        return Err(Error::Validation(
            "anisotropic kernels are only defined on Euclidean grids".to_string(),
        ));
    }
    let l = grid.len();
    let d = params.num_nodes();
    let mut out = Tensor::zeros(&[l, d]);
    for li in 0..l {
        let x = &grid.coords.data()[li * 2..li * 2 + 2];
        for di in 0..d {
            let rho = &params.rho.data()[di * 2..di * 2 + 2];
            let gamma = params.gamma.data()[di];
            let v = match family {
                KernelFamily::Rbf => {
                    let r = distance(&grid.metric, x, rho);
                    (-r * r / gamma.exp()).exp()
                }
                KernelFamily::Matern15 => {
                    let r = distance(&grid.metric, x, rho);
                    let t = 3f64.sqrt() * r / (gamma / 2.0).exp();
                    (1.0 + t) * (-t).exp()
                }
                KernelFamily::Matern25 => {
                    let r = distance(&grid.metric, x, rho);
                    let t = 5f64.sqrt() * r / (gamma / 2.0).exp();
                    (1.0 + t + t * t / 3.0) * (-t).exp()
                }
                KernelFamily::AnisoRbf => {
                    let an = params.aniso.as_ref().unwrap();
                    let a = &an.a.data()[di * 4..di * 4 + 4];
                    let b = &an.b.data()[di * 2..di * 2 + 2];
                    let s00 = a[0] * a[0] + a[1] * a[1] + b[0].exp();
                    let s01 = a[0] * a[2] + a[1] * a[3];
                    let s11 = a[2] * a[2] + a[3] * a[3] + b[1].exp();
                    let det = s00 * s11 - s01 * s01;
                    let (dx, dy) = (x[0] - rho[0], x[1] - rho[1]);
                    let q = (dx * dx * s11 - 2.0 * dx * dy * s01 + dy * dy * s00) / det;
                    (-0.5 * q).exp()
                }
            };
            out.set(&[li, di], v);
        }
    }
    Ok(out)
}

/// Options for the tape-based factor construction.
#[derive(Clone, Copy)]
pub enum FactorLayout {
    /// L x D (the canonical orientation).
    PointsByNodes,
    /// D x L (what the decoder consumes; avoids a transpose on the hot path).
    NodesByPoints,
}

/// Differentiable factor construction. `rho` is D x 2 in grid-domain
/// coordinates and `gamma` is length D, both tape values; gradients flow into
/// them (and into `aniso` when given).
pub fn differentiable_factor(
    tape: &Tape,
    grid: &GridSpec,
    family: KernelFamily,
    rho: Var,
    gamma: Var,
    aniso: Option<(Var, Var)>,
    layout: FactorLayout,
) -> Result<Var> {
    if family == KernelFamily::AnisoRbf && grid.metric != Metric::Euclidean {
        return Err(Error::Validation(
            "anisotropic kernels are only defined on Euclidean grids".to_string(),
        ));
    }
    let l = grid.len();
    let d = tape.shape_of(rho)[0];
    // Difference tensor in the output orientation, plus per-axis components.
    let (dx, dy, diff_sq_sum) = {
        let coords = tape.constant(grid.coords.clone());
        let (co, ce) = match layout {
            FactorLayout::PointsByNodes => {
                (tape.reshape(coords, &[l, 1, 2])?, tape.reshape(rho, &[1, d, 2])?)
            }
            FactorLayout::NodesByPoints => {
                (tape.reshape(coords, &[1, l, 2])?, tape.reshape(rho, &[d, 1, 2])?)
            }
        };
        let diff = tape.sub(co, ce)?; // (l,d,2) or (d,l,2)
        let dx = tape.slice(diff, 2, 0, 1)?;
        let dy = tape.slice(diff, 2, 1, 2)?;
        let shape2 = match layout {
            FactorLayout::PointsByNodes => [l, d],
            FactorLayout::NodesByPoints => [d, l],
        };
        let dx = tape.reshape(dx, &shape2)?;
        let dy = tape.reshape(dy, &shape2)?;
        let sq = tape.square(diff);
        let ssum = tape.sum_axes(sq, &[2], false)?;
        (dx, dy, ssum)
    };
    // gamma broadcasts along the node axis; orient it to match the layout.
    let gamma_row = match layout {
        FactorLayout::PointsByNodes => tape.reshape(gamma, &[1, d])?,
        FactorLayout::NodesByPoints => tape.reshape(gamma, &[d, 1])?,
    };
    let r2 = match grid.metric {
        Metric::Euclidean => diff_sq_sum,
        Metric::Haversine { radius } => {
            // Great-circle distance, assembled from differentiable pieces.
            // dx is the latitude difference, dy the longitude difference;
            // latitudes themselves come from broadcasting the coordinate and
            // center columns.
            let coords = tape.constant(grid.coords.clone());
            let lat_pts = tape.slice(coords, 1, 0, 1)?; // (L,1)
            let lat_ctr = tape.slice(rho, 1, 0, 1)?; // (D,1)
            let (lat_a, lat_b) = match layout {
                FactorLayout::PointsByNodes => {
                    (tape.reshape(lat_pts, &[l, 1])?, tape.reshape(lat_ctr, &[1, d])?)
                }
                FactorLayout::NodesByPoints => {
                    (tape.reshape(lat_pts, &[1, l])?, tape.reshape(lat_ctr, &[d, 1])?)
                }
            };
            let sp = tape.sin(tape.scale(dx, 0.5));
            let sl = tape.sin(tape.scale(dy, 0.5));
            let cos_prod = tape.mul(tape.cos(lat_a), tape.cos(lat_b))?;
            let u = tape.add(tape.square(sp), tape.mul(cos_prod, tape.square(sl))?)?;
            // Clamp into asin's domain against roundoff at antipodes.
            let one = tape.constant(Tensor::full(&tape.shape_of(u), 1.0));
            let over = tape.ge_mask(u, one)?;
            let u = tape.where_mask(&over, one, u)?;
            let su = tape.sqrt(tape.add_scalar(u, 1e-30))?;
            let dist = tape.scale(tape.asin(su)?, 2.0 * radius);
            tape.square(dist)
        }
    };
    match family {
        KernelFamily::Rbf => {
            let scale = tape.exp(gamma_row);
            let q = tape.div(r2, scale)?;
            Ok(tape.exp(tape.neg(q)))
        }
        KernelFamily::Matern15 | KernelFamily::Matern25 => {
            let s = tape.exp(tape.scale(gamma_row, 0.5));
            let r = tape.sqrt(tape.add_scalar(r2, 1e-30))?;
            let nu_const = if family == KernelFamily::Matern15 { 3f64.sqrt() } else { 5f64.sqrt() };
            let t = tape.div(tape.scale(r, nu_const), s)?;
            let poly = if family == KernelFamily::Matern15 {
                tape.add_scalar(t, 1.0)
            } else {
                let t2 = tape.scale(tape.square(t), 1.0 / 3.0);
                tape.add_scalar(tape.add(t, t2)?, 1.0)
            };
            Ok(tape.mul(poly, tape.exp(tape.neg(t)))?)
        }
        KernelFamily::AnisoRbf => {
            let (a, b) = aniso.ok_or_else(|| {
                Error::Validation("anisotropic kernel needs A/B parameters".to_string())
            })?;
            // Sigma entries per node, each (D,)
            let a00 = tape.reshape(tape.slice(tape.reshape(a, &[d, 4])?, 1, 0, 1)?, &[d])?;
            let a01 = tape.reshape(tape.slice(tape.reshape(a, &[d, 4])?, 1, 1, 2)?, &[d])?;
            let a10 = tape.reshape(tape.slice(tape.reshape(a, &[d, 4])?, 1, 2, 3)?, &[d])?;
            let a11 = tape.reshape(tape.slice(tape.reshape(a, &[d, 4])?, 1, 3, 4)?, &[d])?;
            let b0 = tape.reshape(tape.slice(b, 1, 0, 1)?, &[d])?;
            let b1 = tape.reshape(tape.slice(b, 1, 1, 2)?, &[d])?;
            let s00 = tape.add(tape.add(tape.square(a00), tape.square(a01))?, tape.exp(b0))?;
            let s01 = tape.add(tape.mul(a00, a10)?, tape.mul(a01, a11)?)?;
            let s11 = tape.add(tape.add(tape.square(a10), tape.square(a11))?, tape.exp(b1))?;
            let det = tape.sub(tape.mul(s00, s11)?, tape.square(s01))?;
            let orient = |v: Var| -> Result<Var> {
                match layout {
                    FactorLayout::PointsByNodes => tape.reshape(v, &[1, d]),
                    FactorLayout::NodesByPoints => tape.reshape(v, &[d, 1]),
                }
            };
            let (s00, s01, s11, det) = (orient(s00)?, orient(s01)?, orient(s11)?, orient(det)?);
            let qa = tape.mul(tape.square(dx), s11)?;
            let qb = tape.scale(tape.mul(tape.mul(dx, dy)?, s01)?, -2.0);
            let qc = tape.mul(tape.square(dy), s00)?;
            let q = tape.div(tape.add(tape.add(qa, qb)?, qc)?, det)?;
            Ok(tape.exp(tape.scale(q, -0.5)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn euclidean_three_four_five() {
        assert_abs_diff_eq!(distance(&Metric::Euclidean, &[0.0, 0.0], &[3.0, 4.0]), 5.0);
    }

    #[test]
    fn haversine_antipodal_poles() {
        let d = distance(
            &Metric::Haversine { radius: 1.0 },
            &[std::f64::consts::FRAC_PI_2, 0.0],
            &[-std::f64::consts::FRAC_PI_2, 0.0],
        );
        assert_abs_diff_eq!(d, std::f64::consts::PI, epsilon = 1e-12);
    }

    #[test]
    fn rbf_unit_distance_unit_scale() {
        // |x - rho| = 1 with gamma = 0 gives exp(-1).
        let grid = GridSpec {
            dims: (1, 1),
            coords: Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap(),
            metric: Metric::Euclidean,
        };
        let params = KernelParams {
            rho: Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap(),
            gamma: Tensor::from_vec(vec![1], vec![0.0]).unwrap(),
            aniso: None,
        };
        let f = evaluate_factor(&grid, KernelFamily::Rbf, &params).unwrap();
        assert_abs_diff_eq!(f.data()[0], (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn aniso_identity_covariance() {
        // Sigma = I (A = 0, B = 0) at offset (1, 0) gives exp(-1/2).
        let grid = GridSpec {
            dims: (1, 1),
            coords: Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap(),
            metric: Metric::Euclidean,
        };
        let params = KernelParams {
            rho: Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap(),
            gamma: Tensor::from_vec(vec![1], vec![0.0]).unwrap(),
            aniso: Some(AnisoRaw { a: Tensor::zeros(&[1, 2, 2]), b: Tensor::zeros(&[1, 2]) }),
        };
        let f = evaluate_factor(&grid, KernelFamily::AnisoRbf, &params).unwrap();
        assert_abs_diff_eq!(f.data()[0], (-0.5f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn aniso_diag_equals_isotropic() {
        // A = 0, B = b * ones collapses to the isotropic kernel with
        // exp(gamma) = 2 exp(b).
        let grid = GridSpec::regular(5, 5);
        let b = -2.3;
        let aniso_params = KernelParams {
            rho: Tensor::from_vec(vec![1, 2], vec![0.31, 0.62]).unwrap(),
            gamma: Tensor::from_vec(vec![1], vec![0.0]).unwrap(),
            aniso: Some(AnisoRaw {
                a: Tensor::zeros(&[1, 2, 2]),
                b: Tensor::from_vec(vec![1, 2], vec![b, b]).unwrap(),
            }),
        };
        let iso_params = KernelParams {
            rho: aniso_params.rho.clone(),
            gamma: Tensor::from_vec(vec![1], vec![(2.0 * b.exp()).ln()]).unwrap(),
            aniso: None,
        };
        let fa = evaluate_factor(&grid, KernelFamily::AnisoRbf, &aniso_params).unwrap();
        let fi = evaluate_factor(&grid, KernelFamily::Rbf, &iso_params).unwrap();
        for (x, y) in fa.data().iter().zip(fi.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn factor_peaks_at_center_grid_point() {
        let grid = GridSpec::regular(4, 4);
        // Center exactly on grid point (1,2) -> coords (0.375, 0.625).
        let params = KernelParams {
            rho: Tensor::from_vec(vec![1, 2], vec![0.375, 0.625]).unwrap(),
            gamma: Tensor::from_vec(vec![1], vec![-3.0]).unwrap(),
            aniso: None,
        };
        for family in [KernelFamily::Rbf, KernelFamily::Matern15, KernelFamily::Matern25] {
            let f = evaluate_factor(&grid, family, &params).unwrap();
            let (mut best, mut best_v) = (0, f64::MIN);
            for (i, &v) in f.data().iter().enumerate() {
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            assert_eq!(best, 6, "family {:?}", family);
            assert_abs_diff_eq!(best_v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn differentiable_matches_plain() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let grid = GridSpec::regular(6, 5);
        let d = 3;
        let params = KernelParams {
            rho: Tensor::from_vec(
                vec![d, 2],
                (0..2 * d).map(|_| rand::Rng::random::<f64>(&mut rng)).collect(),
            )
            .unwrap(),
            gamma: Tensor::from_vec(vec![d], vec![-2.0, -3.0, -1.5]).unwrap(),
            aniso: Some(AnisoRaw {
                a: Tensor::randn_scaled(&[d, 2, 2], 0.3, &mut rng),
                b: Tensor::from_vec(vec![d, 2], vec![-2.0, -2.5, -1.0, -3.0, -2.2, -2.8]).unwrap(),
            }),
        };
        for family in [
            KernelFamily::Rbf,
            KernelFamily::Matern15,
            KernelFamily::Matern25,
            KernelFamily::AnisoRbf,
        ] {
            let plain = evaluate_factor(&grid, family, &params).unwrap();
            let tape = Tape::new();
            let rho = tape.param(params.rho.clone());
            let gamma = tape.param(params.gamma.clone());
            let aniso = params
                .aniso
                .as_ref()
                .map(|an| (tape.param(an.a.clone()), tape.param(an.b.clone())));
            let f = differentiable_factor(&tape, &grid, family, rho, gamma, aniso, FactorLayout::PointsByNodes)
                .unwrap();
            let fv = tape.value(f);
            assert_eq!(fv.shape(), plain.shape());
            for (a, b) in fv.data().iter().zip(plain.data()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
            // The transposed layout agrees elementwise.
            let ft = differentiable_factor(&tape, &grid, family, rho, gamma, aniso, FactorLayout::NodesByPoints)
                .unwrap();
            let ftv = tape.value(ft);
            for li in 0..grid.len() {
                for di in 0..d {
                    assert_abs_diff_eq!(ftv.at(&[di, li]), plain.at(&[li, di]), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn differentiable_haversine_matches_plain() {
        let grid = GridSpec::latlon(6, 8, 1.0);
        let params = KernelParams {
            rho: Tensor::from_vec(vec![2, 2], vec![0.4, -1.2, -0.7, 2.1]).unwrap(),
            gamma: Tensor::from_vec(vec![2], vec![-1.0, -0.5]).unwrap(),
            aniso: None,
        };
        let plain = evaluate_factor(&grid, KernelFamily::Rbf, &params).unwrap();
        let tape = Tape::new();
        let rho = tape.param(params.rho.clone());
        let gamma = tape.param(params.gamma.clone());
        let f = differentiable_factor(&tape, &grid, KernelFamily::Rbf, rho, gamma, None, FactorLayout::PointsByNodes)
            .unwrap();
        for (a, b) in tape.value(f).data().iter().zip(plain.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }
}
