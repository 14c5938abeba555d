//! Dense row-major tensors over f64.
//!
//! This is deliberately minimal: owned `Vec<f64>` storage, shapes as
//! `Vec<usize>`, and exactly the kernels the tape needs. A scalar is a tensor
//! with an empty shape. Binary elementwise kernels broadcast with trailing
//! dimension alignment (a missing leading axis or a 1-sized axis stretches).

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Standard normal scaled by `std`, the usual fan-in initializer.
    pub fn randn_scaled<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Self::randn(shape, rng);
        for v in t.data.iter_mut() {
            *v *= std;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0usize;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let mut flat = 0usize;
        for (i, &ix) in idx.iter().enumerate() {
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat] = v;
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast result shape under trailing alignment, or a shape error.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(
                "broadcast",
                format!("cannot broadcast {:?} with {:?}", a, b),
            ));
        };
    }
    Ok(out)
}

/// Elementwise binary op with trailing-dimension broadcasting.
pub fn binary_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor { shape: a.shape.clone(), data });
    }
    if b.is_scalar() && b.ndim() == 0 {
        let y = b.data[0];
        return Ok(Tensor { shape: a.shape.clone(), data: a.data.iter().map(|&x| f(x, y)).collect() });
    }
    if a.is_scalar() && a.ndim() == 0 {
        let x = a.data[0];
        return Ok(Tensor { shape: b.shape.clone(), data: b.data.iter().map(|&y| f(x, y)).collect() });
    }
    let out_shape = broadcast_shapes(&a.shape, &b.shape)?;
    // Fast path: b is a trailing vector applied across rows of a.
    if a.shape == out_shape && b.ndim() == 1 && *a.shape.last().unwrap() == b.shape[0] {
        let n = b.shape[0];
        let mut data = Vec::with_capacity(a.data.len());
        for chunk in a.data.chunks_exact(n) {
            for (x, y) in chunk.iter().zip(&b.data) {
                data.push(f(*x, *y));
            }
        }
        return Ok(Tensor { shape: out_shape, data });
    }
    let numel: usize = out_shape.iter().product();
    let nd = out_shape.len();
    let sa = padded_strides(&a.shape, nd);
    let sb = padded_strides(&b.shape, nd);
    let mut idx = vec![0usize; nd];
    let mut data = Vec::with_capacity(numel);
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for _ in 0..numel {
        data.push(f(a.data[off_a], b.data[off_b]));
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off_a += sa[ax];
            off_b += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off_a -= sa[ax] * idx[ax];
            off_b -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor { shape: out_shape, data })
}

/// Strides for iterating a tensor of shape `shape` as if it had `nd` axes
/// (leading axes padded with 1). Broadcast axes get stride 0.
fn padded_strides(shape: &[usize], nd: usize) -> Vec<usize> {
    let own = strides_of(shape);
    let pad = nd - shape.len();
    let mut s = vec![0usize; nd];
    for i in 0..shape.len() {
        s[pad + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Expand `t` to `target` (trailing alignment), materializing the copy.
pub fn broadcast_to(t: &Tensor, target: &[usize]) -> Result<Tensor> {
    let merged = broadcast_shapes(&t.shape, target)?;
    if merged != target {
        return Err(Error::shape(
            "broadcast_to",
            format!("{:?} does not broadcast to {:?}", t.shape, target),
        ));
    }
    if t.shape == target {
        return Ok(t.clone());
    }
    let nd = target.len();
    let s = padded_strides(&t.shape, nd);
    let numel: usize = target.iter().product();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(t.data[off]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += s[ax];
            if idx[ax] < target[ax] {
                break;
            }
            off -= s[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor { shape: target.to_vec(), data })
}

/// Sum `g` down to `target` shape, undoing a trailing-alignment broadcast.
/// This is the gradient of broadcasting.
pub fn reduce_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape == target {
        return g.clone();
    }
    let nd = g.shape.len();
    let pad = nd - target.len();
    let mut out = Tensor::zeros(target);
    let st = padded_strides(target, nd);
    let mut idx = vec![0usize; nd];
    let mut off_t = 0usize;
    for &v in &g.data {
        out.data[off_t] += v;
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off_t += st[ax];
            if idx[ax] < g.shape[ax] {
                break;
            }
            off_t -= st[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    let _ = pad;
    out
}

/// 2-D matrix product `a (m,k) @ b (k,n)`, with optional transposes applied
/// via strides (no copies).
pub fn matmul2(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("expected 2-d operands, got {:?} and {:?}", a.shape, b.shape),
        ));
    }
    let (am, ak) = if ta { (a.shape[1], a.shape[0]) } else { (a.shape[0], a.shape[1]) };
    let (bk, bn) = if tb { (b.shape[1], b.shape[0]) } else { (b.shape[0], b.shape[1]) };
    if ak != bk {
        return Err(Error::shape(
            "matmul",
            format!("inner dims disagree: {:?}{} @ {:?}{}", a.shape, if ta { "^T" } else { "" }, b.shape, if tb { "^T" } else { "" }),
        ));
    }
    let mut out = Tensor::zeros(&[am, bn]);
    unsafe {
        let (rsa, csa) = if ta { (1, a.shape[1] as isize) } else { (a.shape[1] as isize, 1) };
        let (rsb, csb) = if tb { (1, b.shape[1] as isize) } else { (b.shape[1] as isize, 1) };
        matrixmultiply::dgemm(
            am,
            ak,
            bn,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            bn as isize,
            1,
        );
    }
    Ok(out)
}

/// Like [`matmul2`] but accumulates into `out` (`out += a @ b`).
pub fn matmul2_acc(out: &mut Tensor, a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<()> {
    let (am, ak) = if ta { (a.shape[1], a.shape[0]) } else { (a.shape[0], a.shape[1]) };
    let (bk, bn) = if tb { (b.shape[1], b.shape[0]) } else { (b.shape[0], b.shape[1]) };
    if ak != bk || out.shape != [am, bn] {
        return Err(Error::shape("matmul_acc", format!("{:?} @ {:?} -> {:?}", a.shape, b.shape, out.shape)));
    }
    unsafe {
        let (rsa, csa) = if ta { (1, a.shape[1] as isize) } else { (a.shape[1] as isize, 1) };
        let (rsb, csb) = if tb { (1, b.shape[1] as isize) } else { (b.shape[1] as isize, 1) };
        matrixmultiply::dgemm(
            am,
            ak,
            bn,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            1.0,
            out.data.as_mut_ptr(),
            bn as isize,
            1,
        );
    }
    Ok(())
}

/// Batched 3-D matmul: `(b,m,k) @ (b,k,n) -> (b,m,n)`.
pub fn batched_matmul3(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 3 || b.ndim() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
        return Err(Error::shape(
            "batched_matmul",
            format!("expected (b,m,k)@(b,k,n), got {:?} and {:?}", a.shape, b.shape),
        ));
    }
    let (nb, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
    let n = b.shape[2];
    let mut out = Tensor::zeros(&[nb, m, n]);
    for i in 0..nb {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr().add(i * m * k),
                k as isize,
                1,
                b.data.as_ptr().add(i * k * n),
                n as isize,
                1,
                0.0,
                out.data.as_mut_ptr().add(i * m * n),
                n as isize,
                1,
            );
        }
    }
    Ok(out)
}

/// Sum over the given axes. With `keep`, reduced axes stay as size 1.
pub fn sum_axes(t: &Tensor, axes: &[usize], keep: bool) -> Result<Tensor> {
    for &ax in axes {
        if ax >= t.ndim() {
            return Err(Error::shape("sum_axes", format!("axis {} out of range for {:?}", ax, t.shape)));
        }
    }
    let mut kept_shape = t.shape.clone();
    for &ax in axes {
        kept_shape[ax] = 1;
    }
    let mut out = Tensor::zeros(&kept_shape);
    let nd = t.ndim();
    let so = strides_of(&kept_shape);
    let mut idx = vec![0usize; nd];
    let mut off_o = 0usize;
    for &v in &t.data {
        out.data[off_o] += v;
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if kept_shape[ax] > 1 {
                off_o += so[ax];
            }
            if idx[ax] < t.shape[ax] {
                break;
            }
            if kept_shape[ax] > 1 {
                off_o -= so[ax] * idx[ax];
            }
            idx[ax] = 0;
        }
    }
    if !keep {
        let final_shape: Vec<usize> = t
            .shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        out.shape = final_shape;
    }
    Ok(out)
}

/// Slice along `axis`, keeping indices `[start, end)`.
pub fn slice_axis(t: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    if axis >= t.ndim() || start >= end || end > t.shape[axis] {
        return Err(Error::shape(
            "slice",
            format!("slice axis {} range {}..{} of {:?}", axis, start, end, t.shape),
        ));
    }
    let mut out_shape = t.shape.clone();
    out_shape[axis] = end - start;
    let outer: usize = t.shape[..axis].iter().product();
    let inner: usize = t.shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * (end - start) * inner);
    let src_block = t.shape[axis] * inner;
    for o in 0..outer {
        let base = o * src_block + start * inner;
        data.extend_from_slice(&t.data[base..base + (end - start) * inner]);
    }
    Ok(Tensor { shape: out_shape, data })
}

/// Scatter-add `g` (a slice gradient) back into `acc` at the slice position.
pub fn slice_backward_acc(acc: &mut Tensor, g: &Tensor, axis: usize, start: usize) {
    let outer: usize = acc.shape[..axis].iter().product();
    let inner: usize = acc.shape[axis + 1..].iter().product();
    let width = g.shape[axis];
    let dst_block = acc.shape[axis] * inner;
    let src_block = width * inner;
    for o in 0..outer {
        let dst = o * dst_block + start * inner;
        let src = o * src_block;
        for i in 0..src_block {
            acc.data[dst + i] += g.data[src + i];
        }
    }
}

/// Concatenate along `axis`. All other dims must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat", "no operands".to_string()));
    }
    let nd = parts[0].ndim();
    if axis >= nd {
        return Err(Error::shape("concat", format!("axis {} out of range", axis)));
    }
    let mut out_shape = parts[0].shape.clone();
    let mut total = 0usize;
    for p in parts {
        if p.ndim() != nd {
            return Err(Error::shape("concat", "rank mismatch".to_string()));
        }
        for (i, (&a, &b)) in p.shape.iter().zip(&out_shape).enumerate() {
            if i != axis && a != b {
                return Err(Error::shape(
                    "concat",
                    format!("dim {} mismatch: {:?} vs {:?}", i, p.shape, out_shape),
                ));
            }
        }
        total += p.shape[axis];
    }
    out_shape[axis] = total;
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let block = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor { shape: out_shape, data })
}

/// Transpose a 2-D tensor (materialized).
pub fn transpose2(t: &Tensor) -> Result<Tensor> {
    if t.ndim() != 2 {
        return Err(Error::shape("transpose", format!("expected 2-d, got {:?}", t.shape)));
    }
    let (m, n) = (t.shape[0], t.shape[1]);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data[j * m + i] = t.data[i * n + j];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn broadcast_trailing_alignment() {
        let a = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(vec![3], vec![10., 20., 30.]).unwrap();
        let c = binary_broadcast(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
    }

    #[test]
    fn broadcast_middle_ones() {
        let a = Tensor::from_vec(vec![2, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::from_vec(vec![1, 3, 2], vec![1., 1., 2., 2., 3., 3.]).unwrap();
        let c = binary_broadcast(&a, &b, |x, y| x * y).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.data(), &[1., 2., 2., 4., 3., 6., 3., 4., 6., 8., 9., 12.]);
    }

    #[test]
    fn broadcast_incompatible_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(binary_broadcast(&a, &b, |x, _| x).is_err());
    }

    #[test]
    fn reduce_undoes_broadcast() {
        let g = Tensor::full(&[4, 3], 1.0);
        let r = reduce_to_shape(&g, &[3]);
        assert_eq!(r.shape(), &[3]);
        assert_eq!(r.data(), &[4., 4., 4.]);
        let r2 = reduce_to_shape(&g, &[4, 1]);
        assert_eq!(r2.data(), &[3., 3., 3., 3.]);
    }

    #[test]
    fn matmul_matches_manual() {
        let a = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = matmul2(&a, &b, false, false).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        // a^T via strides equals materialized transpose
        let at = transpose2(&a).unwrap();
        let c2 = matmul2(&at, &b, true, false).unwrap();
        assert_eq!(c2.data(), c.data());
    }

    #[test]
    fn batched_matmul_each_batch_independent() {
        let a = Tensor::from_vec(vec![2, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::from_vec(vec![2, 2, 1], vec![1., 1., 2., 2.]).unwrap();
        let c = batched_matmul3(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_abs_diff_eq!(c.data()[0], 3.0);
        assert_abs_diff_eq!(c.data()[1], 14.0);
    }

    #[test]
    fn sum_axes_keep_and_drop() {
        let t = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let s0 = sum_axes(&t, &[0], true).unwrap();
        assert_eq!(s0.shape(), &[1, 3]);
        assert_eq!(s0.data(), &[5., 7., 9.]);
        let s1 = sum_axes(&t, &[1], false).unwrap();
        assert_eq!(s1.shape(), &[2]);
        assert_eq!(s1.data(), &[6., 15.]);
        let all = sum_axes(&t, &[0, 1], false).unwrap();
        assert_eq!(all.shape(), &[] as &[usize]);
        assert_abs_diff_eq!(all.scalar_value(), 21.0);
    }

    #[test]
    fn slice_and_scatter_roundtrip() {
        let t = Tensor::from_vec(vec![2, 4], (0..8).map(|x| x as f64).collect()).unwrap();
        let s = slice_axis(&t, 1, 1, 3).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[1., 2., 5., 6.]);
        let mut acc = Tensor::zeros(&[2, 4]);
        slice_backward_acc(&mut acc, &s, 1, 1);
        assert_eq!(acc.data(), &[0., 1., 2., 0., 0., 5., 6., 0.]);
    }

    /// Rough dgemm throughput probe; run with --ignored --nocapture when
    /// retuning training schedules for a new machine.
    #[test]
    #[ignore]
    fn bench_matmul_throughput() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::randn(&[4000, 900], &mut rng);
        let b = Tensor::randn(&[900, 64], &mut rng);
        let t0 = std::time::Instant::now();
        let reps = 20;
        let mut sink = 0.0;
        for _ in 0..reps {
            let c = matmul2(&a, &b, false, false).unwrap();
            sink += c.data()[0];
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = reps as f64 * 2.0 * 4000.0 * 900.0 * 64.0 / dt / 1e9;
        println!("dgemm 4000x900x64: {:.2} GFLOP/s (sink {})", gflops, sink);
    }

    #[test]
    fn concat_axis1() {
        let a = Tensor::from_vec(vec![2, 1], vec![1., 2.]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![3., 4., 5., 6.]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1., 3., 4., 2., 5., 6.]);
    }
}
