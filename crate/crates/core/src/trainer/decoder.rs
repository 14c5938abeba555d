//! Grid decoder: maps latent series through spatial factors onto grid
//! observations, either as the plain product or through a shared per-point
//! readout net conditioned on learned grid-point embeddings.

use crate::autodiff::{matmul2, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpVars};
use rand::Rng;

/// Decoder parameters. In linear mode the readout net and embeddings are
/// absent and the reconstruction is the factor-latent product itself.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub linear: bool,
    /// Shared readout, input width `1 + f`, one output.
    pub readout: Option<Mlp>,
    /// `(V, L, f)` grid-point embeddings.
    pub embed: Option<Tensor>,
    /// Observation noise log-variance: `(V,)`, or `(V, L)` when per-point.
    pub obs_logvar: Tensor,
    pub per_point: bool,
}

pub struct DecoderVars {
    pub readout: Option<MlpVars>,
    pub embed: Option<Var>,
    pub obs_logvar: Var,
}

impl DecoderParams {
    pub fn linear(n_variates: usize, l: usize, per_point: bool) -> Self {
        let obs_logvar =
            if per_point { Tensor::zeros(&[n_variates, l]) } else { Tensor::zeros(&[n_variates]) };
        Self { linear: true, readout: None, embed: None, obs_logvar, per_point }
    }

    pub fn nonlinear<R: Rng>(
        n_variates: usize,
        l: usize,
        embed_dim: usize,
        width: usize,
        per_point: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::Validation("decoder embedding dim must be positive".into()));
        }
        let readout = Mlp::new(&[1 + embed_dim, width, width, 1], false, false, rng);
        let embed = Tensor::randn_scaled(&[n_variates, l, embed_dim], 1.0, rng);
        let obs_logvar =
            if per_point { Tensor::zeros(&[n_variates, l]) } else { Tensor::zeros(&[n_variates]) };
        Ok(Self { linear: false, readout: Some(readout), embed: Some(embed), obs_logvar, per_point })
    }

    pub fn num_variates(&self) -> usize {
        self.obs_logvar.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.as_ref().map_or(0, |e| e.shape()[2])
    }

    /// Visits parameters in the flatten order: readout, embeddings, noise.
    pub fn for_each_param(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        if let Some(net) = self.readout.as_mut() {
            net.for_each_param(f);
        }
        if let Some(e) = self.embed.as_mut() {
            f(e);
        }
        f(&mut self.obs_logvar);
    }

    pub fn vars_from_slice(&self, vars: &[Var], cursor: &mut usize) -> DecoderVars {
        let readout = self.readout.as_ref().map(|net| net.vars_from_slice(vars, cursor));
        let embed = self.embed.as_ref().map(|_| {
            let v = vars[*cursor];
            *cursor += 1;
            v
        });
        let obs_logvar = vars[*cursor];
        *cursor += 1;
        DecoderVars { readout, embed, obs_logvar }
    }
}

fn check_partition(partition: &[usize], d: usize, op: &'static str) -> Result<()> {
    if partition.is_empty() || partition.iter().sum::<usize>() != d || partition.contains(&0) {
        return Err(Error::shape(op, format!("partition {partition:?} for D={d}")));
    }
    Ok(())
}

/// Plain decode of one sample: `z` is `(D, T)`, `f` the `(L, D)` factor
/// matrix whose column blocks follow `partition`; returns `(V, L, T)`.
pub fn decode(
    z: &Tensor,
    f: &Tensor,
    partition: &[usize],
    dec: &DecoderParams,
) -> Result<Tensor> {
    let zs = z.shape();
    let fs = f.shape();
    if zs.len() != 2 || fs.len() != 2 || fs[1] != zs[0] {
        return Err(Error::shape("decode", format!("z {zs:?}, factors {fs:?}")));
    }
    let (d, t_len) = (zs[0], zs[1]);
    let l = fs[0];
    check_partition(partition, d, "decode")?;
    let n_var = partition.len();
    if dec.num_variates() != n_var {
        return Err(Error::shape(
            "decode",
            format!("{n_var} variates vs decoder for {}", dec.num_variates()),
        ));
    }
    let mut out = Tensor::zeros(&[n_var, l, t_len]);
    let mut col0 = 0;
    for (v, &dv) in partition.iter().enumerate() {
        let mut fv = Tensor::zeros(&[l, dv]);
        for li in 0..l {
            for j in 0..dv {
                fv.set(&[li, j], f.at(&[li, col0 + j]));
            }
        }
        let mut zv = Tensor::zeros(&[dv, t_len]);
        for j in 0..dv {
            for t in 0..t_len {
                zv.set(&[j, t], z.at(&[col0 + j, t]));
            }
        }
        let fz = matmul2(&fv, &zv, false, false)?;
        if dec.linear {
            for li in 0..l {
                for t in 0..t_len {
                    out.set(&[v, li, t], fz.at(&[li, t]));
                }
            }
        } else {
            let net = dec.readout.as_ref().expect("nonlinear decoder has a readout");
            let embed = dec.embed.as_ref().expect("nonlinear decoder has embeddings");
            let width = 1 + dec.embed_dim();
            let mut rows = Tensor::zeros(&[l * t_len, width]);
            for li in 0..l {
                for t in 0..t_len {
                    let r = li * t_len + t;
                    rows.set(&[r, 0], fz.at(&[li, t]));
                    for k in 1..width {
                        rows.set(&[r, k], embed.at(&[v, li, k - 1]));
                    }
                }
            }
            let y = net.apply_plain(&rows)?;
            for li in 0..l {
                for t in 0..t_len {
                    out.set(&[v, li, t], y.at(&[li * t_len + t, 0]));
                }
            }
        }
        col0 += dv;
    }
    Ok(out)
}

/// Batched decode on the tape. `z_rows` is `(R, D)` with one row per
/// (sample, time) pair; `factors[v]` is the `(D_v, L)` transposed factor
/// block. Returns one `(R, L)` reconstruction per variate.
pub fn decode_rows_on_tape(
    tape: &Tape,
    z_rows: Var,
    factors: &[Var],
    partition: &[usize],
    dec: &DecoderVars,
    embed_dim: usize,
) -> Result<Vec<Var>> {
    let zs = tape.shape_of(z_rows);
    if zs.len() != 2 {
        return Err(Error::shape("decode rows", format!("z rows {zs:?}")));
    }
    let (r, d) = (zs[0], zs[1]);
    check_partition(partition, d, "decode rows")?;
    if factors.len() != partition.len() {
        return Err(Error::shape(
            "decode rows",
            format!("{} factor blocks vs {} variates", factors.len(), partition.len()),
        ));
    }
    let mut out = Vec::with_capacity(partition.len());
    let mut col0 = 0;
    for (v, &dv) in partition.iter().enumerate() {
        let fshape = tape.shape_of(factors[v]);
        if fshape.len() != 2 || fshape[0] != dv {
            return Err(Error::shape(
                "decode rows",
                format!("factor block {v} is {fshape:?}, want ({dv}, L)"),
            ));
        }
        let l = fshape[1];
        let zv = tape.slice(z_rows, 1, col0, col0 + dv)?;
        let fz = tape.matmul(zv, factors[v])?;
        if let (Some(net), Some(embed)) = (&dec.readout, dec.embed) {
            let col = tape.reshape(fz, &[r * l, 1])?;
            let ev = tape.reshape(tape.slice(embed, 0, v, v + 1)?, &[l, embed_dim])?;
            let tiled = tape.reshape(tape.broadcast_to(ev, &[r, l, embed_dim])?, &[r * l, embed_dim])?;
            let input = tape.concat(&[col, tiled], 1)?;
            let y = net.apply(tape, input)?;
            out.push(tape.reshape(y, &[r, l])?);
        } else {
            out.push(fz);
        }
        col0 += dv;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn linear_ones_column_replicates_the_series() {
        let z = Tensor::from_vec(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let f = Tensor::full(&[4, 1], 1.0);
        let dec = DecoderParams::linear(1, 4, false);
        let out = decode(&z, &f, &[1], &dec).unwrap();
        assert_eq!(out.shape(), &[1, 4, 3]);
        for li in 0..4 {
            for t in 0..3 {
                assert_eq!(out.at(&[0, li, t]), z.at(&[0, t]));
            }
        }
    }

    #[test]
    fn linear_matches_explicit_loop() {
        let mut rng = StdRng::seed_from_u64(1);
        let z = Tensor::randn(&[3, 5], &mut rng);
        let f = Tensor::randn(&[6, 3], &mut rng);
        let dec = DecoderParams::linear(1, 6, false);
        let out = decode(&z, &f, &[3], &dec).unwrap();
        for li in 0..6 {
            for t in 0..5 {
                let mut want = 0.0;
                for j in 0..3 {
                    want += f.at(&[li, j]) * z.at(&[j, t]);
                }
                assert_relative_eq!(out.at(&[0, li, t]), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn shared_net_gives_identical_outputs_for_identical_inputs() {
        let mut rng = StdRng::seed_from_u64(2);
        let mut dec = DecoderParams::nonlinear(1, 3, 4, 8, false, &mut rng).unwrap();
        // Grid points 0 and 1 share an embedding row.
        let e = dec.embed.as_mut().unwrap();
        for k in 0..4 {
            let val = e.at(&[0, 0, k]);
            e.set(&[0, 1, k], val);
        }
        // A factor with equal rows at points 0 and 1 gives equal FZ values.
        let f = Tensor::from_vec(vec![3, 1], vec![0.7, 0.7, 0.2]).unwrap();
        let z = Tensor::from_vec(vec![1, 2], vec![1.3, -0.4]).unwrap();
        let out = decode(&z, &f, &[1], &dec).unwrap();
        for t in 0..2 {
            assert_eq!(out.at(&[0, 0, t]), out.at(&[0, 1, t]));
            assert_ne!(out.at(&[0, 0, t]), out.at(&[0, 2, t]));
        }
    }

    #[test]
    fn rows_on_tape_matches_plain_decode() {
        let mut rng = StdRng::seed_from_u64(3);
        let (b, t_len, l) = (2, 3, 5);
        let partition = [2usize, 1];
        let d: usize = partition.iter().sum();
        let dec = DecoderParams::nonlinear(2, l, 3, 8, false, &mut rng).unwrap();
        let f = Tensor::randn(&[l, d], &mut rng);
        let z_rows = Tensor::randn(&[b * t_len, d], &mut rng);

        let tape = Tape::new();
        let mut vars = Vec::new();
        {
            let mut dc = dec.clone();
            dc.for_each_param(&mut |t| vars.push(tape.param(t.clone())));
        }
        let mut cursor = 0;
        let dv = dec.vars_from_slice(&vars, &mut cursor);
        assert_eq!(cursor, vars.len());

        // Factor blocks transposed to (D_v, L).
        let mut blocks = Vec::new();
        let mut col0 = 0;
        for &dvn in &partition {
            let mut ft = Tensor::zeros(&[dvn, l]);
            for li in 0..l {
                for j in 0..dvn {
                    ft.set(&[j, li], f.at(&[li, col0 + j]));
                }
            }
            blocks.push(tape.constant(ft));
            col0 += dvn;
        }
        let zr = tape.constant(z_rows.clone());
        let outs = decode_rows_on_tape(&tape, zr, &blocks, &partition, &dv, 3).unwrap();

        for n in 0..b {
            let mut z = Tensor::zeros(&[d, t_len]);
            for j in 0..d {
                for t in 0..t_len {
                    z.set(&[j, t], z_rows.at(&[n * t_len + t, j]));
                }
            }
            let plain = decode(&z, &f, &partition, &dec).unwrap();
            for (v, out) in outs.iter().enumerate() {
                let got = tape.value(*out);
                for li in 0..l {
                    for t in 0..t_len {
                        assert_relative_eq!(
                            got.at(&[n * t_len + t, li]),
                            plain.at(&[v, li, t]),
                            epsilon = 1e-10
                        );
                    }
                }
            }
        }
    }
}
