//! Plain numeric kernels shared by the tape ops.

use crate::error::{invalid, shape_err, Result};
use crate::par;
use crate::tensor::Tensor;

/// Batched `[.., M, K] × [.., K, N]` with identical leading dims.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let r = sa.len();
    if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
        return Err(shape_err("matmul", format!("[.., M, K] x [.., K, N] from {sa:?}"), format!("{sb:?}")));
    }
    let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
    let batch: usize = sa[..r - 2].iter().product();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; batch * m * n];
    if n > 0 {
        par::for_each_chunk_mut(&mut out, n, |row, o| {
            let bi = row / m.max(1);
            let arow = &ad[row * k..(row + 1) * k];
            let bmat = &bd[bi * k * n..(bi + 1) * k * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &bmat[kk * n..(kk + 1) * n];
                for (ov, &bv) in o.iter_mut().zip(brow) {
                    *ov += av * bv;
                }
            }
        });
    }
    let mut shape = sa[..r - 2].to_vec();
    shape.extend([m, n]);
    Tensor::from_vec(&shape, out)
}

pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let n = *x.shape().last().ok_or_else(|| invalid("softmax", "rank-0 input"))?;
    let mut out = x.clone().into_vec();
    if n == 0 {
        return Tensor::from_vec(x.shape(), out);
    }
    for row in out.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Inclusive prefix sum along `axis`; `reverse` sums from the far end.
pub fn cumsum(x: &Tensor, axis: usize, reverse: bool) -> Result<Tensor> {
    let s = x.shape();
    if axis >= s.len() {
        return Err(invalid("cumsum", format!("axis {axis} out of range for {s:?}")));
    }
    let outer: usize = s[..axis].iter().product();
    let dim = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let mut out = x.clone().into_vec();
    for o in 0..outer {
        let base = o * dim * inner;
        if reverse {
            for d in (0..dim.saturating_sub(1)).rev() {
                for i in 0..inner {
                    out[base + d * inner + i] += out[base + (d + 1) * inner + i];
                }
            }
        } else {
            for d in 1..dim {
                for i in 0..inner {
                    out[base + d * inner + i] += out[base + (d - 1) * inner + i];
                }
            }
        }
    }
    Tensor::from_vec(s, out)
}

/// Rotates consecutive pairs `(x[2i], x[2i+1])` of each token row by
/// `sign · m · θ_i`, `θ_i = base^(−2i/dim)`, where `m` is the token index
/// along the second-to-last axis.
pub fn rope_rotate(x: &Tensor, base: f64, sign: f64) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(shape_err("rope", "[.., N, dim]", format!("{s:?}")));
    }
    let (n, dim) = (s[s.len() - 2], s[s.len() - 1]);
    if dim % 2 != 0 {
        return Err(invalid("rope", format!("dimension {dim} is odd")));
    }
    let theta: Vec<f64> = (0..dim / 2).map(|i| base.powf(-2.0 * i as f64 / dim as f64)).collect();
    let mut out = x.clone().into_vec();
    if n == 0 || dim == 0 {
        return Tensor::from_vec(s, out);
    }
    for block in out.chunks_mut(n * dim) {
        for (m, row) in block.chunks_mut(dim).enumerate() {
            for (i, &t) in theta.iter().enumerate() {
                let (sn, cs) = (sign * m as f64 * t).sin_cos();
                let (a, b) = (row[2 * i], row[2 * i + 1]);
                row[2 * i] = a * cs - b * sn;
                row[2 * i + 1] = a * sn + b * cs;
            }
        }
    }
    Tensor::from_vec(s, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreGate {
    /// Row-wise softmax over keys.
    Softmax,
    /// Independent sigmoid per score.
    Sigmoid,
}

pub(crate) struct AttnDims {
    pub b: usize,
    pub n: usize,
    pub d: usize,
    pub dv: usize,
    pub heads: usize,
}

impl AttnDims {
    pub fn dh(&self) -> usize {
        self.d / self.heads
    }
    pub fn dvh(&self) -> usize {
        self.dv / self.heads
    }
}

pub(crate) fn attn_dims(q: &[usize], k: &[usize], v: &[usize], heads: usize) -> Result<AttnDims> {
    if q.len() != 3 || k != q || v.len() != 3 || v[..2] != q[..2] {
        return Err(shape_err("attention", format!("q=k=[B,N,D], v=[B,N,Dv] from q {q:?}"), format!("k {k:?}, v {v:?}")));
    }
    if q[1] == 0 {
        return Err(invalid("attention", "token count N = 0"));
    }
    if heads == 0 || q[2] % heads != 0 || v[2] % heads != 0 {
        return Err(invalid("attention", format!("dims {} / {} not divisible by {heads} heads", q[2], v[2])));
    }
    Ok(AttnDims {
        b: q[0],
        n: q[1],
        d: q[2],
        dv: v[2],
        heads,
    })
}

fn gate_row(scores: &mut [f64], gate: ScoreGate) {
    match gate {
        ScoreGate::Softmax => {
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in scores.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in scores.iter_mut() {
                *v /= s;
            }
        }
        ScoreGate::Sigmoid => {
            for v in scores.iter_mut() {
                *v = 1.0 / (1.0 + (-*v).exp());
            }
        }
    }
}

/// Queries scored together against each key row.
const QUERY_TILE: usize = 8;

/// Per-(batch, head) contiguous copies `[N, width/heads]` of a `[B,N,width]`
/// buffer, so a head's keys and values stream from one block of memory.
fn pack_heads(src: &[f64], b: usize, n: usize, width: usize, heads: usize) -> Vec<Vec<f64>> {
    let w = width / heads;
    (0..b * heads)
        .map(|bh| {
            let (bi, h) = (bh / heads, bh % heads);
            let mut out = Vec::with_capacity(n * w);
            for j in 0..n {
                out.extend_from_slice(&src[(bi * n + j) * width + h * w..][..w]);
            }
            out
        })
        .collect()
}

/// Scaled dot-product attention over tiles of query rows, so memory stays
/// O(N) per tile while time is O(N²·D).
pub fn softmax_attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, gate: ScoreGate) -> Result<Tensor> {
    let g = attn_dims(q.shape(), k.shape(), v.shape(), heads)?;
    let (n, dh, dvh) = (g.n, g.dh(), g.dvh());
    let scale = 1.0 / (dh as f64).sqrt();
    let qd = q.data();
    let kh = pack_heads(k.data(), g.b, n, g.d, heads);
    let vh = pack_heads(v.data(), g.b, n, g.dv, heads);
    let tiles = n.div_ceil(QUERY_TILE);
    let parts = par::map_range(g.b * heads * tiles, |idx| {
        let (bh, tile) = (idx / tiles, idx % tiles);
        let (bi, h) = (bh / heads, bh % heads);
        let i0 = tile * QUERY_TILE;
        let rows = QUERY_TILE.min(n - i0);
        let (kb, vb) = (&kh[bh], &vh[bh]);
        let qrows: Vec<&[f64]> = (0..rows).map(|r| &qd[(bi * n + i0 + r) * g.d + h * dh..][..dh]).collect();
        let mut p = vec![0.0; rows * n];
        for j in 0..n {
            let kr = &kb[j * dh..][..dh];
            for (r, qr) in qrows.iter().enumerate() {
                p[r * n + j] = scale * qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        for row in p.chunks_mut(n) {
            gate_row(row, gate);
        }
        let mut o = vec![0.0; rows * dvh];
        for j in 0..n {
            let vr = &vb[j * dvh..][..dvh];
            for (r, or) in o.chunks_mut(dvh).enumerate() {
                let pj = p[r * n + j];
                for (ov, &vv) in or.iter_mut().zip(vr) {
                    *ov += pj * vv;
                }
            }
        }
        o
    });
    let mut out = vec![0.0; g.b * n * g.dv];
    for (idx, o) in parts.into_iter().enumerate() {
        let (bh, tile) = (idx / tiles, idx % tiles);
        let (bi, h) = (bh / heads, bh % heads);
        for (r, or) in o.chunks(dvh).enumerate() {
            out[(bi * n + tile * QUERY_TILE + r) * g.dv + h * dvh..][..dvh].copy_from_slice(or);
        }
    }
    Tensor::from_vec(&[g.b, n, g.dv], out)
}

pub fn softmax_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    gout: &Tensor,
    heads: usize,
    gate: ScoreGate,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = attn_dims(q.shape(), k.shape(), v.shape(), heads)?;
    let (dh, dvh) = (g.dh(), g.dvh());
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, gd) = (q.data(), gout.data());
    let kh = pack_heads(k.data(), g.b, g.n, g.d, heads);
    let vh = pack_heads(v.data(), g.b, g.n, g.dv, heads);
    let parts = par::map_range(g.b * heads, |bh| {
        let (bi, h) = (bh / heads, bh % heads);
        let mut dq = vec![0.0; g.n * dh];
        let mut dk = vec![0.0; g.n * dh];
        let mut dv = vec![0.0; g.n * dvh];
        let mut p = vec![0.0; g.n];
        let mut ds = vec![0.0; g.n];
        let krow = |j: usize| &kh[bh][j * dh..][..dh];
        let vrow = |j: usize| &vh[bh][j * dvh..][..dvh];
        for i in 0..g.n {
            let qr = &qd[(bi * g.n + i) * g.d + h * dh..][..dh];
            let gr = &gd[(bi * g.n + i) * g.dv + h * dvh..][..dvh];
            for (j, pj) in p.iter_mut().enumerate() {
                *pj = scale * qr.iter().zip(krow(j)).map(|(a, b)| a * b).sum::<f64>();
            }
            gate_row(&mut p, gate);
            let mut c = 0.0;
            for j in 0..g.n {
                let dp: f64 = gr.iter().zip(vrow(j)).map(|(a, b)| a * b).sum();
                ds[j] = dp;
                c += p[j] * dp;
            }
            for j in 0..g.n {
                ds[j] = match gate {
                    ScoreGate::Softmax => p[j] * (ds[j] - c),
                    ScoreGate::Sigmoid => p[j] * (1.0 - p[j]) * ds[j],
                } * scale;
            }
            let dqi = &mut dq[i * dh..(i + 1) * dh];
            for j in 0..g.n {
                let kr = krow(j);
                for t in 0..dh {
                    dqi[t] += ds[j] * kr[t];
                }
                let dkj = &mut dk[j * dh..(j + 1) * dh];
                for t in 0..dh {
                    dkj[t] += ds[j] * qr[t];
                }
                let dvj = &mut dv[j * dvh..(j + 1) * dvh];
                for t in 0..dvh {
                    dvj[t] += p[j] * gr[t];
                }
            }
        }
        (dq, dk, dv)
    });
    let mut dq = vec![0.0; q.numel()];
    let mut dk = vec![0.0; k.numel()];
    let mut dv = vec![0.0; v.numel()];
    for (bh, (pq, pk, pv)) in parts.into_iter().enumerate() {
        let (bi, h) = (bh / heads, bh % heads);
        for i in 0..g.n {
            let row = bi * g.n + i;
            dq[row * g.d + h * dh..][..dh].copy_from_slice(&pq[i * dh..(i + 1) * dh]);
            dk[row * g.d + h * dh..][..dh].copy_from_slice(&pk[i * dh..(i + 1) * dh]);
            dv[row * g.dv + h * dvh..][..dvh].copy_from_slice(&pv[i * dvh..(i + 1) * dvh]);
        }
    }
    Ok((
        Tensor::from_vec(q.shape(), dq)?,
        Tensor::from_vec(k.shape(), dk)?,
        Tensor::from_vec(v.shape(), dv)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[3, 1], vec![1.0, 0.0, -1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[-2.0, -2.0]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn cumsum_both_directions() {
        let x = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(cumsum(&x, 1, false).unwrap().data(), &[1.0, 3.0, 6.0, 10.0]);
        assert_eq!(cumsum(&x, 1, true).unwrap().data(), &[10.0, 9.0, 7.0, 4.0]);
    }

    #[test]
    fn softmax_uniform_row() {
        let y = softmax_lastdim(&Tensor::full(&[2, 5], 3.3)).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn rope_rejects_odd_dim() {
        assert!(rope_rotate(&Tensor::zeros(&[3, 5]), 10000.0, 1.0).is_err());
    }
}
