//! 2-D cross-correlation kernels (NCHW) with stride, dilation,
//! zero padding and channel groups.

use crate::error::{invalid, shape_err, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

/// `dilation·(k−1)/2`; even kernels have no symmetric same padding.
pub fn same_padding(kernel: usize, dilation: usize) -> Result<usize> {
    if kernel % 2 == 0 {
        return Err(invalid("same_padding", format!("kernel size {kernel} is even")));
    }
    Ok(dilation * (kernel - 1) / 2)
}

pub fn output_extent(input: usize, kernel: usize, p: &Conv2dParams) -> Result<usize> {
    let span = p.dilation * (kernel - 1) + 1;
    let padded = input + 2 * p.padding;
    if padded < span {
        return Err(invalid("conv2d", format!("kernel span {span} exceeds padded input {padded}")));
    }
    Ok((padded - span) / p.stride + 1)
}

struct Geometry {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn geometry(x: &[usize], w: &[usize], p: &Conv2dParams) -> Result<Geometry> {
    if x.len() != 4 || w.len() != 4 {
        return Err(shape_err("conv2d", "rank-4 input and weight", format!("{x:?} and {w:?}")));
    }
    if p.stride == 0 || p.dilation == 0 || p.groups == 0 {
        return Err(invalid("conv2d", "stride, dilation and groups must be positive"));
    }
    let (b, cin, h, wd) = (x[0], x[1], x[2], x[3]);
    let (cout, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
    if kh != kw {
        return Err(shape_err("conv2d", "square kernel", format!("{kh}x{kw}")));
    }
    if cin % p.groups != 0 || cout % p.groups != 0 {
        return Err(invalid(
            "conv2d",
            format!("channels {cin}->{cout} not divisible by groups {}", p.groups),
        ));
    }
    if cin / p.groups != cin_g {
        return Err(shape_err(
            "conv2d",
            format!("weight with {} input channels per group", cin / p.groups),
            format!("weight {w:?} for input {x:?}"),
        ));
    }
    let ho = output_extent(h, kh, p)?;
    let wo = output_extent(wd, kw, p)?;
    Ok(Geometry {
        b,
        cin,
        h,
        w: wd,
        cout,
        cin_g,
        cout_g: cout / p.groups,
        k: kh,
        ho,
        wo,
    })
}

/// Output indices `o` in `[lo, hi)` for which `o·stride + off` lands in `[0, len)`.
fn valid_range(off: isize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let last = len as isize - 1 - off;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = lo.clamp(0, out as isize) as usize;
    let hi = hi.clamp(0, out as isize) as usize;
    (lo, hi.max(lo))
}

/// Receptive fields as a `[cin·k·k, b·ho·wo]` matrix; row `ci·k² + ky·k + kx`
/// holds tap `(ky, kx)` of channel `ci` for every output pixel, zero where
/// the tap falls in the padding.
fn im2col(xd: &[f64], g: &Geometry, p: &Conv2dParams) -> Vec<f64> {
    let plane_out = g.ho * g.wo;
    let npix = g.b * plane_out;
    let kk = g.k * g.k;
    let mut col = vec![0.0; g.cin * kk * npix];
    par::for_each_chunk_mut(&mut col, npix, |row, c| {
        let (ci, tap) = (row / kk, row % kk);
        let (ky, kx) = (tap / g.k, tap % g.k);
        let yoff = (ky * p.dilation) as isize - p.padding as isize;
        let xoff = (kx * p.dilation) as isize - p.padding as isize;
        let (oy0, oy1) = valid_range(yoff, p.stride, g.h, g.ho);
        let (ox0, ox1) = valid_range(xoff, p.stride, g.w, g.wo);
        if ox0 == ox1 {
            return;
        }
        for bi in 0..g.b {
            let xp = &xd[(bi * g.cin + ci) * g.h * g.w..][..g.h * g.w];
            let dst = &mut c[bi * plane_out..][..plane_out];
            for oy in oy0..oy1 {
                let iy = (oy as isize * p.stride as isize + yoff) as usize;
                let src = &xp[iy * g.w..][..g.w];
                let drow = &mut dst[oy * g.wo..][..g.wo];
                if p.stride == 1 {
                    let ix0 = (ox0 as isize + xoff) as usize;
                    drow[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                } else {
                    for ox in ox0..ox1 {
                        drow[ox] = src[(ox as isize * p.stride as isize + xoff) as usize];
                    }
                }
            }
        }
    });
    col
}

/// Values equal the direct sum over `(ci, ky, kx)` in that order, with the
/// bias added last.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, p: &Conv2dParams) -> Result<Tensor> {
    let g = geometry(x.shape(), weight.shape(), p)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(shape_err("conv2d", format!("bias [{}]", g.cout), format!("{:?}", b.shape())));
        }
    }
    let col = im2col(x.data(), &g, p);
    let wd = weight.data();
    let bd = bias.map(|b| b.data());
    let plane_out = g.ho * g.wo;
    let npix = g.b * plane_out;
    let kdim = g.cin_g * g.k * g.k;
    let mut rows = vec![0.0; g.cout * npix];
    par::for_each_chunk_mut(&mut rows, npix, |co, orow| {
        let grp = co / g.cout_g;
        let block = &col[grp * kdim * npix..][..kdim * npix];
        for (wv, crow) in wd[co * kdim..][..kdim].iter().zip(block.chunks_exact(npix)) {
            for (o, c) in orow.iter_mut().zip(crow) {
                *o += wv * c;
            }
        }
        if let Some(bd) = bd {
            for v in orow.iter_mut() {
                *v += bd[co];
            }
        }
    });
    let mut out = vec![0.0; g.b * g.cout * plane_out];
    par::for_each_chunk_mut(&mut out, plane_out, |idx, o| {
        let (bi, co) = (idx / g.cout, idx % g.cout);
        o.copy_from_slice(&rows[co * npix + bi * plane_out..][..plane_out]);
    });
    Tensor::from_vec(&[g.b, g.cout, g.ho, g.wo], out)
}

/// Returns `(d_input, d_weight, d_bias)` for upstream gradient `gout`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
    p: &Conv2dParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = geometry(x.shape(), weight.shape(), p)?;
    if gout.shape() != [g.b, g.cout, g.ho, g.wo] {
        return Err(shape_err("conv2d_backward", format!("{:?}", [g.b, g.cout, g.ho, g.wo]), format!("{:?}", gout.shape())));
    }
    let wd = weight.data();
    let gd = gout.data();
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let npix = g.b * plane_out;
    let kk = g.k * g.k;
    let kdim = g.cin_g * kk;

    // Upstream gradient as [cout, b·ho·wo].
    let mut grows = vec![0.0; g.cout * npix];
    par::for_each_chunk_mut(&mut grows, npix, |co, r| {
        for bi in 0..g.b {
            r[bi * plane_out..][..plane_out].copy_from_slice(&gd[(bi * g.cout + co) * plane_out..][..plane_out]);
        }
    });

    let col = im2col(x.data(), &g, p);
    let mut gw = vec![0.0; g.cout * kdim];
    par::for_each_chunk_mut(&mut gw, kdim, |co, gwc| {
        let grp = co / g.cout_g;
        let grow = &grows[co * npix..][..npix];
        let block = &col[grp * kdim * npix..][..kdim * npix];
        for (acc, crow) in gwc.iter_mut().zip(block.chunks_exact(npix)) {
            *acc = grow.iter().zip(crow).map(|(a, b)| a * b).sum();
        }
    });
    let gb: Vec<f64> = (0..g.cout).map(|co| grows[co * npix..][..npix].iter().sum()).collect();
    drop(col);

    let mut gcol = vec![0.0; g.cin * kk * npix];
    par::for_each_chunk_mut(&mut gcol, npix, |row, gc| {
        let (ci, tap) = (row / kk, row % kk);
        let grp = ci / g.cin_g;
        let cil = ci % g.cin_g;
        for co in grp * g.cout_g..(grp + 1) * g.cout_g {
            let wv = wd[co * kdim + cil * kk + tap];
            for (o, gr) in gc.iter_mut().zip(&grows[co * npix..][..npix]) {
                *o += wv * gr;
            }
        }
    });

    let mut gx = vec![0.0; g.b * g.cin * plane_in];
    par::for_each_chunk_mut(&mut gx, plane_in, |idx, gxp| {
        let (bi, ci) = (idx / g.cin, idx % g.cin);
        for tap in 0..kk {
            let (ky, kx) = (tap / g.k, tap % g.k);
            let yoff = (ky * p.dilation) as isize - p.padding as isize;
            let xoff = (kx * p.dilation) as isize - p.padding as isize;
            let (oy0, oy1) = valid_range(yoff, p.stride, g.h, g.ho);
            let (ox0, ox1) = valid_range(xoff, p.stride, g.w, g.wo);
            let src = &gcol[(ci * kk + tap) * npix + bi * plane_out..][..plane_out];
            for oy in oy0..oy1 {
                let iy = (oy as isize * p.stride as isize + yoff) as usize;
                let srow = &src[oy * g.wo..][..g.wo];
                let drow = &mut gxp[iy * g.w..][..g.w];
                for ox in ox0..ox1 {
                    drow[(ox as isize * p.stride as isize + xoff) as usize] += srow[ox];
                }
            }
        }
    });

    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(weight.shape(), gw)?,
        Tensor::from_vec(&[g.cout], gb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_rejects_even_kernels() {
        assert_eq!(same_padding(3, 1).unwrap(), 1);
        assert_eq!(same_padding(3, 7).unwrap(), 7);
        assert_eq!(same_padding(5, 1).unwrap(), 2);
        assert!(same_padding(4, 1).is_err());
    }

    #[test]
    fn output_extent_formula() {
        let p = Conv2dParams {
            stride: 2,
            padding: 1,
            dilation: 1,
            groups: 1,
        };
        assert_eq!(output_extent(64, 3, &p).unwrap(), 32);
        assert_eq!(output_extent(7, 3, &p).unwrap(), 4);
    }

    #[test]
    fn channel_mismatch_is_diagnosed() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 4, 1, 1]);
        let err = conv2d_forward(&x, &w, None, &Conv2dParams::default()).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let p = Conv2dParams {
            padding: same_padding(3, 1).unwrap(),
            ..Default::default()
        };
        let y = conv2d_forward(&x, &w, None, &p).unwrap();
        assert_eq!(y.at(&[0, 0, 1, 1]), 9.0);
        for &(r, c) in &[(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(&[0, 0, r, c]), 4.0);
        }
        assert_eq!(y.at(&[0, 0, 0, 1]), 6.0);
    }
}
