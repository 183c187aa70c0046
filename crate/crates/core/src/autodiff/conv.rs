//! Direct convolution kernels (im2col + gemm) and pooling used by the tape.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1 with "same" padding for an odd kernel size.
    pub fn same(kernel: usize, groups: usize) -> Self {
        ConvGeom::new(1, kernel / 2, groups)
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Dims {
    fn ckk(&self) -> usize {
        self.cin_g * self.k * self.k
    }

    fn is_pointwise(&self, geom: &ConvGeom) -> bool {
        self.k == 1 && geom.stride == 1 && geom.padding == 0
    }
}

fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeom,
) -> Result<Dims> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, cin_g, kh, kw) = weight.dims4()?;
    if geom.groups == 0 || geom.stride == 0 {
        return Err(Error::shape("conv2d", "groups and stride must be positive"));
    }
    if cin % geom.groups != 0 || cout % geom.groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!(
                "channels {cin}->{cout} not divisible by {} groups",
                geom.groups
            ),
        ));
    }
    if cin_g * geom.groups != cin {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight expects {} input channels, input has {cin}",
                cin_g * geom.groups
            ),
        ));
    }
    if kh != kw {
        return Err(Error::shape("conv2d", "kernel must be square"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{cout}]", b.shape()),
            ));
        }
    }
    let k = kh;
    if h + 2 * geom.padding < k || w + 2 * geom.padding < k {
        return Err(Error::shape("conv2d", "kernel larger than padded input"));
    }
    let ho = (h + 2 * geom.padding - k) / geom.stride + 1;
    let wo = (w + 2 * geom.padding - k) / geom.stride + 1;
    Ok(Dims {
        n,
        cin,
        h,
        w,
        cout,
        k,
        ho,
        wo,
        cin_g,
        cout_g: cout / geom.groups,
    })
}

/// Output columns `ox` whose input column `ox * stride + kx - padding`
/// lies inside `0..w`.
fn valid_cols(d: &Dims, geom: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = geom.padding.saturating_sub(kx).div_ceil(geom.stride);
    let hi = if d.w + geom.padding > kx {
        ((d.w + geom.padding - kx - 1) / geom.stride + 1).min(d.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], d: &Dims, geom: &ConvGeom, cols: &mut [T]) {
    let howo = d.ho * d.wo;
    for ci in 0..d.cin_g {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (ci * d.k + ky) * d.k + kx;
                let dst = &mut cols[row * howo..(row + 1) * howo];
                let (lo, hi) = valid_cols(d, geom, kx);
                for oy in 0..d.ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    let out_row = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let first = lo * geom.stride + kx - geom.padding;
                    if geom.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, &v) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(geom.stride)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], d: &Dims, geom: &ConvGeom, dx: &mut [T]) {
    let howo = d.ho * d.wo;
    for ci in 0..d.cin_g {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (ci * d.k + ky) * d.k + kx;
                let src = &cols[row * howo..(row + 1) * howo];
                let (lo, hi) = valid_cols(d, geom, kx);
                for oy in 0..d.ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let first = lo * geom.stride + kx - geom.padding;
                    let from = &src[oy * d.wo + lo..oy * d.wo + hi];
                    for (o, &v) in dst[first..].iter_mut().step_by(geom.stride).zip(from) {
                        *o = *o + v;
                    }
                }
            }
        }
    }
}

/// Cross-correlation over NCHW input with `[cout, cin/groups, k, k]` weights.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeom,
) -> Result<Tensor<T>> {
    let d = conv_dims(x, weight, bias, geom)?;
    let howo = d.ho * d.wo;
    let ckk = d.ckk();
    let mut out = vec![T::zero(); d.n * d.cout * howo];
    let pointwise = d.is_pointwise(geom);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * howo]
    };
    let xd = x.data();
    let wd = weight.data();
    for n in 0..d.n {
        for g in 0..geom.groups {
            let xin = &xd[(n * d.cin + g * d.cin_g) * d.h * d.w..][..d.cin_g * d.h * d.w];
            let b: &[T] = if pointwise {
                xin
            } else {
                im2col(xin, &d, geom, &mut cols);
                &cols
            };
            let wg = &wd[g * d.cout_g * ckk..][..d.cout_g * ckk];
            let og = &mut out[(n * d.cout + g * d.cout_g) * howo..][..d.cout_g * howo];
            T::gemm(
                d.cout_g,
                ckk,
                howo,
                T::one(),
                wg,
                ckk as isize,
                1,
                b,
                howo as isize,
                1,
                T::zero(),
                og,
                howo as isize,
                1,
            );
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                for o in &mut out[(n * d.cout + co) * howo..][..howo] {
                    *o = *o + bv;
                }
            }
        }
    }
    Tensor::new(vec![d.n, d.cout, d.ho, d.wo], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    geom: &ConvGeom,
    gy: &[T],
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let d = conv_dims(x, weight, None, geom)?;
    let howo = d.ho * d.wo;
    let ckk = d.ckk();
    let pointwise = d.is_pointwise(geom);
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); weight.len()]);
    let mut cols = vec![T::zero(); ckk * howo];
    let xd = x.data();
    let wd = weight.data();
    for n in 0..d.n {
        for g in 0..geom.groups {
            let gy_g = &gy[(n * d.cout + g * d.cout_g) * howo..][..d.cout_g * howo];
            let x_off = (n * d.cin + g * d.cin_g) * d.h * d.w;
            let xin = &xd[x_off..][..d.cin_g * d.h * d.w];
            if let Some(dw) = dw.as_mut() {
                let b: &[T] = if pointwise {
                    xin
                } else {
                    im2col(xin, &d, geom, &mut cols);
                    &cols
                };
                let dwg = &mut dw[g * d.cout_g * ckk..][..d.cout_g * ckk];
                // dW_g += dY_g * cols^T
                T::gemm(
                    d.cout_g,
                    howo,
                    ckk,
                    T::one(),
                    gy_g,
                    howo as isize,
                    1,
                    b,
                    1,
                    howo as isize,
                    T::one(),
                    dwg,
                    ckk as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &wd[g * d.cout_g * ckk..][..d.cout_g * ckk];
                let dxg = &mut dx[x_off..][..d.cin_g * d.h * d.w];
                if pointwise {
                    T::gemm(
                        ckk,
                        d.cout_g,
                        howo,
                        T::one(),
                        wg,
                        1,
                        ckk as isize,
                        gy_g,
                        howo as isize,
                        1,
                        T::one(),
                        dxg,
                        howo as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        ckk,
                        d.cout_g,
                        howo,
                        T::one(),
                        wg,
                        1,
                        ckk as isize,
                        gy_g,
                        howo as isize,
                        1,
                        T::zero(),
                        &mut cols,
                        howo as isize,
                        1,
                    );
                    col2im_add(&cols, &d, geom, dxg);
                }
            }
        }
    }
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); d.cout];
        for n in 0..d.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let s: T = gy[(n * d.cout + co) * howo..][..howo].iter().copied().sum();
                *acc = *acc + s;
            }
        }
        db
    });
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

pub fn avg_pool_forward<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "avg_pool",
            format!("{h}x{w} not divisible by factor {factor}"),
        ));
    }
    let (ho, wo) = (h / factor, w / factor);
    let inv = T::one() / T::lit((factor * factor) as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &xd[p * h * w..][..h * w];
        let dst = &mut out[p * ho * wo..][..ho * wo];
        for y in 0..h {
            for xx in 0..w {
                let o = &mut dst[(y / factor) * wo + xx / factor];
                *o = *o + src[y * w + xx];
            }
        }
        for o in dst.iter_mut() {
            *o = *o * inv;
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn avg_pool_backward<T: Scalar>(shape: &[usize], factor: usize, gy: &[T]) -> Vec<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / factor, w / factor);
    let inv = T::one() / T::lit((factor * factor) as f64);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let g = &gy[p * ho * wo..][..ho * wo];
        let dst = &mut dx[p * h * w..][..h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = g[(y / factor) * wo + xx / factor] * inv;
            }
        }
    }
    dx
}

pub fn upsample_forward<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 {
        return Err(Error::shape("nn_upsample", "factor must be >= 1"));
    }
    let (ho, wo) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &xd[p * h * w..][..h * w];
        let dst = &mut out[p * ho * wo..][..ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[(y / factor) * w + xx / factor];
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn upsample_backward<T: Scalar>(shape: &[usize], factor: usize, gy: &[T]) -> Vec<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let g = &gy[p * ho * wo..][..ho * wo];
        let dst = &mut dx[p * h * w..][..h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let d = &mut dst[(y / factor) * w + xx / factor];
                *d = *d + g[y * wo + xx];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop reference, independent of im2col/gemm.
    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, geom: &ConvGeom) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims4().unwrap();
        let (cout, cin_g, k, _) = wt.dims4().unwrap();
        let cout_g = cout / geom.groups;
        let ho = (h + 2 * geom.padding - k) / geom.stride + 1;
        let wo = (w + 2 * geom.padding - k) / geom.stride + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for b in 0..n {
            for co in 0..cout {
                let g = co / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                                    let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((b * cin + g * cin_g + ci) * h + iy as usize) * w
                                        + ix as usize;
                                    let wi = ((co * cin_g + ci) * k + ky) * k + kx;
                                    acc += x.data()[xi] * wt.data()[wi];
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_reference() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (cin, cout, k, stride, pad, groups, hw) in [
            (4, 8, 3, 1, 1, 1, 6),
            (8, 8, 3, 1, 1, 2, 5),
            (8, 8, 1, 1, 0, 2, 4),
            (3, 6, 4, 4, 0, 1, 8),
            (4, 4, 2, 2, 0, 4, 6),
            (3, 4, 3, 2, 1, 1, 7),
            (2, 2, 5, 3, 2, 1, 9),
        ] {
            let x = Tensor::<f64>::randn(&[2, cin, hw, hw], &mut rng);
            let w = Tensor::<f64>::randn(&[cout, cin / groups, k, k], &mut rng);
            let geom = ConvGeom::new(stride, pad, groups);
            let y = conv2d_forward(&x, &w, None, &geom).unwrap();
            let r = naive_conv(&x, &w, &geom);
            assert_eq!(y.shape(), r.shape());
            assert!(y.max_abs_diff(&r) < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_groups() {
        let x = Tensor::<f32>::zeros(&[1, 6, 4, 4]);
        let w = Tensor::<f32>::zeros(&[6, 2, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, &ConvGeom::same(3, 4)).is_err());
        let w = Tensor::<f32>::zeros(&[6, 4, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, &ConvGeom::same(3, 1)).is_err());
    }

    #[test]
    fn pool_rejects_non_divisible() {
        let x = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        assert!(avg_pool_forward(&x, 2).is_err());
    }
}
