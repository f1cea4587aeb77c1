//! 2-D convolution and its gradients, implemented as im2col plus GEMM.
//!
//! Outputs are computed in fixed-size row blocks. Blocks are independent and
//! may run in parallel; every output element is produced by exactly one GEMM
//! call with a fixed reduction order, and weight-gradient partials are folded
//! in block order, so results are bitwise identical for any thread count.

use rayon::prelude::*;

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Padding mode for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad by a fixed number of pixels on every side.
    Zero(usize),
    /// Zero-pad so the output matches the input size at stride 1.
    /// Requires an odd kernel.
    Same,
}

/// Target number of output pixels per GEMM block. Keeps the im2col buffer
/// around a few MB so it stays cache-resident.
const BLOCK_PIXELS: usize = 4096;

struct ConvGeom {
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

fn resolve_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    let ishape = input.shape();
    let wshape = weight.shape();
    if stride < 1 {
        return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
    }
    if ishape.c != wshape.c {
        return Err(Error::ShapeMismatch {
            context: "conv2d input channels vs weight",
            expected: format!("{} input channels", wshape.c),
            got: format!("{} input channels", ishape.c),
        });
    }
    let (kh, kw) = (wshape.h, wshape.w);
    let pad = match padding {
        Padding::Zero(p) => p,
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "conv2d: same-padding requires an odd kernel, got {kh}x{kw}"
                )));
            }
            if stride != 1 {
                return Err(Error::InvalidArgument(
                    "conv2d: same-padding requires stride 1".into(),
                ));
            }
            (kh - 1) / 2
        }
    };
    if ishape.h + 2 * pad < kh || ishape.w + 2 * pad < kw {
        return Err(Error::ShapeMismatch {
            context: "conv2d kernel vs padded input",
            expected: format!("padded input at least {kh}x{kw}"),
            got: format!("{}x{} with padding {pad}", ishape.h, ishape.w),
        });
    }
    Ok(ConvGeom {
        cin: ishape.c,
        cout: wshape.n,
        kh,
        kw,
        pad,
        stride,
        in_h: ishape.h,
        in_w: ishape.w,
        out_h: (ishape.h + 2 * pad - kh) / stride + 1,
        out_w: (ishape.w + 2 * pad - kw) / stride + 1,
    })
}

/// Zero-pad every plane of `input` by `pad` pixels on each side.
fn pad_input<T: Scalar>(input: &Tensor<T>, pad: usize) -> Vec<T> {
    let s = input.shape();
    let (hp, wp) = (s.h + 2 * pad, s.w + 2 * pad);
    let mut out = vec![T::zero(); s.n * s.c * hp * wp];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst_base = (n * s.c + c) * hp * wp;
            for r in 0..s.h {
                let dst = dst_base + (r + pad) * wp + pad;
                out[dst..dst + s.w].copy_from_slice(&src[r * s.w..(r + 1) * s.w]);
            }
        }
    }
    out
}

/// Output row blocks: (batch index, first row, one-past-last row).
fn row_blocks(n: usize, out_h: usize, out_w: usize) -> Vec<(usize, usize, usize)> {
    let rows_per_block = (BLOCK_PIXELS / out_w.max(1)).clamp(1, out_h.max(1));
    let mut blocks = Vec::new();
    for item in 0..n {
        let mut r = 0;
        while r < out_h {
            let r1 = (r + rows_per_block).min(out_h);
            blocks.push((item, r, r1));
            r = r1;
        }
    }
    blocks
}

/// Fill the im2col matrix (cin*kh*kw rows by block-pixels columns) for one
/// row block of one batch item, reading from the padded input.
#[allow(clippy::too_many_arguments)]
fn fill_im2col<T: Scalar>(
    padded: &[T],
    geom: &ConvGeom,
    item: usize,
    r0: usize,
    r1: usize,
    wp: usize,
    cols: &mut [T],
) {
    let npx = (r1 - r0) * geom.out_w;
    let plane = wp * (geom.in_h + 2 * geom.pad);
    let item_base = item * geom.cin * plane;
    let mut row_idx = 0;
    for ci in 0..geom.cin {
        let cbase = item_base + ci * plane;
        for dy in 0..geom.kh {
            for dx in 0..geom.kw {
                let dst = &mut cols[row_idx * npx..(row_idx + 1) * npx];
                if geom.stride == 1 {
                    for (blk_r, out_r) in (r0..r1).enumerate() {
                        let src = cbase + (out_r + dy) * wp + dx;
                        dst[blk_r * geom.out_w..(blk_r + 1) * geom.out_w]
                            .copy_from_slice(&padded[src..src + geom.out_w]);
                    }
                } else {
                    for (blk_r, out_r) in (r0..r1).enumerate() {
                        let src_row = cbase + (out_r * geom.stride + dy) * wp + dx;
                        for oc in 0..geom.out_w {
                            dst[blk_r * geom.out_w + oc] = padded[src_row + oc * geom.stride];
                        }
                    }
                }
                row_idx += 1;
            }
        }
    }
}

/// Raw pointer wrapper so disjoint block writes can cross the rayon boundary.
#[derive(Clone, Copy)]
struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

/// 2-D convolution.
///
/// `input` is NCHW, `weight` is (out channels, in channels, kh, kw), `bias`
/// has one entry per output channel. Output spatial size per axis is
/// `(size + 2*pad - k) / stride + 1`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let geom = resolve_geometry(input, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.len() != geom.cout {
            return Err(Error::ShapeMismatch {
                context: "conv2d bias",
                expected: format!("{} entries", geom.cout),
                got: format!("{} entries", b.len()),
            });
        }
    }
    let n = input.shape().n;
    let mut output = Tensor::zeros(Shape::new(n, geom.cout, geom.out_h, geom.out_w));

    let padded_storage;
    let padded: &[T] = if geom.pad == 0 {
        input.data()
    } else {
        padded_storage = pad_input(input, geom.pad);
        &padded_storage
    };
    let wp = geom.in_w + 2 * geom.pad;
    let k_dim = geom.cin * geom.kh * geom.kw;
    let out_plane = geom.out_h * geom.out_w;
    let blocks = row_blocks(n, geom.out_h, geom.out_w);

    let out_ptr = SendPtr(output.data_mut().as_mut_ptr());
    let weight_data = weight.data();
    blocks.par_iter().for_each(|&(item, r0, r1)| {
        let npx = (r1 - r0) * geom.out_w;
        let mut cols = vec![T::zero(); k_dim * npx];
        fill_im2col(padded, &geom, item, r0, r1, wp, &mut cols);
        let dst = unsafe {
            out_ptr
                .0
                .add(item * geom.cout * out_plane + r0 * geom.out_w)
        };
        unsafe {
            T::gemm(
                geom.cout,
                k_dim,
                npx,
                T::one(),
                weight_data.as_ptr(),
                k_dim as isize,
                1,
                cols.as_ptr(),
                npx as isize,
                1,
                T::zero(),
                dst,
                out_plane as isize,
                1,
            );
        }
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                let row = unsafe {
                    std::slice::from_raw_parts_mut(dst.add(co * out_plane), npx)
                };
                for v in row.iter_mut() {
                    *v = *v + bv;
                }
            }
        }
    });

    Ok(output)
}

/// Gradient of a stride-1 convolution with respect to its input: the output
/// gradient convolved with the flipped, channel-transposed kernel.
pub fn conv2d_input_grad<T: Scalar>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    padding_used: usize,
) -> Result<Tensor<T>> {
    let ws = weight.shape();
    let (kh, kw) = (ws.h, ws.w);
    // Flip spatially and swap in/out channel roles.
    let mut flipped = Tensor::zeros(Shape::new(ws.c, ws.n, kh, kw));
    {
        let src = weight.data();
        let dst = flipped.data_mut();
        for co in 0..ws.n {
            for ci in 0..ws.c {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let s = ((co * ws.c + ci) * kh + dy) * kw + dx;
                        let d = ((ci * ws.n + co) * kh + (kh - 1 - dy)) * kw + (kw - 1 - dx);
                        dst[d] = src[s];
                    }
                }
            }
        }
    }
    conv2d(
        grad_out,
        &flipped,
        None,
        1,
        Padding::Zero(kh - 1 - padding_used),
    )
}

/// Gradients of a stride-1 convolution with respect to its weight and bias.
pub fn conv2d_param_grads<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    weight_shape: Shape,
    padding_used: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let geom = ConvGeom {
        cin: weight_shape.c,
        cout: weight_shape.n,
        kh: weight_shape.h,
        kw: weight_shape.w,
        pad: padding_used,
        stride: 1,
        in_h: input.shape().h,
        in_w: input.shape().w,
        out_h: grad_out.shape().h,
        out_w: grad_out.shape().w,
    };
    if input.shape().c != geom.cin
        || grad_out.shape().c != geom.cout
        || grad_out.shape().n != input.shape().n
    {
        return Err(Error::ShapeMismatch {
            context: "conv2d_param_grads",
            expected: format!("input channels {} / grad channels {}", geom.cin, geom.cout),
            got: format!(
                "input {} / grad {}",
                input.shape(),
                grad_out.shape()
            ),
        });
    }

    let n = input.shape().n;
    let padded_storage;
    let padded: &[T] = if geom.pad == 0 {
        input.data()
    } else {
        padded_storage = pad_input(input, geom.pad);
        &padded_storage
    };
    let wp = geom.in_w + 2 * geom.pad;
    let k_dim = geom.cin * geom.kh * geom.kw;
    let out_plane = geom.out_h * geom.out_w;
    let blocks = row_blocks(n, geom.out_h, geom.out_w);
    let grad_data = grad_out.data();

    // Per-block partials, folded in block order below for determinism.
    let partials: Vec<(Vec<T>, Vec<T>)> = blocks
        .par_iter()
        .map(|&(item, r0, r1)| {
            let npx = (r1 - r0) * geom.out_w;
            let mut cols = vec![T::zero(); k_dim * npx];
            fill_im2col(padded, &geom, item, r0, r1, wp, &mut cols);
            let gsrc = &grad_data[item * geom.cout * out_plane + r0 * geom.out_w..];
            let mut dw = vec![T::zero(); geom.cout * k_dim];
            unsafe {
                // dW += G_block (cout x npx) * cols^T (npx x k_dim)
                T::gemm(
                    geom.cout,
                    npx,
                    k_dim,
                    T::one(),
                    gsrc.as_ptr(),
                    out_plane as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    npx as isize,
                    T::zero(),
                    dw.as_mut_ptr(),
                    k_dim as isize,
                    1,
                );
            }
            let mut db = vec![T::zero(); geom.cout];
            for co in 0..geom.cout {
                let row = &gsrc[co * out_plane..co * out_plane + npx];
                let mut acc = T::zero();
                for &g in row {
                    acc = acc + g;
                }
                db[co] = acc;
            }
            (dw, db)
        })
        .collect();

    let mut weight_grad = Tensor::zeros(weight_shape);
    let mut bias_grad = vec![T::zero(); geom.cout];
    for (dw, db) in partials {
        for (acc, v) in weight_grad.data_mut().iter_mut().zip(dw) {
            *acc = *acc + v;
        }
        for (acc, v) in bias_grad.iter_mut().zip(db) {
            *acc = *acc + v;
        }
    }
    Ok((weight_grad, bias_grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-nested-loop convolution, the independent reference for the
    /// GEMM path. Written first; deliberately naive.
    fn conv_reference(
        input: &Tensor<f64>,
        weight: &Tensor<f64>,
        bias: Option<&[f64]>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let is = input.shape();
        let ws = weight.shape();
        let out_h = (is.h + 2 * pad - ws.h) / stride + 1;
        let out_w = (is.w + 2 * pad - ws.w) / stride + 1;
        let mut out = Tensor::zeros(Shape::new(is.n, ws.n, out_h, out_w));
        for n in 0..is.n {
            for co in 0..ws.n {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut acc = bias.map_or(0.0, |b| b[co]);
                        for ci in 0..is.c {
                            for dy in 0..ws.h {
                                for dx in 0..ws.w {
                                    let iy = (oy * stride + dy) as isize - pad as isize;
                                    let ix = (ox * stride + dx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= is.h as isize || ix >= is.w as isize
                                    {
                                        continue;
                                    }
                                    let iv = input.plane(n, ci)[iy as usize * is.w + ix as usize];
                                    let wv = weight.plane(co, ci)[dy * ws.w + dx];
                                    acc += iv * wv;
                                }
                            }
                        }
                        out.plane_mut(n, co)[oy * out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 40) as f64 / (1u64 << 24) as f64 - 0.5
        }
    }

    fn random_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut next = lcg(seed);
        let data = (0..shape.len()).map(|_| next()).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn box_sum_of_ones() {
        let input = Tensor::full(Shape::new(1, 1, 3, 3), 1.0f32);
        let weight = Tensor::full(Shape::new(1, 1, 3, 3), 1.0f32);
        let out = conv2d(&input, &weight, None, 1, Padding::Zero(1)).unwrap();
        let d = out.data();
        assert_eq!(d[4], 9.0); // center
        assert_eq!(d[0], 4.0); // corners
        assert_eq!(d[2], 4.0);
        assert_eq!(d[6], 4.0);
        assert_eq!(d[8], 4.0);
        assert_eq!(d[1], 6.0); // edges
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let input = random_tensor(Shape::new(1, 1, 6, 7), 42).cast::<f32>();
        let weight = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.0f32]).unwrap();
        let out = conv2d(&input, &weight, Some(&[0.0]), 1, Padding::Zero(0)).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let input = random_tensor(Shape::new(1, 2, 8, 8), 7);
        let weight = random_tensor(Shape::new(4, 2, 3, 3), 8);
        let bias: Vec<f64> = (0..4).map(|i| 0.1 * i as f64).collect();
        for pad in [0usize, 1, 2] {
            let want = conv_reference(&input, &weight, Some(&bias), 1, pad);
            let got = conv2d(&input, &weight, Some(&bias), 1, Padding::Zero(pad)).unwrap();
            assert_eq!(got.shape(), want.shape());
            for (g, w) in got.data().iter().zip(want.data()) {
                let tol = 1e-6 * w.abs().max(1.0);
                assert!((g - w).abs() < tol, "got {g}, want {w}");
            }
        }
    }

    #[test]
    fn matches_oracle_at_f32_precision() {
        let input64 = random_tensor(Shape::new(2, 3, 9, 11), 100);
        let weight64 = random_tensor(Shape::new(5, 3, 3, 3), 101);
        let want = conv_reference(&input64, &weight64, None, 1, 1);
        let got = conv2d(
            &input64.cast::<f32>(),
            &weight64.cast::<f32>(),
            None,
            1,
            Padding::Same,
        )
        .unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            let tol = 1e-5 * w.abs().max(1.0);
            assert!(((*g as f64) - w).abs() < tol, "got {g}, want {w}");
        }
    }

    #[test]
    fn strided_conv_matches_oracle_and_size_formula() {
        let input = random_tensor(Shape::new(1, 2, 11, 9), 55);
        let weight = random_tensor(Shape::new(3, 2, 2, 2), 56);
        let got = conv2d(&input, &weight, None, 2, Padding::Zero(0)).unwrap();
        assert_eq!(got.shape(), Shape::new(1, 3, 5, 4));
        let want = conv_reference(&input, &weight, None, 2, 0);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let input = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let weight = Tensor::<f32>::zeros(Shape::new(1, 3, 3, 3));
        let err = conv2d(&input, &weight, None, 1, Padding::Same).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn rejects_even_kernel_same_padding() {
        let input = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 4));
        let weight = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        assert!(conv2d(&input, &weight, None, 1, Padding::Same).is_err());
    }

    #[test]
    fn linear_in_input() {
        let x = random_tensor(Shape::new(1, 2, 8, 8), 1).cast::<f32>();
        let z = random_tensor(Shape::new(1, 2, 8, 8), 2).cast::<f32>();
        let weight = random_tensor(Shape::new(3, 2, 3, 3), 3).cast::<f32>();
        let (a, b) = (0.7f32, -1.3f32);
        let mut combo = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            combo.data_mut()[i] = a * x.data()[i] + b * z.data()[i];
        }
        let lhs = conv2d(&combo, &weight, None, 1, Padding::Same).unwrap();
        let cx = conv2d(&x, &weight, None, 1, Padding::Same).unwrap();
        let cz = conv2d(&z, &weight, None, 1, Padding::Same).unwrap();
        for i in 0..lhs.len() {
            let rhs = a * cx.data()[i] + b * cz.data()[i];
            assert!(
                (lhs.data()[i] - rhs).abs() < 1e-6 * rhs.abs().max(1.0),
                "linearity violated at {i}"
            );
        }
    }

    #[test]
    fn input_grad_matches_finite_differences() {
        let input = random_tensor(Shape::new(1, 2, 6, 6), 20);
        let weight = random_tensor(Shape::new(3, 2, 3, 3), 21);
        // loss = sum(conv(x)); d loss / dx via FD on each input element.
        let out = conv2d(&input, &weight, None, 1, Padding::Same).unwrap();
        let grad_out = Tensor::full(out.shape(), 1.0f64);
        let gx = conv2d_input_grad(&grad_out, &weight, 1).unwrap();
        let h = 1e-5;
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let f = |t: &Tensor<f64>| -> f64 {
                conv2d(t, &weight, None, 1, Padding::Same)
                    .unwrap()
                    .data()
                    .iter()
                    .sum()
            };
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let got = gx.data()[i];
            assert!(
                (got - fd).abs() < 1e-6 * fd.abs().max(1.0),
                "input grad {i}: got {got}, fd {fd}"
            );
        }
    }

    #[test]
    fn param_grads_match_finite_differences() {
        let input = random_tensor(Shape::new(1, 2, 6, 6), 30);
        let weight = random_tensor(Shape::new(2, 2, 3, 3), 31);
        let bias = vec![0.1f64, -0.2];
        let out = conv2d(&input, &weight, Some(&bias), 1, Padding::Same).unwrap();
        let grad_out = Tensor::full(out.shape(), 1.0f64);
        let (gw, gb) = conv2d_param_grads(&input, &grad_out, weight.shape(), 1).unwrap();
        let h = 1e-5;
        let f = |w: &Tensor<f64>, b: &[f64]| -> f64 {
            conv2d(&input, w, Some(b), 1, Padding::Same)
                .unwrap()
                .data()
                .iter()
                .sum()
        };
        for i in 0..weight.len() {
            let mut plus = weight.clone();
            plus.data_mut()[i] += h;
            let mut minus = weight.clone();
            minus.data_mut()[i] -= h;
            let fd = (f(&plus, &bias) - f(&minus, &bias)) / (2.0 * h);
            let got = gw.data()[i];
            assert!(
                (got - fd).abs() < 1e-6 * fd.abs().max(1.0),
                "weight grad {i}: got {got}, fd {fd}"
            );
        }
        for i in 0..bias.len() {
            let mut bp = bias.clone();
            bp[i] += h;
            let mut bm = bias.clone();
            bm[i] -= h;
            let fd = (f(&weight, &bp) - f(&weight, &bm)) / (2.0 * h);
            assert!((gb[i] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn deterministic_across_repeated_runs() {
        let input = random_tensor(Shape::new(2, 4, 33, 29), 77).cast::<f32>();
        let weight = random_tensor(Shape::new(4, 4, 3, 3), 78).cast::<f32>();
        let a = conv2d(&input, &weight, None, 1, Padding::Same).unwrap();
        let b = conv2d(&input, &weight, None, 1, Padding::Same).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
