//! Row-wise 2-D convolution: kernels have height 1, so every row of the
//! input grid is convolved independently along the time axis, with all
//! input channels mixed. Implemented as im2col followed by a GEMM.

use super::{Element, Tensor};
use crate::error::{Error, Result};

struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    rows: usize,
    width: usize,
    kernel: usize,
    left: usize,
}

impl Geometry {
    fn plane(&self) -> usize {
        self.rows * self.width
    }

    fn patch(&self) -> usize {
        self.cin * self.kernel
    }
}

fn geometry<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Geometry> {
    let mismatch = || {
        Error::shape(
            "conv2d_rowwise",
            format!("input {:?}, kernel {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
        )
    };
    if x.rank() != 4 {
        return Err(mismatch());
    }
    let (cout, cin_w, kernel) = match *w.shape() {
        [o, i, 1, l] => (o, i, l),
        [o, i, l] => (o, i, l),
        _ => return Err(mismatch()),
    };
    let [batch, cin, rows, width] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    if cin != cin_w || kernel == 0 || b.shape() != [cout] {
        return Err(mismatch());
    }
    Ok(Geometry {
        batch,
        cin,
        cout,
        rows,
        width,
        kernel,
        left: (kernel - 1) / 2,
    })
}

/// Fills `cols` (patch × plane) from one batch item `x` (cin × rows × width).
fn im2col<T: Element>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let plane = g.plane();
    for ci in 0..g.cin {
        for k in 0..g.kernel {
            let dst_row = &mut cols[(ci * g.kernel + k) * plane..][..plane];
            for r in 0..g.rows {
                let src = &x[(ci * g.rows + r) * g.width..][..g.width];
                let dst = &mut dst_row[r * g.width..][..g.width];
                shift_copy(src, dst, k as isize - g.left as isize);
            }
        }
    }
}

/// dst[t] = src[t + shift], zero outside the source.
fn shift_copy<T: Element>(src: &[T], dst: &mut [T], shift: isize) {
    let n = src.len() as isize;
    let lo = (-shift).clamp(0, n) as usize;
    let hi = (n - shift).clamp(0, n) as usize;
    dst[..lo].fill(T::zero());
    if lo < hi {
        let s0 = (lo as isize + shift) as usize;
        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
    }
    dst[hi.max(lo)..].fill(T::zero());
}

/// Scatter-adds `cols` back onto one batch item gradient `dx`.
fn col2im<T: Element>(g: &Geometry, cols: &[T], dx: &mut [T]) {
    let plane = g.plane();
    let n = g.width as isize;
    for ci in 0..g.cin {
        for k in 0..g.kernel {
            let shift = k as isize - g.left as isize;
            let src_row = &cols[(ci * g.kernel + k) * plane..][..plane];
            let lo = (-shift).clamp(0, n) as usize;
            let hi = (n - shift).clamp(0, n) as usize;
            if lo >= hi {
                continue;
            }
            for r in 0..g.rows {
                let src = &src_row[r * g.width..][..g.width];
                let dst = &mut dx[(ci * g.rows + r) * g.width..][..g.width];
                let s0 = (lo as isize + shift) as usize;
                for (d, &v) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                    *d += v;
                }
            }
        }
    }
}

pub(crate) fn forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let g = geometry(x, w, b)?;
    let plane = g.plane();
    let mut out = Tensor::zeros([g.batch, g.cout, g.rows, g.width]);
    let mut cols = vec![T::zero(); g.patch() * plane];
    let in_item = g.cin * plane;
    let out_item = g.cout * plane;
    for n in 0..g.batch {
        im2col(&g, &x.data()[n * in_item..][..in_item], &mut cols);
        let dst = &mut out.data_mut()[n * out_item..][..out_item];
        for (co, row) in dst.chunks_mut(plane).enumerate() {
            row.fill(b.data()[co]);
        }
        T::gemm(
            g.cout,
            g.patch(),
            plane,
            T::one(),
            (w.data(), g.patch(), 1),
            (&cols, plane, 1),
            T::one(),
            (dst, plane, 1),
        );
    }
    Ok(out)
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

pub(crate) fn backward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> ConvGrads<T> {
    let bias = Tensor::zeros([w.shape()[0]]);
    let g = geometry(x, w, &bias).expect("validated in forward");
    let plane = g.plane();
    let in_item = g.cin * plane;
    let out_item = g.cout * plane;

    let mut gx = needs[0].then(|| Tensor::zeros(x.shape().to_vec()));
    let mut gw = needs[1].then(|| Tensor::zeros(w.shape().to_vec()));
    let gb = needs[2].then(|| {
        let mut acc = vec![0.0f64; g.cout];
        for (i, chunk) in grad.data().chunks(plane).enumerate() {
            acc[i % g.cout] += super::ops::sum_f64(chunk);
        }
        Tensor::from_vec(acc.into_iter().map(T::from_f64_lossy).collect())
    });

    let mut cols = vec![T::zero(); g.patch() * plane];
    for n in 0..g.batch {
        let gout = &grad.data()[n * out_item..][..out_item];
        if let Some(gw) = gw.as_mut() {
            im2col(&g, &x.data()[n * in_item..][..in_item], &mut cols);
            // gw (cout × patch) += gout (cout × plane) · colsᵀ (plane × patch)
            T::gemm(
                g.cout,
                plane,
                g.patch(),
                T::one(),
                (gout, plane, 1),
                (&cols, 1, plane),
                T::one(),
                (gw.data_mut(), g.patch(), 1),
            );
        }
        if let Some(gx) = gx.as_mut() {
            // dcols (patch × plane) = wᵀ (patch × cout) · gout (cout × plane)
            T::gemm(
                g.patch(),
                g.cout,
                plane,
                T::one(),
                (w.data(), 1, g.patch()),
                (gout, plane, 1),
                T::zero(),
                (&mut cols, plane, 1),
            );
            col2im(&g, &cols, &mut gx.data_mut()[n * in_item..][..in_item]);
        }
    }
    (gx, gw, gb)
}
