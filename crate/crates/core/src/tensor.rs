//! Dense row-major tensors and the numeric kernels the network is built on.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense `f64` array with shape metadata, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Flat rank-1 tensor over `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Number of elements per entry along the leading axis.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Slice of the `i`-th entry along the leading axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Element at a multi-index. Panics when out of range.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of range for shape {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    /// Gather entries along the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor { shape, data }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Borrowed strided matrix used by the GEMM wrapper.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub(crate) fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix buffer too small");
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = alpha * a * b + beta * c` with `c` a dense row-major `a.rows x b.cols`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in &mut c[..m * n] {
            *x *= beta;
        }
        return;
    }
    // SAFETY: the asserts above and in `MatRef::new` guarantee every
    // addressed element lies inside its slice; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Standard matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim(format!(
            "matmul needs [m,k] x [k,n], got {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, n) = (a.shape[0], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(
        1.0,
        MatRef::new(&a.data, m, a.shape[1]),
        MatRef::new(&b.data, b.shape[0], n),
        0.0,
        &mut out,
    );
    Tensor::new(vec![m, n], out)
}

/// Geometry of one 2-D convolution over a single `[C, H, W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::arg("kernel size and stride must be positive"));
        }
        if kernel > height + 2 * padding || kernel > width + 2 * padding {
            return Err(Error::dim(format!(
                "kernel {kernel}x{kernel} larger than padded input {}x{}",
                height + 2 * padding,
                width + 2 * padding
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
        })
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfold one image into a `[C*k*k, OH*OW]` patch matrix.
pub(crate) fn im2col(image: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    debug_assert_eq!(cols.len(), g.patch_len() * p);
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *out = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto image positions (accumulating).
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, image: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `[N,C,H,W]` input with `[F,C,k,k]` filters, no padding.
pub fn conv2d(input: &Tensor, filters: &Tensor, stride: usize) -> Result<Tensor> {
    conv2d_padded(input, filters, stride, 0)
}

/// Cross-correlation with symmetric zero padding.
pub fn conv2d_padded(
    input: &Tensor,
    filters: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if input.rank() != 4 || filters.rank() != 4 {
        return Err(Error::dim(format!(
            "conv2d needs [N,C,H,W] input and [F,C,k,k] filters, got {:?} and {:?}",
            input.shape, filters.shape
        )));
    }
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let (f, fc, kh, kw) = (
        filters.shape[0],
        filters.shape[1],
        filters.shape[2],
        filters.shape[3],
    );
    if fc != c || kh != kw {
        return Err(Error::dim(format!(
            "filters {:?} incompatible with input {:?}",
            filters.shape, input.shape
        )));
    }
    let g = ConvGeometry::new(c, h, w, kh, stride, padding)?;
    let p = g.positions();
    let mut cols = vec![0.0; g.patch_len() * p];
    let mut out = vec![0.0; n * f * p];
    for i in 0..n {
        im2col(input.row(i), &g, &mut cols);
        gemm(
            1.0,
            MatRef::new(&filters.data, f, g.patch_len()),
            MatRef::new(&cols, g.patch_len(), p),
            0.0,
            &mut out[i * f * p..(i + 1) * f * p],
        );
    }
    Tensor::new(vec![n, f, g.out_height(), g.out_width()], out)
}

/// Max pooling over `[N,C,H,W]`; also returns, per output cell, the flat
/// index into `input.data()` of the selected maximum (first one on ties).
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    if input.rank() != 4 {
        return Err(Error::dim(format!(
            "maxpool2d needs [N,C,H,W], got {:?}",
            input.shape
        )));
    }
    if k == 0 || stride == 0 {
        return Err(Error::arg("pool window and stride must be positive"));
    }
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    if k > h || k > w {
        return Err(Error::dim(format!("pool window {k}x{k} exceeds input {h}x{w}")));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = input.data[best_idx];
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if input.data[idx] > best {
                            best = input.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

/// I.i.d. normal samples; `std == 0` yields the constant `mean`.
pub fn gaussian(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::arg(format!("standard deviation must be >= 0, got {std}")));
    }
    let n: usize = shape.iter().product();
    let data = if std == 0.0 {
        vec![mean; n]
    } else {
        (0..n).map(|_| mean + std * rng.standard_normal()).collect()
    };
    Tensor::new(shape.to_vec(), data)
}

/// Euclidean norm of all elements.
pub fn l2_norm(v: &Tensor) -> f64 {
    l2_norm_slice(&v.data)
}

/// Overflow-safe Euclidean norm (scaled sum of squares).
pub fn l2_norm_slice(v: &[f64]) -> f64 {
    let mut scale = 0.0f64;
    let mut ssq = 1.0f64;
    for &x in v {
        if x != 0.0 {
            let ax = x.abs();
            if scale < ax {
                ssq = 1.0 + ssq * (scale / ax) * (scale / ax);
                scale = ax;
            } else {
                ssq += (ax / scale) * (ax / scale);
            }
        }
    }
    scale * ssq.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_zero_and_small() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let eye = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(matmul(&a, &z).unwrap(), z);
        let b = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn new_rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn conv_identity_kernel_sums_channels() {
        let mut rng = Rng::new(5);
        let input = gaussian(&mut rng, &[1, 3, 4, 4], 0.0, 1.0).unwrap();
        let filters = Tensor::filled(&[1, 3, 1, 1], 1.0);
        let out = conv2d(&input, &filters, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 4, 4]);
        for y in 0..4 {
            for x in 0..4 {
                let s: f64 = (0..3).map(|c| input.at(&[0, c, y, x])).sum();
                assert!((out.at(&[0, 0, y, x]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_zero_input_and_oversized_kernel() {
        let input = Tensor::zeros(&[2, 1, 5, 5]);
        let filters = Tensor::filled(&[2, 1, 3, 3], 0.7);
        let out = conv2d(&input, &filters, 2).unwrap();
        assert_eq!(out.shape(), &[2, 2, 2, 2]);
        assert!(out.data().iter().all(|&x| x == 0.0));
        let big = Tensor::zeros(&[1, 1, 6, 6]);
        assert!(matches!(conv2d(&input, &big, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn maxpool_basics() {
        let c = Tensor::filled(&[1, 2, 4, 4], 3.5);
        let (o, _) = maxpool2d(&c, 2, 2).unwrap();
        assert!(o.data().iter().all(|&x| x == 3.5));
        let m = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (o, arg) = maxpool2d(&m, 2, 2).unwrap();
        assert_eq!(o.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        assert!(maxpool2d(&m, 3, 1).is_err());
    }

    #[test]
    fn gaussian_degenerate_and_deterministic() {
        let mut rng = Rng::new(9);
        let t = gaussian(&mut rng, &[3, 2], 3.0, 0.0).unwrap();
        assert!(t.data().iter().all(|&x| x == 3.0));
        let a = gaussian(&mut Rng::new(11), &[100], 0.0, 1.0).unwrap();
        let b = gaussian(&mut Rng::new(11), &[100], 0.0, 1.0).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(gaussian(&mut rng, &[1], 0.0, -1.0).is_err());
    }

    #[test]
    fn l2_norm_small_cases() {
        assert_eq!(l2_norm(&Tensor::zeros(&[4])), 0.0);
        assert!((l2_norm(&Tensor::from_vec(vec![3.0, 4.0])) - 5.0).abs() < 1e-15);
        // no overflow in the squares
        let big = l2_norm_slice(&[1e200, 1e200]);
        assert!((big / 1e200 - 2f64.sqrt()).abs() < 1e-12);
    }
}
