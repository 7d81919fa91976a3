use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Axis, Ix4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Float, NnError, Param, Tensor4};

/// Spatial padding applied before a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding chosen so a stride-1 convolution keeps H×W.
    Same,
    /// Explicit zero padding (rows, cols) on every side.
    Zero(usize, usize),
}

/// Weights (C_out, C_in, k_h, k_w), bias (C_out) and sampling geometry of a
/// dilated convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<F> {
    pub weights: Param<F>,
    pub bias: Param<F>,
    pub dilation: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl<F: Float> ConvParams<F> {
    pub fn new(
        weights: Array4<F>,
        bias: Array1<F>,
        dilation: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self, NnError> {
        let params = Self {
            weights: Param::new(weights.into_dyn()),
            bias: Param::new(bias.into_dyn()),
            dilation,
            stride,
            padding,
        };
        params.validate()?;
        Ok(params)
    }

    /// He-style initialisation: weights ~ N(0, 2 / fan_in), zero bias.
    pub fn he_init<R: Rng + ?Sized>(
        c_out: usize,
        c_in: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
            .map_err(|e| NnError::InvalidParameter(e.to_string()))?;
        let weights =
            Array4::from_shape_simple_fn((c_out, c_in, kernel, kernel), || F::of(normal.sample(rng)));
        Self::new(weights, Array1::zeros(c_out), dilation, 1, Padding::Same)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.weights.value.ndim() != 4 {
            return Err(NnError::Shape("conv weights must be rank 4".into()));
        }
        if self.dilation == 0 {
            return Err(NnError::InvalidParameter("dilation must be positive".into()));
        }
        if self.stride == 0 {
            return Err(NnError::InvalidParameter("stride must be positive".into()));
        }
        let (c_out, _, kh, kw) = self.kernel_dims();
        if self.bias.value.shape() != [c_out] {
            return Err(NnError::Shape(format!(
                "bias shape {:?} does not match {c_out} output channels",
                self.bias.value.shape()
            )));
        }
        if self.padding == Padding::Same && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(NnError::InvalidParameter(
                "same padding needs odd kernel sizes".into(),
            ));
        }
        Ok(())
    }

    /// (C_out, C_in, k_h, k_w)
    pub fn kernel_dims(&self) -> (usize, usize, usize, usize) {
        let s = self.weights.value.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// Receptive field along each axis: k + (k − 1)(l − 1).
    pub fn receptive_field(&self) -> (usize, usize) {
        let (_, _, kh, kw) = self.kernel_dims();
        let span = |k: usize| k + (k - 1) * (self.dilation - 1);
        (span(kh), span(kw))
    }

    fn pads(&self) -> (usize, usize) {
        match self.padding {
            Padding::Same => {
                let (_, _, kh, kw) = self.kernel_dims();
                (self.dilation * (kh - 1) / 2, self.dilation * (kw - 1) / 2)
            }
            Padding::Zero(ph, pw) => (ph, pw),
        }
    }

    fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        let (ph, pw) = self.pads();
        let (eh, ew) = self.receptive_field();
        if h + 2 * ph < eh || w + 2 * pw < ew {
            return Err(NnError::Shape(format!(
                "input {h}×{w} smaller than receptive field {eh}×{ew}"
            )));
        }
        Ok((
            (h + 2 * ph - eh) / self.stride + 1,
            (w + 2 * pw - ew) / self.stride + 1,
        ))
    }

    /// Weights as a (C_out, C_in·k_h·k_w) matrix with both spatial axes
    /// reversed, so that a product with an im2col matrix evaluates a true
    /// (flipped-kernel) convolution.
    fn flipped_matrix(&self) -> Array2<F> {
        let w = self
            .weights
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("rank 4");
        let (c_out, c_in, kh, kw) = w.dim();
        let flipped = w.slice(s![.., .., ..;-1, ..;-1]).as_standard_layout().into_owned();
        flipped
            .into_shape_with_order((c_out, c_in * kh * kw))
            .expect("contiguous")
    }

    fn geometry(&self, c_in: usize, h: usize, w: usize) -> Result<Geometry, NnError> {
        let (_, wc_in, kh, kw) = self.kernel_dims();
        if wc_in != c_in {
            return Err(NnError::ChannelMismatch {
                expected: wc_in,
                got: c_in,
            });
        }
        let (pad_h, pad_w) = self.pads();
        let (out_h, out_w) = self.output_hw(h, w)?;
        Ok(Geometry {
            c_in,
            h,
            w,
            kh,
            kw,
            pad_h,
            pad_w,
            dilation: self.dilation,
            stride: self.stride,
            out_h,
            out_w,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    dilation: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    /// Source coordinate of output position `o` for kernel tap `k`, if it
    /// falls inside the unpadded input.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, dilation: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (o * stride + k * dilation) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

fn im2col<F: Float>(image: ArrayView3<F>, g: &Geometry) -> Array2<F> {
    let mut col = Array2::zeros((g.c_in * g.kh * g.kw, g.out_h * g.out_w));
    for c in 0..g.c_in {
        let plane = image.index_axis(Axis(0), c);
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row_idx = (c * g.kh + i) * g.kw + j;
                let mut row = col.row_mut(row_idx);
                let row = row.as_slice_mut().expect("standard layout");
                for oy in 0..g.out_h {
                    let Some(sy) = Geometry::source(oy, i, g.stride, g.dilation, g.pad_h, g.h) else {
                        continue;
                    };
                    let src = plane.row(sy);
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        if let Some(sx) = Geometry::source(ox, j, g.stride, g.dilation, g.pad_w, g.w) {
                            *d = src[sx];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<F: Float>(col: ArrayView2<F>, g: &Geometry, mut image: ArrayViewMut3<F>) {
    for c in 0..g.c_in {
        let mut plane = image.index_axis_mut(Axis(0), c);
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row_idx = (c * g.kh + i) * g.kw + j;
                let row = col.row(row_idx);
                for oy in 0..g.out_h {
                    let Some(sy) = Geometry::source(oy, i, g.stride, g.dilation, g.pad_h, g.h) else {
                        continue;
                    };
                    let mut dst = plane.row_mut(sy);
                    for ox in 0..g.out_w {
                        if let Some(sx) = Geometry::source(ox, j, g.stride, g.dilation, g.pad_w, g.w) {
                            dst[sx] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Multi-channel dilated convolution
/// `out_o(x) = b_o + Σ_c Σ_t in_c(x − l·t) · w_{o,c}(t)`, with the kernel
/// taps `t` centred on zero.
pub fn conv2d<F: Float>(input: &Tensor4<F>, params: &ConvParams<F>) -> Result<Tensor4<F>, NnError> {
    params.validate()?;
    let (n, c_in, h, w) = input.dims();
    let g = params.geometry(c_in, h, w)?;
    let (c_out, ..) = params.kernel_dims();
    let wmat = params.flipped_matrix();
    let bias = params.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
    let mut out = Array4::zeros((n, c_out, g.out_h, g.out_w));
    let input = input.values().as_standard_layout();
    for (img, mut dst) in input.outer_iter().zip(out.outer_iter_mut()) {
        let y = if g.is_pointwise() {
            let x = img.into_shape_with_order((c_in, h * w)).expect("contiguous input");
            wmat.dot(&x)
        } else {
            wmat.dot(&im2col(img, &g))
        };
        let mut dst = dst
            .view_mut()
            .into_shape_with_order((c_out, g.out_h * g.out_w))
            .expect("contiguous output");
        dst.assign(&y);
        dst += &bias.view().insert_axis(Axis(1));
    }
    Ok(Tensor4::wrap(out))
}

/// Back-propagates `grad_out` through [`conv2d`]; weight and bias gradients
/// are accumulated into `params`.
pub fn conv2d_backward<F: Float>(
    input: &Tensor4<F>,
    params: &mut ConvParams<F>,
    grad_out: &Array4<F>,
) -> Result<Array4<F>, NnError> {
    let (n, c_in, h, w) = input.dims();
    let g = params.geometry(c_in, h, w)?;
    let (c_out, _, kh, kw) = params.kernel_dims();
    if grad_out.dim() != (n, c_out, g.out_h, g.out_w) {
        return Err(NnError::Shape(format!(
            "output gradient {:?} does not match conv output {:?}",
            grad_out.shape(),
            (n, c_out, g.out_h, g.out_w)
        )));
    }
    let wmat = params.flipped_matrix();
    let mut grad_w = Array2::<F>::zeros(wmat.raw_dim());
    let mut grad_b = Array1::<F>::zeros(c_out);
    let mut grad_in = Array4::zeros((n, c_in, h, w));
    let grad_out = grad_out.as_standard_layout();
    let input = input.values().as_standard_layout();
    for ((img, gy), mut gx) in input
        .outer_iter()
        .zip(grad_out.outer_iter())
        .zip(grad_in.outer_iter_mut())
    {
        let gy = gy.into_shape_with_order((c_out, g.out_h * g.out_w)).expect("contiguous");
        grad_b += &gy.sum_axis(Axis(1));
        if g.is_pointwise() {
            let x = img.into_shape_with_order((c_in, h * w)).expect("contiguous input");
            grad_w += &gy.dot(&x.t());
            let gcol = wmat.t().dot(&gy);
            gx.assign(&gcol.into_shape_with_order((c_in, h, w)).expect("contiguous"));
        } else {
            let col = im2col(img, &g);
            grad_w += &gy.dot(&col.t());
            let gcol = wmat.t().dot(&gy);
            col2im(gcol.view(), &g, gx.view_mut());
        }
    }
    // Undo the kernel flip before accumulating.
    let grad_w = grad_w
        .into_shape_with_order((c_out, c_in, kh, kw))
        .expect("contiguous");
    let grad_w = grad_w.slice(s![.., .., ..;-1, ..;-1]);
    params.weights.grad += &grad_w.into_dyn();
    params.bias.grad += &grad_b.into_dyn();
    Ok(grad_in)
}
