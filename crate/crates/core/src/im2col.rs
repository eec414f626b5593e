use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

/// Geometry of a patch extraction from an already padded `N x C x H x W`
/// input.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Calls `f(col_index, input_index)` for every entry of the column
    /// matrix, in column-matrix order.
    #[inline]
    fn visit(&self, mut f: impl FnMut(usize, usize)) {
        let g = *self;
        let mut out = 0;
        for c in 0..g.c {
            for i in 0..g.kh {
                for j in 0..g.kw {
                    for n in 0..g.n {
                        let plane = (n * g.c + c) * g.h * g.w;
                        for oy in 0..g.ho {
                            let row = plane + (oy * g.stride + i) * g.w + j;
                            for ox in 0..g.wo {
                                f(out, row + ox * g.stride);
                                out += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(s: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => Err(candle_core::Error::Msg("im2col expects a contiguous tensor".into())),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        fn run<T: Copy + Default>(g: &Geometry, src: &[T]) -> Vec<T> {
            let mut out = vec![T::default(); g.rows() * g.cols()];
            g.visit(|o, i| out[o] = src[i]);
            out
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(run(&g, contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(run(&g, contiguous(v, layout)?)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64".into())),
        };
        Ok((out, Shape::from((g.rows(), g.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        fn run<T: Copy + Default + std::ops::AddAssign>(g: &Geometry, src: &[T]) -> Vec<T> {
            let mut out = vec![T::default(); g.n * g.c * g.h * g.w];
            g.visit(|o, i| out[i] += src[o]);
            out
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(run(&g, contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(run(&g, contiguous(v, layout)?)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64".into())),
        };
        Ok((out, Shape::from((g.n, g.c, g.h, g.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// `(C*kh*kw) x (N*ho*wo)` patch matrix of a padded input; row index is
/// `(c*kh + i)*kw + j`, column index `(n*ho + y)*wo + x`.
pub(crate) fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let g = Geometry {
        n,
        c,
        h,
        w,
        kh,
        kw,
        stride,
        ho: (h - kh) / stride + 1,
        wo: (w - kw) / stride + 1,
    };
    x.contiguous()?.apply_op1(Im2Col(g))
}

/// Scatter-adds a `(c*kh*kw) x (n*ho*wo)` column matrix back onto an
/// `n x c x h x w` image; the adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &Tensor,
    (n, c, h, w): (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> candle_core::Result<Tensor> {
    let g = Geometry {
        n,
        c,
        h,
        w,
        kh,
        kw,
        stride,
        ho,
        wo,
    };
    if cols.dims() != [g.rows(), g.cols()] || (ho - 1) * stride + kh > h || (wo - 1) * stride + kw > w {
        return Err(candle_core::Error::Msg(format!("col2im: bad geometry for {:?}", cols.dims())));
    }
    cols.contiguous()?.apply_op1(Col2Im(g))
}
