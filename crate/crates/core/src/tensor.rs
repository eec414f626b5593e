//! Bridges between [`ImageTensor`] and batched `N x C x H x W` candle tensors,
//! plus the differentiable image operators the losses are built from.

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::image::{blur_matrix, ImageTensor};

/// Stacks images of identical shape into an `N x C x H x W` tensor.
pub fn images_to_tensor(images: &[ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (h, w, c) = first.dims();
    let mut buf = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.dims() != (h, w, c) {
            return Err(Error::Shape(format!(
                "batch mixes {:?} and {:?}",
                (h, w, c),
                img.dims()
            )));
        }
        buf.extend(img.data().iter().copied());
    }
    let t = Tensor::from_vec(buf, (images.len(), h, w, c), device)?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(dtype)?;
    Ok(t)
}

pub fn image_to_tensor(img: &ImageTensor, dtype: DType, device: &Device) -> Result<Tensor> {
    images_to_tensor(std::slice::from_ref(img), dtype, device)
}

/// Splits an `N x C x H x W` tensor into images, clamping into `[0, 1]`.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageTensor>> {
    let (n, c, h, w) = t.dims4()?;
    let hwc = t
        .to_dtype(DType::F32)?
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let per = h * w * c;
    (0..n)
        .map(|i| {
            let arr = Array3::from_shape_vec((h, w, c), hwc[i * per..(i + 1) * per].to_vec())
                .map_err(|e| Error::Shape(e.to_string()))?;
            ImageTensor::from_clamped(arr)
        })
        .collect()
}

/// Forward difference along the width axis with a zero last column.
pub fn diff_horizontal(x: &Tensor) -> Result<Tensor> {
    let w = x.dim(D::Minus1)?;
    let d = (x.narrow(D::Minus1, 1, w - 1)? - x.narrow(D::Minus1, 0, w - 1)?)?;
    let mut shape = x.dims().to_vec();
    *shape.last_mut().unwrap() = 1;
    let zeros = Tensor::zeros(shape, x.dtype(), x.device())?;
    Ok(Tensor::cat(&[&d, &zeros], D::Minus1)?)
}

/// Forward difference along the height axis with a zero last row.
pub fn diff_vertical(x: &Tensor) -> Result<Tensor> {
    let h = x.dim(D::Minus2)?;
    let d = (x.narrow(D::Minus2, 1, h - 1)? - x.narrow(D::Minus2, 0, h - 1)?)?;
    let mut shape = x.dims().to_vec();
    let n = shape.len();
    shape[n - 2] = 1;
    let zeros = Tensor::zeros(shape, x.dtype(), x.device())?;
    Ok(Tensor::cat(&[&d, &zeros], D::Minus2)?)
}

fn matrix_tensor(a: &ndarray::Array2<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    let (r, c) = a.dim();
    let v: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(v, (r, c), device)?.to_dtype(dtype)?)
}

/// Gaussian blur of an `N x C x H x W` tensor as `A_h X A_w^T` with dense
/// symmetric-boundary blur matrices. Differentiable in `x`.
pub fn blur_nchw(x: &Tensor, sigma: f64) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let ah = matrix_tensor(&blur_matrix(h, sigma)?, x.dtype(), x.device())?;
    let aw_t = matrix_tensor(&blur_matrix(w, sigma)?.t().to_owned(), x.dtype(), x.device())?;
    let rows = x.broadcast_matmul(&aw_t)?;
    let cols = ah.broadcast_matmul(&rows)?;
    Ok(cols)
}

pub fn l1_mean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn mse_mean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Scalar tensor to `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Normalized 2-D Gaussian window of odd side `size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    let mut out = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            out.push(a * b / (s * s));
        }
    }
    out
}

/// Differentiable mean SSIM over `N x C x H x W` tensors (valid windows,
/// per-channel, averaged).
pub fn ssim_nchw(a: &Tensor, b: &Tensor, window: usize, sigma: f64) -> Result<Tensor> {
    let (n, c, h, w) = a.dims4()?;
    if h < window || w < window {
        return Err(Error::TooSmall(format!("{h}x{w} smaller than SSIM window {window}")));
    }
    let k = Tensor::from_vec(gaussian_window(window, sigma), (1, 1, window, window), a.device())?
        .to_dtype(a.dtype())?;
    let a = a.reshape((n * c, 1, h, w))?;
    let b = b.reshape((n * c, 1, h, w))?;
    let filt = |t: &Tensor| -> Result<Tensor> { Ok(t.conv2d(&k, 0, 1, 1, 1)?) };
    let mu_a = filt(&a)?;
    let mu_b = filt(&b)?;
    let saa = (filt(&a.sqr()?)? - mu_a.sqr()?)?;
    let sbb = (filt(&b.sqr()?)? - mu_b.sqr()?)?;
    let sab = (filt(&(&a * &b)?)? - (&mu_a * &mu_b)?)?;
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let num = (((&mu_a * &mu_b)? * 2.0)?.affine(1.0, c1)? * (sab * 2.0)?.affine(1.0, c2)?)?;
    let den = ((mu_a.sqr()? + mu_b.sqr()?)?.affine(1.0, c1)? * (saa + sbb)?.affine(1.0, c2)?)?;
    Ok((num / den)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_layout() {
        let img = ImageTensor::from_fn(3, 4, 3, |(y, x, c)| (y * 12 + x * 3 + c) as f32 / 40.0).unwrap();
        let t = image_to_tensor(&img, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 3, 4]);
        let v = t.get(0).unwrap().get(2).unwrap().get(1).unwrap().get(3).unwrap();
        assert_eq!(v.to_scalar::<f32>().unwrap(), img.data()[[1, 3, 2]]);
        let back = tensor_to_images(&t).unwrap();
        assert_eq!(back[0], img);
    }

    #[test]
    fn diffs_match_ndarray_gradient() {
        let img = ImageTensor::from_fn(5, 6, 3, |(y, x, c)| ((y * 7 + x * 3 + c) % 5) as f32 / 4.0).unwrap();
        let t = image_to_tensor(&img, DType::F64, &Device::Cpu).unwrap();
        let gh = tensor_to_images(&diff_horizontal(&t).unwrap().abs().unwrap()).unwrap();
        let gv = tensor_to_images(&diff_vertical(&t).unwrap().abs().unwrap()).unwrap();
        let g = crate::image::spatial_gradient(&img);
        for ((y, x, c), v) in g.horizontal.indexed_iter() {
            assert!((gh[0].data()[[y, x, c]] - v.abs()).abs() < 1e-6);
        }
        for ((y, x, c), v) in g.vertical.indexed_iter() {
            assert!((gv[0].data()[[y, x, c]] - v.abs()).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_tensor_matches_direct() {
        let img = ImageTensor::from_fn(10, 14, 3, |(y, x, c)| ((y * 3 + x * 5 + c) % 9) as f32 / 8.0).unwrap();
        let t = image_to_tensor(&img, DType::F64, &Device::Cpu).unwrap();
        let out = tensor_to_images(&blur_nchw(&t, 5.0).unwrap()).unwrap();
        let direct = crate::image::gaussian_blur(&img, 5.0).unwrap();
        for (a, b) in out[0].data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
