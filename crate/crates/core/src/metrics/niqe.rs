//! Natural Image Quality Evaluator.
//!
//! Each image is converted to 0..255 luma, cropped to a multiple of the
//! patch size and analysed at two scales (full and a bicubic half-size
//! copy). Non-overlapping patches of the mean-subtracted contrast-normalized
//! (MSCN) coefficients are summarized by asymmetric generalized Gaussian
//! fits of the coefficients and of four neighbour products, 18 numbers per
//! scale. The score is the Mahalanobis-like distance between the Gaussian
//! of an image's patch features and the pristine model.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const PATCH_SIZE: usize = 96;
pub const FEATURES_PER_SCALE: usize = 18;
pub const FEATURE_DIM: usize = 2 * FEATURES_PER_SCALE;
pub const MIN_FIT_IMAGES: usize = 50;
pub const SHARPNESS_THRESHOLD: f64 = 0.75;
pub const RIDGE: f64 = 1e-6;

const MAGIC: &[u8; 8] = b"HEPNIQE1";
static SHIPPED: &[u8] = include_bytes!("../../models/niqe_pristine.bin");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    patch_size: usize,
    feature_dim: usize,
    corpus_hash: String,
}

/// Mean and covariance of pristine patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct NiqeModel {
    pub mu: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub patch_size: usize,
    pub corpus_hash: String,
}

impl NiqeModel {
    /// The bundled pristine model.
    pub fn shipped() -> Self {
        Self::from_bytes(SHIPPED).expect("bundled NIQE model is well formed")
    }

    pub fn feature_dim(&self) -> usize {
        self.mu.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            patch_size: self.patch_size,
            feature_dim: self.feature_dim(),
            corpus_hash: self.corpus_hash.clone(),
        })?;
        let d = self.feature_dim();
        let mut out = Vec::with_capacity(12 + header.len() + 8 * (d + d * d));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.mu.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in 0..d {
            for c in 0..d {
                out.extend_from_slice(&self.cov[(r, c)].to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::ModelFormat(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let d = header.feature_dim;
        let rest = &bytes[12 + hlen..];
        if rest.len() != 8 * (d + d * d) || d == 0 {
            return Err(bad("payload size does not match feature_dim"));
        }
        let vals: Vec<f64> = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            mu: DVector::from_column_slice(&vals[..d]),
            cov: DMatrix::from_row_slice(d, d, &vals[d..]),
            patch_size: header.patch_size,
            corpus_hash: header.corpus_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()?).map_err(|e| Error::Write {
            path: path.as_ref().to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::Unreadable {
            path: path.as_ref().to_path_buf(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Symmetric with no eigenvalue below `-tol`.
    pub fn is_psd(&self, tol: f64) -> bool {
        let sym = (&self.cov - self.cov.transpose()).abs().max() <= 1e-12 * self.cov.abs().max().max(1.0);
        sym && self.cov.clone().symmetric_eigen().eigenvalues.iter().all(|&e| e >= -tol)
    }
}

/// 0..255 luma with weights 0.299 / 0.587 / 0.114.
pub fn luma255(img: &ImageTensor) -> Array2<f64> {
    let d = img.data();
    let (h, w, c) = img.dims();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if c == 3 {
            255.0 * (0.299 * d[[y, x, 0]] as f64 + 0.587 * d[[y, x, 1]] as f64 + 0.114 * d[[y, x, 2]] as f64)
        } else {
            255.0 * d[[y, x, 0]] as f64
        }
    })
}

/// 7-tap Gaussian window (`sigma = 7/6`).
fn mscn_window() -> [f64; 7] {
    let sd = (7.0f32 / 6.0) as f64;
    let var = sd * sd;
    let mut w = [0.0; 7];
    w[3] = 1.0;
    let mut sum = 1.0;
    for i in 1..=3 {
        let t = (-0.5 * (i * i) as f64 / var).exp();
        w[3 + i] = t;
        w[3 - i] = t;
        sum += 2.0 * t;
    }
    w.map(|v| v / sum)
}

/// Separable correlation with zero padding.
fn correlate_zero(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = (k.len() / 2) as isize;
    let get = |a: &Array2<f64>, y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            a[[y as usize, x as usize]]
        }
    };
    let cols = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * get(img, y as isize + i as isize - r, x as isize))
            .sum()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * get(&cols, y as isize, x as isize + i as isize - r))
            .sum()
    })
}

/// MSCN coefficients and the local deviation map.
pub fn mscn(img: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let win = mscn_window();
    let mu = correlate_zero(img, &win);
    let ex2 = correlate_zero(&img.mapv(|v| v * v), &win);
    let sigma = Array2::from_shape_fn(img.dim(), |p| (ex2[p] - mu[p] * mu[p]).abs().sqrt());
    let coef = Array2::from_shape_fn(img.dim(), |p| (img[p] - mu[p]) / (sigma[p] + 1.0));
    (coef, sigma)
}

fn bicubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * a
    } else {
        0.0
    }
}

/// Antialiased resampling weights for one axis: `(first index, weights)`.
fn resample_coeffs(n_in: usize, n_out: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = n_in as f64 / n_out as f64;
    let filterscale = scale.max(1.0);
    let support = 2.0 * filterscale;
    (0..n_out)
        .map(|xx| {
            let center = (xx as f64 + 0.5) * scale;
            let xmin = ((center - support + 0.5).trunc() as isize).max(0) as usize;
            let xmax = ((center + support + 0.5).trunc() as usize).min(n_in);
            let mut w: Vec<f64> = (xmin..xmax)
                .map(|x| bicubic((x as f64 - center + 0.5) / filterscale))
                .collect();
            let s: f64 = w.iter().sum();
            if s != 0.0 {
                w.iter_mut().for_each(|v| *v /= s);
            }
            (xmin, w)
        })
        .collect()
}

/// Bicubic resize (a = -0.5) with antialiasing, horizontal pass first.
pub fn resize_bicubic(img: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let cx = resample_coeffs(w, out_w);
    let horiz = Array2::from_shape_fn((h, out_w), |(y, x)| {
        let (x0, ref k) = cx[x];
        k.iter().enumerate().map(|(i, kv)| kv * img[[y, x0 + i]]).sum::<f64>()
    });
    let cy = resample_coeffs(h, out_h);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, ref k) = cy[y];
        k.iter().enumerate().map(|(i, kv)| kv * horiz[[y0 + i, x]]).sum()
    })
}

fn gamma_table() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..9800)
            .map(|i| {
                let a = 0.2 + i as f64 * 0.001;
                let r = gamma(2.0 / a).powi(2) / (gamma(1.0 / a) * gamma(3.0 / a));
                (a, r)
            })
            .collect()
    })
}

/// Asymmetric generalized Gaussian fit by moment matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggd {
    pub alpha: f64,
    pub mean: f64,
    pub left_scale: f64,
    pub right_scale: f64,
}

pub fn aggd_fit(values: impl Iterator<Item = f64> + Clone) -> Aggd {
    let (mut ls, mut ln, mut rs, mut rn, mut abs, mut sq) = (0.0, 0usize, 0.0, 0usize, 0.0, 0.0);
    let mut n = 0usize;
    for v in values {
        let v2 = v * v;
        if v < 0.0 {
            ls += v2;
            ln += 1;
        } else {
            rs += v2;
            rn += 1;
        }
        abs += v.abs();
        sq += v2;
        n += 1;
    }
    let lm = if ln > 0 { (ls / ln as f64).sqrt() } else { 0.0 };
    let rm = if rn > 0 { (rs / rn as f64).sqrt() } else { 0.0 };
    let g = if rm != 0.0 { lm / rm } else { f64::INFINITY };
    let mean_sq = sq / n as f64;
    let r_hat = if mean_sq != 0.0 {
        (abs / n as f64).powi(2) / mean_sq
    } else {
        f64::INFINITY
    };
    let r_norm = r_hat * ((g.powi(3) + 1.0) * (g + 1.0)) / (g * g + 1.0).powi(2);
    let table = gamma_table();
    let mut best = 0;
    if r_norm.is_finite() {
        let mut best_err = f64::INFINITY;
        for (i, &(_, r)) in table.iter().enumerate() {
            let e = (r - r_norm).powi(2);
            if e < best_err {
                best_err = e;
                best = i;
            }
        }
    }
    let alpha = table[best].0;
    let (g1, g2, g3) = (gamma(1.0 / alpha), gamma(2.0 / alpha), gamma(3.0 / alpha));
    let ratio = g1.sqrt() / g3.sqrt();
    let bl = ratio * lm;
    let br = ratio * rm;
    Aggd {
        alpha,
        mean: (br - bl) * (g2 / g1),
        left_scale: bl,
        right_scale: br,
    }
}

/// 18 features of one MSCN patch.
pub fn patch_features(p: ArrayView2<'_, f64>) -> [f64; FEATURES_PER_SCALE] {
    let (h, w) = p.dim();
    let base = aggd_fit(p.iter().copied());
    let mut out = [0.0; FEATURES_PER_SCALE];
    out[0] = base.alpha;
    out[1] = (base.left_scale + base.right_scale) / 2.0;
    // neighbour offsets (dy, dx) with wrap-around inside the patch
    let shifts: [(usize, usize); 4] = [(0, 1), (1, 0), (1, 1), (1, w - 1)];
    for (k, &(dy, dx)) in shifts.iter().enumerate() {
        let prod = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| {
            let yy = (y + h - dy) % h;
            let xx = (x + w - dx) % w;
            p[[y, x]] * p[[yy, xx]]
        });
        let a = aggd_fit(prod);
        let o = 2 + 4 * k;
        out[o] = a.alpha;
        out[o + 1] = a.mean;
        out[o + 2] = a.left_scale;
        // diagonal orientations repeat the left scale
        out[o + 3] = if k < 2 { a.right_scale } else { a.left_scale };
    }
    out
}

/// Per-patch features and the mean local deviation ("sharpness") of each
/// full-scale patch.
pub fn image_features(img: &ImageTensor, patch_size: usize) -> Result<(Vec<[f64; FEATURE_DIM]>, Vec<f64>)> {
    if patch_size < 2 || patch_size % 2 != 0 {
        return Err(Error::InvalidArgument("patch size must be even".into()));
    }
    let (h, w, _) = img.dims();
    if h < patch_size || w < patch_size {
        return Err(Error::TooSmall(format!("{h}x{w} smaller than NIQE patch {patch_size}")));
    }
    let (hc, wc) = (h - h % patch_size, w - w % patch_size);
    let gray = luma255(img).slice(s![..hc, ..wc]).to_owned();
    let half = resize_bicubic(&gray, hc / 2, wc / 2);
    let (m1, sigma) = mscn(&gray);
    let (m2, _) = mscn(&half);
    let hp = patch_size / 2;
    let mut feats = Vec::new();
    let mut sharp = Vec::new();
    for j in (0..hc).step_by(patch_size) {
        for i in (0..wc).step_by(patch_size) {
            let f1 = patch_features(m1.slice(s![j..j + patch_size, i..i + patch_size]));
            let f2 = patch_features(m2.slice(s![j / 2..j / 2 + hp, i / 2..i / 2 + hp]));
            let mut f = [0.0; FEATURE_DIM];
            f[..FEATURES_PER_SCALE].copy_from_slice(&f1);
            f[FEATURES_PER_SCALE..].copy_from_slice(&f2);
            feats.push(f);
            sharp.push(sigma.slice(s![j..j + patch_size, i..i + patch_size]).mean().unwrap_or(0.0));
        }
    }
    Ok((feats, sharp))
}

fn mean_cov(rows: &[[f64; FEATURE_DIM]]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let mut mu = DVector::zeros(FEATURE_DIM);
    for r in rows {
        mu += DVector::from_column_slice(r);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(FEATURE_DIM, FEATURE_DIM);
    for r in rows {
        let d = DVector::from_column_slice(r) - &mu;
        cov += &d * d.transpose();
    }
    cov /= (n as f64 - 1.0).max(1.0);
    (mu, cov)
}

/// Pseudo-inverse with the cutoff `max(m, n) * eps * sigma_max`.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * smax;
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut inv = DMatrix::zeros(m.ncols(), m.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            inv += (vt.row(k).transpose() * u.column(k).transpose()) / s;
        }
    }
    inv
}

/// NIQE score of `img` under `model`; lower is better.
pub fn niqe(img: &ImageTensor, model: &NiqeModel) -> Result<f64> {
    if model.feature_dim() != FEATURE_DIM {
        return Err(Error::ModelFormat(format!("feature_dim {} != {FEATURE_DIM}", model.feature_dim())));
    }
    let (feats, _) = image_features(img, model.patch_size)?;
    if feats.len() < 2 {
        return Err(Error::TooSmall(format!(
            "NIQE needs at least 2 patches of {}px, got {}",
            model.patch_size,
            feats.len()
        )));
    }
    let (mu, cov) = mean_cov(&feats);
    let x = mu - &model.mu;
    let pooled = (&model.cov + cov) / 2.0;
    let q = (x.transpose() * pinv(&pooled) * &x)[(0, 0)];
    Ok(q.max(0.0).sqrt())
}

/// Fits a pristine model from the sharpest patches of each image.
pub fn fit_niqe_model(corpus: &[ImageTensor], patch_size: usize) -> Result<NiqeModel> {
    if corpus.len() < MIN_FIT_IMAGES {
        return Err(Error::CorpusTooSmall {
            got: corpus.len(),
            need: MIN_FIT_IMAGES,
        });
    }
    let mut hasher = Sha256::new();
    let mut rows = Vec::new();
    for img in corpus {
        let (h, w, c) = img.dims();
        for d in [h, w, c] {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in img.data().iter() {
            hasher.update(v.to_le_bytes());
        }
        let (feats, sharp) = image_features(img, patch_size)?;
        let peak = sharp.iter().copied().fold(0.0, f64::max);
        rows.extend(
            feats
                .into_iter()
                .zip(&sharp)
                .filter(|(_, &s)| s > SHARPNESS_THRESHOLD * peak)
                .map(|(f, _)| f),
        );
    }
    if rows.len() < 2 {
        return Err(Error::TooSmall("fewer than 2 sharp patches in corpus".into()));
    }
    let (mu, mut cov) = mean_cov(&rows);
    cov = (&cov + cov.transpose()) / 2.0;
    for i in 0..FEATURE_DIM {
        cov[(i, i)] += RIDGE;
    }
    Ok(NiqeModel {
        mu,
        cov,
        patch_size,
        corpus_hash: hex::encode(hasher.finalize()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_matches_reference_taps() {
        let w = mscn_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[3] - 0.342_631_52).abs() < 1e-6);
        assert_eq!(w[0], w[6]);
    }

    #[test]
    fn shipped_model_round_trips() {
        let m = NiqeModel::shipped();
        assert_eq!(m.feature_dim(), FEATURE_DIM);
        assert_eq!(m.patch_size, PATCH_SIZE);
        assert!(m.is_psd(1e-9));
        let again = NiqeModel::from_bytes(&m.to_bytes().unwrap()).unwrap();
        assert_eq!(again, m);
        assert!(NiqeModel::from_bytes(b"nope").is_err());
        let mut cut = m.to_bytes().unwrap();
        cut.truncate(cut.len() - 8);
        assert!(matches!(NiqeModel::from_bytes(&cut), Err(Error::ModelFormat(_))));
    }

    #[test]
    fn resize_preserves_constants() {
        let a = Array2::from_elem((12, 18), 7.5);
        let r = resize_bicubic(&a, 6, 9);
        assert!(r.iter().all(|v| (v - 7.5).abs() < 1e-12));
    }

    #[test]
    fn pinv_of_singular_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = pinv(&m);
        assert!((p[(0, 0)] - 0.25).abs() < 1e-12 && (p[(0, 1)] - 0.25).abs() < 1e-12);
        let i = DMatrix::<f64>::identity(3, 3) * 2.0;
        assert!((pinv(&i) - DMatrix::identity(3, 3) * 0.5).abs().max() < 1e-15);
    }

    #[test]
    fn aggd_of_symmetric_data() {
        let v = [-1.0, 1.0, -2.0, 2.0, -0.5, 0.5];
        let a = aggd_fit(v.iter().copied());
        assert!((a.left_scale - a.right_scale).abs() < 1e-12);
        assert!(a.mean.abs() < 1e-12);
        let z = aggd_fit([0.0; 4].iter().copied());
        assert_eq!(z.alpha, 0.2);
    }

    #[test]
    fn too_small_and_bad_model() {
        let m = NiqeModel::shipped();
        let one = ImageTensor::filled(96, 96, 1, 0.5).unwrap();
        assert!(matches!(niqe(&one, &m), Err(Error::TooSmall(_))));
        let tiny = ImageTensor::filled(20, 20, 1, 0.5).unwrap();
        assert!(matches!(niqe(&tiny, &m), Err(Error::TooSmall(_))));
        assert!(matches!(
            fit_niqe_model(&[one], PATCH_SIZE),
            Err(Error::CorpusTooSmall { got: 1, need: 50 })
        ));
    }
}
