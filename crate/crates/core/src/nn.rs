//! Minimal layer toolkit on top of candle with seeded initialization and a
//! named parameter store that can be saved, loaded, and checksummed.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Deterministic RNG for a `(seed, stream...)` tuple.
pub fn stream_rng(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for s in stream {
        h.update(s.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Named trainable parameters, iterated in name order.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.vars.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(handle)
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        cfg: ConvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Conv2d> {
        let fan_in = cfg.cin * cfg.k * cfg.k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = self.uniform(format!("{name}.weight"), &[cfg.cout, cfg.cin, cfg.k, cfg.k], bound, rng)?;
        let bias = self.uniform(format!("{name}.bias"), &[cfg.cout], bound, rng)?;
        Ok(Conv2d {
            weight,
            bias,
            stride: cfg.stride,
            padding: cfg.padding,
        })
    }

    pub fn conv_transpose2d(
        &mut self,
        name: &str,
        cfg: ConvSpec,
        output_padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ConvTranspose2d> {
        let fan_in = cfg.cout * cfg.k * cfg.k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = self.uniform(format!("{name}.weight"), &[cfg.cin, cfg.cout, cfg.k, cfg.k], bound, rng)?;
        let bias = self.uniform(format!("{name}.bias"), &[cfg.cout], bound, rng)?;
        Ok(ConvTranspose2d {
            weight,
            bias,
            stride: cfg.stride,
            padding: cfg.padding,
            output_padding,
        })
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Result<Linear> {
        let bound = 1.0 / (din as f64).sqrt();
        let weight = self.uniform(format!("{name}.weight"), &[dout, din], bound, rng)?;
        let bias = self.uniform(format!("{name}.bias"), &[dout], bound, rng)?;
        Ok(Linear { weight, bias })
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        candle_core::safetensors::save(&self.tensors(), path.as_ref())?;
        Ok(())
    }

    /// Overwrites every parameter from a safetensors file; names and shapes
    /// must match exactly.
    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingWeights(path.to_path_buf()));
        }
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        self.assign(&loaded)
    }

    pub fn assign(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::Shape(format!(
                "parameter count {} != {}",
                tensors.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "{name}: {:?} != {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// SHA-256 over names and raw little-endian values, in name order.
    pub fn checksum(&self) -> Result<String> {
        checksum_tensors(self.vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())))
    }
}

pub fn checksum_tensors<'a>(items: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update(name.as_bytes());
        let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        for x in v {
            h.update(x.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            cin,
            cout,
            k,
            stride,
            padding,
        }
    }

    /// Stride-1 "same" convolution.
    pub fn same(cin: usize, cout: usize, k: usize) -> Self {
        Self::new(cin, cout, k, 1, k / 2)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.padding)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose2d(x, &self.weight, self.stride, self.padding, self.output_padding)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Zero-padded 2-D convolution (`w` is `[cout, cin, kh, kw]`) computed as
/// patch extraction followed by one matrix product. The backward pass is a
/// scatter-add of the patch gradients plus matmuls, much faster on CPU than
/// the transposed convolutions of the built-in one.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_padded(x, w, stride, [padding; 4])
}

/// `pad` is `[top, bottom, left, right]`.
fn conv2d_padded(x: &Tensor, w: &Tensor, stride: usize, pad: [usize; 4]) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (cout, cin, kh, kw) = w.dims4()?;
    if cin != c {
        return Err(Error::Shape(format!("conv input has {c} channels, kernel expects {cin}")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let (hp, wp) = (h + pad[0] + pad[1], wd + pad[2] + pad[3]);
    if hp < kh || wp < kw {
        return Err(Error::TooSmall(format!("{h}x{wd} input for a {kh}x{kw} kernel")));
    }
    let (ho, wo) = ((hp - kh) / stride + 1, (wp - kw) / stride + 1);
    let xp = x.pad_with_zeros(2, pad[0], pad[1])?.pad_with_zeros(3, pad[2], pad[3])?;
    let cols = crate::im2col::im2col(&xp, kh, kw, stride)?;
    let y = w.reshape((cout, c * kh * kw))?.matmul(&cols)?;
    Ok(y.reshape((cout, n, ho, wo))?.transpose(0, 1)?.contiguous()?)
}

/// Transposed convolution with PyTorch semantics (`w` is
/// `[cin, cout, kh, kw]`): every input pixel scatters its kernel-weighted
/// contribution into the output.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (cin, cout, kh, kw) = w.dims4()?;
    if cin != c {
        return Err(Error::Shape(format!("conv input has {c} channels, kernel expects {cin}")));
    }
    if stride == 0 || output_padding >= stride || padding >= kh || padding >= kw {
        return Err(Error::InvalidArgument(format!(
            "transposed conv with kernel {kh}x{kw}, stride {stride}, padding {padding}, output padding {output_padding}"
        )));
    }
    let (hp, wp) = ((h - 1) * stride + kh + output_padding, (wd - 1) * stride + kw + output_padding);
    let (ho, wo) = (hp - 2 * padding, wp - 2 * padding);
    let xm = x.transpose(0, 1)?.reshape((c, n * h * wd))?;
    let cols = w.reshape((cin, cout * kh * kw))?.t()?.matmul(&xm)?;
    let full = crate::im2col::col2im(&cols, (n, cout, hp, wp), kh, kw, stride, h, wd)?;
    Ok(full.narrow(2, padding, ho)?.narrow(3, padding, wo)?.contiguous()?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// 2x2 max pool with stride 2; a trailing odd row or column is dropped.
///
/// Built from a reshape and two max reductions so the gradient reaches the
/// arg-max of each window unscaled.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::TooSmall(format!("cannot pool a {h}x{w} map")));
    }
    let even = x.narrow(2, 0, 2 * ho)?.narrow(3, 0, 2 * wo)?.contiguous()?;
    Ok(even.reshape((n, c, ho, 2, wo, 2))?.max(5)?.max(3)?)
}

/// Instance normalization without affine parameters.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let out = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(out.reshape((n, c, h, w))?)
}

/// Standard-normal samples as a tensor.
pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// SHA-256 of a serializable architecture description.
pub fn architecture_hash<T: serde::Serialize>(arch: &T) -> Result<String> {
    let json = serde_json::to_vec(arch)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let build = || {
            let mut ps = ParamStore::new(DType::F32, &Device::Cpu);
            let mut rng = stream_rng(7, &[1]);
            ps.conv2d("a", ConvSpec::same(3, 4, 3), &mut rng).unwrap();
            ps.linear("b", 4, 2, &mut rng).unwrap();
            ps.checksum().unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn save_load_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamStore::new(DType::F32, &Device::Cpu);
        let mut rng = stream_rng(3, &[]);
        ps.conv2d("c", ConvSpec::same(2, 3, 3), &mut rng).unwrap();
        let p = dir.path().join("p.safetensors");
        ps.save(&p).unwrap();
        let before = ps.checksum().unwrap();

        let mut other = ParamStore::new(DType::F32, &Device::Cpu);
        let mut rng = stream_rng(4, &[]);
        other.conv2d("c", ConvSpec::same(2, 3, 3), &mut rng).unwrap();
        assert_ne!(other.checksum().unwrap(), before);
        other.load(&p).unwrap();
        assert_eq!(other.checksum().unwrap(), before);
    }

    #[test]
    fn conv_transpose_doubles_size() {
        let mut ps = ParamStore::new(DType::F32, &Device::Cpu);
        let mut rng = stream_rng(0, &[]);
        let up = ps
            .conv_transpose2d("u", ConvSpec::new(2, 3, 3, 2, 1), 1, &mut rng)
            .unwrap();
        let x = Tensor::zeros((1, 2, 5, 7), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(up.forward(&x).unwrap().dims(), &[1, 3, 10, 14]);
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        assert_eq!(a.dims(), b.dims());
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        randn(shape, &mut stream_rng(seed, &[]), DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn unfolded_conv_matches_builtin() {
        for (k, stride, pad, h, w) in [(3, 1, 1, 9, 7), (4, 2, 1, 8, 10), (9, 1, 4, 12, 11), (3, 2, 0, 9, 9), (1, 1, 0, 5, 6)] {
            let x = Var::from_tensor(&rand_t(&[2, 3, h, w], 1)).unwrap();
            let wt = Var::from_tensor(&rand_t(&[4, 3, k, k], 2)).unwrap();
            let ours = conv2d(x.as_tensor(), wt.as_tensor(), stride, pad).unwrap();
            let theirs = x.as_tensor().conv2d(wt.as_tensor(), pad, stride, 1, 1).unwrap();
            assert!(max_abs_diff(&ours, &theirs) < 1e-12, "k{k} s{stride} p{pad}");
            let probe = rand_t(ours.dims(), 3);
            let ga = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let gb = (&theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            assert!(max_abs_diff(ga.get(&x).unwrap(), gb.get(&x).unwrap()) < 1e-10);
            assert!(max_abs_diff(ga.get(&wt).unwrap(), gb.get(&wt).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn unfolded_transposed_conv_matches_builtin() {
        for (k, stride, pad, op) in [(4, 2, 1, 0), (3, 2, 1, 1), (3, 1, 1, 0), (5, 3, 2, 2)] {
            let x = Var::from_tensor(&rand_t(&[2, 3, 5, 6], 4)).unwrap();
            let wt = Var::from_tensor(&rand_t(&[3, 2, k, k], 5)).unwrap();
            let ours = conv_transpose2d(x.as_tensor(), wt.as_tensor(), stride, pad, op).unwrap();
            let theirs = x.as_tensor().conv_transpose2d(wt.as_tensor(), pad, op, stride, 1).unwrap();
            assert!(max_abs_diff(&ours, &theirs) < 1e-12, "k{k} s{stride} p{pad} op{op}");
            let probe = rand_t(ours.dims(), 6);
            let ga = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let gb = (&theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            assert!(max_abs_diff(ga.get(&x).unwrap(), gb.get(&x).unwrap()) < 1e-10);
            assert!(max_abs_diff(ga.get(&wt).unwrap(), gb.get(&wt).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn max_pool_routes_whole_gradient_to_window_max() {
        let x = Var::from_tensor(&rand_t(&[2, 3, 7, 6], 7)).unwrap();
        let ours = max_pool2x2(x.as_tensor()).unwrap();
        assert_eq!(ours.dims(), [2, 3, 3, 3]);
        assert!(max_abs_diff(&ours, &x.as_tensor().max_pool2d(2).unwrap()) < 1e-15);
        let grads = ours.sum_all().unwrap().backward().unwrap();
        let g: Vec<f64> = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        // One unit of gradient per output cell, none on the dropped row.
        assert_eq!(g.iter().sum::<f64>(), 54.0);
        assert!(g.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(max_pool2x2(&rand_t(&[1, 1, 1, 4], 1)).is_err());
    }
}
