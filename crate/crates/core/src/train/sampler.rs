use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::stream_rng;

/// Random square crops with optional horizontal flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSampler {
    pub patch: usize,
    pub batch: usize,
    pub flip: bool,
}

/// Crop position and flip shared by every member of a paired sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl PatchSampler {
    pub fn new(patch: usize, batch: usize, flip: bool) -> Self {
        Self { patch, batch, flip }
    }

    pub fn draw_crop(&self, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<CropSpec> {
        if self.patch > h || self.patch > w {
            return Err(Error::TooSmall(format!("patch {} larger than image {h}x{w}", self.patch)));
        }
        Ok(CropSpec {
            top: rng.random_range(0..=h - self.patch),
            left: rng.random_range(0..=w - self.patch),
            flip: self.flip && rng.random::<bool>(),
        })
    }

    pub fn apply(&self, img: &ImageTensor, c: CropSpec) -> Result<ImageTensor> {
        let p = img.crop(c.top, c.left, self.patch, self.patch)?;
        Ok(if c.flip { p.flip_horizontal() } else { p })
    }

    /// One batch from aligned image sets: member `k` of every set is cropped
    /// at the same coordinates. Returns one batch per set.
    pub fn sample_aligned(
        &self,
        sets: &[&[ImageTensor]],
        indices: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<ImageTensor>>> {
        let first = sets.first().ok_or(Error::EmptyDataset)?;
        let mut out = vec![Vec::with_capacity(indices.len()); sets.len()];
        for &i in indices {
            let (h, w, _) = first[i].dims();
            for s in sets.iter().skip(1) {
                if s[i].dims().0 != h || s[i].dims().1 != w {
                    return Err(Error::Shape(format!("pair {i} differs in size")));
                }
            }
            let c = self.draw_crop(h, w, rng)?;
            for (k, s) in sets.iter().enumerate() {
                out[k].push(self.apply(&s[i], c)?);
            }
        }
        Ok(out)
    }
}

/// Shuffled visiting order of `n` items for one epoch.
pub fn epoch_order(n: usize, seed: u64, stream: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, &[stream, epoch as u64]));
    idx
}

/// Indices of batch `step` within an epoch order, wrapping around.
pub fn batch_indices(order: &[usize], step: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|k| order[(step * batch + k) % order.len()]).collect()
}

/// Seeded batch of random crops drawn uniformly with replacement.
pub fn sample_patches(images: &[ImageTensor], patch: usize, batch: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = stream_rng(seed, &[0x70617463]);
    let s = PatchSampler::new(patch, batch, false);
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..images.len())).collect();
    Ok(s.sample_aligned(&[images], &idx, &mut rng)?.remove(0))
}
