use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objectives::splitmix64;
use crate::tensor::{Real, Tensor};

const PAD: usize = 4;

/// Zero-pad-by-4 random crop plus a random horizontal flip for each image
/// in a `[b, c, h, w]` batch. Draws depend only on
/// `(seed, epoch, batch, sample)`.
pub fn augment_images<F: Real>(images: &Tensor<F>, seed: u64, epoch: u64, batch: u64) -> Result<Tensor<F>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape(
            "augment_images",
            format!("expected [b, c, h, w], got {s:?}"),
        ));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let key = splitmix64(splitmix64(splitmix64(seed ^ 0xA5A5_0000) ^ epoch) ^ batch);
    let per = c * h * w;
    let mut out = vec![F::zero(); b * per];
    crate::par::for_each_chunk_mut(&mut out, per, |i, dst| {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(key ^ i as u64));
        let dy = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
        let dx = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
        let flip = rng.random::<bool>();
        let src = &images.data()[i * per..(i + 1) * per];
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    dst[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    });
    Tensor::new(s.to_vec(), out)
}
