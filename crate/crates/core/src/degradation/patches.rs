use durr_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{degrade, DegradationKind};
use crate::error::{DurrError, Result};
use crate::image::Image;

/// A batch of square crops with their corrupted counterparts.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    /// Ground truth, `(batch, 1, size, size)`.
    pub clean: Tensor<f32>,
    /// Corrupted observation, same shape.
    pub degraded: Tensor<f32>,
    pub levels: Vec<f64>,
    /// Index of the corpus image each crop came from.
    pub sources: Vec<usize>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Endless seeded stream of random crops, one level drawn uniformly per item.
pub struct PatchStream<'a> {
    corpus: &'a [Image],
    size: usize,
    batch: usize,
    levels: Vec<f64>,
    kind: DegradationKind,
    rng: ChaCha8Rng,
}

impl<'a> PatchStream<'a> {
    pub fn new(
        corpus: &'a [Image],
        size: usize,
        batch: usize,
        levels: &[f64],
        kind: DegradationKind,
        seed: u64,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(DurrError::EmptyCorpus);
        }
        if size == 0 || batch == 0 || levels.is_empty() {
            return Err(DurrError::InvalidArgument("patch size, batch and level list must be non-empty".into()));
        }
        for level in levels {
            kind.validate_level(*level)?;
        }
        if let Some((i, img)) = corpus.iter().enumerate().find(|(_, im)| im.width() < size || im.height() < size) {
            return Err(DurrError::Image(format!(
                "corpus image {i} is {}x{}, smaller than patch size {size}",
                img.width(),
                img.height()
            )));
        }
        Ok(Self {
            corpus,
            size,
            batch,
            levels: levels.to_vec(),
            kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// One crop: `(clean, degraded, level, source)`.
    pub fn next_item(&mut self) -> Result<(Image, Image, f64, usize)> {
        let source = self.rng.gen_range(0..self.corpus.len());
        let img = &self.corpus[source];
        let x = self.rng.gen_range(0..=img.width() - self.size);
        let y = self.rng.gen_range(0..=img.height() - self.size);
        let level = self.levels[self.rng.gen_range(0..self.levels.len())];
        let noise_seed = self.rng.gen();
        let clean = img.crop(x, y, self.size, self.size)?;
        let degraded = degrade(&clean, self.kind, level, noise_seed)?;
        Ok((clean, degraded, level, source))
    }

    pub fn next_batch(&mut self) -> Result<PatchBatch> {
        let mut clean = Vec::with_capacity(self.batch);
        let mut degraded = Vec::with_capacity(self.batch);
        let mut levels = Vec::with_capacity(self.batch);
        let mut sources = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let (c, d, level, source) = self.next_item()?;
            clean.push(c.to_tensor());
            degraded.push(d.to_tensor());
            levels.push(level);
            sources.push(source);
        }
        Ok(PatchBatch {
            clean: Tensor::stack_batch(&clean)?,
            degraded: Tensor::stack_batch(&degraded)?,
            levels,
            sources,
        })
    }
}

impl Iterator for PatchStream<'_> {
    type Item = Result<PatchBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_gives_constant_patches() {
        let corpus = vec![Image::constant(40, 36, 0.25)];
        let mut s = PatchStream::new(&corpus, 16, 4, &[20.0], DegradationKind::Jpeg, 1).unwrap();
        let b = s.next_batch().unwrap();
        assert_eq!(b.clean.shape(), &[4, 1, 16, 16]);
        assert!(b.clean.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn seeded_stream_repeats() {
        let corpus: Vec<Image> = (0..3).map(|i| Image::from_fn(20, 20, |x, y| ((x * y + i) % 7) as f32 / 7.0)).collect();
        let take = |seed| {
            PatchStream::new(&corpus, 8, 3, &[15.0, 25.0], DegradationKind::Gaussian, seed)
                .unwrap()
                .take(3)
                .map(|b| b.unwrap())
                .collect::<Vec<_>>()
        };
        let (a, b) = (take(9), take(9));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.degraded, y.degraded);
            assert_eq!(x.levels, y.levels);
            assert_eq!(x.sources, y.sources);
        }
    }

    #[test]
    fn level_frequencies_are_uniform() {
        let corpus = vec![Image::constant(8, 8, 0.5)];
        let levels = [10.0, 20.0, 30.0, 40.0];
        let mut s = PatchStream::new(&corpus, 8, 1, &levels, DegradationKind::Jpeg, 3).unwrap();
        let draws = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            let (_, _, level, _) = s.next_item().unwrap();
            counts[levels.iter().position(|&l| l == level).unwrap()] += 1;
        }
        let p = 0.25;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn rejects_bad_corpus() {
        assert!(matches!(
            PatchStream::new(&[], 8, 1, &[25.0], DegradationKind::Gaussian, 0),
            Err(DurrError::EmptyCorpus)
        ));
        let small = vec![Image::constant(6, 10, 0.0)];
        assert!(PatchStream::new(&small, 8, 1, &[25.0], DegradationKind::Gaussian, 0).is_err());
    }
}
