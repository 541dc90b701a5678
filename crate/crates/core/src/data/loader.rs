use cbamnet_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Label, Magnification, Manifest, Split};
use crate::error::{config_err, data_err, Error, Result};
use crate::preprocess::{finish, prepare, read_image, Image, PreprocessConfig};
use crate::rng::derive_seed;

/// One image after the deterministic preprocessing stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: String,
    pub image: Image,
    pub label: Label,
    pub magnification: Magnification,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSet {
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `(b, C, H, W)`
    pub x: Tensor,
    /// `(b,)` of 0/1
    pub labels: Tensor,
    pub magnifications: Vec<Magnification>,
    /// Positions in the owning [`LoadedSet`].
    pub indices: Vec<usize>,
}

/// Replicates a grey image across `channels`; colour images must already
/// have the requested count.
pub fn to_channels(img: Image, channels: usize) -> Result<Image> {
    match (img.channels(), channels) {
        (a, b) if a == b => Ok(img),
        (1, c) => {
            let pixels = img
                .pixels()
                .iter()
                .flat_map(|&p| std::iter::repeat_n(p, c))
                .collect();
            Image::new(img.height(), img.width(), c, pixels)
        }
        (a, b) => data_err(format!(
            "cannot convert a {a}-channel image to {b} channels"
        )),
    }
}

/// Reads and prepares every record in `split` (all records when `None`),
/// optionally restricted to one magnification.
pub fn load_selection(
    m: &Manifest,
    split: Option<Split>,
    magnification: Option<Magnification>,
    cfg: &PreprocessConfig,
    channels: usize,
) -> Result<LoadedSet> {
    cfg.validate()?;
    let chosen: Vec<_> = m
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == Some(s)))
        .filter(|r| magnification.is_none_or(|g| r.magnification == g))
        .collect();
    if chosen.is_empty() {
        let what = split.map_or("any split".to_string(), |s| format!("split {s}"));
        return data_err(format!("no records selected from {what}"));
    }
    let mut samples = Vec::with_capacity(chosen.len());
    for r in chosen {
        let img = read_image(m.absolute(r))?;
        samples.push(Sample {
            path: r.path.clone(),
            image: to_channels(prepare(&img, cfg)?, channels)?,
            label: r.label,
            magnification: r.magnification,
        });
    }
    Ok(LoadedSet { samples })
}

impl LoadedSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Visiting order: identity, or a seeded Fisher-Yates shuffle.
    pub fn order(&self, shuffle_seed: Option<u64>) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        idx
    }

    /// Stacks the given samples. With `augment_seed`, sample `i` is augmented
    /// with `derive_seed(augment_seed, i)`.
    pub fn batch(
        &self,
        indices: &[usize],
        cfg: &PreprocessConfig,
        augment_seed: Option<u64>,
    ) -> Result<Batch> {
        let mut data = Vec::new();
        let mut shape = None;
        for &i in indices {
            let t = finish(
                &self.samples[i].image,
                cfg,
                augment_seed.map(|s| derive_seed(s, i as u64)),
            );
            match &shape {
                None => shape = Some(t.shape().to_vec()),
                Some(s) if s.as_slice() != t.shape() => {
                    return Err(Error::Data(format!(
                        "{} has shape {:?}, batch has {s:?}",
                        self.samples[i].path,
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
            data.extend_from_slice(t.data());
        }
        let Some(s) = shape else {
            return data_err("empty batch");
        };
        let x = Tensor::new([vec![indices.len()], s].concat(), data)?;
        let labels = Tensor::from_fn(&[indices.len()], |k| {
            self.samples[indices[k]].label.index() as f64
        });
        Ok(Batch {
            x,
            labels,
            magnifications: indices
                .iter()
                .map(|&i| self.samples[i].magnification)
                .collect(),
            indices: indices.to_vec(),
        })
    }

    /// One pass over the set in `batch_size` chunks; the final batch may be
    /// short.
    pub fn batches<'a>(
        &'a self,
        batch_size: usize,
        shuffle_seed: Option<u64>,
        augment_seed: Option<u64>,
        cfg: &'a PreprocessConfig,
    ) -> Result<Batches<'a>> {
        if batch_size == 0 {
            return config_err("batch_size must be at least 1");
        }
        if self.is_empty() {
            return data_err("cannot batch an empty set");
        }
        Ok(Batches {
            set: self,
            order: self.order(shuffle_seed),
            pos: 0,
            batch_size,
            augment_seed,
            cfg,
        })
    }
}

pub struct Batches<'a> {
    set: &'a LoadedSet,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment_seed: Option<u64>,
    cfg: &'a PreprocessConfig,
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let chunk = &self.order[self.pos..end];
        self.pos = end;
        Some(self.set.batch(chunk, self.cfg, self.augment_seed))
    }
}

/// All batches of one shuffled pass over a manifest selection. Only the
/// training split is augmented.
pub fn batches(
    m: &Manifest,
    split: Split,
    magnification: Option<Magnification>,
    batch_size: usize,
    seed: u64,
    cfg: &PreprocessConfig,
    channels: usize,
) -> Result<Vec<Batch>> {
    let set = load_selection(m, Some(split), magnification, cfg, channels)?;
    let augment = (split == Split::Train).then(|| derive_seed(seed, 1));
    set.batches(batch_size, Some(derive_seed(seed, 0)), augment, cfg)?
        .collect()
}
