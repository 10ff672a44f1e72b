use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::ImageShape;

/// Zero padding used by pad-and-crop: 4 pixels on 32-pixel images, scaled
/// down for smaller images.
pub fn crop_padding(shape: ImageShape) -> usize {
    (shape.height.min(shape.width) / 8).min(4)
}

/// Random horizontal flip followed by a random crop of the zero-padded image.
pub fn augment_image(image: &[f32], shape: ImageShape, rng: &mut impl Rng) -> Vec<f32> {
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let flip = rng.random_bool(0.5);
    let pad = crop_padding(shape) as i64;
    let dy = rng.random_range(-pad..=pad) as isize;
    let dx = rng.random_range(-pad..=pad) as isize;
    let mut out = vec![0.0f32; image.len()];
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize + dx;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let sx = if flip { w - 1 - sx as usize } else { sx as usize };
            let src = (sy as usize * w + sx) * c;
            let dst = (y * w + x) * c;
            out[dst..dst + c].copy_from_slice(&image[src..src + c]);
        }
    }
    out
}

/// Resizes `dataset` to exactly `n` samples: a uniform subsample when it is
/// large enough, otherwise the whole dataset followed by augmented copies.
pub fn resize_to(dataset: &LabeledDataset, n: usize, seed: u64, augment: bool) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if n <= dataset.len() {
        let mut picks = sample(&mut rng, dataset.len(), n).into_vec();
        picks.sort_unstable();
        return Ok(dataset.select(&picks));
    }
    if !augment {
        return Err(Error::InvalidConfig(format!(
            "need {n} samples but only {} exist and augmentation is disabled",
            dataset.len()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("cannot augment an empty dataset".into()));
    }
    let mut out = dataset.clone();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let shape = dataset.shape();
    let mut k = 0;
    while out.len() < n {
        if k % order.len() == 0 {
            order.shuffle(&mut rng);
        }
        let src = order[k % order.len()];
        let row = dataset.images().row(src);
        let image = augment_image(row.as_slice().expect("standard layout"), shape, &mut rng);
        out.push_augmented(&image, dataset.labels()[src], dataset.indices()[src]);
        k += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn images(n: usize) -> LabeledDataset {
        let shape = ImageShape::new(8, 8, 3);
        let x = Array2::from_shape_fn((n, shape.len()), |(i, j)| ((i * 31 + j) % 97) as f32 / 97.0);
        let labels = (0..n).map(|i| i % 4).collect();
        LabeledDataset::new("img", 4, shape, x, labels).unwrap()
    }

    #[test]
    fn subsample_branch() {
        let d = images(40);
        let r = resize_to(&d, 10, 1, false).unwrap();
        assert_eq!(r.len(), 10);
        assert!(r.augmented().iter().all(|a| !a));
    }

    #[test]
    fn augment_branch_counts_and_labels() {
        let d = images(50);
        let r = resize_to(&d, 120, 1, true).unwrap();
        assert_eq!(r.len(), 120);
        assert_eq!(r.augmented().iter().filter(|&&a| a).count(), 70);
        for (i, (&idx, &y)) in r.indices().iter().zip(r.labels()).enumerate() {
            assert_eq!(d.labels()[idx], y, "sample {i} changed label");
        }
        assert!(r.images().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn growing_without_augmentation_fails() {
        assert!(resize_to(&images(5), 6, 0, false).is_err());
    }

    #[test]
    fn resize_is_deterministic() {
        let d = images(30);
        assert_eq!(resize_to(&d, 75, 4, true).unwrap(), resize_to(&d, 75, 4, true).unwrap());
    }

    #[test]
    fn flip_without_padding_mirrors_columns() {
        let shape = ImageShape::new(1, 3, 1);
        let img = [0.1f32, 0.2, 0.3];
        let mut seen_flip = false;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let out = augment_image(&img, shape, &mut rng);
            assert!(out == img || out == [0.3, 0.2, 0.1]);
            seen_flip |= out == [0.3, 0.2, 0.1];
        }
        assert!(seen_flip);
    }
}
