//! Synthetic flood-like samples shared by the integration tests.
#![allow(dead_code)]

use floodforensics::data::{FloodMask, ImageTensor, Normalization, Preprocessed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-pixel uniform noise texture.
pub fn noise_image(size: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let data: Vec<f32> = (0..size * size * 3).map(|_| rng.random::<f32>()).collect();
    ImageTensor::new(size, size, data, floodforensics::data::ValueDomain::Unit).unwrap()
}

/// Noise texture with a flat square planted on a `grid`-aligned position;
/// the square is the manipulation mask.
pub fn planted_image(size: usize, side: usize, grid: usize, rng: &mut ChaCha8Rng) -> (ImageTensor, FloodMask) {
    let cells = (size - side) / grid;
    let y0 = rng.random_range(0..=cells) * grid;
    let x0 = rng.random_range(0..=cells) * grid;
    let colour = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let base = noise_image(size, rng);
    let inside = move |y: usize, x: usize| (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x);
    let img = ImageTensor::from_fn(size, size, |y, x| {
        if inside(y, x) {
            colour
        } else {
            [base.get(y, x, 0), base.get(y, x, 1), base.get(y, x, 2)]
        }
    })
    .unwrap();
    (img, FloodMask::from_fn(size, size, inside))
}

/// `n_real` noise images with empty masks and `n_fake` planted images,
/// normalized for the model.
pub fn planted_set(n_real: usize, n_fake: usize, size: usize, seed: u64) -> Vec<Preprocessed> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = Normalization::default();
    let mut out = Vec::new();
    for _ in 0..n_real {
        out.push(Preprocessed {
            image: norm.normalize(&noise_image(size, &mut rng)).unwrap(),
            mask: Some(FloodMask::zeros(size, size)),
            label: 0,
        });
    }
    for _ in 0..n_fake {
        let (img, mask) = planted_image(size, size * 3 / 8, 4, &mut rng);
        out.push(Preprocessed {
            image: norm.normalize(&img).unwrap(),
            mask: Some(mask),
            label: 1,
        });
    }
    out
}

/// Writes `n` images (and masks for fakes) as PNG files under `dir`.
pub fn write_png_set(dir: &std::path::Path, n: usize, fake: bool, size: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(dir.join("images")).unwrap();
    std::fs::create_dir_all(dir.join("masks")).unwrap();
    for i in 0..n {
        let (img, mask) = if fake {
            planted_image(size, size / 2, 4, &mut rng)
        } else {
            (noise_image(size, &mut rng), FloodMask::from_fn(size, size, |y, _| y >= size * 3 / 4))
        };
        img.to_rgb8().save(dir.join("images").join(format!("img_{i:03}.png"))).unwrap();
        mask.to_gray8().save(dir.join("masks").join(format!("img_{i:03}.png"))).unwrap();
    }
}
