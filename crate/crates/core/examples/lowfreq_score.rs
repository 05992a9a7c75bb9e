//! Low-frequency score of a few synthetic images: smooth content scores
//! near zero, fine texture scores high; 20 is the classification boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajforge::localize::{
    is_low_frequency, lowfreq_score, read_pgm, write_pgm, GrayImage, DEFAULT_CUTOFF_FRACTION,
};

fn main() -> trajforge::Result<()> {
    let (w, h) = (128, 96);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images = [
        ("flat", GrayImage::from_fn(w, h, |_, _| 128.0)?),
        (
            "gradient",
            GrayImage::from_fn(w, h, |x, y| 60.0 + x as f64 + 0.5 * y as f64)?,
        ),
        (
            "stripes",
            GrayImage::from_fn(w, h, |x, _| if (x / 2) % 2 == 0 { 40.0 } else { 210.0 })?,
        ),
        (
            "noise",
            GrayImage::new(
                w,
                h,
                (0..w * h).map(|_| rng.random_range(0.0..255.0)).collect(),
            )?,
        ),
    ];
    let dir = std::env::temp_dir().join("trajforge_lowfreq_example");
    std::fs::create_dir_all(&dir)?;
    println!("{:<10} {:>8}  low-frequency", "image", "score");
    for (name, img) in &images {
        let path = dir.join(format!("{name}.pgm"));
        write_pgm(img, &path)?;
        let score = lowfreq_score(&read_pgm(&path)?, DEFAULT_CUTOFF_FRACTION);
        println!("{name:<10} {score:>8.3}  {}", is_low_frequency(score));
    }
    println!("images written to {}", dir.display());
    Ok(())
}
