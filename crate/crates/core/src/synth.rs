//! Deterministic synthetic luma content for tests, benchmarks and demos.
//!
//! Frames mix band-limited noise with a roughly 1/f spectrum and a handful of
//! soft-edged shapes, which gives VIF and ADM both texture and edges to work
//! with. Values stay inside `[16, 235]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kernels, Padding, Plane};

fn smooth_noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize, cell: usize) -> Plane {
    let gr = rows / cell + 2;
    let gc = cols / cell + 2;
    let grid: Vec<f64> = (0..gr * gc).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let fade = |t: f64| t * t * (3.0 - 2.0 * t);
    Plane::from_fn(rows, cols, |r, c| {
        let fy = r as f64 / cell as f64;
        let fx = c as f64 / cell as f64;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (fade(fy - y0 as f64), fade(fx - x0 as f64));
        let g = |y: usize, x: usize| grid[y * gc + x];
        let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
        let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// A `rows x cols` natural-looking frame determined by `seed`.
pub fn natural_frame(rows: usize, cols: usize, seed: u64) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Plane::zeros(rows, cols);
    for octave in 0..6 {
        let cell = 1usize << (6 - octave);
        let amp = 0.35 * cell as f64;
        let layer = smooth_noise(&mut rng, rows, cols, cell);
        img.add_assign(&layer.scale(amp));
    }
    // fine grain
    img.add_assign(&Plane::from_fn(rows, cols, |_, _| rng.gen_range(-0.6..0.6)));

    let shapes = 6 + (rows * cols) / 1024;
    for _ in 0..shapes.min(60) {
        let cy = rng.gen_range(0.0..rows as f64);
        let cx = rng.gen_range(0.0..cols as f64);
        let radius = rng.gen_range(3.0..(rows.min(cols) as f64 / 3.0).max(4.0));
        let level = rng.gen_range(-40.0..40.0);
        let square = rng.gen_bool(0.4);
        img = Plane::from_fn(rows, cols, |r, c| {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let dist = if square {
                dy.abs().max(dx.abs())
            } else {
                dy.hypot(dx)
            };
            let inside = ((radius - dist) / 1.2).clamp(-1.0, 1.0) * 0.5 + 0.5;
            img.get(r, c) + level * inside
        });
    }

    let lo = img.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img
        .as_slice()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    img.map(|v| 16.0 + (v - lo) / span * (235.0 - 16.0))
}

/// `count` frames of a slow diagonal pan across one larger canvas.
pub fn panning_sequence(rows: usize, cols: usize, count: usize, seed: u64) -> Vec<Plane> {
    let margin = 2 * count + 2;
    let canvas = natural_frame(rows + margin, cols + margin, seed);
    (0..count)
        .map(|i| {
            canvas
                .crop(i, 2 * i, rows, cols)
                .expect("pan stays inside canvas")
        })
        .collect()
}

/// Adds uniform noise of the given standard deviation.
pub fn add_noise(frame: &Plane, std_dev: f64, seed: u64) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_width = std_dev * 3f64.sqrt();
    frame.map(|v| v + rng.gen_range(-half_width..half_width))
}

/// 7x7 unsharp mask (`sigma = 1.4`) with amplification `alpha`.
pub fn unsharp(frame: &Plane, alpha: f64) -> Plane {
    let k = crate::filter_lab::unsharp_kernel(7, 1.4, alpha).expect("valid unsharp parameters");
    kernels::conv2d(frame, k.weights(), Padding::Reflect).expect("frame larger than kernel")
}

/// Gaussian blur with a `size`-tap window.
pub fn blur(frame: &Plane, size: usize, sigma: f64) -> Plane {
    let t = crate::vif::gaussian_taps(size, sigma);
    let k = Plane::from_fn(size, size, |r, c| t[r] * t[c]);
    kernels::conv2d(frame, &k, Padding::Reflect).expect("frame larger than kernel")
}

#[cfg(test)]
pub(crate) fn fixture_frames() -> Vec<Plane> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/testdata/natural_256x256.yuv");
    let format = crate::media::YuvFormat::new(256, 256).unwrap();
    let video = crate::media::RawVideo::open(path, format).unwrap();
    video.read_luma(0..video.frame_count).unwrap()
}

/// Three `side`-pixel crops of one fixture image, panned two pixels apart.
#[cfg(test)]
pub(crate) fn fixture_pan(image: usize, side: usize) -> Vec<Plane> {
    let f = &fixture_frames()[image];
    (0..3)
        .map(|i| f.crop(32, 32 + 2 * i, side, side).unwrap())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_are_deterministic_and_in_range() {
        let a = natural_frame(40, 50, 7);
        let b = natural_frame(40, 50, 7);
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|&v| (16.0..=235.0).contains(&v)));
        assert_ne!(a, natural_frame(40, 50, 8));
    }

    #[test]
    fn pan_moves() {
        let seq = panning_sequence(32, 32, 3, 1);
        assert_eq!(seq.len(), 3);
        assert_ne!(seq[0], seq[1]);
    }
}
