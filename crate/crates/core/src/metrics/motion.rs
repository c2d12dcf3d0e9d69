//! Temporal motion feature. Still images have no predecessor, so the
//! single-frame feature is identically zero.

use super::filter::{gaussian_taps, PadMode, Separable};
use ndarray::{Array2, ArrayView2};

/// Motion of a single still frame: always 0.
pub fn motion_feature(_frame: ArrayView2<'_, f64>) -> f64 {
    0.0
}

/// `motion2` over a frame sequence: per frame, the smaller of the mean
/// absolute differences of blurred frames to its two neighbours, 0 for the first.
pub fn motion2_sequence(frames: &[Array2<f64>]) -> Vec<f64> {
    let blur = Separable::symmetric(gaussian_taps(5, 1.0), 2, 1, PadMode::Vmaf);
    let blurred: Vec<Array2<f64>> = frames.iter().map(|f| blur.apply(f.view())).collect();
    let sad = |a: &Array2<f64>, b: &Array2<f64>| (a - b).mapv(f64::abs).mean().unwrap_or(0.0);
    let prev: Vec<f64> = (0..blurred.len())
        .map(|i| if i == 0 { 0.0 } else { sad(&blurred[i], &blurred[i - 1]) })
        .collect();
    (0..prev.len())
        .map(|i| match i {
            0 => 0.0,
            i if i + 1 == prev.len() => prev[i],
            i => prev[i].min(prev[i + 1]),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn stills_have_zero_motion() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            let f = Array2::from_shape_fn((16, 16), |_| rng.random::<f64>() * 255.0);
            assert_eq!(motion_feature(f.view()), 0.0);
        }
    }

    #[test]
    fn repeated_frames_have_zero_motion() {
        let f = Array2::from_shape_fn((16, 16), |(y, x)| (x * y) as f64);
        let m = motion2_sequence(&[f.clone(), f.clone(), f]);
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shifted_frames_move() {
        let a = Array2::from_shape_fn((16, 16), |(_, x)| (x * 10) as f64);
        let b = a.mapv(|v| v + 5.0);
        let m = motion2_sequence(&[a, b]);
        assert_eq!(m[0], 0.0);
        assert!((m[1] - 5.0).abs() < 1e-9);
    }
}
