//! Acoustic feature pipeline: delta/delta-delta augmentation, frame
//! stacking with skipping, and DropFrame augmentation.
//!
//! With 40-dimensional base frames every 10 ms the pipeline produces
//! 240-dimensional frames every 20 ms.

use ndarray::{s, Array2, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time-major matrix of acoustic frames for one utterance (`T × D`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Array2<f64>,
    frame_period_ms: f64,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f64>, frame_period_ms: f64) -> Result<Self> {
        let (t, d) = frames.dim();
        if t == 0 || d == 0 {
            return Err(Error::Data(format!("feature sequence must be non-empty, got {t}x{d}")));
        }
        if !(frame_period_ms > 0.0 && frame_period_ms.is_finite()) {
            return Err(Error::Data(format!("frame period must be positive, got {frame_period_ms}")));
        }
        if let Some(pos) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite feature value at frame {}, dim {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self {
            frames,
            frame_period_ms,
        })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    /// Always false for a constructed sequence; kept for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame_period_ms(&self) -> f64 {
        self.frame_period_ms
    }
}

/// DropFrame settings: keep at most `max_len` frames per utterance while
/// training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropFrameConfig {
    pub max_len: usize,
    pub enabled: bool,
}

impl DropFrameConfig {
    pub fn new(max_len: usize, enabled: bool) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::Config("DropFrame length must be >= 1".into()));
        }
        Ok(Self { max_len, enabled })
    }

    pub fn disabled() -> Self {
        Self {
            max_len: usize::MAX,
            enabled: false,
        }
    }
}

/// Regression deltas with window `window` and edge replication, applied
/// once (Δ) and again on the result (ΔΔ). Output is `[base | Δ | ΔΔ]`.
pub fn compute_deltas(seq: &FeatureSequence, window: usize) -> Result<FeatureSequence> {
    if window == 0 {
        return Err(Error::Config("delta window must be >= 1".into()));
    }
    let delta = regression_delta(&seq.frames, window);
    let delta2 = regression_delta(&delta, window);
    let frames = ndarray::concatenate(Axis(1), &[seq.frames.view(), delta.view(), delta2.view()])
        .expect("equal row counts");
    FeatureSequence::new(frames, seq.frame_period_ms)
}

fn regression_delta(x: &Array2<f64>, window: usize) -> Array2<f64> {
    let (t, d) = x.dim();
    let denom = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let last = t as isize - 1;
    let at = |i: isize| x.row(i.clamp(0, last) as usize);
    let mut out = Array2::zeros((t, d));
    for ti in 0..t as isize {
        let mut row = out.row_mut(ti as usize);
        for n in 1..=window as isize {
            let w = n as f64;
            row.scaled_add(w, &at(ti + n));
            row.scaled_add(-w, &at(ti - n));
        }
        row /= denom;
    }
    out
}

/// Stack frame pairs `(2t, 2t+1)` and keep every second stacked frame.
/// Odd lengths replicate the last frame. Doubles dimension and period.
pub fn stack_and_skip(seq: &FeatureSequence) -> Result<FeatureSequence> {
    let (t, d) = seq.frames.dim();
    let out_len = t.div_ceil(2);
    let mut frames = Array2::zeros((out_len, 2 * d));
    for o in 0..out_len {
        let a = 2 * o;
        let b = (2 * o + 1).min(t - 1);
        frames.slice_mut(s![o, ..d]).assign(&seq.frames.row(a));
        frames.slice_mut(s![o, d..]).assign(&seq.frames.row(b));
    }
    FeatureSequence::new(frames, seq.frame_period_ms * 2.0)
}

/// Deltas followed by stacking; `D → 6D` and frame period doubled.
pub fn pipeline(seq: &FeatureSequence, window: usize) -> Result<FeatureSequence> {
    stack_and_skip(&compute_deltas(seq, window)?)
}

/// Randomly keep `max_len` frames (uniform, without replacement, original
/// order preserved) when enabled and the sequence is longer than that.
pub fn drop_frames<R: Rng + ?Sized>(seq: &FeatureSequence, cfg: &DropFrameConfig, rng: &mut R) -> FeatureSequence {
    let t = seq.len();
    if !cfg.enabled || t <= cfg.max_len {
        return seq.clone();
    }
    let mut keep = index::sample(rng, t, cfg.max_len).into_vec();
    keep.sort_unstable();
    FeatureSequence {
        frames: seq.frames.select(Axis(0), &keep),
        frame_period_ms: seq.frame_period_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(frames: Array2<f64>) -> FeatureSequence {
        FeatureSequence::new(frames, 10.0).unwrap()
    }

    fn ramp(t: usize, v: &Array1<f64>) -> FeatureSequence {
        let mut f = Array2::zeros((t, v.len()));
        for (i, mut row) in f.rows_mut().into_iter().enumerate() {
            row.assign(&(v * i as f64));
        }
        seq(f)
    }

    #[test]
    fn constant_input_gives_zero_deltas() {
        let f = Array2::from_shape_fn((7, 3), |(_, j)| j as f64 + 0.5);
        let out = compute_deltas(&seq(f), 2).unwrap();
        assert_eq!(out.dim(), 9);
        assert!(out.frames().slice(s![.., 3..]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_frame_deltas_vanish() {
        let out = compute_deltas(&seq(array![[1.0, -2.0, 3.5]]), 2).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out.frames().slice(s![.., 3..]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ramp_interior_delta_equals_slope() {
        let v = array![0.5, -1.25, 2.0];
        let out = compute_deltas(&ramp(9, &v), 2).unwrap();
        for t in 2..7 {
            let d = out.frames().slice(s![t, 3..6]);
            for (a, b) in d.iter().zip(v.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let err = FeatureSequence::new(array![[1.0, f64::NAN]], 10.0).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn paper_scale_dimensions() {
        let f = Array2::from_shape_fn((10, 40), |(i, j)| ((i * 40 + j) as f64).sin());
        let out = pipeline(&seq(f), 2).unwrap();
        assert_eq!(out.dim(), 240);
        assert_eq!(out.len(), 5);
        assert_eq!(out.frame_period_ms(), 20.0);
    }

    #[test]
    fn stack_single_frame_duplicates() {
        let out = stack_and_skip(&seq(array![[1.0, 2.0]])).unwrap();
        assert_eq!(out.frames(), &array![[1.0, 2.0, 1.0, 2.0]]);
    }

    #[test]
    fn stack_odd_length_replicates_last() {
        let out = stack_and_skip(&seq(array![[1.0], [2.0], [3.0]])).unwrap();
        assert_eq!(out.frames(), &array![[1.0, 2.0], [3.0, 3.0]]);
    }

    #[test]
    fn drop_frames_short_sequence_untouched() {
        let s = seq(Array2::from_shape_fn((100, 2), |(i, j)| (i * 2 + j) as f64));
        let cfg = DropFrameConfig::new(256, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(drop_frames(&s, &cfg, &mut rng), s);
    }

    #[test]
    fn drop_frames_disabled_is_identity() {
        let s = seq(Array2::from_shape_fn((300, 2), |(i, j)| (i * 2 + j) as f64));
        let cfg = DropFrameConfig::new(256, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(drop_frames(&s, &cfg, &mut rng).len(), 300);
    }

    #[test]
    fn drop_frames_long_sequence_keeps_ordered_subset() {
        let s = seq(Array2::from_shape_fn((300, 1), |(i, _)| i as f64));
        let cfg = DropFrameConfig::new(256, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = drop_frames(&s, &cfg, &mut rng);
        assert_eq!(out.len(), 256);
        let col: Vec<f64> = out.frames().column(0).to_vec();
        assert!(col.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_dropframe_length_rejected() {
        assert!(DropFrameConfig::new(0, true).is_err());
    }

    proptest! {
        #[test]
        fn pipeline_dimension_contract(t in 1usize..20, d in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
            let out = pipeline(&seq(f), 2).unwrap();
            prop_assert_eq!(out.dim(), 6 * d);
            prop_assert_eq!(out.len(), t.div_ceil(2));
        }

        #[test]
        fn deltas_are_linear(t in 1usize..12, a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_fn((t, 3), |_| rng.random_range(-1.0..1.0));
            let y = Array2::from_shape_fn((t, 3), |_| rng.random_range(-1.0..1.0));
            let lhs = compute_deltas(&seq(&x * a + &y * b), 2).unwrap();
            let rhs = compute_deltas(&seq(x), 2).unwrap().frames() * a
                + compute_deltas(&seq(y), 2).unwrap().frames() * b;
            for (l, r) in lhs.frames().iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-10);
            }
        }

        #[test]
        fn drop_frames_is_reproducible_subsequence(t in 1usize..200, l in 1usize..64, seed in 0u64..1000) {
            let s = seq(Array2::from_shape_fn((t, 2), |(i, j)| (2 * i + j) as f64));
            let cfg = DropFrameConfig::new(l, true).unwrap();
            let a = drop_frames(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = drop_frames(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.len(), t.min(l));
            let firsts: Vec<f64> = a.frames().column(0).to_vec();
            for w in firsts.windows(2) {
                prop_assert!(w[0] < w[1]);
            }
            for row in a.frames().rows() {
                let src = (row[0] / 2.0) as usize;
                prop_assert_eq!(row.to_vec(), s.frames().row(src).to_vec());
            }
        }
    }
}
