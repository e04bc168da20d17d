//! Synthetic emitters, phase-rotation augmentation, sample pools and the
//! binary I/Q file format.
//!
//! Complex samples are `num_complex::Complex64`. The network sees each record
//! as a `[2, L]` real tensor (I row, Q row).

mod io;
mod pools;
mod simulate;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use io::{decode_iq, encode_iq, load_iq_file, save_iq_file, IqFile, IqFileHeader};
pub use pools::{DatasetPools, PoolSplit};
pub use simulate::{
    generate_dataset, generate_records, qpsk_payload, simulate_burst, Burst, ChannelConfig, EmitterProfile,
    ImpairmentRanges, SimulationConfig,
};

/// Rotation angles of the two augmented views (s̃, s̄).
pub const VIEW_ANGLES: [f64; 2] = [0.5 * std::f64::consts::PI, std::f64::consts::PI];

/// One complex baseband record.
#[derive(Debug, Clone, PartialEq)]
pub struct IqRecord {
    pub samples: Vec<Complex64>,
    /// Annotation visible to training; equals `emitter_truth` when present.
    pub label: Option<usize>,
    /// Ground truth kept for the annotation oracle.
    pub emitter_truth: Option<usize>,
}

impl IqRecord {
    pub fn new(samples: Vec<Complex64>, truth: Option<usize>) -> Self {
        Self {
            samples,
            label: truth,
            emitter_truth: truth,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same record with the annotation hidden.
    pub fn unlabeled(mut self) -> Self {
        self.label = None;
        self
    }
}

/// Multiplies every sample by `e^{jθ}`.
pub fn augment(record: &IqRecord, theta: f64) -> IqRecord {
    let rot = Complex64::from_polar(1.0, theta);
    IqRecord {
        samples: record.samples.iter().map(|s| s * rot).collect(),
        label: record.label,
        emitter_truth: record.emitter_truth,
    }
}

/// Stacks records rotated by `theta` into a `[B, 2, L]` network input.
pub fn view_batch<'a>(records: impl IntoIterator<Item = &'a IqRecord>, theta: f64) -> Result<Tensor> {
    let rot = Complex64::from_polar(1.0, theta);
    let mut data = Vec::new();
    let mut count = 0;
    let mut length = None;
    for r in records {
        let l = *length.get_or_insert(r.len());
        if r.len() != l {
            return Err(Error::Shape {
                op: "view_batch",
                left: vec![l],
                right: vec![r.len()],
            });
        }
        data.extend(r.samples.iter().map(|s| (s * rot).re));
        data.extend(r.samples.iter().map(|s| (s * rot).im));
        count += 1;
    }
    let l = length.ok_or_else(|| Error::config("empty batch"))?;
    Tensor::new(vec![count, 2, l], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn close(a: Complex64, b: Complex64) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn rotation_examples() {
        let r = IqRecord::new(vec![Complex64::new(1.0, 0.0)], Some(2));
        assert!(close(augment(&r, PI).samples[0], Complex64::new(-1.0, 0.0)));
        let quarter = augment(&r, 0.5 * PI);
        assert!(close(quarter.samples[0], Complex64::new(0.0, 1.0)));
        assert_eq!(quarter.label, Some(2));
        assert_eq!(quarter.emitter_truth, Some(2));
    }

    #[test]
    fn view_batch_layout() {
        let r = IqRecord::new(vec![Complex64::new(1.0, 2.0), Complex64::new(3.0, 4.0)], None);
        let t = view_batch([&r, &r], 0.0).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(&t.data()[..4], &[1.0, 3.0, 2.0, 4.0]);
        let short = IqRecord::new(vec![Complex64::new(0.0, 0.0)], None);
        assert!(view_batch([&r, &short], 0.0).is_err());
    }

    fn record_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..64)
    }

    proptest! {
        #[test]
        fn rotation_preserves_magnitude(samples in record_strategy(), theta in -10.0..10.0f64) {
            let r = IqRecord::new(samples.iter().map(|&(a, b)| Complex64::new(a, b)).collect(), None);
            let s = augment(&r, theta);
            for (x, y) in r.samples.iter().zip(&s.samples) {
                prop_assert!((x.norm() - y.norm()).abs() < 1e-12);
            }
        }

        #[test]
        fn rotations_compose(samples in record_strategy(), t1 in -4.0..4.0f64, t2 in -4.0..4.0f64) {
            let r = IqRecord::new(samples.iter().map(|&(a, b)| Complex64::new(a, b)).collect(), None);
            let twice = augment(&augment(&r, t1), t2);
            let once = augment(&r, t1 + t2);
            for (x, y) in twice.samples.iter().zip(&once.samples) {
                prop_assert!((x - y).norm() < 1e-12);
            }
        }
    }
}
