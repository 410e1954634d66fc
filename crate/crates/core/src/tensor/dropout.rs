use super::{Result, Tensor, TensorError};

/// A 0/1 keep-mask that is a pure function of `(seed, shape, rate)`.
///
/// Element `i` is kept iff a counter-based hash of `(seed, i)` maps to a
/// uniform value `>= rate`, so any worker (or any μ-batch slice of the same
/// global activation) regenerates exactly the same bits without shared state.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    seed: u64,
    rate: f64,
    mask: Tensor,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DropoutMask {
    pub fn generate(seed: u64, shape: &[usize], rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidRate(rate));
        }
        let mut mask = Tensor::zeros(shape);
        for (i, m) in mask.data_mut().iter_mut().enumerate() {
            let h = splitmix64(seed ^ splitmix64(i as u64));
            let u = (h >> 11) as f64 / (1u64 << 53) as f64;
            *m = if u >= rate { 1.0 } else { 0.0 };
        }
        Ok(Self { seed, rate, mask })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    /// Inverted-dropout scale applied to kept elements.
    pub fn keep_scale(&self) -> f64 {
        1.0 / (1.0 - self.rate)
    }

    /// Rows `[start, start + count)` of the mask, for μ-batch slices of a
    /// globally-indexed activation.
    pub fn rows_slice(&self, start: usize, count: usize) -> Result<DropoutMask> {
        Ok(Self {
            seed: self.seed,
            rate: self.rate,
            mask: self.mask.rows_slice(start, count)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_rate_zero_keeps_everything() {
        let a = DropoutMask::generate(7, &[8, 5], 0.3).unwrap();
        let b = DropoutMask::generate(7, &[8, 5], 0.3).unwrap();
        assert_eq!(a, b);
        let c = DropoutMask::generate(8, &[8, 5], 0.3).unwrap();
        assert_ne!(a.mask(), c.mask());
        let keep = DropoutMask::generate(1, &[4, 4], 0.0).unwrap();
        assert!(keep.mask().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn invalid_rate_rejected() {
        assert!(DropoutMask::generate(1, &[2], 1.0).is_err());
        assert!(DropoutMask::generate(1, &[2], -0.1).is_err());
    }

    #[test]
    fn drop_fraction_close_to_rate() {
        let m = DropoutMask::generate(42, &[100, 100], 0.25).unwrap();
        let dropped = m.mask().data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e4;
        assert!((dropped - 0.25).abs() < 0.02, "{dropped}");
    }

    #[test]
    fn row_slice_matches_global_positions() {
        let m = DropoutMask::generate(3, &[6, 4], 0.5).unwrap();
        let s = m.rows_slice(2, 2).unwrap();
        assert_eq!(s.mask().data(), &m.mask().data()[8..16]);
    }
}
