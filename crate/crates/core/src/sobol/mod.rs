//! Sobol low-discrepancy sequences, used to parameterize actuator schedules.
//!
//! Gray-code construction over 32-bit direction numbers with the Joe-Kuo
//! primitive polynomials and initial values for up to 64 dimensions. The
//! all-zeros first point of the raw sequence is skipped, so the first emitted
//! 1-D point is 0.5.

mod table;

use crate::error::{CoreError, Result};

const BITS: usize = 32;

/// A deterministic Sobol point generator of fixed dimension.
#[derive(Debug, Clone)]
pub struct SobolSequence {
    dimension: usize,
    directions: Vec<[u32; BITS]>,
    state: Vec<u32>,
    /// Count of points emitted so far (equals the Gray-code index).
    index: u64,
}

impl SobolSequence {
    pub fn new(dimension: usize) -> Result<Self> {
        if dimension == 0 || dimension > table::MAX_DIMENSION {
            return Err(CoreError::Parameter {
                name: "dimension",
                reason: format!(
                    "must lie in 1..={}, got {dimension}",
                    table::MAX_DIMENSION
                ),
            });
        }
        let mut directions = Vec::with_capacity(dimension);
        directions.push(first_dimension_directions());
        for d in 1..dimension {
            directions.push(dimension_directions(
                table::POLY[d - 1],
                &table::M_INIT[d - 1],
            ));
        }
        Ok(SobolSequence {
            dimension,
            directions,
            state: vec![0; dimension],
            index: 0,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Next point in `[0, 1)^d`.
    pub fn next_point(&mut self) -> Vec<f64> {
        self.index += 1;
        let bit = self.index.trailing_zeros() as usize;
        debug_assert!(bit < BITS, "sequence exhausted 2^32 points");
        for (d, x) in self.state.iter_mut().enumerate() {
            *x ^= self.directions[d][bit];
        }
        self.state
            .iter()
            .map(|&x| x as f64 / (1u64 << BITS) as f64)
            .collect()
    }
}

/// Dimension 1 uses m_k = 1 for every k.
fn first_dimension_directions() -> [u32; BITS] {
    let mut v = [0u32; BITS];
    for (k, slot) in v.iter_mut().enumerate() {
        *slot = 1 << (BITS - 1 - k);
    }
    v
}

/// Expands the initial values m_1..m_s into all 32 direction numbers via the
/// recurrence defined by the primitive polynomial.
fn dimension_directions(poly: u32, m_init: &[u32; 9]) -> [u32; BITS] {
    let degree = (31 - poly.leading_zeros()) as usize;
    let mut v = [0u32; BITS];
    for k in 0..degree {
        debug_assert!(m_init[k] % 2 == 1, "initial direction values must be odd");
        v[k] = m_init[k] << (BITS - 1 - k);
    }
    for k in degree..BITS {
        let mut vk = v[k - degree] ^ (v[k - degree] >> degree);
        for j in 1..degree {
            if (poly >> (degree - j)) & 1 == 1 {
                vk ^= v[k - j];
            }
        }
        v[k] = vk;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_prefix_matches_base2_values() {
        let mut seq = SobolSequence::new(1).unwrap();
        let got: Vec<f64> = (0..8).map(|_| seq.next_point()[0]).collect();
        let expected = [0.5, 0.75, 0.25, 0.375, 0.875, 0.625, 0.125, 0.1875];
        assert_eq!(got, expected);
    }

    /// First 16 points in 8 dimensions, frozen from an independent
    /// implementation of the same Joe-Kuo table.
    #[test]
    fn eight_dimensional_prefix_matches_frozen_oracle() {
        let expected: [[f64; 8]; 16] = [
            [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
            [0.75, 0.25, 0.25, 0.25, 0.75, 0.75, 0.25, 0.75],
            [0.25, 0.75, 0.75, 0.75, 0.25, 0.25, 0.75, 0.25],
            [0.375, 0.375, 0.625, 0.875, 0.375, 0.125, 0.375, 0.875],
            [0.875, 0.875, 0.125, 0.375, 0.875, 0.625, 0.875, 0.375],
            [0.625, 0.125, 0.875, 0.625, 0.625, 0.875, 0.125, 0.125],
            [0.125, 0.625, 0.375, 0.125, 0.125, 0.375, 0.625, 0.625],
            [0.1875, 0.3125, 0.9375, 0.4375, 0.5625, 0.3125, 0.4375, 0.9375],
            [0.6875, 0.8125, 0.4375, 0.9375, 0.0625, 0.8125, 0.9375, 0.4375],
            [0.9375, 0.0625, 0.6875, 0.1875, 0.3125, 0.5625, 0.1875, 0.1875],
            [0.4375, 0.5625, 0.1875, 0.6875, 0.8125, 0.0625, 0.6875, 0.6875],
            [0.3125, 0.1875, 0.3125, 0.5625, 0.9375, 0.4375, 0.0625, 0.0625],
            [0.8125, 0.6875, 0.8125, 0.0625, 0.4375, 0.9375, 0.5625, 0.5625],
            [0.5625, 0.4375, 0.0625, 0.8125, 0.1875, 0.6875, 0.3125, 0.8125],
            [0.0625, 0.9375, 0.5625, 0.3125, 0.6875, 0.1875, 0.8125, 0.3125],
            [0.09375, 0.46875, 0.46875, 0.65625, 0.28125, 0.96875, 0.53125, 0.84375],
        ];
        let mut seq = SobolSequence::new(8).unwrap();
        for (i, row) in expected.iter().enumerate() {
            let got = seq.next_point();
            assert_eq!(&got[..], &row[..], "point {}", i + 1);
        }
    }

    /// Brute-force reference: point i is the XOR of direction numbers over
    /// the set bits of gray(i), computed without the incremental state.
    #[test]
    fn gray_code_stream_equals_bitwise_reference() {
        let dim = 5;
        let mut seq = SobolSequence::new(dim).unwrap();
        let directions = seq.directions.clone();
        for i in 1u64..=64 {
            let got = seq.next_point();
            let gray = i ^ (i >> 1);
            for d in 0..dim {
                let mut x = 0u32;
                for bit in 0..BITS {
                    if (gray >> bit) & 1 == 1 {
                        x ^= directions[d][bit];
                    }
                }
                let reference = x as f64 / (1u64 << BITS) as f64;
                assert_eq!(got[d], reference, "point {i}, dim {d}");
            }
        }
    }

    #[test]
    fn points_fill_the_unit_cube_evenly() {
        let mut seq = SobolSequence::new(2).unwrap();
        let mut mean = [0.0; 2];
        let n = 1024;
        for _ in 0..n {
            let p = seq.next_point();
            mean[0] += p[0];
            mean[1] += p[1];
            assert!(p.iter().all(|&x| (0.0..1.0).contains(&x)));
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        assert!((mean[0] - 0.5).abs() < 0.01, "mean {mean:?}");
        assert!((mean[1] - 0.5).abs() < 0.01, "mean {mean:?}");
    }

    #[test]
    fn dimension_bounds_are_enforced() {
        assert!(SobolSequence::new(0).is_err());
        assert!(SobolSequence::new(65).is_err());
        let mut max = SobolSequence::new(64).unwrap();
        assert_eq!(max.next_point().len(), 64);
    }
}
