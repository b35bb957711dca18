//! Counter-based Gaussian streams.
//!
//! A stream is addressed by `(seed, replica, purpose)`; within a stream every
//! normal variate has a fixed index, so any block of indices can be produced
//! independently of how work is split between threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub replica: u64,
    /// Sub-stream label: slab index, tree level, experiment stage, ...
    pub purpose: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn new(seed: u64, replica: u64, purpose: u64) -> Self {
        StreamKey { seed, replica, purpose }
    }

    pub fn with_purpose(self, purpose: u64) -> Self {
        StreamKey { purpose, ..self }
    }

    /// Purpose label for a named stage and a sub-index (e.g. slab number).
    pub fn purpose_of(stage: u32, index: u32) -> u64 {
        ((stage as u64) << 32) | index as u64
    }

    pub fn path(&self) -> String {
        format!("seed={}/replica={}/purpose={:#x}", self.seed, self.replica, self.purpose)
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut bytes = [0u8; 32];
        let words = [
            splitmix(self.seed),
            splitmix(self.seed ^ 0x5851_f42d_4c95_7f2d),
            self.replica,
            splitmix(self.replica.rotate_left(17) ^ self.seed),
        ];
        for (chunk, w) in bytes.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(bytes);
        rng.set_stream(self.purpose);
        rng
    }

    /// Fill `out` with the standard normals of indices `start..start+out.len()`.
    pub fn normals(&self, start: u64, out: &mut [f64]) {
        if out.is_empty() {
            return;
        }
        let mut rng = self.rng();
        let first_pair = start / 2;
        // Two u64 draws (four 32-bit words) per Box–Muller pair.
        rng.set_word_pos(first_pair as u128 * 4);
        let mut idx = first_pair * 2;
        let end = start + out.len() as u64;
        let mut k = 0;
        while idx < end {
            let (z0, z1) = box_muller(rng.next_u64(), rng.next_u64());
            for z in [z0, z1] {
                if idx >= start && idx < end {
                    out[k] = z;
                    k += 1;
                }
                idx += 1;
            }
        }
    }

    pub fn normal_vec(&self, start: u64, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        self.normals(start, &mut v);
        v
    }

    /// Uniforms on (0,1) with their own index space (disjoint from the normals).
    pub fn uniforms(&self, start: u64, out: &mut [f64]) {
        let mut rng = self.with_purpose(self.purpose ^ 0x8000_0000_0000_0000).rng();
        rng.set_word_pos(start as u128 * 2);
        for u in out.iter_mut() {
            *u = to_open_unit(rng.next_u64());
        }
    }

    /// Sequential generator, handy for resampling loops.
    pub fn sequential(&self) -> ChaCha8Rng {
        self.with_purpose(self.purpose ^ 0x4000_0000_0000_0000).rng()
    }
}

fn to_open_unit(x: u64) -> f64 {
    ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(a: u64, b: u64) -> (f64, f64) {
    let u1 = to_open_unit(a);
    let u2 = to_open_unit(b);
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_match_one_long_draw() {
        let key = StreamKey::new(7, 3, 11);
        let full = key.normal_vec(0, 1001);
        let mut part = vec![0.0; 300];
        key.normals(501, &mut part);
        assert_eq!(&full[501..801], &part[..]);
        let mut odd = vec![0.0; 1];
        key.normals(1000, &mut odd);
        assert_eq!(full[1000], odd[0]);
    }

    #[test]
    fn distinct_keys_give_distinct_streams() {
        let a = StreamKey::new(1, 0, 0).normal_vec(0, 8);
        let b = StreamKey::new(1, 1, 0).normal_vec(0, 8);
        let c = StreamKey::new(1, 0, 1).normal_vec(0, 8);
        let d = StreamKey::new(2, 0, 0).normal_vec(0, 8);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn normals_have_unit_variance() {
        let v = StreamKey::new(5, 0, 0).normal_vec(0, 200_000);
        let n = v.len() as f64;
        let mean: f64 = v.iter().sum::<f64>() / n;
        let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.015);
    }
}
