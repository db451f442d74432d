use crate::numerics::{quantize, Tensor};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Counter-based random number generator.
///
/// Every output is a pure function of `(seed, counter)`, so identical seeds
/// reproduce identical streams and independent substreams can be split off
/// without sharing mutable state.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// Independent substream: deterministic function of the parent seed and
    /// the stream index, unaffected by draws from the parent.
    pub fn substream(&self, index: u64) -> Rng {
        Rng {
            seed: splitmix(self.seed ^ splitmix(index)),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = splitmix(self.seed ^ splitmix(self.counter.wrapping_mul(GOLDEN)));
        self.counter += 1;
        v
    }

    /// Uniform in (0, 1].
    pub fn uniform(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) / (1u64 << 53) as f64
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * ((self.next_u64() >> 11) as f64 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Tensor of i.i.d. standard normal entries, rounded to the active
    /// precision.
    pub fn gaussian(&mut self, shape: Vec<usize>) -> Tensor {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| quantize(self.normal())).collect();
        Tensor::new(shape, data).expect("shape/data constructed consistently")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a = Rng::new(42).gaussian(vec![3, 7]);
        let b = Rng::new(42).gaussian(vec![3, 7]);
        assert_eq!(a, b);
    }

    #[test]
    fn moments_near_standard_normal() {
        let t = Rng::new(7).gaussian(vec![100_000]);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn different_seeds_differ() {
        let a = Rng::new(1).gaussian(vec![10_000]);
        let b = Rng::new(2).gaussian(vec![10_000]);
        let same = a
            .data()
            .iter()
            .zip(b.data())
            .filter(|(x, y)| x == y)
            .count();
        assert!(same < 100, "{same} collisions out of 10000");
    }

    #[test]
    fn substream_independent_of_parent_consumption() {
        let mut parent = Rng::new(9);
        let sub_before = parent.substream(3).gaussian(vec![8]);
        parent.next_u64();
        let sub_after = parent.substream(3).gaussian(vec![8]);
        assert_eq!(sub_before, sub_after);
    }
}
