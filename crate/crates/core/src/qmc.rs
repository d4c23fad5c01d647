//! Randomized quasi-random points in the unit cube: Halton sequence with
//! random digit permutations (fixing 0) and a Cranley–Patterson shift.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::seed::rng_for;

const PRIMES: [u32; 64] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107,
    109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229,
    233, 239, 241, 251, 257, 263, 269, 271, 277, 281, 283, 293, 307, 311,
];

/// Digit levels kept per dimension; enough for 2^32 points in base 2.
const LEVELS: usize = 32;

#[derive(Clone, Debug)]
pub struct ScrambledHalton {
    dim: usize,
    perms: Vec<Vec<Vec<u32>>>,
    shift: Vec<f64>,
}

impl ScrambledHalton {
    /// # Panics
    /// If `dim` exceeds the built-in prime table (64).
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim <= PRIMES.len(), "scrambled Halton supports at most {} dimensions", PRIMES.len());
        let mut rng = rng_for(seed, "halton");
        let mut perms = Vec::with_capacity(dim);
        for &b in &PRIMES[..dim] {
            let mut levels = Vec::with_capacity(LEVELS);
            for _ in 0..LEVELS {
                let mut p: Vec<u32> = (1..b).collect();
                p.shuffle(&mut rng);
                p.insert(0, 0);
                levels.push(p);
            }
            perms.push(levels);
        }
        let shift = (0..dim).map(|_| rng.random::<f64>()).collect();
        Self { dim, perms, shift }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Point number `i` (0-based); the raw sequence starts at index 1.
    pub fn point(&self, i: u64) -> Vec<f64> {
        let idx = i + 1;
        (0..self.dim)
            .map(|j| {
                let b = PRIMES[j] as u64;
                let mut n = idx;
                let mut inv = 1.0 / b as f64;
                let mut x = 0.0;
                let mut level = 0;
                while n > 0 && level < LEVELS {
                    let d = (n % b) as usize;
                    x += self.perms[j][level][d] as f64 * inv;
                    inv /= b as f64;
                    n /= b;
                    level += 1;
                }
                let y = x + self.shift[j];
                let y = y - y.floor();
                // keep strictly inside (0,1) for inverse-CDF transforms
                y.clamp(1e-15, 1.0 - 1e-15)
            })
            .collect()
    }

    pub fn sample(&self, n: usize) -> Vec<Vec<f64>> {
        (0..n as u64).map(|i| self.point(i)).collect()
    }
}
