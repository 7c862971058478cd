//! Deterministic pseudo-randomness for sampling and tests.
//!
//! A splitmix-style 64-bit generator with cheap per-index stream splitting:
//! the stream for sample `i` depends only on `(seed, i)`, so drawing sample
//! 7 gives identical bytes whether 10 or 10,000 samples are requested.
//! Nothing here is seeded from the clock; every run is reproducible.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Finalizer of the splitmix64 generator (Stafford mix 13).
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Independent stream for element `index` under a common seed.
    pub fn stream(seed: u64, index: u64) -> Self {
        SplitMix64 {
            state: mix64(seed ^ GOLDEN.wrapping_mul(index.wrapping_add(1))),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 significant bits.
    #[inline]
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box–Muller; consumes exactly two uniforms.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit(); // (0, 1]
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
