//! The one seedable PRNG behind every random draw in the crate.
//!
//! xoshiro256++ seeded through splitmix64. Weight initialization, dataset
//! synthesis and epoch shuffling each derive their own stream from a single
//! master seed, so a whole run is a pure function of its config. Keeping the
//! shuffle of epoch `e` a pure function of `(master, e)` is what lets a
//! checkpoint resume reproduce an uninterrupted run bit for bit without
//! persisting generator state.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(seed: u64, tag: u64) -> u64 {
    let mut s = seed ^ tag.wrapping_mul(GOLDEN);
    splitmix64(&mut s)
}

#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
    gauss_spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        Rng {
            s: [
                splitmix64(&mut sm),
                splitmix64(&mut sm),
                splitmix64(&mut sm),
                splitmix64(&mut sm),
            ],
            gauss_spare: None,
        }
    }

    /// Stream used for synthetic dataset generation.
    pub fn for_data(master: u64) -> Self {
        Self::new(mix(master, 1))
    }

    /// Stream used for parameter initialization.
    pub fn for_init(master: u64) -> Self {
        Self::new(mix(master, 2))
    }

    /// Stream used for the minibatch shuffle of one global epoch.
    pub fn for_epoch_shuffle(master: u64, epoch: u32) -> Self {
        Self::new(mix(mix(master, 3), epoch as u64))
    }

    pub fn next_u64(&mut self) -> u64 {
        // xoshiro256++
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a log argument.
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; the paired draw is cached.
    pub fn next_gauss(&mut self) -> f64 {
        if let Some(z) = self.gauss_spare.take() {
            return z;
        }
        let r = (-2.0 * self.next_f64_open().ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * self.next_f64();
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform integer in [0, n) via 128-bit multiply-shift.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
