//! Deterministic random sampling.
//!
//! The generator is xoshiro256++ seeded through SplitMix64, with a Box-Muller
//! standard-normal sampler on top. Both algorithms are fixed; together with
//! `libm` for the transcendentals this makes every stream bit-identical
//! across runs and platforms for a given seed. None of the samplers use
//! fused multiply-add.

use crate::fmath;

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256++ stream with a cached Box-Muller spare.
///
/// Clone is cheap; a clone replays the identical stream.
#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
    spare_normal: Option<f64>,
}

impl Rng {
    /// Builds the generator from a 64-bit seed. The four words of xoshiro
    /// state are the first four SplitMix64 outputs of the seed.
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng {
            state,
            spare_normal: None,
        }
    }

    /// Derives a child seed for parallel task `task_id`: the `(task_id+1)`-th
    /// output of the SplitMix64 sequence started at `seed`. Tasks seeded this
    /// way get independent streams regardless of scheduling.
    pub fn child_seed(seed: u64, task_id: u64) -> u64 {
        let mut sm = seed.wrapping_add(task_id.wrapping_mul(SPLITMIX_GAMMA));
        splitmix64(&mut sm)
    }

    /// Convenience: a generator seeded with [`Rng::child_seed`].
    pub fn child(seed: u64, task_id: u64) -> Self {
        Rng::new(Self::child_seed(seed, task_id))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by rejection (unbiased).
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below(0) is undefined");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return r % bound;
            }
        }
    }

    /// Standard normal via Box-Muller. Each pair of uniforms yields two
    /// values; the second is cached and returned by the next call.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = fmath::sqrt(-2.0 * fmath::ln(u1));
        let t = core::f64::consts::TAU * u2;
        self.spare_normal = Some(r * fmath::sin(t));
        r * fmath::cos(t)
    }

    /// +1 or -1 with equal probability.
    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }
}
