//! Platform-independent PRNG used for episode sampling.
//!
//! PCG32 (XSH-RR output, 64-bit LCG state) seeded from SplitMix64. Both are
//! written out here so the exact stream can be reproduced in any language.

const PCG_MULTIPLIER: u64 = 6364136223846793005;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pcg32 {
    state: u64,
    increment: u64,
}

impl Pcg32 {
    /// Standard `pcg32_srandom_r(initstate, initseq)` seeding.
    pub fn new(init_state: u64, init_seq: u64) -> Self {
        let mut rng = Self {
            state: 0,
            increment: (init_seq << 1) | 1,
        };
        rng.step();
        rng.state = rng.state.wrapping_add(init_state);
        rng.step();
        rng
    }

    /// Generator for one `(dataset, k, seed)` sampling run.
    ///
    /// `splitmix64(seed ^ fnv1a64(dataset_id) ^ k)` supplies the initial state and
    /// then the stream selector.
    pub fn for_episode(dataset_id: &str, k: u32, seed: u64) -> Self {
        let mut sm = SplitMix64::new(seed ^ fnv1a64(dataset_id.as_bytes()) ^ u64::from(k));
        let init_state = sm.next_u64();
        let init_seq = sm.next_u64();
        Self::new(init_state, init_seq)
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn increment(&self) -> u64 {
        self.increment
    }

    fn step(&mut self) {
        self.state = self
            .state
            .wrapping_mul(PCG_MULTIPLIER)
            .wrapping_add(self.increment);
    }

    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.step();
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    /// Uniform in `0..bound` by rejection (`pcg32_boundedrand_r`).
    pub fn below(&mut self, bound: u32) -> u32 {
        assert!(bound > 0, "bound must be positive");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u32();
            if r >= threshold {
                return r % bound;
            }
        }
    }

    /// Uniform index into a slice of length `len`.
    pub fn index(&mut self, len: usize) -> usize {
        let bound = u32::try_from(len).expect("candidate list longer than u32::MAX");
        self.below(bound) as usize
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}
