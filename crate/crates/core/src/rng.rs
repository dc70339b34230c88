//! Deterministic pseudo-random numbers.
//!
//! A splitmix64 generator: the state advances by a fixed odd constant and the
//! output is a xor-shift/multiply finalizer of the counter. Chosen over an
//! external RNG because every draw must be bit-reproducible across platforms
//! and the state must be trivially splittable into independent streams.
//!
//! Streams are derived, not shared: each purpose (world construction,
//! parameter init, dataset sampling, evaluation) gets its own generator via
//! [`SplitMix64::for_stream`], and per-sample substreams come from
//! [`SplitMix64::substream`]. Reordering draws in one stream can never
//! disturb another.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Purpose label for a top-level stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    WorldBuild,
    ParamInit,
    Dataset,
    Eval,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::WorldBuild => 0x5753_4c44, // "WSLD"
            Stream::ParamInit => 0x494e_4954,  // "INIT"
            Stream::Dataset => 0x4441_5441,    // "DATA"
            Stream::Eval => 0x4556_414c,       // "EVAL"
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: mix(seed) }
    }

    /// Independent stream for one purpose under a shared run seed.
    pub fn for_stream(seed: u64, stream: Stream) -> Self {
        SplitMix64 {
            state: mix(mix(seed) ^ stream.tag().wrapping_mul(GAMMA)),
        }
    }

    /// Derive the `index`-th substream without advancing `self`.
    pub fn substream(&self, index: u64) -> Self {
        SplitMix64 {
            state: mix(self.state ^ index.wrapping_mul(GAMMA) ^ 0x5b44_7599),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via the Marsaglia polar method (rejection keeps the
    /// stream deterministic without libm trig).
    pub fn normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    pub fn coin(&mut self) -> bool {
        self.next_u64() & 1 == 1
    }

    /// Index uniform in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}
