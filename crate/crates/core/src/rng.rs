//! Counter-based deterministic random number generation.
//!
//! Every consumer derives an independent stream from `(seed, tag, indices…)`
//! and draws by incrementing a local counter. There is no global or shared
//! state, so replaying a step (e.g. after a checkpoint resume) reproduces the
//! same draws bit for bit, and corpus generation is pure per sample index.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tags. Each distinct random decision in the system owns a tag so
/// streams never collide across purposes.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const CORPUS: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const SUBNET_PICK: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const LAYER_DROP: u64 = 6;
    pub const HARD_CONCRETE: u64 = 7;
    pub const GRADCHECK: u64 = 8;
    pub const ORACLE: u64 = 9;
    pub const SCORE_INIT: u64 = 10;
}

/// FNV-1a over a string, for keying streams by parameter name.
pub fn hash_str(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Collapse `(seed, parts…)` into a stream key.
pub fn stream_key(seed: u64, parts: &[u64]) -> u64 {
    let mut k = mix(seed ^ 0x6A09_E667_F3BC_C909);
    for &p in parts {
        k = mix(k.wrapping_add(GAMMA) ^ mix(p));
    }
    k
}

/// A stateless-keyed generator: output i depends only on (key, i).
#[derive(Clone, Debug)]
pub struct CounterRng {
    key: u64,
    ctr: u64,
}

impl CounterRng {
    pub fn new(seed: u64, parts: &[u64]) -> Self {
        Self {
            key: stream_key(seed, parts),
            ctr: 0,
        }
    }

    pub fn from_key(key: u64) -> Self {
        Self { key, ctr: 0 }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.ctr = self.ctr.wrapping_add(1);
        mix(self.key.wrapping_add(self.ctr.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval (0, 1).
    #[inline]
    pub fn open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; consumes two draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.open01();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in 0..n. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}
