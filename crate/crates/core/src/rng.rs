//! Counter-based random numbers (Philox4x32-10).
//!
//! Every draw is a pure function of `(key, counter)`, so a tensor element's
//! value depends only on the seed, the tensor name, a stream tag and the
//! element index. Generation can be split across any number of threads
//! without changing the output.
//!
//! Layout used by the synthetic generators:
//!
//! ```text
//! key     = [seed_lo, seed_hi]
//! counter = [index_lo, index_hi, fnv1a64(name)_lo ^ stream, fnv1a64(name)_hi]
//! ```
//!
//! Transcendentals come from `libm` so outputs are identical across
//! platforms.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// Philox4x32 with 10 rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Philox4x32 {
    key: [u32; 2],
}

impl Philox4x32 {
    pub fn new(seed: u64) -> Self {
        Self {
            key: [seed as u32, (seed >> 32) as u32],
        }
    }

    /// Raw bijection on a 128-bit counter.
    pub fn raw(key: [u32; 2], counter: [u32; 4]) -> [u32; 4] {
        let mut ctr = counter;
        let mut k = key;
        for round in 0..10 {
            if round > 0 {
                k[0] = k[0].wrapping_add(PHILOX_W0);
                k[1] = k[1].wrapping_add(PHILOX_W1);
            }
            let p0 = u64::from(PHILOX_M0) * u64::from(ctr[0]);
            let p1 = u64::from(PHILOX_M1) * u64::from(ctr[2]);
            let (hi0, lo0) = ((p0 >> 32) as u32, p0 as u32);
            let (hi1, lo1) = ((p1 >> 32) as u32, p1 as u32);
            ctr = [hi1 ^ ctr[1] ^ k[0], lo1, hi0 ^ ctr[3] ^ k[1], lo0];
        }
        ctr
    }

    /// Four words for element `index` of stream `stream`.
    pub fn block(&self, index: u64, stream: u64) -> [u32; 4] {
        Self::raw(
            self.key,
            [
                index as u32,
                (index >> 32) as u32,
                stream as u32,
                (stream >> 32) as u32,
            ],
        )
    }

    /// Two 53-bit uniforms in the open interval (0, 1).
    pub fn uniform_pair(&self, index: u64, stream: u64) -> (f64, f64) {
        let w = self.block(index, stream);
        let a = (u64::from(w[0]) << 32) | u64::from(w[1]);
        let b = (u64::from(w[2]) << 32) | u64::from(w[3]);
        (open_unit(a), open_unit(b))
    }

    /// A uniform in [0, 1).
    pub fn uniform(&self, index: u64, stream: u64) -> f64 {
        let w = self.block(index, stream);
        let a = (u64::from(w[0]) << 32) | u64::from(w[1]);
        (a >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// A 64-bit word, used as a sort key.
    pub fn word(&self, index: u64, stream: u64) -> u64 {
        let w = self.block(index, stream);
        (u64::from(w[0]) << 32) | u64::from(w[1])
    }

    /// Standard normal via the Box-Muller cosine branch.
    pub fn normal(&self, index: u64, stream: u64) -> f64 {
        let (u1, u2) = self.uniform_pair(index, stream);
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        radius * libm::cos(std::f64::consts::TAU * u2)
    }
}

fn open_unit(word: u64) -> f64 {
    ((word >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// 64-bit FNV-1a; stable stream identifier for tensor names.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Stream id for a named tensor and a purpose tag.
pub fn stream_id(name: &str, tag: u32) -> u64 {
    fnv1a64(name.as_bytes()) ^ u64::from(tag)
}
