use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

/// Identifier of the random-number scheme, recorded in run manifests.
pub const RNG_SCHEME: &str = "chacha20/seed-u64/stream-u64";

/// Deterministic random stream addressed by `(seed, stream_id)`.
///
/// ChaCha20 is a counter-mode generator: the stream id selects an independent
/// keystream for the same key, so parallel jobs never share state.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha20Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { seed, stream_id, inner }
    }

    /// Stream for a grid cell: the id is a hash of the cell coordinates.
    pub fn for_cell(seed: u64, coords: &[u64]) -> Self {
        let id = coords
            .iter()
            .fold(0x6a09_e667_f3bc_c908u64, |h, &c| splitmix64(h ^ splitmix64(c)));
        Self::new(seed, id)
    }

    /// Independent child stream, keyed by a label.
    pub fn child(&self, label: u64) -> Self {
        Self::for_cell(self.seed, &[self.stream_id, label])
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Index drawn with probability proportional to `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let u = self.uniform() * total;
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding slack above the last cumulative sum
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// Counts from `Multinomial(n, probs)` by sequential conditional binomials.
    pub fn multinomial(&mut self, n: u64, probs: &[f64]) -> Vec<u64> {
        let mut counts = vec![0u64; probs.len()];
        let mut remaining = n;
        let mut mass = 1.0f64;
        for (k, &p) in probs.iter().enumerate() {
            if remaining == 0 {
                break;
            }
            if k + 1 == probs.len() {
                counts[k] = remaining;
                break;
            }
            let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
            let c = Binomial::new(remaining, q)
                .map(|b| b.sample(&mut self.inner))
                .unwrap_or(0);
            counts[k] = c;
            remaining -= c;
            mass -= p;
        }
        counts
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
