//! Seed derivation and the named substreams of the event driver.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed, a stream label and an index.
/// Stable across platforms and releases: the mixing is fixed arithmetic.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut state = base;
    let mut out = splitmix64(&mut state);
    for &b in label.as_bytes() {
        state ^= u64::from(b);
        out = splitmix64(&mut state);
    }
    state ^= index.wrapping_mul(0xA24B_AED4_963E_E407);
    out ^ splitmix64(&mut state)
}

/// The five named substreams of one run. The coupling shares the four driver
/// streams (and the shared initial state) between both processes.
pub struct DriverStreams {
    pub proposal_times: ChaCha12Rng,
    pub locations: ChaCha12Rng,
    pub u_marks: ChaCha12Rng,
    pub lifetimes: ChaCha12Rng,
    pub initial_state: ChaCha12Rng,
}

impl DriverStreams {
    pub fn from_seed(seed: u64) -> Self {
        let stream = |label: &str| ChaCha12Rng::seed_from_u64(derive_seed(seed, label, 0));
        DriverStreams {
            proposal_times: stream("proposal-times"),
            locations: stream("locations"),
            u_marks: stream("u-marks"),
            lifetimes: stream("lifetimes"),
            initial_state: stream("initial-state"),
        }
    }
}
