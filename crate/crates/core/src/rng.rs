//! Seed derivation.
//!
//! All randomness flows from one root seed. Components ask for a named
//! substream (`augment`, `dropout`, `schedule`, `init`) and then index into it
//! (epoch, step, sample, view), so a draw made for one component never shifts
//! the draws of another. This is what makes variants that share a seed
//! comparable step by step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    state: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self {
            state: splitmix64(root),
        }
    }

    pub fn stream(&self, name: &str) -> Self {
        Self {
            state: splitmix64(self.state ^ fnv1a(name)),
        }
    }

    pub fn child(&self, index: u64) -> Self {
        Self {
            state: splitmix64(self.state.rotate_left(17) ^ splitmix64(index)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.state
    }

    pub fn rng(&self) -> Rng {
        Rng::seed_from_u64(self.state)
    }
}
