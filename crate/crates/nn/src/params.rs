use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::Real;

/// A contiguous region of the flat parameter buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Kaiming normal, std = gain * sqrt(2 / fan_in).
    HeNormal { fan_in: usize, gain: f64 },
}

#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    slots: Vec<(Slot, Init)>,
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, len: usize, init: Init) -> Slot {
        let slot = Slot { offset: self.len, len };
        self.len += len;
        self.slots.push((slot, init));
        slot
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slots(&self) -> impl Iterator<Item = Slot> + '_ {
        self.slots.iter().map(|(s, _)| *s)
    }

    /// Draws a fresh parameter vector. Slots are filled in allocation order
    /// from a single seeded stream.
    pub fn init<T: Real>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![T::zero(); self.len];
        for (slot, init) in &self.slots {
            match *init {
                Init::Zeros => {}
                Init::HeNormal { fan_in, gain } => {
                    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("valid std");
                    for v in &mut out[slot.range()] {
                        *v = T::of(normal.sample(&mut rng));
                    }
                }
            }
        }
        out
    }
}
