use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// A state address: `layer` in `0..=H+1`, `index` within the layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateId {
    pub layer: usize,
    pub index: usize,
}

impl StateId {
    pub const TOP: StateId = StateId { layer: 0, index: 0 };

    pub const fn new(layer: usize, index: usize) -> Self {
        StateId { layer, index }
    }

    pub const fn bottom(horizon: usize) -> Self {
        StateId { layer: horizon + 1, index: 0 }
    }

    pub fn is_top(&self) -> bool {
        self.layer == 0
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.index)
    }
}

/// Shape of a layered state space: per-layer sizes and the action count.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Universe {
    layer_sizes: Vec<usize>,
    actions: usize,
    offsets: Vec<usize>,
}

impl Universe {
    pub fn new(layer_sizes: Vec<usize>, actions: usize) -> Result<Self> {
        if layer_sizes.is_empty() {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::invalid("every layer needs at least one state"));
        }
        if actions == 0 || actions > u16::MAX as usize {
            return Err(Error::invalid(format!("action count {actions} out of range")));
        }
        let mut offsets = Vec::with_capacity(layer_sizes.len() + 1);
        let mut acc = 0;
        for &n in &layer_sizes {
            offsets.push(acc);
            acc += n;
        }
        offsets.push(acc);
        Ok(Universe { layer_sizes, actions, offsets })
    }

    /// `k` states in each of `h` layers.
    pub fn uniform(k: usize, h: usize, actions: usize) -> Result<Self> {
        Universe::new(vec![k; h], actions)
    }

    pub fn horizon(&self) -> usize {
        self.layer_sizes.len()
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    /// Size of layer `h` (1-based).
    pub fn layer_size(&self, h: usize) -> usize {
        self.layer_sizes[h - 1]
    }

    pub fn num_states(&self) -> usize {
        self.offsets[self.layer_sizes.len()]
    }

    /// Common layer size if all layers agree.
    pub fn uniform_width(&self) -> Option<usize> {
        let k = self.layer_sizes[0];
        self.layer_sizes.iter().all(|&n| n == k).then_some(k)
    }

    pub fn contains(&self, s: StateId) -> bool {
        s.layer >= 1 && s.layer <= self.horizon() && s.index < self.layer_size(s.layer)
    }

    pub fn check(&self, s: StateId) -> Result<()> {
        if self.contains(s) {
            Ok(())
        } else {
            Err(Error::invalid(format!("state {s} outside universe")))
        }
    }

    /// Flat index of a state, layer-major.
    pub fn flat(&self, s: StateId) -> usize {
        debug_assert!(self.contains(s));
        self.offsets[s.layer - 1] + s.index
    }

    pub fn state_of(&self, flat: usize) -> StateId {
        let layer = self.offsets.partition_point(|&o| o <= flat);
        StateId::new(layer, flat - self.offsets[layer - 1])
    }

    pub fn layer_offset(&self, h: usize) -> usize {
        self.offsets[h - 1]
    }

    /// All states in layer-major order.
    pub fn states(&self) -> impl Iterator<Item = StateId> + '_ {
        (1..=self.horizon()).flat_map(move |h| (0..self.layer_size(h)).map(move |i| StateId::new(h, i)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_roundtrip() {
        let u = Universe::new(vec![1, 3, 2], 2).unwrap();
        assert_eq!(u.num_states(), 6);
        for (i, s) in u.states().enumerate() {
            assert_eq!(u.flat(s), i);
            assert_eq!(u.state_of(i), s);
        }
    }

    #[test]
    fn rejects_empty_layers() {
        assert!(Universe::new(vec![2, 0], 2).is_err());
        assert!(Universe::new(vec![], 2).is_err());
        assert!(Universe::new(vec![2], 0).is_err());
    }
}
