//! Multiply-accumulate accounting for atomic blocks and whole networks.
//!
//! Costs are in MACs. Batch-norm, activations and pooling are not counted.

use crate::error::{Error, Result};
use crate::supernet::{SearchableBlockSpec, Supernet};
use crate::tensor::kernels::same_out;

/// `ĉ` of one atomic block: its expand column, its depthwise channel and its
/// project row, each evaluated at the resolution the layer runs at.
pub fn atomic_block_cost(spec: &SearchableBlockSpec, kernel_size: usize, input_hw: (usize, usize)) -> u64 {
    let (h, w) = input_hw;
    let (h2, w2) = (same_out(h, spec.stride), same_out(w, spec.stride));
    let (hw, hw2) = ((h * w) as u64, (h2 * w2) as u64);
    let k2 = (kernel_size * kernel_size) as u64;
    hw * spec.in_channels as u64 + hw2 * k2 + hw2 * spec.out_channels as u64
}

/// Per-atomic-block costs of a supernet plus the cost of everything that is
/// never pruned (stem and classifier).
///
/// `normalizer` is fixed when the ledger is built, so normalised penalty
/// weights do not grow as the network shrinks.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsLedger {
    /// Indexed like [`Supernet::atoms`].
    pub per_atomic: Vec<u64>,
    pub fixed_cost: u64,
    pub normalizer: u64,
}

impl FlopsLedger {
    pub fn new(net: &Supernet) -> Self {
        let per_atomic: Vec<u64> = net.atoms().iter().map(|a| a.cost).collect();
        let normalizer = net.atoms().iter().filter(|a| a.alive).map(|a| a.cost).sum();
        FlopsLedger {
            per_atomic,
            fixed_cost: net.fixed_cost(),
            normalizer,
        }
    }

    pub fn cost(&self, atom: usize) -> u64 {
        self.per_atomic[atom]
    }

    /// `cᵢ = ĉᵢ / Σₖ ĉₖ` over the initial supernet.
    pub fn normalized_costs(&self) -> Result<Vec<f64>> {
        normalized(&self.per_atomic, self.normalizer)
    }

    /// Fixed cost plus the cost of every atomic block still alive.
    pub fn network_flops(&self, net: &Supernet) -> u64 {
        self.fixed_cost
            + net
                .atoms()
                .iter()
                .enumerate()
                .filter(|(_, a)| a.alive)
                .map(|(i, _)| self.per_atomic[i])
                .sum::<u64>()
    }
}

/// Divides each cost by `normalizer`.
pub fn normalized(costs: &[u64], normalizer: u64) -> Result<Vec<f64>> {
    if costs.is_empty() {
        return Err(Error::Consistency("empty FLOPs ledger".into()));
    }
    if normalizer == 0 {
        return Err(Error::Consistency("FLOPs normalizer is zero".into()));
    }
    Ok(costs.iter().map(|&c| c as f64 / normalizer as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(cin: usize, cout: usize, stride: usize) -> SearchableBlockSpec {
        SearchableBlockSpec::new(cin, cout, stride, 6, vec![3, 5, 7])
    }

    /// Counts MACs by walking every multiply of the three layers for one
    /// atomic channel.
    fn loop_counter(cin: usize, cout: usize, stride: usize, k: usize, h: usize, w: usize) -> u64 {
        let mut macs = 0u64;
        for _y in 0..h {
            for _x in 0..w {
                for _c in 0..cin {
                    macs += 1;
                }
            }
        }
        let (h2, w2) = (h.div_ceil(stride), w.div_ceil(stride));
        for _y in 0..h2 {
            for _x in 0..w2 {
                for _t in 0..k * k {
                    macs += 1;
                }
                for _o in 0..cout {
                    macs += 1;
                }
            }
        }
        macs
    }

    #[test]
    fn cost_examples() {
        assert_eq!(atomic_block_cost(&spec(4, 8, 1), 3, (8, 8)), 1344);
        assert_eq!(loop_counter(4, 8, 1, 3, 8, 8), 1344);
        assert_eq!(atomic_block_cost(&spec(4, 4, 2), 3, (8, 8)), 464);
        assert_eq!(loop_counter(4, 4, 2, 3, 8, 8), 464);
    }

    #[test]
    fn kernel_difference() {
        let s = spec(16, 24, 2);
        let diff = atomic_block_cost(&s, 7, (9, 9)) - atomic_block_cost(&s, 3, (9, 9));
        assert_eq!(diff, 5 * 5 * (49 - 9));
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalized(&[2, 3, 5], 10).unwrap(), vec![0.2, 0.3, 0.5]);
        let eq = normalized(&[7; 4], 28).unwrap();
        assert!(eq.iter().all(|&c| c == 0.25));
        assert!(normalized(&[], 1).is_err());
    }
}
