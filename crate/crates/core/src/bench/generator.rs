//! Seeded synthetic credit-card transactions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::event::Event;

/// Cards and terminals are drawn from fixed pools.
pub const CARDS: u32 = 10_000;
pub const TERMINALS: u32 = 1_000;
/// Transaction time of seq 0, epoch milliseconds.
pub const BASE_TIMESTAMP_MS: i64 = 1_600_000_000_000;

/// Yields transactions with `amount` uniform in `[0, 1)`, so a filter
/// `amount > θ` passes a fraction `1 - θ` of them.
pub struct TransactionGenerator {
    rng: ChaCha8Rng,
    next_seq: u64,
}

impl TransactionGenerator {
    pub fn new(seed: u64) -> Self {
        TransactionGenerator { rng: ChaCha8Rng::seed_from_u64(seed), next_seq: 0 }
    }

    /// The next transaction, produced at `ts_produced` (µs).
    pub fn next_at(&mut self, ts_produced: i64) -> Event {
        let seq = self.next_seq;
        self.next_seq += 1;
        Event::new(seq, ts_produced)
            .with_attr("timestamp", BASE_TIMESTAMP_MS + seq as i64)
            .with_attr("amount", self.rng.gen::<f64>())
            .with_attr("cardId", format!("card-{}", self.rng.gen_range(0..CARDS)))
            .with_attr("terminalId", format!("term-{}", self.rng.gen_range(0..TERMINALS)))
    }
}

impl Iterator for TransactionGenerator {
    type Item = Event;

    fn next(&mut self) -> Option<Event> {
        Some(self.next_at(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<_> = TransactionGenerator::new(5).take(50).collect();
        let b: Vec<_> = TransactionGenerator::new(5).take(50).collect();
        let c: Vec<_> = TransactionGenerator::new(6).take(50).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.iter().map(|e| e.seq).collect::<Vec<_>>(), (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn amounts_are_uniform_enough() {
        let n = 100_000;
        let above = TransactionGenerator::new(1)
            .take(n)
            .filter(|e| e.attr("amount").and_then(|a| a.as_f64()).unwrap() > 0.78)
            .count();
        // Binomial(n, 0.22): sd ≈ 131.
        assert!((above as f64 - 0.22 * n as f64).abs() < 700.0, "{above}");
    }
}
