use crate::error::{contract_err, Result};

/// One client's per-filter federate (1) / personalize (0) bits and
/// consecutive-disagreement counters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskRow {
    pub bits: Vec<u8>,
    pub counters: Vec<u32>,
}

impl MaskRow {
    pub fn federated(&self, filter: usize) -> bool {
        self.bits[filter] == 1
    }
}

/// Per-client personalization masks with a shared patience.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PersonalizationMask {
    pub patience: u32,
    /// Rows in ascending client order.
    pub rows: Vec<MaskRow>,
}

impl PersonalizationMask {
    /// All filters start federated.
    pub fn new(n_clients: usize, n_filters: usize, patience: u32) -> Self {
        Self::filled(n_clients, n_filters, patience, 1)
    }

    /// Every filter personalized from the start (no communication at all).
    pub fn personalized(n_clients: usize, n_filters: usize, patience: u32) -> Self {
        Self::filled(n_clients, n_filters, patience, 0)
    }

    fn filled(n_clients: usize, n_filters: usize, patience: u32, bit: u8) -> Self {
        Self {
            patience,
            rows: vec![
                MaskRow {
                    bits: vec![bit; n_filters],
                    counters: vec![0; n_filters],
                };
                n_clients
            ],
        }
    }

    pub fn n_clients(&self) -> usize {
        self.rows.len()
    }

    pub fn n_filters(&self) -> usize {
        self.rows.first().map_or(0, |r| r.bits.len())
    }

    /// Clients still federating `filter`.
    pub fn federating(&self, filter: usize) -> Vec<usize> {
        (0..self.rows.len())
            .filter(|&i| self.rows[i].federated(filter))
            .collect()
    }

    /// Applies one round of consistency values. `deltas[i][j]` is `None` for
    /// filters client `i` no longer federates.
    ///
    /// A federated filter with `δ < 0` bumps its counter and is personalized
    /// for good once the counter reaches the patience; `δ ≥ 0` resets the
    /// counter. Patience 0 personalizes every filter at the first update.
    pub fn update(&mut self, deltas: &[Vec<Option<f64>>]) -> Result<()> {
        if deltas.len() != self.rows.len() {
            return contract_err(format!(
                "{} delta rows for {} clients",
                deltas.len(),
                self.rows.len()
            ));
        }
        let p = self.patience;
        for (row, d) in self.rows.iter_mut().zip(deltas) {
            if d.len() != row.bits.len() {
                return contract_err("delta row length differs from filter count");
            }
            for j in 0..row.bits.len() {
                if row.bits[j] == 0 {
                    continue;
                }
                if p == 0 {
                    row.bits[j] = 0;
                    continue;
                }
                match d[j] {
                    Some(delta) if delta < 0.0 => {
                        row.counters[j] += 1;
                        if row.counters[j] >= p {
                            row.bits[j] = 0;
                        }
                    }
                    Some(_) => row.counters[j] = 0,
                    None => {}
                }
            }
        }
        Ok(())
    }

    /// Fraction of decoder elements still federated by `client`.
    pub fn client_ratio(&self, client: usize, filter_sizes: &[usize]) -> f64 {
        let row = &self.rows[client];
        let total: usize = filter_sizes.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let fed: usize = row
            .bits
            .iter()
            .zip(filter_sizes)
            .filter(|(b, _)| **b == 1)
            .map(|(_, s)| s)
            .sum();
        fed as f64 / total as f64
    }

    /// Fraction of decoder elements federated over all clients.
    pub fn federated_ratio(&self, filter_sizes: &[usize]) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let per: f64 = (0..self.rows.len())
            .map(|i| self.client_ratio(i, filter_sizes))
            .sum();
        per / self.rows.len() as f64
    }
}
