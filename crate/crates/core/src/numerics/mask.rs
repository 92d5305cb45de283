use crate::{ensure, Result};

/// Dense boolean attention mask; `get(i, j)` means query `i` may attend key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn new(queries: usize, keys: usize) -> Self {
        Self { queries, keys, bits: vec![false; queries * keys] }
    }

    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut mask = Self::new(queries, keys);
        for i in 0..queries {
            for j in 0..keys {
                mask.bits[i * keys + j] = f(i, j);
            }
        }
        mask
    }

    /// Standard causal mask where query `i` sits at key position `offset + i`.
    pub fn causal(queries: usize, offset: usize) -> Self {
        Self::from_fn(queries, offset + queries, |i, j| j <= offset + i)
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.keys + j]
    }

    pub fn set(&mut self, i: usize, j: usize, visible: bool) {
        self.bits[i * self.keys + j] = visible;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.keys..(i + 1) * self.keys]
    }

    /// Fails if any query row has no visible key.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.queries {
            ensure!(self.row(i).iter().any(|&b| b), "attention mask row {i} has no visible key");
        }
        Ok(())
    }
}
