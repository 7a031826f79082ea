//! Open-addressing hash table from lattice keys to value vectors.
//!
//! Only the first `D` coordinates of a key are stored and hashed; the last one
//! is implied by the zero-sum constraint. Entries keep insertion order, which
//! makes every traversal deterministic.

use super::embed::LatticeKey;

const EMPTY: u32 = u32::MAX;

#[derive(Clone, Debug)]
pub struct LatticeTable {
    dim: usize,
    channels: usize,
    keys: Vec<i32>,
    values: Vec<f64>,
    slots: Vec<u32>,
}

#[inline]
fn hash_key(key: &[i32]) -> u64 {
    let mut h: u64 = 0;
    for &c in key {
        h = (h.rotate_left(5) ^ (c as u32 as u64)).wrapping_mul(0x517c_c1b7_2722_0a95);
    }
    h ^ (h >> 29)
}

impl LatticeTable {
    /// Table for `dim`-dimensional positions (keys of `dim + 1` coordinates)
    /// with room for `expected` entries before the first resize.
    pub fn with_capacity(dim: usize, channels: usize, expected: usize) -> Self {
        let slots = (2 * expected.max(1)).next_power_of_two();
        Self {
            dim,
            channels,
            keys: Vec::with_capacity(expected * dim),
            values: Vec::with_capacity(expected * channels),
            slots: vec![EMPTY; slots],
        }
    }

    pub fn new(dim: usize, channels: usize) -> Self {
        Self::with_capacity(dim, channels, 16)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.keys.len().checked_div(self.dim).unwrap_or_else(|| self.values.len() / self.channels.max(1))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    #[inline]
    fn stored_key(&self, idx: usize) -> &[i32] {
        &self.keys[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Index of `key` (given with `D` or `D + 1` coordinates), if present.
    pub fn find(&self, key: &[i32]) -> Option<usize> {
        let key = &key[..self.dim];
        let mask = self.slots.len() - 1;
        let mut s = hash_key(key) as usize & mask;
        loop {
            let idx = self.slots[s];
            if idx == EMPTY {
                return None;
            }
            if self.stored_key(idx as usize) == key {
                return Some(idx as usize);
            }
            s = (s + 1) & mask;
        }
    }

    /// Index of `key`, inserting a zero vector if it is new.
    pub fn find_or_insert(&mut self, key: &[i32]) -> usize {
        if 2 * (self.len() + 1) > self.slots.len() {
            self.grow();
        }
        let key = &key[..self.dim];
        let mask = self.slots.len() - 1;
        let mut s = hash_key(key) as usize & mask;
        loop {
            let idx = self.slots[s];
            if idx == EMPTY {
                let new = self.len();
                self.slots[s] = new as u32;
                self.keys.extend_from_slice(key);
                self.values.extend(std::iter::repeat_n(0.0, self.channels));
                return new;
            }
            if self.stored_key(idx as usize) == key {
                return idx as usize;
            }
            s = (s + 1) & mask;
        }
    }

    fn grow(&mut self) {
        let cap = self.slots.len() * 2;
        self.slots = vec![EMPTY; cap];
        let mask = cap - 1;
        for idx in 0..self.len() {
            let mut s = hash_key(self.stored_key(idx)) as usize & mask;
            while self.slots[s] != EMPTY {
                s = (s + 1) & mask;
            }
            self.slots[s] = idx as u32;
        }
    }

    /// Full `D + 1` coordinate key of entry `idx`.
    pub fn key(&self, idx: usize) -> LatticeKey {
        let mut k = self.stored_key(idx).to_vec();
        k.push(-k.iter().sum::<i32>());
        LatticeKey(k)
    }

    pub fn value(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.values[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn get(&self, key: &[i32]) -> Option<&[f64]> {
        self.find(key).map(|i| self.value(i))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same keys, replacement values.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self { values, ..self.clone() }
    }

    /// Per-channel sum over all entries.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.channels];
        for row in self.values.chunks(self.channels.max(1)) {
            s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        s
    }

    /// `sum_key <self[key], other[key]>`; keys missing from either side count as zero.
    pub fn inner_product(&self, other: &LatticeTable) -> f64 {
        (0..self.len())
            .filter_map(|i| {
                let k = self.stored_key(i);
                other.get(k).map(|v| self.value(i).iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_find_and_grow() {
        let mut t = LatticeTable::with_capacity(2, 3, 1);
        let mut keys = Vec::new();
        for a in -20..20 {
            for b in -20..20 {
                keys.push([a * 3, b * 3, -(a + b) * 3]);
            }
        }
        for (n, k) in keys.iter().enumerate() {
            let idx = t.find_or_insert(k);
            assert_eq!(idx, n);
            t.value_mut(idx)[0] = n as f64;
        }
        assert_eq!(t.len(), keys.len());
        assert!(t.capacity() >= 2 * t.len());
        for (n, k) in keys.iter().enumerate() {
            assert_eq!(t.find(k), Some(n));
            assert_eq!(t.find_or_insert(k), n);
            assert_eq!(t.value(n)[0], n as f64);
            assert_eq!(t.key(n).0, k.to_vec());
        }
        assert_eq!(t.find(&[1, 1, -2]), None);
        assert_eq!(t.len(), keys.len());
    }

    #[test]
    fn column_sums_and_inner_product() {
        let mut a = LatticeTable::new(1, 2);
        let i = a.find_or_insert(&[0, 0]);
        a.value_mut(i).copy_from_slice(&[1.0, 2.0]);
        let j = a.find_or_insert(&[2, -2]);
        a.value_mut(j).copy_from_slice(&[3.0, 4.0]);
        assert_eq!(a.column_sums(), vec![4.0, 6.0]);
        let mut b = LatticeTable::new(1, 2);
        let k = b.find_or_insert(&[2, -2]);
        b.value_mut(k).copy_from_slice(&[1.0, 1.0]);
        assert_eq!(a.inner_product(&b), 7.0);
        assert_eq!(b.inner_product(&a), 7.0);
    }
}
