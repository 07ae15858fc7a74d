//! FIFO memory bank of past global embeddings, used as extra negatives.
//!
//! Entries are plain copies of the (frozen) input embeddings and never take
//! part in gradient computation. The update rule is plain FIFO.

use std::collections::VecDeque;

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::losses::BankNegatives;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_CAPACITY: usize = 256;

#[derive(Clone, Debug)]
pub struct MemoryBank<T> {
    capacity: usize,
    dim: usize,
    visual: VecDeque<Vec<T>>,
    text: VecDeque<Vec<T>>,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            visual: VecDeque::with_capacity(capacity),
            text: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self, modality: Modality) -> usize {
        self.queue(modality).len()
    }

    pub fn is_empty(&self) -> bool {
        self.visual.is_empty() && self.text.is_empty()
    }

    fn queue(&self, modality: Modality) -> &VecDeque<Vec<T>> {
        match modality {
            Modality::Visual => &self.visual,
            Modality::Text => &self.text,
        }
    }

    /// Appends the rows of `rows [k×d]`, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, modality: Modality, rows: &Tensor<T>) -> Result<()> {
        let s = rows.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::shape("memory bank push", s, &[self.dim]));
        }
        let capacity = self.capacity;
        let q = match modality {
            Modality::Visual => &mut self.visual,
            Modality::Text => &mut self.text,
        };
        for i in 0..s[0] {
            q.push_back(rows.row(i).to_vec());
            while q.len() > capacity {
                q.pop_front();
            }
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.visual.clear();
        self.text.clear();
    }

    /// Current entries of one modality as `[K×d]`, oldest first.
    pub fn entries(&self, modality: Modality) -> Option<Tensor<T>> {
        let q = self.queue(modality);
        if q.is_empty() {
            return None;
        }
        let data: Vec<T> = q.iter().flatten().copied().collect();
        Some(Tensor::from_parts(vec![q.len(), self.dim], data))
    }

    /// Snapshot of both queues as extra negatives for the loss.
    pub fn negatives(&self) -> BankNegatives<T> {
        BankNegatives {
            visual: self.entries(Modality::Visual),
            text: self.entries(Modality::Text),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: f64) -> Tensor<f64> {
        Tensor::new(&[1, 2], vec![v, -v]).unwrap()
    }

    #[test]
    fn fifo_eviction() {
        let mut bank = MemoryBank::new(2, 2);
        for v in [1.0, 2.0, 3.0] {
            bank.push(Modality::Visual, &row(v)).unwrap();
        }
        let e = bank.entries(Modality::Visual).unwrap();
        assert_eq!(e.data(), &[2.0, -2.0, 3.0, -3.0]);
        assert_eq!(bank.len(Modality::Text), 0);
        assert!(bank.entries(Modality::Text).is_none());
    }

    #[test]
    fn rejects_wrong_dim() {
        let mut bank = MemoryBank::<f64>::new(4, 3);
        assert!(bank.push(Modality::Text, &row(1.0)).is_err());
    }

    #[test]
    fn size_never_exceeds_capacity() {
        let mut bank = MemoryBank::new(5, 2);
        for k in 0..4 {
            let t = Tensor::from_fn(&[3, 2], |i| (i + k) as f64).unwrap();
            bank.push(Modality::Text, &t).unwrap();
            assert!(bank.len(Modality::Text) <= 5);
        }
    }
}
