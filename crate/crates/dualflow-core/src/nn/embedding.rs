//! Learned class-condition embeddings.
//!
//! Stands in for a text encoder: K learnable class rows plus a reserved null
//! row for the unconditional case. The null row lives in its own parameter
//! tensor so the frozen forward flow keeps its conditioning fixed while attack
//! training updates the class rows.

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::{Binding, ParamStore, Tape, Tensor, Var};

/// Condition for a batched forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchCond<'a> {
    /// The null condition (conceptual row K) for every row.
    Null,
    /// One class index per batch row.
    Classes(&'a [usize]),
}

/// K class rows (`{name}.classes`, [K, d_e]) plus the null row
/// (`{name}.null`, [1, d_e]).
#[derive(Debug, Clone)]
pub struct ClassEmbeddingTable {
    pub name: String,
    pub num_classes: usize,
    pub dim: usize,
}

impl ClassEmbeddingTable {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        num_classes: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = 1.0 / (dim as f32).sqrt();
        let classes = Tensor::new(vec![num_classes, dim], rng.normal_vec(num_classes * dim, std))?;
        let null = Tensor::new(vec![1, dim], rng.normal_vec(dim, std))?;
        store.insert(&format!("{name}.classes"), classes, true)?;
        store.insert(&format!("{name}.null"), null, true)?;
        Ok(ClassEmbeddingTable { name: name.to_string(), num_classes, dim })
    }

    pub fn describe(name: &str, num_classes: usize, dim: usize) -> Self {
        ClassEmbeddingTable { name: name.to_string(), num_classes, dim }
    }

    pub fn classes_name(&self) -> String {
        format!("{}.classes", self.name)
    }

    pub fn null_name(&self) -> String {
        format!("{}.null", self.name)
    }

    /// Condition rows for a batch: `[class row, null row]` stacks when
    /// conditioned ([B, 2, d_e]), the null row alone otherwise ([B, 1, d_e]).
    pub fn lookup(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        store: &ParamStore,
        cond: BatchCond,
        batch: usize,
    ) -> Result<Var> {
        let null = bind.bind(tape, store, &self.null_name())?;
        match cond {
            BatchCond::Null => tape.embed_null(null, batch),
            BatchCond::Classes(idx) => {
                if idx.len() != batch {
                    return Err(CoreError::Shape(format!(
                        "{} class indices for batch {batch}",
                        idx.len()
                    )));
                }
                if let Some(&bad) = idx.iter().find(|&&c| c >= self.num_classes) {
                    return Err(CoreError::InvalidArgument(format!(
                        "class index {bad} out of 0..{}",
                        self.num_classes
                    )));
                }
                let classes = bind.bind(tape, store, &self.classes_name())?;
                tape.embed_pair(classes, null, idx)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_is_deterministic_and_null_is_distinct() {
        let mut rng = Rng::seed_from(11);
        let mut store = ParamStore::new();
        let table = ClassEmbeddingTable::init(&mut store, "emb", 4, 8, &mut rng).unwrap();

        let fetch = |cond: BatchCond| {
            let mut tape = Tape::new();
            let mut bind = Binding::new();
            let v = table.lookup(&mut tape, &mut bind, &store, cond, 2).unwrap();
            tape.value(v)
        };
        let a = fetch(BatchCond::Classes(&[1, 3]));
        let b = fetch(BatchCond::Classes(&[1, 3]));
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 2, 8]);

        let null = fetch(BatchCond::Null);
        assert_eq!(null.shape(), &[2, 1, 8]);
        // null row equals the stored null parameter for every batch row
        let stored = store.get("emb.null").unwrap();
        assert_eq!(&null.data()[0..8], stored.data());
        assert_eq!(&null.data()[8..16], stored.data());
        // and the conditioned stack carries the null row second
        assert_eq!(&a.data()[8..16], stored.data());
    }

    #[test]
    fn bad_class_index_rejected() {
        let mut rng = Rng::seed_from(12);
        let mut store = ParamStore::new();
        let table = ClassEmbeddingTable::init(&mut store, "emb", 4, 8, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut bind = Binding::new();
        assert!(table
            .lookup(&mut tape, &mut bind, &store, BatchCond::Classes(&[4]), 1)
            .is_err());
    }
}
