//! Flat parameter storage with a named segment table.
//!
//! All learnable parameters of a model live in one `Vec<f64>` with a
//! deterministic layout: segments are laid out in registration order, so a
//! given model config always produces the same offsets. The optimizer and
//! the checkpoint format both work on the flat vector.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter vector plus per-component offset table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    data: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamStore {
    pub fn builder() -> ParamStoreBuilder {
        ParamStoreBuilder {
            segments: Vec::new(),
            total: 0,
        }
    }

    /// Reconstruct a store from raw parts (checkpoint loading).
    pub fn from_parts(data: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        let expected: usize = segments.iter().map(|s| s.len).sum();
        if expected != data.len() {
            return Err(Error::InvalidConfig(format!(
                "segment table wants {expected} params, blob has {}",
                data.len()
            )));
        }
        Ok(Self { data, segments })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    fn find(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn slice(&self, name: &str) -> &[f64] {
        let seg = self
            .find(name)
            .unwrap_or_else(|| panic!("unknown parameter segment {name:?}"));
        &self.data[seg.offset..seg.offset + seg.len]
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [f64] {
        let seg = self
            .find(name)
            .unwrap_or_else(|| panic!("unknown parameter segment {name:?}"))
            .clone();
        &mut self.data[seg.offset..seg.offset + seg.len]
    }

    /// A zeroed store with the same layout, for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            segments: self.segments.clone(),
        }
    }
}

pub struct ParamStoreBuilder {
    segments: Vec<Segment>,
    total: usize,
}

impl ParamStoreBuilder {
    /// Register a named segment; returns its offset.
    pub fn register(&mut self, name: &str, len: usize) -> usize {
        assert!(
            self.segments.iter().all(|s| s.name != name),
            "duplicate parameter segment {name:?}"
        );
        let offset = self.total;
        self.segments.push(Segment {
            name: name.to_string(),
            offset,
            len,
        });
        self.total += len;
        offset
    }

    pub fn build_zeroed(self) -> ParamStore {
        ParamStore {
            data: vec![0.0; self.total],
            segments: self.segments,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_registration_order() {
        let mut b = ParamStore::builder();
        assert_eq!(b.register("a", 3), 0);
        assert_eq!(b.register("b", 5), 3);
        let store = b.build_zeroed();
        assert_eq!(store.len(), 8);
        assert_eq!(store.slice("b").len(), 5);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut b = ParamStore::builder();
        b.register("a", 3);
        b.register("a", 4);
    }
}
