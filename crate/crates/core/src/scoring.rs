//! Post-hoc OOD scoring: the highest cosine similarity between a test
//! representation and a bank of ID validation representations. Also the
//! nearest-prototype classification rule.

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::json;

use crate::archive::Archive;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::EncoderModel;
use crate::numerics::{argmax, cosine_matrix, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationBank {
    vectors: Tensor,
    source_ids: Vec<String>,
}

pub const PROTOTYPE_SOURCE_PREFIX: &str = "proto:";

impl RepresentationBank {
    pub fn new(vectors: Tensor, source_ids: Vec<String>) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() != source_ids.len() {
            return Err(Error::shape(
                "representation_bank",
                vectors.shape(),
                &[source_ids.len()],
            ));
        }
        for i in 0..vectors.rows() {
            let row = vectors.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm >= 1e-12) {
                return Err(Error::DegenerateVector { norm });
            }
        }
        Ok(Self {
            vectors,
            source_ids,
        })
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.source_ids.iter().any(|s| s == id)
    }

    /// Appends rows, e.g. prototypes when studying that variant.
    pub fn extend(&mut self, vectors: &Tensor, ids: Vec<String>) -> Result<()> {
        if vectors.cols() != self.dim() || vectors.rows() != ids.len() {
            return Err(Error::shape("bank_extend", self.vectors.shape(), vectors.shape()));
        }
        let mut data = self.vectors.data().to_vec();
        data.extend_from_slice(vectors.data());
        let merged = Tensor::new(vec![self.len() + ids.len(), self.dim()], data)?;
        let mut source_ids = self.source_ids.clone();
        source_ids.extend(ids);
        *self = Self::new(merged, source_ids)?;
        Ok(())
    }
}

pub const BANK_TENSOR_NAME: &str = "bank.vectors";

impl RepresentationBank {
    /// Stores the vectors as `bank.vectors` with the id list in the metadata.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(json!({ "kind": "representation-bank" }), json!({ "source_ids": self.source_ids }));
        a.tensors.insert(BANK_TENSOR_NAME, self.vectors.clone(), false);
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let vectors = a
            .tensors
            .get(BANK_TENSOR_NAME)
            .ok_or_else(|| Error::Checkpoint(format!("archive has no {BANK_TENSOR_NAME}")))?;
        let ids: Vec<String> = serde_json::from_value(a.meta["source_ids"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad bank id list: {e}")))?;
        Self::new(vectors.clone(), ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// One representation row per validation sample.
pub fn build_bank<'a>(
    model: &EncoderModel,
    val_set: impl IntoIterator<Item = &'a Sample>,
) -> Result<RepresentationBank> {
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for s in val_set {
        rows.push(model.represent(&s.tokens)?.into_data());
        ids.push(s.id.clone());
    }
    if rows.is_empty() {
        return Err(Error::State("cannot build a bank from an empty validation set".into()));
    }
    RepresentationBank::new(Tensor::from_rows(&rows)?, ids)
}

/// `max_i cos(z, bank_i)`, clamped to [−1, 1].
pub fn cosine_score(z: &Tensor, bank: &RepresentationBank) -> Result<f64> {
    if bank.is_empty() {
        return Err(Error::State("empty representation bank".into()));
    }
    if z.numel() != bank.dim() {
        return Err(Error::Compatibility(format!(
            "representation dimension {} does not match bank dimension {}",
            z.numel(),
            bank.dim()
        )));
    }
    let z = z.clone().reshape(&[1, bank.dim()])?;
    let sims = cosine_matrix(&z, bank.vectors())?;
    let best = sims.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(best.clamp(-1.0, 1.0))
}

/// Refuses to score samples whose ids are already in the bank.
pub fn check_disjoint<'a>(
    bank: &RepresentationBank,
    samples: impl IntoIterator<Item = &'a Sample>,
) -> Result<()> {
    let ids: BTreeSet<&str> = bank.source_ids().iter().map(String::as_str).collect();
    for s in samples {
        if ids.contains(s.id.as_str()) {
            return Err(Error::State(format!(
                "sample {} is both in the bank and being scored",
                s.id
            )));
        }
    }
    Ok(())
}

/// Index of the most cosine-similar prototype; ties go to the lowest index.
pub fn classify(z: &Tensor, prototypes: &Tensor) -> Result<usize> {
    if z.numel() != prototypes.cols() {
        return Err(Error::shape("classify", z.shape(), prototypes.shape()));
    }
    let z = z.clone().reshape(&[1, prototypes.cols()])?;
    let sims = cosine_matrix(&z, prototypes)?;
    Ok(argmax(sims.data()))
}
