use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One entry of a [`FlatParams`] manifest: a layer index and how many
/// scalars that layer contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpan {
    pub layer: u32,
    pub len: usize,
}

/// A flat parameter vector with a layer manifest.
///
/// Values are stored layer-major in manifest order. Construction validates
/// that the manifest covers the values exactly, that layer indices are
/// strictly increasing and that every value is finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatParams {
    values: Vec<f64>,
    manifest: Vec<LayerSpan>,
}

impl FlatParams {
    pub fn new(values: Vec<f64>, manifest: Vec<LayerSpan>) -> Result<Self> {
        validate_manifest(&manifest)?;
        let total: usize = manifest.iter().map(|s| s.len).sum();
        if total != values.len() {
            return Err(Error::invalid(format!(
                "manifest covers {total} scalars but {} values were given",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("value {i} is not finite")));
        }
        Ok(FlatParams { values, manifest })
    }

    /// Concatenates per-layer vectors. Layers must be given in strictly
    /// increasing order.
    pub fn concat(layers: Vec<(u32, Vec<f64>)>) -> Result<Self> {
        let manifest = layers
            .iter()
            .map(|(layer, v)| LayerSpan {
                layer: *layer,
                len: v.len(),
            })
            .collect();
        let values = layers.into_iter().flat_map(|(_, v)| v).collect();
        FlatParams::new(values, manifest)
    }

    /// A zero vector sharing `other`'s manifest.
    pub fn zeros_like(other: &FlatParams) -> Self {
        FlatParams {
            values: vec![0.0; other.values.len()],
            manifest: other.manifest.clone(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn manifest(&self) -> &[LayerSpan] {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Replaces the values, keeping the manifest. Length and finiteness are
    /// rechecked.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        FlatParams::new(values, self.manifest.clone())
    }

    /// Splits back into `(layer, values)` pairs; inverse of [`FlatParams::concat`].
    pub fn split(&self) -> Vec<(u32, Vec<f64>)> {
        self.layer_slices()
            .map(|(layer, s)| (layer, s.to_vec()))
            .collect()
    }

    pub fn layer_slices(&self) -> impl Iterator<Item = (u32, &[f64])> + '_ {
        let mut offset = 0;
        self.manifest.iter().map(move |span| {
            let s = &self.values[offset..offset + span.len];
            offset += span.len;
            (span.layer, s)
        })
    }

    /// Returns the values of one layer, if present.
    pub fn layer(&self, layer: u32) -> Option<&[f64]> {
        self.layer_slices()
            .find(|(l, _)| *l == layer)
            .map(|(_, s)| s)
    }

    pub fn max_layer(&self) -> Option<u32> {
        self.manifest.last().map(|s| s.layer)
    }

    pub fn same_manifest(&self, other: &FlatParams) -> bool {
        self.manifest == other.manifest
    }

    pub(crate) fn ensure_same_manifest(&self, other: &FlatParams) -> Result<()> {
        if self.same_manifest(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "manifest mismatch: {:?} vs {:?}",
                self.manifest, other.manifest
            )))
        }
    }

    pub fn dot(&self, other: &FlatParams) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

fn validate_manifest(manifest: &[LayerSpan]) -> Result<()> {
    for pair in manifest.windows(2) {
        if pair[1].layer <= pair[0].layer {
            return Err(Error::invalid(format!(
                "layer indices must be strictly increasing, got {} then {}",
                pair[0].layer, pair[1].layer
            )));
        }
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
