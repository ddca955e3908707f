//! Domain types for co-registered multi-sequence volumes and the
//! voxel-wise maps derived from them.
//!
//! All spatial tensors use `(x, y, z)` axis order with the channel (sequence
//! or class) axis first, in standard (row-major) layout.

use ndarray::{Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Smallest spatial extent accepted for an input volume.
pub const MIN_SPATIAL_DIM: usize = 8;

/// A co-registered `S`-sequence volume of shape `S×H×W×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSequenceVolume {
    data: Array4<f32>,
    sequence_names: Vec<String>,
    spacing: [f64; 3],
}

impl MultiSequenceVolume {
    pub fn new(data: Array4<f32>, sequence_names: Vec<String>, spacing: [f64; 3]) -> Result<Self> {
        let s = data.shape()[0];
        if s < 2 {
            return Err(Error::shape(format!("need at least 2 sequences, got {s}")));
        }
        if sequence_names.len() != s {
            return Err(Error::shape(format!(
                "{} sequence names for {s} sequences",
                sequence_names.len()
            )));
        }
        for (i, name) in sequence_names.iter().enumerate() {
            if sequence_names[..i].contains(name) {
                return Err(Error::Value(format!("duplicate sequence name `{name}`")));
            }
        }
        if let Some(d) = data.shape()[1..].iter().find(|&&d| d < MIN_SPATIAL_DIM) {
            return Err(Error::shape(format!(
                "spatial dimension {d} below minimum {MIN_SPATIAL_DIM}"
            )));
        }
        if spacing.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::Value(format!("spacing must be positive, got {spacing:?}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("volume contains non-finite values".into()));
        }
        let data = if data.is_standard_layout() { data } else { data.as_standard_layout().to_owned() };
        Ok(Self { data, sequence_names, spacing })
    }

    /// Builds a volume with generated names `seq0..seqN` and unit spacing.
    pub fn from_array(data: Array4<f32>) -> Result<Self> {
        let names = (0..data.shape()[0]).map(|i| format!("seq{i}")).collect();
        Self::new(data, names, [1.0; 3])
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn sequence_names(&self) -> &[String] {
        &self.sequence_names
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn num_sequences(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sequence(&self, s: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), s)
    }

    /// Same metadata, new payload. The caller guarantees the shape matches.
    pub(crate) fn with_data(&self, data: Array4<f32>) -> Self {
        debug_assert_eq!(data.shape(), self.data.shape());
        Self { data, sequence_names: self.sequence_names.clone(), spacing: self.spacing }
    }
}

/// Pre-sigmoid network output, `C×H×W×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap(Array4<f32>);

impl LogitMap {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("logits contain non-finite values".into()));
        }
        Ok(Self(data))
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.0
    }

    pub fn into_data(self) -> Array4<f32> {
        self.0
    }

    pub fn sigmoid(&self) -> ProbabilityMap {
        ProbabilityMap(self.0.mapv(sigmoid))
    }
}

/// Voxel-wise sigmoid probabilities, `C×H×W×D`, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Array4<f32>);

impl ProbabilityMap {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Value("probabilities must lie in [0, 1]".into()));
        }
        Ok(Self(data))
    }

    /// Constant map, mostly useful in tests.
    pub fn filled(shape: [usize; 4], value: f32) -> Result<Self> {
        Self::new(Array4::from_elem(shape, value))
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.0
    }

    pub fn into_data(self) -> Array4<f32> {
        self.0
    }

    pub fn num_channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.0.shape();
        [s[1], s[2], s[3]]
    }
}

/// Binary spatial mask `H×W×D`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask3D(pub Array3<bool>);

impl BinaryMask3D {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self(Array3::from_elem(shape, false))
    }

    pub fn ones(shape: [usize; 3]) -> Self {
        Self(Array3::from_elem(shape, true))
    }

    pub fn data(&self) -> &Array3<bool> {
        &self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.0.shape();
        [s[0], s[1], s[2]]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.0.len().max(1) as f64
    }
}

/// One-vs-rest binary labels `C×H×W×D`.
///
/// When `nested` is set, channel `c + 1` is a subset of channel `c`
/// (whole tumour ⊇ tumour core ⊇ enhancing tumour).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    data: Array4<bool>,
    nested: bool,
}

impl LabelVolume {
    pub fn new(data: Array4<bool>, nested: bool) -> Result<Self> {
        let label = Self { data, nested };
        if nested && !label.is_nested() {
            return Err(Error::Value("label channels violate nesting".into()));
        }
        Ok(label)
    }

    pub fn data(&self) -> &Array4<bool> {
        &self.data
    }

    pub fn nested(&self) -> bool {
        self.nested
    }

    pub fn num_channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channel(&self, c: usize) -> ArrayView3<'_, bool> {
        self.data.index_axis(Axis(0), c)
    }

    /// True when every channel is contained in the previous one.
    pub fn is_nested(&self) -> bool {
        (1..self.num_channels()).all(|c| {
            self.channel(c)
                .iter()
                .zip(self.channel(c - 1).iter())
                .all(|(&inner, &outer)| !inner || outer)
        })
    }

    pub fn to_f32(&self) -> Array4<f32> {
        self.data.mapv(|b| if b { 1.0 } else { 0.0 })
    }
}

#[inline]
pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Standardises every sequence independently to zero mean and unit
/// (population) standard deviation over all of its voxels.
pub fn zscore_normalize(vol: &MultiSequenceVolume) -> Result<MultiSequenceVolume> {
    let mut data = vol.data().clone();
    for (index, mut seq) in data.outer_iter_mut().enumerate() {
        let (mean, std) = mean_std(seq.iter().copied());
        if std <= 1e-12 * (1.0 + mean.abs()) {
            return Err(Error::ZeroVarianceSequence { index });
        }
        seq.mapv_inplace(|v| ((v as f64 - mean) / std) as f32);
    }
    Ok(vol.with_data(data))
}

pub(crate) fn mean_std(values: impl Iterator<Item = f32> + Clone) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0f64;
    for v in values.clone() {
        sum += v as f64;
        n += 1;
    }
    let mean = sum / n.max(1) as f64;
    let var = values.map(|v| (v as f64 - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
    (mean, var.sqrt())
}
