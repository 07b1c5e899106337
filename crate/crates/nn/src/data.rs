//! Subject datasets on disk and a planted-signal generator.
//!
//! A dataset directory holds `manifest.json` and one feature file per
//! subject (see [`csvit_core::tokenizer::write_features`]).

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use csvit_core::tokenizer::{read_features, write_features, IndexTable, SubjectFeatures};

use crate::error::{NnError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub features: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_vertices: usize,
    pub channels: usize,
    pub subjects: Vec<SubjectEntry>,
    /// Rows of the index table carrying the planted signal, if synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_rows: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub features: Vec<SubjectFeatures>,
    pub labels: Vec<u8>,
    pub signal_rows: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Randomly permutes labels across subjects, breaking any link between
    /// features and labels while keeping class counts.
    pub fn shuffle_labels(&mut self, seed: u64) {
        self.labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mut ds = Dataset {
            ids: Vec::new(),
            features: Vec::new(),
            labels: Vec::new(),
            signal_rows: manifest.signal_rows.clone(),
        };
        for s in &manifest.subjects {
            if s.label > 1 {
                return Err(NnError::Shape(format!("subject {}: label {} is not 0/1", s.id, s.label)));
            }
            if Path::new(&s.features).components().count() != 1 {
                return Err(NnError::Shape(format!(
                    "subject {}: feature path must be a bare file name",
                    s.id
                )));
            }
            let f = read_features(&dir.join(&s.features))?;
            if f.dim() != (manifest.channels, manifest.num_vertices) {
                return Err(NnError::Shape(format!(
                    "subject {}: features {:?}, manifest says ({}, {})",
                    s.id,
                    f.dim(),
                    manifest.channels,
                    manifest.num_vertices
                )));
            }
            ds.ids.push(s.id.clone());
            ds.features.push(f);
            ds.labels.push(s.label);
        }
        Ok(ds)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (channels, num_vertices) = self.features.first().map_or((0, 0), |f| f.dim());
        let mut subjects = Vec::with_capacity(self.len());
        for (i, f) in self.features.iter().enumerate() {
            let file = format!("{}.feat", self.ids[i]);
            write_features(&dir.join(&file), f)?;
            subjects.push(SubjectEntry {
                id: self.ids[i].clone(),
                features: file,
                label: self.labels[i],
            });
        }
        let manifest = Manifest {
            num_vertices,
            channels,
            subjects,
            signal_rows: self.signal_rows.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub subjects: usize,
    pub channels: usize,
    /// CSV rows whose vertices carry the class signal.
    pub signal_csvs: usize,
    /// Shift applied to channel 0 on signal vertices of positive subjects.
    pub effect: f64,
    pub noise: f64,
    pub positive_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects: 400,
            channels: 2,
            signal_csvs: 3,
            effect: -1.5,
            noise: 1.0,
            positive_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Subjects with i.i.d. Gaussian vertex features (channel 0 centred at 2.5,
/// like cortical thickness in mm; others at 0). Positive subjects get
/// `effect` added to channel 0 on every vertex of `signal_csvs` randomly
/// chosen table rows.
pub fn planted_signal(table: &IndexTable, num_vertices: usize, spec: &SynthSpec) -> Result<Dataset> {
    if spec.signal_csvs > table.num_rows() || spec.channels == 0 || spec.subjects < 2 {
        return Err(NnError::Config(format!(
            "cannot plant {} signal CSVs over {} rows with {} channels and {} subjects",
            spec.signal_csvs,
            table.num_rows(),
            spec.channels,
            spec.subjects
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = sample(&mut rng, table.num_rows(), spec.signal_csvs).into_vec();
    rows.sort_unstable();
    let signal_vertices: Vec<usize> = rows.iter().flat_map(|&r| table.row(r)).collect();
    if let Some(&v) = signal_vertices.iter().find(|&&v| v >= num_vertices) {
        return Err(NnError::Shape(format!("table vertex {v} exceeds {num_vertices} vertices")));
    }
    let n_pos = ((spec.subjects as f64 * spec.positive_fraction).round() as usize).clamp(1, spec.subjects - 1);
    let mut labels: Vec<u8> = (0..spec.subjects).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| NnError::Config(e.to_string()))?;
    let mut features = Vec::with_capacity(spec.subjects);
    for &y in &labels {
        let mut f = Array2::from_shape_simple_fn((spec.channels, num_vertices), || noise.sample(&mut rng));
        f.row_mut(0).mapv_inplace(|v| v + 2.5);
        if y == 1 {
            for &v in &signal_vertices {
                f[[0, v]] += spec.effect;
            }
        }
        features.push(f);
    }
    Ok(Dataset {
        ids: (0..spec.subjects).map(|i| format!("sub{i:04}")).collect(),
        features,
        labels,
        signal_rows: Some(rows),
    })
}
