//! Padded patch tokenization: CSV index table, binary mask, and gathering
//! per-vertex features into a `B × C × N × V_max` tensor.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rayon::prelude::*;

use crate::binio;
use crate::error::{Error, Result};
use crate::partitioner::CsvMap;

const INDEX_MAGIC: &[u8; 7] = b"CSVIDX1";
const BATCH_MAGIC: &[u8; 9] = b"CSVBATCH1";
pub const PAD: i32 = -1;

/// `N × V_max` vertex indices; each row is one CSV's sorted members
/// followed by `-1` padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexTable {
    pub table: Array2<i32>,
}

impl IndexTable {
    /// Builds a table from member lists. `v_max` may force a wider table.
    pub fn from_rows(rows: &[Vec<usize>], v_max: Option<usize>) -> Result<Self> {
        let natural = rows.iter().map(Vec::len).max().unwrap_or(0);
        let width = match v_max {
            Some(w) if w < natural => {
                return Err(Error::Validation(format!(
                    "forced v_max {w} is below the largest CSV ({natural})"
                )))
            }
            Some(w) => w,
            None => natural,
        };
        let mut table = Array2::from_elem((rows.len(), width), PAD);
        for (i, row) in rows.iter().enumerate() {
            let mut sorted = row.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Validation(format!("row {i} repeats a vertex")));
            }
            for (j, &v) in sorted.iter().enumerate() {
                table[[i, j]] = i32::try_from(v)
                    .map_err(|_| Error::Validation(format!("vertex index {v} exceeds i32")))?;
            }
        }
        Ok(IndexTable { table })
    }

    pub fn num_rows(&self) -> usize {
        self.table.nrows()
    }

    pub fn v_max(&self) -> usize {
        self.table.ncols()
    }

    /// Non-pad entries of row `i`.
    pub fn row(&self, i: usize) -> Vec<usize> {
        self.table
            .row(i)
            .iter()
            .take_while(|&&v| v >= 0)
            .map(|&v| v as usize)
            .collect()
    }

    /// Checks the row layout: members sorted, distinct, then only padding;
    /// no vertex in two rows.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, row) in self.table.outer_iter().enumerate() {
            let len = row.iter().take_while(|&&v| v >= 0).count();
            if row.iter().skip(len).any(|&v| v != PAD) {
                return Err(Error::Validation(format!("row {i}: entries after padding")));
            }
            let members = row.iter().take(len);
            if row.as_slice().is_some_and(|r| r[..len].windows(2).any(|w| w[0] >= w[1])) {
                return Err(Error::Validation(format!("row {i}: members not strictly ascending")));
            }
            for &v in members {
                if !seen.insert(v) {
                    return Err(Error::Validation(format!("vertex {v} appears in two rows")));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(16 + self.table.len() * 4);
        buf.write_all(INDEX_MAGIC)?;
        binio::write_u32(&mut buf, self.num_rows() as u32)?;
        binio::write_u32(&mut buf, self.v_max() as u32)?;
        for &v in self.table.iter() {
            binio::write_i32(&mut buf, v)?;
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        binio::expect_magic(&mut r, INDEX_MAGIC)?;
        let n = binio::checked_len(binio::read_u32(&mut r)?, 1 << 20, "row")?;
        let w = binio::checked_len(binio::read_u32(&mut r)?, 1 << 16, "column")?;
        let data = (0..n * w)
            .map(|_| binio::read_i32(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let table = Array2::from_shape_vec((n, w), data)
            .map_err(|e| Error::Format(format!("index table shape: {e}")))?;
        let t = IndexTable { table };
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_map(map: &CsvMap, side: &str) -> Result<()> {
    let nv = map.num_vertices();
    for (c, m) in map.members.iter().enumerate() {
        for &v in m {
            if v >= nv || map.csv_of[v] != Some(c) {
                return Err(Error::Validation(format!(
                    "{side} map: CSV {c} member {v} is inconsistent with its {nv}-vertex assignment"
                )));
            }
        }
    }
    Ok(())
}

/// Rows for the left CSVs then the right CSVs; right vertex ids are offset
/// by the left vertex count.
pub fn build_index_table(left: &CsvMap, right: &CsvMap) -> Result<IndexTable> {
    build_index_table_with(left, right, None)
}

pub fn build_index_table_with(
    left: &CsvMap,
    right: &CsvMap,
    v_max: Option<usize>,
) -> Result<IndexTable> {
    check_map(left, "left")?;
    check_map(right, "right")?;
    let offset = left.num_vertices();
    let rows: Vec<Vec<usize>> = left
        .members
        .iter()
        .cloned()
        .chain(right.members.iter().map(|m| m.iter().map(|&v| v + offset).collect()))
        .collect();
    IndexTable::from_rows(&rows, v_max)
}

/// `mask[i][j] = 1` iff `table[i][j]` is a vertex.
pub fn build_mask(table: &IndexTable) -> Array2<f64> {
    table.table.mapv(|v| if v >= 0 { 1.0 } else { 0.0 })
}

/// Features of one subject: `C × V` (channel rows).
pub type SubjectFeatures = Array2<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    /// `B × C × N × V_max`, zero wherever `mask` is zero.
    pub x: Array4<f64>,
    /// `N × V_max` of 0/1.
    pub mask: Array2<f64>,
}

impl PaddedBatch {
    /// Applies the mask to a raw tensor (zeroing pad slots).
    pub fn from_raw(mut x: Array4<f64>, mask: Array2<f64>) -> Result<Self> {
        let (_, _, n, w) = x.dim();
        if mask.dim() != (n, w) {
            return Err(Error::Validation(format!(
                "mask {:?} does not match tensor slots ({n}, {w})",
                mask.dim()
            )));
        }
        for mut sample in x.outer_iter_mut() {
            for mut channel in sample.outer_iter_mut() {
                channel *= &mask;
            }
        }
        Ok(PaddedBatch { x, mask })
    }

    pub fn batch_size(&self) -> usize {
        self.x.dim().0
    }

    pub fn channels(&self) -> usize {
        self.x.dim().1
    }

    pub fn num_tokens(&self) -> usize {
        self.x.dim().2
    }

    pub fn v_max(&self) -> usize {
        self.x.dim().3
    }

    /// Sub-batch of the given subjects, in the given order.
    pub fn select(&self, subjects: &[usize]) -> PaddedBatch {
        PaddedBatch {
            x: self.x.select(Axis(0), subjects),
            mask: self.mask.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (b, c, n, w) = self.x.dim();
        let mut buf = Vec::with_capacity(32 + n * w + self.x.len() * 8);
        buf.write_all(BATCH_MAGIC)?;
        for d in [b, c, n, w] {
            binio::write_u32(&mut buf, d as u32)?;
        }
        buf.extend(self.mask.iter().map(|&m| u8::from(m != 0.0)));
        for &v in self.x.iter() {
            binio::write_f64(&mut buf, v)?;
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        binio::expect_magic(&mut r, BATCH_MAGIC)?;
        let mut d = [0usize; 4];
        for x in &mut d {
            *x = binio::checked_len(binio::read_u32(&mut r)?, 1 << 20, "dimension")?;
        }
        let [b, c, n, w] = d;
        let start = r.position() as usize;
        let mask_bytes = bytes
            .get(start..start + n * w)
            .ok_or_else(|| Error::Format("truncated mask".into()))?;
        let mask = Array2::from_shape_vec((n, w), mask_bytes.iter().map(|&m| f64::from(m)).collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        r.set_position((start + n * w) as u64);
        let data = (0..b * c * n * w)
            .map(|_| binio::read_f64(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let x = Array4::from_shape_vec((b, c, n, w), data).map_err(|e| Error::Format(e.to_string()))?;
        Ok(PaddedBatch { x, mask })
    }
}

/// `x[b][c][i][j] = features[b][c][table[i][j]]` where the mask is set,
/// zero elsewhere.
pub fn gather(features: &[SubjectFeatures], table: &IndexTable, mask: &Array2<f64>) -> Result<PaddedBatch> {
    let (n, w) = table.table.dim();
    if mask.dim() != (n, w) {
        return Err(Error::Validation("mask shape differs from the index table".into()));
    }
    let Some(first) = features.first() else {
        return Err(Error::Validation("no subjects to gather".into()));
    };
    let (c, nv) = first.dim();
    if c == 0 {
        return Err(Error::Validation("features need at least one channel".into()));
    }
    if let Some(i) = features.iter().position(|f| f.dim() != (c, nv)) {
        return Err(Error::Validation(format!(
            "subject {i} features {:?} differ from ({c}, {nv})",
            features[i].dim()
        )));
    }
    if let Some(&bad) = table.table.iter().find(|&&v| v >= 0 && v as usize >= nv) {
        return Err(Error::Validation(format!(
            "index {bad} out of range for {nv} feature vertices"
        )));
    }
    let samples: Vec<Array3<f64>> = features
        .par_iter()
        .map(|f| {
            let mut s = Array3::zeros((c, n, w));
            for ((i, j), &v) in table.table.indexed_iter() {
                if v >= 0 && mask[[i, j]] != 0.0 {
                    for ch in 0..c {
                        s[[ch, i, j]] = f[[ch, v as usize]];
                    }
                }
            }
            s
        })
        .collect();
    let views: Vec<_> = samples.iter().map(|s| s.view()).collect();
    let x = ndarray::stack(Axis(0), &views).map_err(|e| Error::Validation(e.to_string()))?;
    Ok(PaddedBatch { x, mask: mask.clone() })
}

/// Inverse of [`gather`]: per-subject `C × num_vertices` features, zero at
/// vertices in no CSV.
pub fn scatter(batch: &PaddedBatch, table: &IndexTable, num_vertices: usize) -> Vec<SubjectFeatures> {
    let (b, c, _, _) = batch.x.dim();
    (0..b)
        .map(|s| {
            let mut f = Array2::zeros((c, num_vertices));
            for ((i, j), &v) in table.table.indexed_iter() {
                if v >= 0 {
                    for ch in 0..c {
                        f[[ch, v as usize]] = batch.x[[s, ch, i, j]];
                    }
                }
            }
            f
        })
        .collect()
}

/// Per-channel mean and standard deviation over unmasked slots.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fits channel statistics on the given subjects only.
pub fn fit_channel_stats(batch: &PaddedBatch, subjects: &[usize]) -> ChannelStats {
    let c = batch.channels();
    let mut mean = vec![0.0; c];
    let mut std = vec![1.0; c];
    let count = batch.mask.sum() * subjects.len() as f64;
    if count == 0.0 {
        return ChannelStats { mean, std };
    }
    for ch in 0..c {
        let mut sum = 0.0;
        for &s in subjects {
            sum += batch.x.index_axis(Axis(0), s).index_axis(Axis(0), ch).sum();
        }
        let m = sum / count;
        let mut sq = 0.0;
        for &s in subjects {
            let plane = batch.x.index_axis(Axis(0), s);
            let plane = plane.index_axis(Axis(0), ch);
            sq += ndarray::Zip::from(&plane)
                .and(&batch.mask)
                .fold(0.0, |acc, &x, &m_| acc + m_ * (x - m) * (x - m));
        }
        mean[ch] = m;
        let sd = (sq / count).sqrt();
        std[ch] = if sd > 1e-12 { sd } else { 1.0 };
    }
    ChannelStats { mean, std }
}

/// Standardizes unmasked slots in place; pads stay zero.
pub fn standardize(batch: &mut PaddedBatch, stats: &ChannelStats) {
    let mask = &batch.mask;
    for mut sample in batch.x.outer_iter_mut() {
        for (ch, mut plane) in sample.outer_iter_mut().enumerate() {
            ndarray::Zip::from(&mut plane).and(mask).for_each(|x, &m| {
                if m != 0.0 {
                    *x = (*x - stats.mean[ch]) / stats.std[ch];
                }
            });
        }
    }
}

/// Feature file: vertex count (u32), channel count (u32), then each channel's
/// values as little-endian f32.
pub fn write_features(path: &Path, features: &SubjectFeatures) -> Result<()> {
    let (c, nv) = features.dim();
    let mut buf = Vec::with_capacity(8 + c * nv * 4);
    binio::write_u32(&mut buf, nv as u32)?;
    binio::write_u32(&mut buf, c as u32)?;
    for &v in features.iter() {
        binio::write_f32(&mut buf, v as f32)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<SubjectFeatures> {
    let bytes = fs::read(path)?;
    let mut r = Cursor::new(bytes.as_slice());
    let nv = binio::checked_len(binio::read_u32(&mut r)?, 1 << 24, "vertex")?;
    let c = binio::checked_len(binio::read_u32(&mut r)?, 1 << 10, "channel")?;
    let expected = 8 + nv * c * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let data = (0..nv * c)
        .map(|_| binio::read_f32(&mut r).map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    Array2::from_shape_vec((c, nv), data).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_width_pads_rows() {
        let t = IndexTable::from_rows(&[vec![7, 2, 5], vec![9]], Some(3)).unwrap();
        assert_eq!(t.table.row(0).to_vec(), vec![2, 5, 7]);
        assert_eq!(t.table.row(1).to_vec(), vec![9, -1, -1]);
        let m = build_mask(&t);
        assert_eq!(m.row(0).to_vec(), vec![1.0, 1.0, 1.0]);
        assert_eq!(m.row(1).to_vec(), vec![1.0, 0.0, 0.0]);
        assert!(IndexTable::from_rows(&[vec![1, 2, 3]], Some(2)).is_err());
    }

    #[test]
    fn table_round_trip() {
        let t = IndexTable::from_rows(&[vec![0, 1], vec![4], vec![2, 3]], Some(4)).unwrap();
        let bytes = t.to_bytes().unwrap();
        let back = IndexTable::from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn validate_catches_bad_layout() {
        let mut t = IndexTable::from_rows(&[vec![0, 1], vec![2]], None).unwrap();
        t.table[[1, 1]] = 5;
        t.table[[1, 0]] = -1;
        assert!(t.validate().is_err());
        let mut t = IndexTable::from_rows(&[vec![0, 1], vec![2]], None).unwrap();
        t.table[[1, 0]] = 1;
        assert!(t.validate().is_err());
    }

    #[test]
    fn constant_features_give_mask() {
        let t = IndexTable::from_rows(&[vec![0, 1, 2], vec![3]], None).unwrap();
        let mask = build_mask(&t);
        let f = Array2::from_elem((2, 5), 1.0);
        let batch = gather(&[f], &t, &mask).unwrap();
        assert_eq!(batch.x.dim(), (1, 2, 2, 3));
        for ch in 0..2 {
            assert_eq!(batch.x.index_axis(Axis(0), 0).index_axis(Axis(0), ch), mask);
        }
    }

    #[test]
    fn uncovered_vertices_do_not_matter() {
        let t = IndexTable::from_rows(&[vec![0, 2], vec![3]], None).unwrap();
        let mask = build_mask(&t);
        let mut f = Array2::from_shape_fn((1, 5), |(_, v)| v as f64);
        let a = gather(&[f.clone()], &t, &mask).unwrap();
        f[[0, 1]] = 99.0;
        f[[0, 4]] = -7.0;
        let b = gather(&[f], &t, &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scatter_inverts_gather() {
        let t = IndexTable::from_rows(&[vec![0, 2], vec![3, 1]], None).unwrap();
        let mask = build_mask(&t);
        let f = Array2::from_shape_fn((2, 5), |(c, v)| (c * 10 + v) as f64 + 0.5);
        let batch = gather(std::slice::from_ref(&f), &t, &mask).unwrap();
        let back = scatter(&batch, &t, 5);
        for v in 0..4 {
            assert_eq!(back[0].column(v), f.column(v));
        }
        assert_eq!(back[0][[0, 4]], 0.0);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let t = IndexTable::from_rows(&[vec![0, 9]], None).unwrap();
        let mask = build_mask(&t);
        assert!(gather(&[Array2::zeros((1, 5))], &t, &mask).is_err());
    }

    #[test]
    fn standardize_keeps_pads_zero() {
        let t = IndexTable::from_rows(&[vec![0, 1, 2], vec![3]], None).unwrap();
        let mask = build_mask(&t);
        let f1 = Array2::from_shape_fn((1, 4), |(_, v)| v as f64);
        let f2 = Array2::from_shape_fn((1, 4), |(_, v)| 2.0 * v as f64);
        let mut batch = gather(&[f1, f2], &t, &mask).unwrap();
        let stats = fit_channel_stats(&batch, &[0, 1]);
        assert!((stats.mean[0] - 2.25).abs() < 1e-12);
        standardize(&mut batch, &stats);
        assert_eq!(batch.x[[0, 0, 1, 1]], 0.0);
        let total: f64 = batch.x.sum();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn batch_and_feature_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = Array2::from_shape_fn((2, 3), |(c, v)| c as f64 + v as f64 * 0.25);
        let p = dir.path().join("s.feat");
        write_features(&p, &f).unwrap();
        assert_eq!(read_features(&p).unwrap(), f);
        let t = IndexTable::from_rows(&[vec![0, 2], vec![1]], None).unwrap();
        let batch = gather(&[f], &t, &build_mask(&t)).unwrap();
        assert_eq!(PaddedBatch::from_bytes(&batch.to_bytes().unwrap()).unwrap(), batch);
    }
}
