use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans_fit, nearest, KMeansFit};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Per-frame cluster ids for one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelSequence {
    pub labels: Vec<u32>,
}

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Largest tolerated length gap between a label sequence and encoder frames.
pub const MAX_ALIGN_GAP: usize = 2;

/// Truncates both sides to the shorter length. Gaps above two frames are an error.
pub fn align_lengths(labels: &LabelSequence, frames: usize) -> Result<LabelSequence> {
    if labels.len().abs_diff(frames) > MAX_ALIGN_GAP {
        return Err(Error::Alignment { labels: labels.len(), frames });
    }
    Ok(LabelSequence { labels: labels.labels[..labels.len().min(frames)].to_vec() })
}

#[derive(Serialize, Deserialize)]
struct Header {
    k: usize,
    dim: usize,
    feature: String,
}

/// Frozen cluster centroids shared by every sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Mat<f64>,
    pub feature: String,
}

impl Codebook {
    pub fn fit(frames: &Mat<f64>, k: usize, max_iters: usize, seed: u64) -> Result<(Self, KMeansFit<f64>)> {
        let fit = kmeans_fit(frames, k, max_iters, seed)?;
        Ok((Codebook { centroids: fit.centroids.clone(), feature: "mfcc39".into() }, fit))
    }

    pub fn k(&self) -> usize {
        self.centroids.rows
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols
    }

    /// Nearest centroid per frame, ties to the lowest index.
    pub fn assign_labels(&self, frames: &Mat<f64>) -> Result<LabelSequence> {
        if frames.cols != self.dim() {
            return Err(Error::invalid(format!("feature width {} does not match codebook width {}", frames.cols, self.dim())));
        }
        let labels = (0..frames.rows).map(|i| nearest(frames.row(i), &self.centroids).0 as u32).collect();
        Ok(LabelSequence { labels })
    }

    /// One JSON header line, then centroids as little-endian f32.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        let header = Header { k: self.k(), dim: self.dim(), feature: self.feature.clone() };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for &v in &self.centroids.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end())?;
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() != header.k * header.dim * 4 {
            return Err(Error::invalid(format!("codebook payload is {} bytes, expected {}", buf.len(), header.k * header.dim * 4)));
        }
        let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        Ok(Codebook { centroids: Mat::from_vec(header.k, header.dim, data), feature: header.feature })
    }
}

/// Label sidecar: one `id<TAB>l0,l1,...` line per utterance.
pub fn write_labels(path: impl AsRef<Path>, labels: &BTreeMap<String, LabelSequence>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (id, seq) in labels {
        let joined: Vec<String> = seq.labels.iter().map(u32::to_string).collect();
        writeln!(w, "{id}\t{}", joined.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<BTreeMap<String, LabelSequence>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (id, rest) = line.split_once('\t').ok_or_else(|| Error::invalid(format!("labels line {}: missing tab", n + 1)))?;
        let labels = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',')
                .map(|s| s.trim().parse::<u32>().map_err(|e| Error::invalid(format!("labels line {}: {e}", n + 1))))
                .collect::<Result<_>>()?
        };
        out.insert(id.to_string(), LabelSequence { labels });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alignment_truncates_small_gaps() {
        let l = LabelSequence { labels: (0..50).collect() };
        assert_eq!(align_lengths(&l, 49).unwrap().len(), 49);
        assert_eq!(align_lengths(&l, 52).unwrap().len(), 50);
        assert!(matches!(align_lengths(&l, 47), Err(Error::Alignment { labels: 50, frames: 47 })));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = Codebook { centroids: Mat::from_rows(&[vec![1.0], vec![-1.0], vec![1.0]]), feature: "x".into() };
        let l = cb.assign_labels(&Mat::from_rows(&[vec![0.0], vec![2.0], vec![-5.0]])).unwrap();
        assert_eq!(l.labels, vec![0, 0, 1]);
    }

    #[test]
    fn assignment_matches_brute_force() {
        let cb = Codebook { centroids: Mat::from_rows(&[vec![0.0, 0.0], vec![3.0, 1.0], vec![-2.0, 4.0]]), feature: "x".into() };
        let pts: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.37).sin() * 4.0, (i as f64 * 0.91).cos() * 4.0]).collect();
        let l = cb.assign_labels(&Mat::from_rows(&pts)).unwrap();
        for (p, &lab) in pts.iter().zip(&l.labels) {
            let d: Vec<f64> = (0..3).map(|c| (p[0] - cb.centroids.get(c, 0)).powi(2) + (p[1] - cb.centroids.get(c, 1)).powi(2)).collect();
            let best = (0..3).min_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap()).unwrap();
            assert_eq!(lab as usize, best);
        }
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cb = Codebook { centroids: Mat::from_rows(&[vec![0.5, -1.25], vec![3.0, 8.0]]), feature: "mfcc39".into() };
        cb.save(dir.path().join("cb.bin")).unwrap();
        assert_eq!(Codebook::load(dir.path().join("cb.bin")).unwrap(), cb);
        let mut m = BTreeMap::new();
        m.insert("u1".to_string(), LabelSequence { labels: vec![3, 1, 4] });
        m.insert("u2".to_string(), LabelSequence { labels: vec![] });
        write_labels(dir.path().join("l.tsv"), &m).unwrap();
        assert_eq!(read_labels(dir.path().join("l.tsv")).unwrap(), m);
    }
}
