//! Parallel multi-rate synthetic corpora: generation, on-disk layout and
//! pooled pseudo-labelling.
//!
//! A corpus directory holds `manifest.tsv` (`id<TAB>path<TAB>rate_hz<TAB>duration_s`),
//! `segments.tsv` with the ground-truth label tracks, WAVs under `wav/`, and
//! after labelling `codebook.bin` plus `labels.tsv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{decimate, generate_utterance, mfcc, read_wav, write_wav, SynthSpec, UtteranceLabelTrack, Waveform, CANONICAL_RATES};
use crate::error::{Error, Result};
use crate::objective::{Codebook, KMeansFit, LabelSequence};
use crate::tensor::Mat;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SEGMENTS_FILE: &str = "segments.tsv";
pub const CODEBOOK_FILE: &str = "codebook.bin";
pub const LABELS_FILE: &str = "labels.tsv";

/// Key-value corpus description (`duration_s=2.0`, `num_classes=4`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub duration_s: f64,
    pub num_classes: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { duration_s: 2.0, num_classes: 16, count: 200, seed: 7 }
    }
}

impl CorpusSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = CorpusSpec::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::invalid(format!("spec line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |e: &dyn std::fmt::Display| Error::invalid(format!("spec line {}: {k}: {e}", n + 1));
            match k {
                "duration_s" => spec.duration_s = v.parse().map_err(|e| bad(&e))?,
                "num_classes" => spec.num_classes = v.parse().map_err(|e| bad(&e))?,
                "count" => spec.count = v.parse().map_err(|e| bad(&e))?,
                "seed" => spec.seed = v.parse().map_err(|e| bad(&e))?,
                other => return Err(Error::invalid(format!("spec line {}: unknown key {other}", n + 1))),
            }
        }
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        format!("duration_s={}\nnum_classes={}\ncount={}\nseed={}\n", self.duration_s, self.num_classes, self.count, self.seed)
    }

    pub fn utterance_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
    }
}

/// One master utterance rendered at several rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelUtterance {
    pub id: String,
    pub track: UtteranceLabelTrack,
    pub waves: BTreeMap<u32, Waveform>,
}

impl ParallelUtterance {
    pub fn entry_id(&self, rate_hz: u32) -> String {
        entry_id(&self.id, rate_hz)
    }
}

pub fn entry_id(group: &str, rate_hz: u32) -> String {
    format!("{group}-{rate_hz}")
}

/// Generates `spec.count` utterances at 48 kHz and decimates each to `rates`.
pub fn generate_parallel(spec: &CorpusSpec, rates: &[u32]) -> Result<Vec<ParallelUtterance>> {
    if rates.is_empty() {
        return Err(Error::invalid("no rates requested"));
    }
    (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let (master, track) = generate_utterance(&SynthSpec::new(spec.duration_s, spec.num_classes, spec.utterance_seed(i)))?;
            let waves = rates.iter().map(|&r| Ok((r, decimate(&master, r)?))).collect::<Result<_>>()?;
            Ok(ParallelUtterance { id: format!("u{i:05}"), track, waves })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub rate_hz: u32,
    pub duration_s: f64,
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        writeln!(s, "{}\t{}\t{}\t{:.6}", e.id, e.path.display(), e.rate_hz, e.duration_s).unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::invalid(format!("manifest line {}: expected 4 columns, got {}", n + 1, cols.len())));
            }
            let bad = |what: &str| Error::invalid(format!("manifest line {}: bad {what}", n + 1));
            Ok(ManifestEntry {
                id: cols[0].to_string(),
                path: PathBuf::from(cols[1]),
                rate_hz: cols[2].parse().map_err(|_| bad("rate_hz"))?,
                duration_s: cols[3].parse().map_err(|_| bad("duration_s"))?,
            })
        })
        .collect()
}

fn join_nums<I: IntoIterator<Item = usize>>(it: I) -> String {
    it.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Writes WAVs, the manifest and the segment tracks. Paths in the manifest
/// are relative to `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, utts: &[ParallelUtterance]) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("wav"))?;
    let entries: Vec<ManifestEntry> = utts
        .par_iter()
        .map(|u| {
            u.waves
                .iter()
                .map(|(&rate, w)| {
                    let id = u.entry_id(rate);
                    let rel = PathBuf::from("wav").join(format!("{id}.wav"));
                    write_wav(dir.join(&rel), w)?;
                    Ok(ManifestEntry { id, path: rel, rate_hz: rate, duration_s: w.duration_s() })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    write_manifest(dir.join(MANIFEST_FILE), &entries)?;
    let mut seg = String::new();
    for u in utts {
        writeln!(seg, "{}\t{}\t{}", u.id, join_nums(u.track.boundaries.iter().copied()), join_nums(u.track.classes.iter().copied())).unwrap();
    }
    fs::write(dir.join(SEGMENTS_FILE), seg)?;
    Ok(entries)
}

fn read_segments(path: &Path) -> Result<BTreeMap<String, UtteranceLabelTrack>> {
    let text = fs::read_to_string(path)?;
    let parse = |s: &str, n: usize| -> Result<Vec<usize>> {
        s.split(',').filter(|x| !x.is_empty()).map(|x| x.parse().map_err(|_| Error::invalid(format!("segments line {}: bad number", n + 1)))).collect()
    };
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::invalid(format!("segments line {}: expected 3 columns", n + 1)));
        }
        out.insert(cols[0].to_string(), UtteranceLabelTrack { boundaries: parse(cols[1], n)?, classes: parse(cols[2], n)? });
    }
    Ok(out)
}

/// Loads a corpus written by [`write_corpus`], optionally restricted to `rates`.
pub fn load_corpus(dir: impl AsRef<Path>, rates: Option<&[u32]>) -> Result<Vec<ParallelUtterance>> {
    let dir = dir.as_ref();
    let entries = read_manifest(dir.join(MANIFEST_FILE))?;
    let tracks = read_segments(&dir.join(SEGMENTS_FILE))?;
    let waves: Vec<(String, u32, Waveform)> = entries
        .par_iter()
        .filter(|e| rates.is_none_or(|r| r.contains(&e.rate_hz)))
        .map(|e| {
            let (group, _) = e.id.rsplit_once('-').ok_or_else(|| Error::invalid(format!("manifest id {} has no rate suffix", e.id)))?;
            let w = read_wav(dir.join(&e.path))?;
            if w.rate_hz != e.rate_hz {
                return Err(Error::invalid(format!("{}: header rate {} ≠ manifest rate {}", e.id, w.rate_hz, e.rate_hz)));
            }
            Ok((group.to_string(), e.rate_hz, w))
        })
        .collect::<Result<_>>()?;
    let mut groups: BTreeMap<String, ParallelUtterance> = BTreeMap::new();
    for (group, rate, w) in waves {
        let track = tracks.get(&group).ok_or_else(|| Error::invalid(format!("no segment track for {group}")))?;
        groups
            .entry(group.clone())
            .or_insert_with(|| ParallelUtterance { id: group, track: track.clone(), waves: BTreeMap::new() })
            .waves
            .insert(rate, w);
    }
    Ok(groups.into_values().collect())
}

/// MFCC frames of every utterance at every rate, keyed by entry id.
pub fn corpus_mfcc(utts: &[ParallelUtterance]) -> Result<BTreeMap<String, Mat<f64>>> {
    let pairs: Vec<(String, &Waveform)> = utts.iter().flat_map(|u| u.waves.iter().map(|(&r, w)| (u.entry_id(r), w))).collect();
    pairs.par_iter().map(|(id, w)| Ok((id.clone(), mfcc(w)?.frames))).collect()
}

/// Fits one codebook on frames pooled across all rates, then labels every entry.
pub fn pooled_labels(utts: &[ParallelUtterance], k: usize, max_iters: usize, seed: u64) -> Result<(Codebook, KMeansFit<f64>, BTreeMap<String, LabelSequence>)> {
    let feats = corpus_mfcc(utts)?;
    let dim = feats.values().next().map(|m| m.cols).ok_or_else(|| Error::invalid("empty corpus"))?;
    let total: usize = feats.values().map(|m| m.rows).sum();
    let mut data = Vec::with_capacity(total * dim);
    for m in feats.values() {
        data.extend_from_slice(&m.data);
    }
    let (cb, fit) = Codebook::fit(&Mat::from_vec(total, dim, data), k, max_iters, seed)?;
    let labels = feats.iter().map(|(id, m)| Ok((id.clone(), cb.assign_labels(m)?))).collect::<Result<_>>()?;
    Ok((cb, fit, labels))
}

pub fn default_rates() -> Vec<u32> {
    CANONICAL_RATES.to_vec()
}
