//! Probe/gallery scoring, score fusion and cumulative match characteristic curves.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::dataio::{crop_parts, mirror, PartGeometry, PersonImage};
use crate::error::{Error, Result};
use crate::pairwise::cosine_matrix;
use crate::scnn::{Branch, NetworkParams};

const FEATURE_CHUNK: usize = 16;

/// Probe-by-gallery similarity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub scores: Array2<f64>,
    pub probe_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
}

impl ScoreTable {
    pub fn new(scores: Array2<f64>, probe_ids: Vec<String>, gallery_ids: Vec<String>) -> Result<Self> {
        if scores.nrows() != probe_ids.len() {
            return Err(Error::dim("ScoreTable", "probes", probe_ids.len(), scores.nrows()));
        }
        if scores.ncols() != gallery_ids.len() {
            return Err(Error::dim("ScoreTable", "gallery", gallery_ids.len(), scores.ncols()));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "score table".into(),
            });
        }
        Ok(Self {
            scores,
            probe_ids,
            gallery_ids,
        })
    }

    /// Swaps probe and gallery roles.
    pub fn transposed(&self) -> Self {
        Self {
            scores: self.scores.t().to_owned(),
            probe_ids: self.gallery_ids.clone(),
            gallery_ids: self.probe_ids.clone(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut header = vec!["probe".to_string()];
        header.extend(self.gallery_ids.iter().cloned());
        w.write_record(&header).map_err(err)?;
        for (id, row) in self.probe_ids.iter().zip(self.scores.rows()) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.17e}")));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Features of `images` through one branch, as a `d x n` matrix.
pub fn extract_features(
    params: &NetworkParams,
    images: &[PersonImage],
    parts: &PartGeometry,
    branch: Branch,
) -> Result<Array2<f64>> {
    let d = params.feature_dim();
    let chunks: Vec<Vec<f64>> = images
        .par_chunks(FEATURE_CHUNK)
        .map(|chunk| {
            let stacks = chunk.iter().map(|i| crop_parts(i, parts)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = stacks.iter().collect();
            Ok(params.forward(&refs, branch)?.0.into_data())
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = chunks.into_iter().flatten().collect();
    // rows are samples; transpose into columns
    Ok(Array2::from_shape_vec((images.len(), d), flat)
        .map_err(|e| Error::Usage(e.to_string()))?
        .reversed_axes()
        .as_standard_layout()
        .to_owned())
}

/// Sum-fused cosine scores of every probe against every gallery image.
///
/// With `mirror_fusion`, each pair contributes the four original/mirrored
/// combinations. With several models, their tables are summed.
pub fn score_set(
    models: &[NetworkParams],
    probe: &[PersonImage],
    gallery: &[PersonImage],
    parts: &PartGeometry,
    mirror_fusion: bool,
) -> Result<ScoreTable> {
    if gallery.is_empty() {
        return Err(Error::Usage("gallery is empty".into()));
    }
    if probe.is_empty() {
        return Err(Error::Usage("probe set is empty".into()));
    }
    let first = models
        .first()
        .ok_or_else(|| Error::Usage("score_set needs at least one model".into()))?;
    for m in &models[1..] {
        if m.feature_dim() != first.feature_dim() {
            return Err(Error::dim("score_set", "model feature dimension", first.feature_dim(), m.feature_dim()));
        }
    }
    let views = |images: &[PersonImage]| -> Vec<Vec<PersonImage>> {
        if mirror_fusion {
            vec![images.to_vec(), images.iter().map(mirror).collect()]
        } else {
            vec![images.to_vec()]
        }
    };
    let probe_views = views(probe);
    let gallery_views = views(gallery);
    let mut total = Array2::zeros((probe.len(), gallery.len()));
    for model in models {
        let pf = probe_views
            .iter()
            .map(|v| extract_features(model, v, parts, Branch::A))
            .collect::<Result<Vec<_>>>()?;
        let gf = gallery_views
            .iter()
            .map(|v| extract_features(model, v, parts, Branch::B))
            .collect::<Result<Vec<_>>>()?;
        for p in &pf {
            for g in &gf {
                total += &cosine_matrix(p, g)?;
            }
        }
    }
    ScoreTable::new(
        total,
        probe.iter().map(|i| i.subject_id.clone()).collect(),
        gallery.iter().map(|i| i.subject_id.clone()).collect(),
    )
}

/// Rank-k recognition rates for k = 1..=gallery size.
#[derive(Debug, Clone, PartialEq)]
pub struct CmcCurve {
    pub mean: Vec<f64>,
    /// One curve per split; a single-table curve holds itself here.
    pub per_split: Vec<Vec<f64>>,
}

impl CmcCurve {
    /// Rate at 1-based rank `k`.
    pub fn rate(&self, k: usize) -> f64 {
        self.mean[k - 1]
    }

    pub fn ranks(&self) -> usize {
        self.mean.len()
    }

    /// Writes `rank,rate_mean,rate_split_1,...`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut header = vec!["rank".to_string(), "rate_mean".to_string()];
        header.extend((1..=self.per_split.len()).map(|i| format!("rate_split_{i}")));
        w.write_record(&header).map_err(err)?;
        for k in 0..self.mean.len() {
            let mut rec = vec![(k + 1).to_string(), format!("{:.6}", self.mean[k])];
            rec.extend(self.per_split.iter().map(|c| format!("{:.6}", c[k])));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// 1-based rank of each probe's true match. Gallery entries scoring equal to
/// the true match are ranked ahead of it.
pub fn match_ranks(table: &ScoreTable) -> Result<Vec<usize>> {
    table
        .probe_ids
        .iter()
        .zip(table.scores.rows())
        .map(|(id, row)| {
            let truth = table
                .gallery_ids
                .iter()
                .zip(row.iter())
                .filter(|(g, _)| *g == id)
                .map(|(_, &s)| s)
                .fold(None, |best: Option<f64>, s| Some(best.map_or(s, |b| b.max(s))))
                .ok_or_else(|| Error::Protocol(format!("probe subject {id} is absent from the gallery")))?;
            let ahead = table
                .gallery_ids
                .iter()
                .zip(row.iter())
                .filter(|(g, &s)| *g != id && s >= truth)
                .count();
            Ok(ahead + 1)
        })
        .collect()
}

pub fn cmc(table: &ScoreTable) -> Result<CmcCurve> {
    let ranks = match_ranks(table)?;
    let g = table.gallery_ids.len();
    let mut counts = vec![0usize; g + 1];
    for r in &ranks {
        counts[*r] += 1;
    }
    let n = ranks.len() as f64;
    let mut acc = 0;
    let curve: Vec<f64> = (1..=g)
        .map(|k| {
            acc += counts[k];
            acc as f64 / n
        })
        .collect();
    Ok(CmcCurve {
        mean: curve.clone(),
        per_split: vec![curve],
    })
}

/// Mean curve across splits; per-split curves are kept.
pub fn aggregate_splits(curves: &[CmcCurve]) -> Result<CmcCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::Usage("no curves to aggregate".into()))?;
    let ranks = first.ranks();
    let mut per_split = Vec::new();
    for c in curves {
        if c.ranks() != ranks {
            return Err(Error::dim("aggregate_splits", "ranks", ranks, c.ranks()));
        }
        per_split.extend(c.per_split.iter().cloned());
    }
    let mean = (0..ranks)
        .map(|k| per_split.iter().map(|c| c[k]).sum::<f64>() / per_split.len() as f64)
        .collect();
    Ok(CmcCurve { mean, per_split })
}
