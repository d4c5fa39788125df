//! Retrieval evaluation: inference feature assembly, distance matrices,
//! cross-camera ranking, and CMC/mAP metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoders::FeatureBundle;
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Which encoder outputs form the retrieval feature. Concatenation order is
/// fixed: pre, then img, then post.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    Post,
    Pre,
    Img,
    ImgPost,
    ImgPre,
    PreImgPost,
}

impl FeatureMode {
    pub const DEFAULT: FeatureMode = FeatureMode::ImgPost;

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "post" => Ok(FeatureMode::Post),
            "pre" => Ok(FeatureMode::Pre),
            "img" => Ok(FeatureMode::Img),
            "img+post" => Ok(FeatureMode::ImgPost),
            "img+pre" => Ok(FeatureMode::ImgPre),
            "pre+img+post" => Ok(FeatureMode::PreImgPost),
            other => Err(Error::Config(format!("unknown feature mode '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureMode::Post => "post",
            FeatureMode::Pre => "pre",
            FeatureMode::Img => "img",
            FeatureMode::ImgPost => "img+post",
            FeatureMode::ImgPre => "img+pre",
            FeatureMode::PreImgPost => "pre+img+post",
        }
    }

    /// Concatenate the selected parts of a feature bundle into a 1 x D row.
    pub fn assemble(&self, bundle: &FeatureBundle) -> Tensor {
        let parts: Vec<&Tensor> = match self {
            FeatureMode::Post => vec![&bundle.post],
            FeatureMode::Pre => vec![&bundle.pre],
            FeatureMode::Img => vec![&bundle.img],
            FeatureMode::ImgPost => vec![&bundle.img, &bundle.post],
            FeatureMode::ImgPre => vec![&bundle.img, &bundle.pre],
            FeatureMode::PreImgPost => vec![&bundle.pre, &bundle.img, &bundle.post],
        };
        let dim: usize = parts.iter().map(|t| t.cols).sum();
        let mut out = Tensor::zeros(1, dim);
        let mut off = 0;
        for part in parts {
            for c in 0..part.cols {
                *out.at_mut(0, off + c) = part.at(0, c);
            }
            off += part.cols;
        }
        out
    }
}

/// Distance used between query and gallery features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMetric {
    Euclidean,
    /// 1 - cosine similarity on L2-normalized rows. Default.
    Cosine,
}

impl DistanceMetric {
    pub const DEFAULT: DistanceMetric = DistanceMetric::Cosine;

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(DistanceMetric::Euclidean),
            "cosine" => Ok(DistanceMetric::Cosine),
            other => Err(Error::Config(format!("unknown distance metric '{other}'"))),
        }
    }
}

/// Q x G distances between feature rows.
pub fn distance_matrix(queries: &Tensor, gallery: &Tensor, metric: DistanceMetric) -> Result<Tensor> {
    if queries.cols != gallery.cols {
        return Err(Error::Contract(format!(
            "feature dims differ: queries {} vs gallery {}",
            queries.cols, gallery.cols
        )));
    }
    let d = queries.cols;
    let norm = |t: &Tensor, r: usize| -> f64 {
        let mut acc = 0.0;
        for c in 0..d {
            acc += t.at(r, c) * t.at(r, c);
        }
        math::sqrt(acc).max(1e-12)
    };
    let mut out = Tensor::zeros(queries.rows, gallery.rows);
    for q in 0..queries.rows {
        let qn = norm(queries, q);
        for g in 0..gallery.rows {
            let v = match metric {
                DistanceMetric::Euclidean => {
                    let mut acc = 0.0;
                    for c in 0..d {
                        let diff = queries.at(q, c) - gallery.at(g, c);
                        acc += diff * diff;
                    }
                    math::sqrt(acc)
                }
                DistanceMetric::Cosine => {
                    let gn = norm(gallery, g);
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += queries.at(q, c) * gallery.at(g, c);
                    }
                    1.0 - dot / (qn * gn)
                }
            };
            *out.at_mut(q, g) = v;
        }
    }
    Ok(out)
}

/// Gallery features with their identity and camera labels.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    pub features: Tensor,
    pub pids: Vec<usize>,
    pub camids: Vec<usize>,
}

impl GalleryIndex {
    pub fn new(features: Tensor, pids: Vec<usize>, camids: Vec<usize>) -> Result<Self> {
        if pids.len() != features.rows || camids.len() != features.rows {
            return Err(Error::Contract("gallery labels must match feature rows".into()));
        }
        if !features.all_finite() {
            return Err(Error::Numerical("gallery features are not finite".into()));
        }
        Ok(GalleryIndex { features, pids, camids })
    }
}

/// Per-query ranked gallery after protocol exclusion.
#[derive(Debug, Clone)]
pub struct RankingResult {
    /// Gallery indices ordered by non-decreasing distance, ties broken by
    /// gallery index. Entries sharing the query's pid and camid are removed.
    pub order: Vec<Vec<usize>>,
    /// Match flag (same pid) aligned with `order`.
    pub matches: Vec<Vec<bool>>,
}

/// Rank the gallery for each query under the cross-camera protocol: gallery
/// items with the query's pid captured by the query's camera are excluded.
pub fn rank_gallery(
    dist: &Tensor,
    query_pids: &[usize],
    query_camids: &[usize],
    gallery: &GalleryIndex,
) -> Result<RankingResult> {
    if dist.rows != query_pids.len() || dist.rows != query_camids.len() {
        return Err(Error::Contract("query labels must match distance rows".into()));
    }
    if dist.cols != gallery.pids.len() {
        return Err(Error::Contract("gallery labels must match distance cols".into()));
    }
    let mut order = Vec::with_capacity(dist.rows);
    let mut matches = Vec::with_capacity(dist.rows);
    for q in 0..dist.rows {
        let mut valid: Vec<usize> = (0..dist.cols)
            .filter(|&g| !(gallery.pids[g] == query_pids[q] && gallery.camids[g] == query_camids[q]))
            .collect();
        valid.sort_by(|&a, &b| {
            dist.at(q, a)
                .partial_cmp(&dist.at(q, b))
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let flags: Vec<bool> = valid.iter().map(|&g| gallery.pids[g] == query_pids[q]).collect();
        order.push(valid);
        matches.push(flags);
    }
    Ok(RankingResult { order, matches })
}

/// CMC ranks reported by `evaluate`.
pub const CMC_KS: [usize; 3] = [1, 5, 10];

/// Aggregate retrieval metrics. All values lie in [0, 1].
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub map: f64,
    /// CMC at the ranks in `CMC_KS`.
    pub cmc: [f64; 3],
    /// AP per query; None marks queries excluded for lack of a valid match.
    pub per_query_ap: Vec<Option<f64>>,
    /// Queries with zero valid matches, excluded from the averages.
    pub skipped_queries: usize,
    pub queries_used: usize,
    pub metric: String,
    pub feature_mode: String,
}

/// Compute AP and CMC from a ranking. AP is the mean of precision at each
/// hit; CMC@k is the fraction of queries with a hit in the top k.
pub fn metrics_from_ranking(ranking: &RankingResult) -> Result<MetricsReport> {
    let mut per_query_ap = Vec::with_capacity(ranking.order.len());
    let mut cmc_counts = [0usize; 3];
    let mut map_sum = 0.0;
    let mut used = 0usize;
    for flags in &ranking.matches {
        let total_matches = flags.iter().filter(|&&m| m).count();
        if total_matches == 0 {
            per_query_ap.push(None);
            continue;
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (pos, &m) in flags.iter().enumerate() {
            if m {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
            }
        }
        ap /= total_matches as f64;
        per_query_ap.push(Some(ap));
        map_sum += ap;
        used += 1;
        let first_hit = flags.iter().position(|&m| m).unwrap();
        for (slot, &k) in CMC_KS.iter().enumerate() {
            if first_hit < k {
                cmc_counts[slot] += 1;
            }
        }
    }
    if used == 0 {
        return Err(Error::Contract("no query has a valid gallery match".into()));
    }
    let mut cmc = [0.0; 3];
    for i in 0..3 {
        cmc[i] = cmc_counts[i] as f64 / used as f64;
    }
    Ok(MetricsReport {
        map: map_sum / used as f64,
        cmc,
        skipped_queries: per_query_ap.iter().filter(|a| a.is_none()).count(),
        queries_used: used,
        per_query_ap,
        metric: String::new(),
        feature_mode: String::new(),
    })
}

/// Full evaluation: distances, protocol ranking, metrics.
pub fn evaluate(
    queries: &Tensor,
    query_pids: &[usize],
    query_camids: &[usize],
    gallery: &GalleryIndex,
    metric: DistanceMetric,
) -> Result<MetricsReport> {
    let dist = distance_matrix(queries, &gallery.features, metric)?;
    let ranking = rank_gallery(&dist, query_pids, query_camids, gallery)?;
    let mut report = metrics_from_ranking(&ranking)?;
    report.metric = String::from(match metric {
        DistanceMetric::Euclidean => "euclidean",
        DistanceMetric::Cosine => "cosine",
    });
    Ok(report)
}
