//! Max-fusion of feature vectors, Euclidean ranking and CMC/mAP scoring.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::canonical::CanonicalPoseSet;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::gan::synthesize_normalized;
use crate::networks::Generator;
use crate::raster::Image;
use crate::reid::Backbone;

/// Coordinatewise maximum.
pub fn fuse_max(vectors: &[&[f32]]) -> Result<Vec<f32>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Domain("fuse_max needs at least one vector".into()))?;
    let mut out = first.to_vec();
    for v in &vectors[1..] {
        if v.len() != out.len() {
            return Err(Error::Shape(format!(
                "fuse_max: dimension {} vs {}",
                v.len(),
                out.len()
            )));
        }
        out.iter_mut().zip(v.iter()).for_each(|(a, &b)| *a = a.max(b));
    }
    Ok(out)
}

/// `|Q| x |G|` Euclidean distances, accumulated in `f64`.
pub fn pairwise_euclidean(query: &[Vec<f32>], gallery: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
    let dim = query.first().or(gallery.first()).map_or(0, |v| v.len());
    if let Some(v) = query.iter().chain(gallery).find(|v| v.len() != dim) {
        return Err(Error::Shape(format!("feature dimension {} vs {dim}", v.len())));
    }
    Ok(query
        .iter()
        .map(|q| {
            gallery
                .iter()
                .map(|g| {
                    q.iter()
                        .zip(g)
                        .map(|(&a, &b)| {
                            let d = a as f64 - b as f64;
                            d * d
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect())
}

/// Mean over relevant positions `k` of precision at `k`; `None` when
/// nothing is relevant.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    /// Drop gallery items that share both identity and camera with the query.
    pub cross_camera_filter: bool,
    /// Max-pool the query vectors of each (identity, camera) group.
    pub multi_query: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            cross_camera_filter: true,
            multi_query: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemMeta {
    pub label: usize,
    pub camera: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankAccuracy {
    pub k: usize,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    /// CMC at every rank from 1 to the gallery size.
    pub ranks: Vec<RankAccuracy>,
    pub map: f64,
    /// All queries, including excluded ones.
    pub n_queries: usize,
    /// Queries with no valid gallery match after filtering.
    pub n_excluded: usize,
    /// Per query, in query order; `null` for excluded queries.
    pub per_query_ap: Vec<Option<f64>>,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.ranks.iter().find(|r| r.k == k).map(|r| r.acc)
    }

    pub fn cmc_csv(&self) -> String {
        let mut s = String::from("rank,accuracy\n");
        for r in &self.ranks {
            s.push_str(&format!("{},{}\n", r.k, r.acc));
        }
        s
    }
}

/// Gallery indices sorted by distance, ties broken by index.
pub fn rank_gallery(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order
}

pub fn cmc_map(
    distmat: &[Vec<f64>],
    query: &[ItemMeta],
    gallery: &[ItemMeta],
    protocol: EvalProtocol,
) -> Result<EvalReport> {
    if distmat.len() != query.len() {
        return Err(Error::Shape(format!(
            "{} distance rows for {} queries",
            distmat.len(),
            query.len()
        )));
    }
    if let Some(row) = distmat.iter().find(|r| r.len() != gallery.len()) {
        return Err(Error::Shape(format!(
            "distance row of {} for {} gallery items",
            row.len(),
            gallery.len()
        )));
    }
    let mut hits = vec![0usize; gallery.len()];
    let mut per_query_ap = Vec::with_capacity(query.len());
    let mut evaluated = 0usize;
    for (q, row) in query.iter().zip(distmat) {
        let relevance: Vec<bool> = rank_gallery(row)
            .into_iter()
            .filter(|&g| {
                !(protocol.cross_camera_filter && gallery[g].label == q.label && gallery[g].camera == q.camera)
            })
            .map(|g| gallery[g].label == q.label)
            .collect();
        let ap = average_precision(&relevance);
        if ap.is_some() {
            evaluated += 1;
            let first = relevance.iter().position(|&r| r).unwrap();
            hits[first] += 1;
        }
        per_query_ap.push(ap);
    }
    let denom = evaluated.max(1) as f64;
    let mut cumulative = 0;
    let ranks = hits
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            cumulative += h;
            RankAccuracy {
                k: i + 1,
                acc: cumulative as f64 / denom,
            }
        })
        .collect();
    let map = per_query_ap.iter().flatten().sum::<f64>() / denom;
    Ok(EvalReport {
        protocol,
        ranks,
        map,
        n_queries: query.len(),
        n_excluded: query.len() - evaluated,
        per_query_ap,
    })
}

/// Max-pools query features per (identity, camera), groups in order of
/// first appearance.
pub fn pool_queries(features: &[Vec<f32>], meta: &[ItemMeta]) -> Result<(Vec<Vec<f32>>, Vec<ItemMeta>)> {
    let mut groups: Vec<(ItemMeta, Vec<usize>)> = Vec::new();
    let mut index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (i, m) in meta.iter().enumerate() {
        let g = *index.entry((m.label, m.camera)).or_insert_with(|| {
            groups.push((*m, Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(i);
    }
    let mut pooled = Vec::with_capacity(groups.len());
    let mut pooled_meta = Vec::with_capacity(groups.len());
    for (m, members) in groups {
        let refs: Vec<&[f32]> = members.iter().map(|&i| features[i].as_slice()).collect();
        pooled.push(fuse_max(&refs)?);
        pooled_meta.push(m);
    }
    Ok((pooled, pooled_meta))
}

/// Which feature vectors are fused per image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum FusionMode {
    /// Backbone A feature only.
    BackboneA,
    /// Backbone A feature fused with backbone B features of the first
    /// `poses` canonical-pose syntheses.
    Fused { poses: usize },
}

impl FusionMode {
    pub fn label(&self) -> String {
        match self {
            FusionMode::BackboneA => "backbone_a".into(),
            FusionMode::Fused { poses } => format!("fused_{poses}"),
        }
    }
}

/// Frozen models used for evaluation.
pub struct ReidModels<'a> {
    pub backbone_a: &'a Backbone<f32>,
    pub backbone_b: Option<&'a Backbone<f32>>,
    pub generator: Option<&'a Generator<f32>>,
    pub canon: Option<&'a CanonicalPoseSet>,
}

/// Backbone-A feature and backbone-B features of the canonical-pose
/// syntheses of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub a: Vec<f32>,
    pub b: Vec<Vec<f32>>,
}

impl ImageFeatures {
    pub fn fused(&self, mode: FusionMode) -> Result<Vec<f32>> {
        let poses = match mode {
            FusionMode::BackboneA => return Ok(self.a.clone()),
            FusionMode::Fused { poses } => poses,
        };
        if poses == 0 || poses > self.b.len() {
            return Err(Error::Config(format!(
                "fusion over {poses} poses, {} pose features available",
                self.b.len()
            )));
        }
        let mut refs: Vec<&[f32]> = vec![&self.a];
        refs.extend(self.b[..poses].iter().map(|v| v.as_slice()));
        fuse_max(&refs)
    }
}

/// Computes the features needed by `mode` (no backbone-B work for
/// [`FusionMode::BackboneA`]).
pub fn image_features(image: &Image, models: &ReidModels, mode: FusionMode) -> Result<ImageFeatures> {
    let a = models.backbone_a.extract_feature(image)?;
    let poses = match mode {
        FusionMode::BackboneA => return Ok(ImageFeatures { a, b: Vec::new() }),
        FusionMode::Fused { poses } => poses,
    };
    let missing = |what: &str| Error::Config(format!("fused evaluation needs {what}"));
    let b = models.backbone_b.ok_or_else(|| missing("backbone B"))?;
    let g = models.generator.ok_or_else(|| missing("a generator"))?;
    let canon = models.canon.ok_or_else(|| missing("canonical poses"))?;
    if poses == 0 || poses > canon.len() {
        return Err(Error::Config(format!(
            "fusion over {poses} poses, {} canonical poses available",
            canon.len()
        )));
    }
    let subset = CanonicalPoseSet {
        poses: canon.poses[..poses].to_vec(),
        source_sample_ids: canon.source_sample_ids[..poses].to_vec(),
        model: canon.model.clone(),
    };
    // backbone B is trained on stored (8-bit) syntheses
    let synth: Vec<Image> = synthesize_normalized(image, &subset, g)?
        .iter()
        .map(Image::quantized)
        .collect();
    Ok(ImageFeatures {
        a,
        b: b.extract_features(&synth.iter().collect::<Vec<_>>())?,
    })
}

pub fn sample_meta(set: &[&Sample]) -> Vec<ItemMeta> {
    set.iter()
        .map(|s| ItemMeta {
            label: s.identity,
            camera: s.camera,
        })
        .collect()
}

/// Ranks precomputed query and gallery features under one fusion mode.
pub fn evaluate_features(
    query: (&[ImageFeatures], &[ItemMeta]),
    gallery: (&[ImageFeatures], &[ItemMeta]),
    mode: FusionMode,
    protocol: EvalProtocol,
) -> Result<EvalReport> {
    let fuse = |set: &[ImageFeatures]| -> Result<Vec<Vec<f32>>> { set.iter().map(|f| f.fused(mode)).collect() };
    let (mut qf, mut qm) = (fuse(query.0)?, query.1.to_vec());
    if protocol.multi_query {
        (qf, qm) = pool_queries(&qf, &qm)?;
    }
    let dist = pairwise_euclidean(&qf, &fuse(gallery.0)?)?;
    cmc_map(&dist, &qm, gallery.1, protocol)
}

/// Describes every query and gallery image with frozen models, ranks and
/// scores.
pub fn evaluate_pipeline(
    query: &[&Sample],
    gallery: &[&Sample],
    models: &ReidModels,
    mode: FusionMode,
    protocol: EvalProtocol,
) -> Result<EvalReport> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Dataset(
            "evaluation needs non-empty query and gallery sets".into(),
        ));
    }
    let describe = |set: &[&Sample]| -> Result<Vec<ImageFeatures>> {
        set.iter().map(|s| image_features(&s.image, models, mode)).collect()
    };
    let (qf, gf) = (describe(query)?, describe(gallery)?);
    evaluate_features((&qf, &sample_meta(query)), (&gf, &sample_meta(gallery)), mode, protocol)
}
