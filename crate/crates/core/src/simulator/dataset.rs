use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labelled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub id: String,
    pub features: Vec<f64>,
    pub label: u8,
}

/// A dataset with an optional tracked target `x*`; `X' = X ∪ {x*}` is the full
/// point list and `X` drops the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub points: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_point_id: Option<String>,
}

impl Dataset {
    pub fn new(points: Vec<Point>, target_point_id: Option<String>) -> Result<Self> {
        let d = Self {
            points,
            target_point_id,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let dim = self.points.first().map(|p| p.features.len());
        for p in &self.points {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::InvalidData(format!("duplicate point id {}", p.id)));
            }
            if Some(p.features.len()) != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim.unwrap_or(0),
                    found: p.features.len(),
                });
            }
            if p.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "point {} has non-finite features",
                    p.id
                )));
            }
            if p.label > 1 {
                return Err(Error::InvalidData(format!("point {} has non-binary label", p.id)));
            }
        }
        if let Some(t) = &self.target_point_id {
            if !seen.contains(t.as_str()) {
                return Err(Error::InvalidData(format!("target {t} is not in the dataset")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.features.len())
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.points.iter().position(|p| p.id == id)
    }

    pub fn point(&self, id: &str) -> Result<&Point> {
        self.points
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::InvalidData(format!("unknown point id {id}")))
    }

    /// The dataset without point `id`.
    pub fn without(&self, id: &str) -> Result<Dataset> {
        let idx = self
            .index_of(id)
            .ok_or_else(|| Error::InvalidData(format!("unknown point id {id}")))?;
        let mut points = self.points.clone();
        points.remove(idx);
        let target = self.target_point_id.clone().filter(|t| t != id);
        Ok(Dataset {
            points,
            target_point_id: target,
        })
    }

    pub fn target(&self) -> Option<&Point> {
        self.target_point_id.as_deref().and_then(|t| self.point(t).ok())
    }

    /// `X`: the dataset with the target removed (unchanged when there is none).
    pub fn without_target(&self) -> Dataset {
        match &self.target_point_id {
            Some(t) => self.without(t).expect("validated target is present"),
            None => self.clone(),
        }
    }
}

/// Which point, if any, becomes the tracked target `x*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    #[default]
    None,
    /// A copy of the first point of cluster 0.
    Duplicate,
    /// The first planted outlier.
    Outlier,
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub clusters: usize,
    pub points_per_cluster: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation inside a cluster.
    pub cluster_std: f64,
    /// Distance of every centroid from the origin.
    pub center_scale: f64,
    /// Probability of flipping a cluster label.
    pub label_noise: f64,
    /// Planted points far from every centroid, labelled against their nearest cluster.
    pub outliers: usize,
    pub target: TargetKind,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            clusters: 2,
            points_per_cluster: 200,
            dim: 2,
            cluster_std: 1.0,
            center_scale: 3.0,
            label_noise: 0.0,
            outliers: 0,
            target: TargetKind::None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.points_per_cluster == 0 || self.dim == 0 {
            return Err(Error::domain(
                "cluster count, cluster size and dimension must be positive",
            ));
        }
        if !(self.cluster_std > 0.0) || !(self.center_scale >= 0.0) {
            return Err(Error::domain("cluster spread must be positive"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::domain("label noise must be in [0, 1]"));
        }
        if self.target == TargetKind::Outlier && self.outliers == 0 {
            return Err(Error::domain("an outlier target needs at least one outlier"));
        }
        Ok(())
    }

    /// Centroid of cluster `k`: evenly spaced on a circle in the first two coordinates.
    pub fn centroid(&self, k: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        let angle = std::f64::consts::TAU * k as f64 / self.clusters as f64;
        c[0] = self.center_scale * angle.cos();
        if self.dim > 1 {
            c[1] = self.center_scale * angle.sin();
        }
        c
    }

    pub fn cluster_label(&self, k: usize) -> u8 {
        (k % 2) as u8
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Reproducible Gaussian-cluster dataset.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids: Vec<Vec<f64>> = (0..spec.clusters).map(|k| spec.centroid(k)).collect();
    let mut points = Vec::with_capacity(spec.clusters * spec.points_per_cluster + spec.outliers + 1);
    for (k, c) in centroids.iter().enumerate() {
        for i in 0..spec.points_per_cluster {
            let features = c
                .iter()
                .map(|&m| m + spec.cluster_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut label = spec.cluster_label(k);
            if rng.random::<f64>() < spec.label_noise {
                label = 1 - label;
            }
            points.push(Point {
                id: format!("c{k}-{i}"),
                features,
                label,
            });
        }
    }
    for j in 0..spec.outliers {
        let k = j % spec.clusters;
        let base = &centroids[k];
        let norm = base.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dir: Vec<f64> = if norm > 0.0 {
            base.iter().map(|x| x / norm).collect()
        } else {
            let mut e = vec![0.0; spec.dim];
            e[0] = 1.0;
            e
        };
        let mut reach = (12.0 + 2.0 * j as f64) * spec.cluster_std;
        let features = loop {
            let f: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + reach * d).collect();
            if centroids.iter().all(|c| dist(c, &f) >= 10.0 * spec.cluster_std) {
                break f;
            }
            reach += spec.cluster_std;
        };
        points.push(Point {
            id: format!("outlier-{j}"),
            features,
            label: 1 - spec.cluster_label(k),
        });
    }
    let target = match spec.target {
        TargetKind::None => None,
        TargetKind::Duplicate => {
            let src = points[0].clone();
            points.push(Point {
                id: "target".into(),
                ..src
            });
            Some("target".to_string())
        }
        TargetKind::Outlier => Some("outlier-0".to_string()),
    };
    Dataset::new(points, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SynthSpec {
            points_per_cluster: 50,
            ..SynthSpec::default()
        };
        assert_eq!(synth_dataset(&spec, 3).unwrap(), synth_dataset(&spec, 3).unwrap());
        assert_ne!(synth_dataset(&spec, 3).unwrap(), synth_dataset(&spec, 4).unwrap());
    }

    #[test]
    fn outliers_are_far() {
        let spec = SynthSpec {
            clusters: 3,
            outliers: 2,
            dim: 3,
            target: TargetKind::Outlier,
            ..SynthSpec::default()
        };
        let d = synth_dataset(&spec, 1).unwrap();
        for j in 0..2 {
            let o = d.point(&format!("outlier-{j}")).unwrap();
            for k in 0..3 {
                assert!(dist(&spec.centroid(k), &o.features) >= 10.0 * spec.cluster_std);
            }
        }
        assert_eq!(d.target().unwrap().id, "outlier-0");
        assert_eq!(d.without_target().len(), d.len() - 1);
    }

    #[test]
    fn no_outliers_stay_near_clusters() {
        let spec = SynthSpec::default();
        let d = synth_dataset(&spec, 5).unwrap();
        for p in &d.points {
            let near = (0..spec.clusters)
                .map(|k| dist(&spec.centroid(k), &p.features))
                .fold(f64::INFINITY, f64::min);
            assert!(near < 6.0 * spec.cluster_std * (spec.dim as f64).sqrt());
        }
    }

    #[test]
    fn duplicate_target() {
        let spec = SynthSpec {
            target: TargetKind::Duplicate,
            ..SynthSpec::default()
        };
        let d = synth_dataset(&spec, 2).unwrap();
        let t = d.target().unwrap();
        assert_eq!(t.features, d.points[0].features);
        assert!(d.without_target().index_of("target").is_none());
    }

    #[test]
    fn rejects_duplicate_ids() {
        let p = Point {
            id: "a".into(),
            features: vec![0.0],
            label: 0,
        };
        assert!(Dataset::new(vec![p.clone(), p], None).is_err());
    }
}
