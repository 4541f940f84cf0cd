//! Procedural labelled shapes with paired point clouds and multi-view
//! descriptors.

mod render;
mod shapes;
mod store;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use render::{descriptor_len, render_view_descriptor, CameraRig};
pub use shapes::{generate_shape, ShapeFamily, ShapeParams, NUM_FAMILIES};
pub use store::{dataset_files, load_dataset, load_manifest, save_dataset, DatasetManifest, DATASET_VERSION};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// View subsets supported by [`subsample_views`], for a 12-camera ring.
pub const SUPPORTED_VIEW_SUBSETS: [usize; 4] = [4, 8, 10, 12];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub views: usize,
    pub resolution: usize,
    pub elevation: f64,
    pub jitter: f64,
    pub scale_jitter: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: NUM_FAMILIES,
            train_per_class: 100,
            test_per_class: 25,
            points: 1024,
            views: 12,
            resolution: 8,
            elevation: 30.0,
            jitter: 0.01,
            scale_jitter: 0.3,
            seed: 2019,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(2..=NUM_FAMILIES).contains(&self.classes) {
            return fail(format!("dataset.classes must be in 2..={NUM_FAMILIES}, got {}", self.classes));
        }
        if self.train_per_class < 2 || self.test_per_class < 2 {
            return fail("dataset per-class counts must be ≥ 2".into());
        }
        if self.points < 64 {
            return fail(format!("dataset.points must be ≥ 64, got {}", self.points));
        }
        if self.views == 0 {
            return fail("dataset.views must be positive".into());
        }
        if self.resolution < 4 {
            return fail(format!("dataset.resolution must be ≥ 4, got {}", self.resolution));
        }
        if !(self.jitter >= 0.0 && (0.0..1.0).contains(&self.scale_jitter)) {
            return fail("dataset.jitter must be ≥ 0 and dataset.scale_jitter in [0, 1)".into());
        }
        Ok(())
    }

    pub fn shape_params(&self) -> ShapeParams {
        ShapeParams { points: self.points, jitter: self.jitter, scale_jitter: self.scale_jitter }
    }

    pub fn rig(&self) -> Result<CameraRig> {
        CameraRig::ring(self.views, self.elevation, self.resolution)
    }

    pub fn descriptor_len(&self) -> usize {
        descriptor_len(self.resolution)
    }
}

/// One synthetic object: its label, point cloud and per-camera descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    pub class_id: usize,
    /// N×3, centred, max norm 1.
    pub points: Tensor,
    /// V×Dv, one row per camera in `azimuths` order.
    pub view_descriptors: Tensor,
    /// Camera azimuths (degrees) of the descriptor rows.
    pub azimuths: Vec<f64>,
    pub sample_id: u64,
    pub generator_seed: u64,
}

impl ShapeSample {
    pub fn num_points(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn num_views(&self) -> usize {
        self.view_descriptors.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ShapeSample>,
    pub test: Vec<ShapeSample>,
    pub class_names: Vec<String>,
    pub config: DatasetConfig,
}

impl DatasetSplit {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// SplitMix64 finaliser, used to derive independent per-sample seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn make_sample(class_id: usize, sample_id: u64, cfg: &DatasetConfig, rig: &CameraRig) -> Result<ShapeSample> {
    let generator_seed = mix_seed(cfg.seed, sample_id);
    let points = generate_shape(class_id, generator_seed, &cfg.shape_params())?;
    let view_descriptors = rig.render(&points)?;
    Ok(ShapeSample { class_id, points, view_descriptors, azimuths: rig.azimuths.clone(), sample_id, generator_seed })
}

/// Generates the train and test splits. Sample ids run over train then
/// test, class-major, and each sample's generator seed is derived from the
/// global seed and its id, so the two splits never share a seed.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let rig = cfg.rig()?;
    let mut next_id = 0u64;
    let mut build = |per_class: usize| -> Result<Vec<ShapeSample>> {
        let mut out = Vec::with_capacity(per_class * cfg.classes);
        for class_id in 0..cfg.classes {
            for _ in 0..per_class {
                out.push(make_sample(class_id, next_id, cfg, &rig)?);
                next_id += 1;
            }
        }
        Ok(out)
    };
    let train = build(cfg.train_per_class)?;
    let test = build(cfg.test_per_class)?;
    let class_names = ShapeFamily::ALL[..cfg.classes].iter().map(|f| f.name().to_string()).collect();
    Ok(DatasetSplit { train, test, class_names, config: cfg.clone() })
}

/// Indices of `keep` cameras out of `total` evenly spaced ones, choosing for
/// each of `keep` evenly spaced target azimuths the nearest camera (lower
/// index on ties).
pub fn view_subset_indices(total: usize, keep: usize) -> Result<Vec<usize>> {
    if keep == 0 || keep > total {
        return Err(Error::Input(format!("cannot keep {keep} of {total} views")));
    }
    // Work in units of 1/(total·keep) of a turn so distances are exact.
    let turn = (total * keep) as i64;
    let mut out = Vec::with_capacity(keep);
    for j in 0..keep {
        let target = (j * total) as i64;
        let mut best = 0usize;
        let mut best_dist = i64::MAX;
        for i in 0..total {
            let raw = ((i * keep) as i64 - target).rem_euclid(turn);
            let dist = raw.min(turn - raw);
            if dist < best_dist {
                best = i;
                best_dist = dist;
            }
        }
        out.push(best);
    }
    let mut dedup = out.clone();
    dedup.sort_unstable();
    dedup.dedup();
    if dedup.len() != keep {
        return Err(Error::Input(format!("{keep} views cannot be spread evenly over {total} cameras")));
    }
    Ok(out)
}

/// Keeps `keep` ∈ {4, 8, 10, 12} of the 12 ring views, spread as evenly as
/// the ring allows (90°, 45°, ~36°, 30° spacing).
pub fn subsample_views(sample: &ShapeSample, keep: usize) -> Result<ShapeSample> {
    if !SUPPORTED_VIEW_SUBSETS.contains(&keep) {
        return Err(Error::Input(format!("unsupported view count {keep}; expected one of {SUPPORTED_VIEW_SUBSETS:?}")));
    }
    if sample.num_views() != 12 {
        return Err(Error::Input(format!("view subsampling needs a 12-view sample, got {}", sample.num_views())));
    }
    let idx = view_subset_indices(12, keep)?;
    let width = sample.view_descriptors.shape()[1];
    let mut data = Vec::with_capacity(keep * width);
    for &i in &idx {
        data.extend_from_slice(sample.view_descriptors.row(i));
    }
    Ok(ShapeSample {
        view_descriptors: Tensor::new(vec![keep, width], data)?,
        azimuths: idx.iter().map(|&i| sample.azimuths[i]).collect(),
        ..sample.clone()
    })
}

/// Keeps `keep` point rows chosen uniformly without replacement, seeded by
/// the sample id, in their original order.
pub fn subsample_points(sample: &ShapeSample, keep: usize) -> Result<ShapeSample> {
    let n = sample.num_points();
    if keep == 0 || keep > n {
        return Err(Error::Input(format!("cannot keep {keep} of {n} points")));
    }
    if keep == n {
        return Ok(sample.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(sample.sample_id, 0x5EED_0F_5AB5));
    let mut idx = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    let mut data = Vec::with_capacity(keep * 3);
    for &i in &idx {
        data.extend_from_slice(sample.points.row(i));
    }
    Ok(ShapeSample { points: Tensor::new(vec![keep, 3], data)?, ..sample.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DatasetConfig {
        DatasetConfig { train_per_class: 3, test_per_class: 2, points: 128, ..DatasetConfig::default() }
    }

    #[test]
    fn default_counts() {
        let cfg = DatasetConfig { points: 64, resolution: 4, ..DatasetConfig::default() };
        let ds = make_dataset(&cfg).unwrap();
        assert_eq!(ds.train.len(), 800);
        assert_eq!(ds.test.len(), 200);
        let mut hist = vec![0; 8];
        for s in &ds.train {
            hist[s.class_id] += 1;
        }
        assert_eq!(hist, vec![100; 8]);
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let cfg = small_cfg();
        let a = make_dataset(&cfg).unwrap();
        let b = make_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let train_ids: std::collections::HashSet<_> = a.train.iter().map(|s| s.sample_id).collect();
        assert!(a.test.iter().all(|s| !train_ids.contains(&s.sample_id)));
        let train_seeds: std::collections::HashSet<_> = a.train.iter().map(|s| s.generator_seed).collect();
        assert!(a.test.iter().all(|s| !train_seeds.contains(&s.generator_seed)));
        for c in 0..8 {
            assert!(a.test.iter().any(|s| s.class_id == c));
        }
    }

    #[test]
    fn global_seed_changes_values_not_shapes() {
        let a = make_dataset(&small_cfg()).unwrap();
        let b = make_dataset(&DatasetConfig { seed: 7, ..small_cfg() }).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        assert_eq!(a.train[0].points.shape(), b.train[0].points.shape());
        assert_ne!(a.train[0].points, b.train[0].points);
    }

    #[test]
    fn view_subsets_match_expected_indices() {
        assert_eq!(view_subset_indices(12, 4).unwrap(), vec![0, 3, 6, 9]);
        assert_eq!(view_subset_indices(12, 8).unwrap(), vec![0, 1, 3, 4, 6, 7, 9, 10]);
        assert_eq!(view_subset_indices(12, 10).unwrap(), vec![0, 1, 2, 4, 5, 6, 7, 8, 10, 11]);
        assert_eq!(view_subset_indices(12, 12).unwrap(), (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn subsample_views_spacing_and_errors() {
        let ds = make_dataset(&small_cfg()).unwrap();
        let s = &ds.train[0];
        assert_eq!(&subsample_views(s, 12).unwrap(), s);
        let four = subsample_views(s, 4).unwrap();
        assert_eq!(four.azimuths, vec![0.0, 90.0, 180.0, 270.0]);
        assert_eq!(four.view_descriptors.row(1), s.view_descriptors.row(3));
        for bad in [0, 3, 5, 13] {
            assert!(matches!(subsample_views(s, bad), Err(Error::Input(_))));
        }
    }

    #[test]
    fn subsample_points_contract() {
        let ds = make_dataset(&small_cfg()).unwrap();
        let s = &ds.train[1];
        assert_eq!(&subsample_points(s, 128).unwrap(), s);
        let sub = subsample_points(s, 32).unwrap();
        assert_eq!(sub.num_points(), 32);
        for i in 0..32 {
            assert!((0..128).any(|j| s.points.row(j) == sub.points.row(i)));
        }
        assert_eq!(sub, subsample_points(s, 32).unwrap());
        assert!(subsample_points(s, 129).is_err());
        assert!(subsample_points(s, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DatasetConfig { classes: 9, ..DatasetConfig::default() }.validate().is_err());
        assert!(DatasetConfig { train_per_class: 1, ..DatasetConfig::default() }.validate().is_err());
        assert!(DatasetConfig::default().validate().is_ok());
    }
}
