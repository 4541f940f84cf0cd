//! Training, evaluation and the experiment runners.
//!
//! Unimodal models are trained first; fusion models copy their encoders and
//! train in two phases. During the first `freeze_epochs` the encoders are
//! frozen, so their outputs are computed once per phase and reused; after
//! that every parameter is updated.

mod experiments;
mod metrics;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use experiments::{
    ablation_kinds, run_ablation, run_robustness, write_ablation_csv, write_pr_curve_csv, write_robustness_csv,
    AblationOutcome, AblationRow, RobustnessRow, RobustnessTables, POINT_SWEEP, VIEW_SWEEP,
};
pub use metrics::{
    classification_metrics, cosine_similarity, retrieval_map, ClassificationMetrics, PrPoint, RetrievalResult,
    RECALL_LEVELS,
};

use crate::encoders::{
    bind_linear_classifier, bind_view_encoder, init_linear_classifier, init_point_encoder, init_view_encoder, knn_graph,
    point_encode, view_encode, EncoderConfig, NeighborTable, PointEncoderWeights,
};
use crate::error::{Error, Result};
use crate::fusion::{
    bind_late_fusion, fuse, init_fusion, init_late_fusion, FusionConfig, FusionDims, FusionVariant, FusionWeights,
};
use crate::synth::{mix_seed, ShapeSample};
use crate::tensor::{load_checkpoint, save_checkpoint, Optimizer, OptimizerKind, ParameterStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    /// Leading fusion epochs with frozen encoders.
    pub freeze_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule { total_epochs: 40, freeze_epochs: 10, batch_size: 16, lr: 1e-3, optimizer: OptimizerKind::Adam, seed: 0 }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Config("schedule.total_epochs must be positive".into()));
        }
        if self.freeze_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "schedule.freeze_epochs ({}) exceeds total_epochs ({})",
                self.freeze_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("schedule.batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("schedule.lr must be a positive number, got {}", self.lr)));
        }
        Ok(())
    }

    fn optimizer(&self) -> Optimizer {
        Optimizer::new(self.optimizer, self.lr)
    }
}

/// Architecture of every model family.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn validate(&self, views: usize) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate(views)
    }

    pub fn fusion_dims(&self, classes: usize) -> FusionDims {
        FusionDims { point_dim: self.encoder.point_dim(), view_dim: self.encoder.view_dim, classes }
    }
}

/// The model families compared by the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Point encoder and a linear classifier.
    Point,
    /// View encoder, max view-pooling and a linear classifier.
    View,
    /// Point feature concatenated with the pooled view feature.
    Late,
    Fusion(FusionVariant),
}

impl ModelKind {
    pub fn name(&self) -> String {
        match self {
            ModelKind::Point => "point_only".into(),
            ModelKind::View => "view_only".into(),
            ModelKind::Late => "late_fusion".into(),
            ModelKind::Fusion(FusionVariant::SingleView) => "sfusion".into(),
            ModelKind::Fusion(FusionVariant::MultiView { k }) => format!("sm_fusion_k{k}"),
        }
    }

    /// Inverse of [`ModelKind::name`].
    pub fn from_name(name: &str) -> Option<ModelKind> {
        match name {
            "point_only" => Some(ModelKind::Point),
            "view_only" => Some(ModelKind::View),
            "late_fusion" => Some(ModelKind::Late),
            "sfusion" => Some(ModelKind::Fusion(FusionVariant::SingleView)),
            other => {
                let k = other.strip_prefix("sm_fusion_k")?.parse().ok()?;
                (k >= 2).then_some(ModelKind::Fusion(FusionVariant::MultiView { k }))
            }
        }
    }

    pub fn uses_points(&self) -> bool {
        !matches!(self, ModelKind::View)
    }

    pub fn uses_views(&self) -> bool {
        !matches!(self, ModelKind::Point)
    }

    fn is_joint(&self) -> bool {
        self.uses_points() && self.uses_views()
    }

    fn seed_tag(&self) -> u64 {
        match self {
            ModelKind::Point => 1,
            ModelKind::View => 2,
            ModelKind::Late => 3,
            ModelKind::Fusion(FusionVariant::SingleView) => 4,
            ModelKind::Fusion(FusionVariant::MultiView { k }) => 100 + *k as u64,
        }
    }
}

/// A sample with its k-NN graph built once up front.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub class_id: usize,
    pub sample_id: u64,
    pub points: Tensor,
    pub views: Tensor,
    pub graph: NeighborTable,
}

pub fn prepare_samples(samples: &[ShapeSample], knn_k: usize) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(PreparedSample {
                class_id: s.class_id,
                sample_id: s.sample_id,
                points: s.points.clone(),
                views: s.view_descriptors.clone(),
                graph: knn_graph(&s.points, knn_k)?,
            })
        })
        .collect()
}

/// Encoder outputs for one sample under fixed encoder weights.
#[derive(Clone, Debug)]
struct Features {
    point: Option<Tensor>,
    views: Option<Tensor>,
}

/// Logits and embedding of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl Prediction {
    /// Arg-max class; ties go to the lowest index.
    pub fn class(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.logits.iter().enumerate() {
            if v > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

fn is_encoder_path(path: &str) -> bool {
    path.starts_with("point.") || path.starts_with("view.")
}

/// A model family together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub classes: usize,
    pub store: ParameterStore,
}

impl Model {
    /// Freshly initialised parameters for `kind`.
    pub fn init(kind: ModelKind, config: &ModelConfig, classes: usize, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, kind.seed_tag()));
        let mut store = ParameterStore::new();
        let dims = config.fusion_dims(classes);
        if kind.uses_points() {
            init_point_encoder(&mut store, &config.encoder, &mut rng)?;
        }
        if kind.uses_views() {
            init_view_encoder(&mut store, &config.encoder, &mut rng)?;
        }
        match kind {
            ModelKind::Point => init_linear_classifier(&mut store, "point_cls", dims.point_dim, classes, &mut rng)?,
            ModelKind::View => init_linear_classifier(&mut store, "view_cls", dims.view_dim, classes, &mut rng)?,
            ModelKind::Late => init_late_fusion(&mut store, &config.fusion, dims, &mut rng)?,
            ModelKind::Fusion(variant) => init_fusion(&mut store, &config.fusion, variant, dims, &mut rng)?,
        }
        Ok(Model { kind, config: config.clone(), classes, store })
    }

    /// Parameter paths and shapes `kind` expects under `config`.
    pub fn expected_shapes(kind: ModelKind, config: &ModelConfig, classes: usize) -> Result<BTreeMap<String, Vec<usize>>> {
        let m = Model::init(kind, config, classes, 0)?;
        Ok(m.store.iter().map(|(p, t)| (p.to_string(), t.shape().to_vec())).collect())
    }

    /// Wraps loaded parameters, checking that they match `kind` and `config`.
    pub fn from_store(kind: ModelKind, config: &ModelConfig, classes: usize, store: ParameterStore) -> Result<Model> {
        let expected = Model::expected_shapes(kind, config, classes)?;
        check_shapes(&expected, &store, &kind.name())?;
        Ok(Model { kind, config: config.clone(), classes, store })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.store, path)
    }

    pub fn load(kind: ModelKind, config: &ModelConfig, classes: usize, path: impl AsRef<Path>) -> Result<Model> {
        Model::from_store(kind, config, classes, load_checkpoint(path)?)
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// Encoder outputs as tape nodes. `p` is `1×Dp`, `v` is `V×Dh`.
    fn encode(&self, tape: &mut Tape, s: &PreparedSample, trainable: bool) -> Result<(Option<Var>, Option<Var>)> {
        let p = if self.kind.uses_points() {
            let w = PointEncoderWeights::bind(tape, &self.store, &self.config.encoder, trainable)?;
            let x = tape.constant(s.points.clone());
            Some(point_encode(tape, x, &s.graph, &w)?)
        } else {
            None
        };
        let v = if self.kind.uses_views() {
            let mlp = bind_view_encoder(tape, &self.store, trainable)?;
            let d = tape.constant(s.views.clone());
            Some(view_encode(tape, d, &mlp)?)
        } else {
            None
        };
        Ok((p, v))
    }

    /// Classifier on top of encoder outputs; returns `(logits, embedding)`.
    fn head(&self, tape: &mut Tape, p: Option<Var>, v: Option<Var>, trainable: bool) -> Result<(Var, Var)> {
        match (self.kind, p, v) {
            (ModelKind::Point, Some(p), _) => {
                let cls = bind_linear_classifier(tape, &self.store, "point_cls", trainable)?;
                Ok((cls.forward(tape, p)?, p))
            }
            (ModelKind::View, _, Some(v)) => {
                let pooled = tape.max_over_axis(v, 0)?;
                let width = tape.shape(pooled)[0];
                let pooled = tape.reshape(pooled, &[1, width])?;
                let cls = bind_linear_classifier(tape, &self.store, "view_cls", trainable)?;
                Ok((cls.forward(tape, pooled)?, pooled))
            }
            (ModelKind::Late, Some(p), Some(v)) => {
                let head = bind_late_fusion(tape, &self.store, trainable)?;
                crate::fusion::late_fusion_baseline(tape, p, v, &head)
            }
            (ModelKind::Fusion(variant), Some(p), Some(v)) => {
                let w = FusionWeights::bind(tape, &self.store, variant, trainable)?;
                let out = fuse(tape, p, v, &w)?;
                Ok((out.logits, out.embedding))
            }
            _ => Err(Error::Usage(format!("{} is missing an encoder output", self.kind.name()))),
        }
    }

    /// Full forward pass. Encoder and head parameters are bound as trainable
    /// leaves only when requested.
    pub fn forward(&self, tape: &mut Tape, s: &PreparedSample, encoders_trainable: bool, head_trainable: bool) -> Result<(Var, Var)> {
        let (p, v) = self.encode(tape, s, encoders_trainable)?;
        self.head(tape, p, v, head_trainable)
    }

    fn features(&self, s: &PreparedSample) -> Result<Features> {
        let mut tape = Tape::new();
        let (p, v) = self.encode(&mut tape, s, false)?;
        Ok(Features { point: p.map(|p| tape.value(p).clone()), views: v.map(|v| tape.value(v).clone()) })
    }

    fn forward_cached(&self, tape: &mut Tape, f: &Features, head_trainable: bool) -> Result<(Var, Var)> {
        let p = f.point.as_ref().map(|t| tape.constant(t.clone()));
        let v = f.views.as_ref().map(|t| tape.constant(t.clone()));
        self.head(tape, p, v, head_trainable)
    }

    pub fn predict_one(&self, s: &PreparedSample) -> Result<Prediction> {
        let mut tape = Tape::new();
        let (logits, emb) = self.forward(&mut tape, s, false, false)?;
        Ok(Prediction { logits: tape.value(logits).data().to_vec(), embedding: tape.value(emb).data().to_vec() })
    }

    pub fn predict(&self, samples: &[PreparedSample]) -> Result<Vec<Prediction>> {
        samples.iter().map(|s| self.predict_one(s)).collect()
    }
}

fn check_shapes(expected: &BTreeMap<String, Vec<usize>>, store: &ParameterStore, what: &str) -> Result<()> {
    for (path, shape) in expected {
        match store.value(path) {
            None => return Err(Error::Format(format!("{what} checkpoint lacks parameter `{path}`"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Format(format!(
                    "{what} checkpoint parameter `{path}` has shape {:?}, configuration expects {:?}",
                    t.shape(),
                    shape
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = store.paths().find(|p| !expected.contains_key(*p)) {
        return Err(Error::Format(format!("{what} checkpoint has unexpected parameter `{extra}`")));
    }
    Ok(())
}

/// Where a training run is, reported to observers after every optimiser step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Progress {
    pub epoch: usize,
    /// Step within the epoch, from 0.
    pub step: usize,
    /// Encoders were frozen for this step.
    pub frozen: bool,
    /// This was the last step of the epoch.
    pub epoch_end: bool,
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub frozen_epochs: usize,
}

/// Which unimodal branch to pretrain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Point,
    View,
}

impl Branch {
    pub fn kind(self) -> ModelKind {
        match self {
            Branch::Point => ModelKind::Point,
            Branch::View => ModelKind::View,
        }
    }
}

/// Trains one encoder with its linear classifier. `freeze_epochs` is ignored.
pub fn pretrain_unimodal(
    train: &[PreparedSample],
    branch: Branch,
    config: &ModelConfig,
    classes: usize,
    schedule: &TrainSchedule,
) -> Result<(Model, TrainLog)> {
    schedule.validate()?;
    let mut model = Model::init(branch.kind(), config, classes, schedule.seed)?;
    let log = run_training(&mut model, train, schedule, 0, &mut |_, _| {})?;
    Ok((model, log))
}

/// Builds a joint model from pretrained unimodal encoders and trains it in
/// two phases. `observe` sees the store after every optimiser step.
pub fn train_fusion(
    train: &[PreparedSample],
    point: &Model,
    view: &Model,
    kind: ModelKind,
    schedule: &TrainSchedule,
    observe: &mut dyn FnMut(Progress, &ParameterStore),
) -> Result<(Model, TrainLog)> {
    schedule.validate()?;
    if !kind.is_joint() {
        return Err(Error::Usage(format!("{} is not a joint model", kind.name())));
    }
    let config = &point.config;
    let mut model = Model::init(kind, config, point.classes, schedule.seed)?;
    for (source, prefix) in [(point, "point."), (view, "view.")] {
        let expected: BTreeMap<String, Vec<usize>> = model
            .store
            .iter()
            .filter(|(p, _)| p.starts_with(prefix))
            .map(|(p, t)| (p.to_string(), t.shape().to_vec()))
            .collect();
        let subset = source.store.iter().filter(|(p, _)| p.starts_with(prefix));
        let mut loaded = ParameterStore::new();
        for (p, t) in subset {
            loaded.insert(p, t.clone())?;
        }
        check_shapes(&expected, &loaded, &source.kind.name())?;
        for (p, t) in loaded.iter() {
            model.store.set(p, t.clone())?;
        }
    }
    let log = run_training(&mut model, train, schedule, schedule.freeze_epochs, observe)?;
    Ok((model, log))
}

fn run_training(
    model: &mut Model,
    train: &[PreparedSample],
    schedule: &TrainSchedule,
    freeze_epochs: usize,
    observe: &mut dyn FnMut(Progress, &ParameterStore),
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let opt = schedule.optimizer();
    let mut log = TrainLog { epoch_losses: Vec::with_capacity(schedule.total_epochs), frozen_epochs: freeze_epochs };
    let mut cache: Option<Vec<Features>> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..schedule.total_epochs {
        let frozen = epoch < freeze_epochs;
        if frozen && cache.is_none() {
            cache = Some(train.iter().map(|s| model.features(s)).collect::<Result<_>>()?);
        } else if !frozen {
            cache = None;
        }
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(schedule.seed, epoch as u64)));
        let mut total = 0.0;
        let steps = order.len().div_ceil(schedule.batch_size);
        for (step, batch) in order.chunks(schedule.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut tape = Tape::new();
                let (logits, _) = match &cache {
                    Some(c) => model.forward_cached(&mut tape, &c[i], true)?,
                    None => model.forward(&mut tape, &train[i], true, true)?,
                };
                let loss = tape.softmax_cross_entropy(logits, &[train[i].class_id])?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        detail: format!("loss is {value} on sample {}", train[i].sample_id),
                    });
                }
                total += value;
                let scaled = tape.scale(loss, scale);
                let grads = tape.backward(scaled)?;
                model.store.accumulate(&tape, &grads)?;
            }
            if !model.store.grads_finite() {
                return Err(Error::Divergence { epoch, step, detail: "non-finite gradient".into() });
            }
            model.store.step(&opt, |p| frozen && is_encoder_path(p))?;
            observe(Progress { epoch, step, frozen, epoch_end: step + 1 == steps }, &model.store);
        }
        let mean = total / train.len() as f64;
        log::debug!("{} epoch {epoch}: loss {mean:.4}{}", model.kind.name(), if frozen { " (encoders frozen)" } else { "" });
        log.epoch_losses.push(mean);
    }
    Ok(log)
}

/// Classification and retrieval results on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub test_samples: usize,
    pub overall_acc: f64,
    pub mean_class_acc: f64,
    /// `null` for classes absent from the split.
    pub per_class_acc: Vec<Option<f64>>,
    pub retrieval_map: f64,
    pub pr_curve: Vec<PrPoint>,
    /// Configuration echo supplied by the caller.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Overall accuracy only, for sweeps.
pub fn accuracy(model: &Model, samples: &[PreparedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    for s in samples {
        if model.predict_one(s)?.class() == s.class_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

pub fn evaluate(model: &Model, test: &[PreparedSample]) -> Result<EvalReport> {
    let preds = model.predict(test)?;
    let labels: Vec<usize> = test.iter().map(|s| s.class_id).collect();
    let predicted: Vec<usize> = preds.iter().map(Prediction::class).collect();
    let cls = classification_metrics(&predicted, &labels, model.classes)?;
    let embeddings: Vec<Vec<f64>> = preds.into_iter().map(|p| p.embedding).collect();
    let ret = retrieval_map(&embeddings, &labels)?;
    Ok(EvalReport {
        model: model.kind.name(),
        test_samples: test.len(),
        overall_acc: cls.overall_acc,
        mean_class_acc: cls.mean_class_acc,
        per_class_acc: cls.per_class_acc,
        retrieval_map: ret.map,
        pr_curve: ret.pr_curve,
        config: serde_json::Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_dataset, DatasetConfig};

    fn tiny() -> (Vec<PreparedSample>, ModelConfig) {
        let ds = make_dataset(&DatasetConfig {
            classes: 3,
            train_per_class: 4,
            test_per_class: 2,
            points: 64,
            resolution: 4,
            ..DatasetConfig::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            encoder: EncoderConfig { knn_k: 4, point_widths: vec![8, 8], view_hidden: 8, view_dim: 8, descriptor_len: 48 },
            fusion: FusionConfig { relation_hidden: 4, fusion_hidden: 8, fused_dim: 8, embed_dim: 6, top_k: 3 },
        };
        (prepare_samples(&ds.train, 4).unwrap(), cfg)
    }

    fn quick() -> TrainSchedule {
        TrainSchedule { total_epochs: 3, freeze_epochs: 1, batch_size: 5, lr: 1e-2, ..TrainSchedule::default() }
    }

    #[test]
    fn kind_names() {
        assert_eq!(ModelKind::Fusion(FusionVariant::MultiView { k: 3 }).name(), "sm_fusion_k3");
        assert_eq!(ModelKind::Fusion(FusionVariant::SingleView).name(), "sfusion");
        for kind in crate::train::ablation_kinds(5) {
            assert_eq!(ModelKind::from_name(&kind.name()), Some(kind));
        }
        assert_eq!(ModelKind::from_name("sm_fusion_k1"), None);
        assert_eq!(ModelKind::from_name("fusion"), None);
    }

    #[test]
    fn freeze_epochs_do_not_affect_unimodal_training() {
        let (train, cfg) = tiny();
        let a = pretrain_unimodal(&train, Branch::Point, &cfg, 3, &TrainSchedule { freeze_epochs: 0, ..quick() }).unwrap();
        let b = pretrain_unimodal(&train, Branch::Point, &cfg, 3, &TrainSchedule { freeze_epochs: 3, ..quick() }).unwrap();
        assert_eq!(a.1.epoch_losses, b.1.epoch_losses);
        assert_eq!(a.0.store, b.0.store);
    }

    #[test]
    fn fusion_phases_respect_the_freeze() {
        let (train, cfg) = tiny();
        let (point, _) = pretrain_unimodal(&train, Branch::Point, &cfg, 3, &quick()).unwrap();
        let (view, _) = pretrain_unimodal(&train, Branch::View, &cfg, 3, &quick()).unwrap();
        let encoder = |s: &ParameterStore| {
            s.iter().filter(|(p, _)| is_encoder_path(p)).map(|(p, t)| (p.to_string(), t.clone())).collect::<Vec<_>>()
        };
        let initial: Vec<_> = encoder(&point.store).into_iter().chain(encoder(&view.store)).collect();
        let mut frozen_ok = true;
        let mut changed_after_thaw = None;
        let kind = ModelKind::Fusion(FusionVariant::MultiView { k: 3 });
        train_fusion(&train, &point, &view, kind, &quick(), &mut |p, s| {
            let now = encoder(s);
            if p.frozen {
                frozen_ok &= now == initial;
            } else if changed_after_thaw.is_none() {
                changed_after_thaw = Some(now != initial);
            }
        })
        .unwrap();
        assert!(frozen_ok);
        assert_eq!(changed_after_thaw, Some(true));
    }

    #[test]
    fn incompatible_checkpoint_is_format_error() {
        let (_, cfg) = tiny();
        let m = Model::init(ModelKind::Point, &cfg, 3, 0).unwrap();
        let mut other = cfg.clone();
        other.encoder.point_widths = vec![8, 16];
        assert!(matches!(Model::from_store(ModelKind::Point, &other, 3, m.store.clone()), Err(Error::Format(_))));
        assert!(matches!(Model::from_store(ModelKind::View, &cfg, 3, m.store), Err(Error::Format(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let (train, cfg) = tiny();
        let mut model = Model::init(ModelKind::View, &cfg, 3, 0).unwrap();
        let w = model.store.value("view_cls.w").unwrap().clone();
        model.store.set("view_cls.w", Tensor::filled(w.shape(), f64::NAN)).unwrap();
        let err = run_training(&mut model, &train, &quick(), 0, &mut |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 0, step: 0, .. }), "{err}");
    }
}
