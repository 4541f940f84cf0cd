//! Ablation and missing-data robustness runners and their CSV tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    accuracy, evaluate, prepare_samples, pretrain_unimodal, train_fusion, Branch, EvalReport, Model, ModelConfig,
    ModelKind, PrPoint, PreparedSample, TrainSchedule,
};
use crate::error::Result;
use crate::fusion::FusionVariant;
use crate::io::atomic_write;
use crate::synth::{subsample_points, subsample_views, ShapeSample};

pub const VIEW_SWEEP: [usize; 4] = [4, 8, 10, 12];
pub const POINT_SWEEP: [usize; 8] = [128, 256, 384, 512, 640, 768, 896, 1024];

/// Ablation rows in table order: both unimodal models, late fusion,
/// single-view fusion, then multi-view fusion for K = 2..=`k_max`.
pub fn ablation_kinds(k_max: usize) -> Vec<ModelKind> {
    let mut kinds = vec![ModelKind::Point, ModelKind::View, ModelKind::Late, ModelKind::Fusion(FusionVariant::SingleView)];
    kinds.extend((2..=k_max).map(|k| ModelKind::Fusion(FusionVariant::MultiView { k })));
    kinds
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub mean_class_acc: f64,
    pub overall_acc: f64,
}

/// Trained models and their evaluations, in [`ablation_kinds`] order.
#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub models: Vec<Model>,
    pub reports: Vec<EvalReport>,
}

impl AblationOutcome {
    pub fn model(&self, kind: ModelKind) -> Option<&Model> {
        self.models.iter().find(|m| m.kind == kind)
    }

    pub fn overall(&self, kind: ModelKind) -> Option<f64> {
        self.reports.iter().find(|r| r.model == kind.name()).map(|r| r.overall_acc)
    }
}

/// Trains every ablation model with shared seeds. Joint models all start
/// from the same pretrained unimodal encoders.
pub fn run_ablation(
    train: &[PreparedSample],
    test: &[PreparedSample],
    config: &ModelConfig,
    classes: usize,
    schedule: &TrainSchedule,
) -> Result<AblationOutcome> {
    let mut models = Vec::new();
    for kind in ablation_kinds(config.fusion.top_k) {
        let model = match kind {
            ModelKind::Point => pretrain_unimodal(train, Branch::Point, config, classes, schedule)?.0,
            ModelKind::View => pretrain_unimodal(train, Branch::View, config, classes, schedule)?.0,
            joint => train_fusion(train, &models[0], &models[1], joint, schedule, &mut |_, _| {})?.0,
        };
        log::info!("trained {}", kind.name());
        models.push(model);
    }
    let reports = models.iter().map(|m| evaluate(m, test)).collect::<Result<Vec<_>>>()?;
    let rows = reports
        .iter()
        .map(|r| AblationRow { model: r.model.clone(), mean_class_acc: r.mean_class_acc, overall_acc: r.overall_acc })
        .collect();
    Ok(AblationOutcome { rows, models, reports })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub model: String,
    /// Number of test views or test points.
    pub count: usize,
    pub overall_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTables {
    pub views: Vec<RobustnessRow>,
    pub points: Vec<RobustnessRow>,
}

impl RobustnessTables {
    fn lookup(rows: &[RobustnessRow], model: &str, count: usize) -> Option<f64> {
        rows.iter().find(|r| r.model == model && r.count == count).map(|r| r.overall_acc)
    }

    pub fn view_acc(&self, kind: ModelKind, views: usize) -> Option<f64> {
        Self::lookup(&self.views, &kind.name(), views)
    }

    pub fn point_acc(&self, kind: ModelKind, points: usize) -> Option<f64> {
        Self::lookup(&self.points, &kind.name(), points)
    }
}

/// Evaluates models trained on full inputs with fewer test views (points
/// fixed) and fewer test points (views fixed). Point counts above the
/// sample size are skipped.
pub fn run_robustness(models: &[&Model], test: &[ShapeSample]) -> Result<RobustnessTables> {
    let Some(first) = models.first() else {
        return Ok(RobustnessTables { views: Vec::new(), points: Vec::new() });
    };
    let k = first.config.encoder.knn_k;
    let full = test.iter().map(ShapeSample::num_points).min().unwrap_or(0);

    let mut views = Vec::new();
    let base = prepare_samples(test, k)?;
    for &keep in &VIEW_SWEEP {
        let subset: Vec<PreparedSample> = base
            .iter()
            .zip(test)
            .map(|(p, s)| Ok(PreparedSample { views: subsample_views(s, keep)?.view_descriptors, ..p.clone() }))
            .collect::<Result<_>>()?;
        for m in models {
            views.push(RobustnessRow { model: m.kind.name(), count: keep, overall_acc: accuracy(m, &subset)? });
        }
    }

    let mut points = Vec::new();
    for &keep in POINT_SWEEP.iter().filter(|&&n| n <= full) {
        let reduced: Vec<ShapeSample> = test.iter().map(|s| subsample_points(s, keep)).collect::<Result<_>>()?;
        let prepared = if keep == full { base.clone() } else { prepare_samples(&reduced, k)? };
        for m in models {
            points.push(RobustnessRow { model: m.kind.name(), count: keep, overall_acc: accuracy(m, &prepared)? });
        }
    }
    Ok(RobustnessTables { views, points })
}

pub fn write_ablation_csv(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<()> {
    let mut out = String::from("model,mean_class_acc,overall_acc\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.model, r.mean_class_acc, r.overall_acc);
    }
    atomic_write(path, out.as_bytes())
}

/// `column` is `views` or `points`.
pub fn write_robustness_csv(path: impl AsRef<Path>, column: &str, rows: &[RobustnessRow]) -> Result<()> {
    let mut out = format!("model,{column},overall_acc\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.model, r.count, r.overall_acc);
    }
    atomic_write(path, out.as_bytes())
}

pub fn write_pr_curve_csv(path: impl AsRef<Path>, curve: &[PrPoint]) -> Result<()> {
    let mut out = String::from("recall,precision\n");
    for p in curve {
        let _ = writeln!(out, "{},{}", p.recall, p.precision);
    }
    atomic_write(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_ablation_rows_by_default() {
        let names: Vec<String> = ablation_kinds(4).iter().map(ModelKind::name).collect();
        assert_eq!(
            names,
            ["point_only", "view_only", "late_fusion", "sfusion", "sm_fusion_k2", "sm_fusion_k3", "sm_fusion_k4"]
        );
    }

    #[test]
    fn csv_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write_ablation_csv(&path, &[AblationRow { model: "x".into(), mean_class_acc: 0.5, overall_acc: 0.25 }]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "model,mean_class_acc,overall_acc\nx,0.5,0.25\n");
        write_robustness_csv(&path, "views", &[RobustnessRow { model: "y".into(), count: 4, overall_acc: 1.0 }]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "model,views,overall_acc\ny,4,1\n");
    }
}
