//! Relation-guided fusion of a point-cloud feature with per-view features.
//!
//! Pipeline for one shape, given the point feature `p` (`1×Dp`) and view
//! features `v` (`V×Dh`):
//!
//! 1. a shared MLP scores every `(p, v_i)` pair and a sigmoid maps it to `(0, 1)`;
//! 2. each view is scaled residually, `v'_i = v_i · (1 + s_i)`;
//! 3. single-view fusion runs a shared MLP on every `(p, v'_i)` and max-pools;
//! 4. multi-view fusion max-pools the top-k enhanced views for k = 2..K, runs a
//!    shared MLP on each `(p, m_k)` and averages;
//! 5. the two fused vectors are concatenated and classified by a two-layer head
//!    whose hidden activation doubles as the retrieval embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_mlp, mlp_param_count, Mlp};
use crate::tensor::{ParameterStore, Tape, Var};

/// Widths of the fusion networks and the number of nested view sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub relation_hidden: usize,
    pub fusion_hidden: usize,
    /// Width of each fused vector; the concatenation is twice this.
    pub fused_dim: usize,
    /// Width of the head's hidden layer, used as the retrieval embedding.
    pub embed_dim: usize,
    /// Largest view set used by multi-view fusion.
    pub top_k: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { relation_hidden: 64, fusion_hidden: 128, fused_dim: 128, embed_dim: 64, top_k: 4 }
    }
}

impl FusionConfig {
    pub fn validate(&self, views: usize) -> Result<()> {
        if [self.relation_hidden, self.fusion_hidden, self.fused_dim, self.embed_dim].contains(&0) {
            return Err(Error::Config("fusion widths must be positive".into()));
        }
        if self.top_k < 2 || self.top_k > views {
            return Err(Error::Config(format!("top_k must lie in 2..={views}, got {}", self.top_k)));
        }
        Ok(())
    }
}

/// Which fused vectors feed the classification head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Single-view fusion only.
    SingleView,
    /// Single-view and multi-view fusion over view sets of size 2..=k.
    MultiView { k: usize },
}

/// Feature widths the fusion networks are built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionDims {
    pub point_dim: usize,
    pub view_dim: usize,
    pub classes: usize,
}

impl FusionDims {
    fn pair(&self) -> usize {
        self.point_dim + self.view_dim
    }
}

fn head_input(cfg: &FusionConfig, variant: FusionVariant) -> usize {
    match variant {
        FusionVariant::SingleView => cfg.fused_dim,
        FusionVariant::MultiView { .. } => 2 * cfg.fused_dim,
    }
}

fn head_widths(cfg: &FusionConfig, variant: FusionVariant, dims: FusionDims) -> [usize; 3] {
    [head_input(cfg, variant), cfg.embed_dim, dims.classes]
}

pub fn init_fusion(
    store: &mut ParameterStore,
    cfg: &FusionConfig,
    variant: FusionVariant,
    dims: FusionDims,
    rng: &mut impl Rng,
) -> Result<()> {
    init_mlp(store, "relation", &[dims.pair(), cfg.relation_hidden, 1], false, rng)?;
    init_mlp(store, "sfusion", &[dims.pair(), cfg.fusion_hidden, cfg.fused_dim], true, rng)?;
    if let FusionVariant::MultiView { .. } = variant {
        init_mlp(store, "mfusion", &[dims.pair(), cfg.fusion_hidden, cfg.fused_dim], true, rng)?;
    }
    init_mlp(store, "head", &head_widths(cfg, variant, dims), false, rng)
}

/// Scalar count of the classification head alone.
pub fn head_param_count(cfg: &FusionConfig, variant: FusionVariant, dims: FusionDims) -> usize {
    mlp_param_count(&head_widths(cfg, variant, dims))
}

/// Scalar count of every fusion-side parameter (scores, fusion MLPs, head).
pub fn fusion_param_count(cfg: &FusionConfig, variant: FusionVariant, dims: FusionDims) -> usize {
    let fuse = mlp_param_count(&[dims.pair(), cfg.fusion_hidden, cfg.fused_dim]);
    let multi = if matches!(variant, FusionVariant::MultiView { .. }) { fuse } else { 0 };
    mlp_param_count(&[dims.pair(), cfg.relation_hidden, 1]) + fuse + multi + head_param_count(cfg, variant, dims)
}

/// Bound fusion networks for one tape.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub relation: Mlp,
    pub sfusion: Mlp,
    pub mfusion: Option<Mlp>,
    pub head: Mlp,
    pub variant: FusionVariant,
}

impl FusionWeights {
    pub fn bind(tape: &mut Tape, store: &ParameterStore, variant: FusionVariant, trainable: bool) -> Result<Self> {
        Ok(FusionWeights {
            relation: Mlp::bind(tape, store, "relation", 2, false, trainable)?,
            sfusion: Mlp::bind(tape, store, "sfusion", 2, true, trainable)?,
            mfusion: match variant {
                FusionVariant::SingleView => None,
                FusionVariant::MultiView { .. } => Some(Mlp::bind(tape, store, "mfusion", 2, true, trainable)?),
            },
            head: Mlp::bind(tape, store, "head", 2, false, trainable)?,
            variant,
        })
    }
}

fn view_count(tape: &Tape, v: Var, op: &str) -> Result<usize> {
    match tape.shape(v) {
        &[n, _] => Ok(n),
        s => Err(Error::Input(format!("{op}: view features must be V×D, got {:?}", s))),
    }
}

/// `[p; v_i]` for every row of `v`, as a `V × (Dp+Dh)` matrix.
fn pair_rows(tape: &mut Tape, p: Var, v: Var, op: &str) -> Result<Var> {
    let rows = view_count(tape, v, op)?;
    if !matches!(tape.shape(p), [_] | [1, _]) {
        return Err(Error::Input(format!("{op}: point feature must be a single row, got {:?}", tape.shape(p))));
    }
    let tiled = tape.tile_rows(p, rows).map_err(|e| Error::Input(format!("{op}: {e}")))?;
    tape.concat(&[tiled, v], 1).map_err(|e| Error::Input(format!("{op}: {e}")))
}

/// Relation score of every view with the point feature, as a length-V vector
/// strictly inside `(0, 1)`.
pub fn relation_scores(tape: &mut Tape, p: Var, v: Var, relation: &Mlp) -> Result<Var> {
    let pairs = pair_rows(tape, p, v, "relation_scores")?;
    let expected = tape.shape(relation.layers[0].w)[0];
    if tape.shape(pairs)[1] != expected {
        return Err(Error::Input(format!(
            "relation_scores: point and view widths sum to {}, network expects {expected}",
            tape.shape(pairs)[1]
        )));
    }
    let logits = relation.forward(tape, pairs)?;
    let s = tape.sigmoid(logits);
    let rows = tape.shape(s)[0];
    tape.reshape(s, &[rows])
}

/// `v'_i = v_i · (1 + s_i)`.
pub fn enhance_views(tape: &mut Tape, v: Var, scores: Var) -> Result<Var> {
    let gain = tape.add_scalar(scores, 1.0);
    tape.mul_col(v, gain)
}

/// View indices ordered by descending score; equal scores keep ascending index.
pub fn rank_views(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Indices of the `k` highest scores, highest first, ties by ascending index.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Input(format!("top-k needs 1 ≤ k ≤ {}, got {k}", scores.len())));
    }
    let mut order = rank_views(scores);
    order.truncate(k);
    Ok(order)
}

/// Max over views of the shared single-view fusion MLP, `1 × Df`.
pub fn sfusion(tape: &mut Tape, p: Var, v_enh: Var, mlp: &Mlp) -> Result<Var> {
    if view_count(tape, v_enh, "sfusion")? == 0 {
        return Err(Error::Input("sfusion needs at least one view".into()));
    }
    let pairs = pair_rows(tape, p, v_enh, "sfusion")?;
    let per_view = mlp.forward(tape, pairs)?;
    let pooled = tape.max_over_axis(per_view, 0)?;
    let d = tape.shape(pooled)[0];
    tape.reshape(pooled, &[1, d])
}

/// Mean over k = 2..=`k_max` of the multi-view fusion MLP applied to `p`
/// and the max-pool of the first k views in `order`, `1 × Df`.
pub fn mfusion(tape: &mut Tape, p: Var, v_enh: Var, order: &[usize], k_max: usize, mlp: &Mlp) -> Result<Var> {
    let views = view_count(tape, v_enh, "mfusion")?;
    if k_max < 2 {
        return Err(Error::Input(format!("mfusion needs K ≥ 2, got {k_max}; use single-view fusion alone")));
    }
    if k_max > views || order.len() < k_max {
        return Err(Error::Input(format!("mfusion K = {k_max} exceeds the {views} available views")));
    }
    let width = tape.shape(v_enh)[1];
    let mut pooled = Vec::with_capacity(k_max - 1);
    for k in 2..=k_max {
        let set = tape.gather_rows(v_enh, &order[..k])?;
        let m = tape.max_over_axis(set, 0)?;
        pooled.push(tape.reshape(m, &[1, width])?);
    }
    let stacked = tape.concat(&pooled, 0)?;
    let pairs = pair_rows(tape, p, stacked, "mfusion")?;
    let per_set = mlp.forward(tape, pairs)?;
    let mean = tape.mean_over_axis(per_set, 0)?;
    let d = tape.shape(mean)[0];
    tape.reshape(mean, &[1, d])
}

/// Every intermediate of one fused forward pass.
#[derive(Clone, Debug)]
pub struct FusedVars {
    pub scores: Var,
    pub enhanced: Var,
    pub order: Vec<usize>,
    pub sfusion: Var,
    pub mfusion: Option<Var>,
    pub fusion: Var,
    pub embedding: Var,
    pub logits: Var,
}

/// Plain values of a fused forward pass for one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    pub scores: Vec<f64>,
    pub sfusion: Vec<f64>,
    pub mfusion: Option<Vec<f64>>,
    pub fusion: Vec<f64>,
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
}

impl FusedVars {
    pub fn values(&self, tape: &Tape) -> FusedFeature {
        let get = |v: Var| tape.value(v).data().to_vec();
        FusedFeature {
            scores: get(self.scores),
            sfusion: get(self.sfusion),
            mfusion: self.mfusion.map(get),
            fusion: get(self.fusion),
            embedding: get(self.embedding),
            logits: get(self.logits),
        }
    }
}

/// Full fused forward pass for one shape: `p` is `1×Dp`, `v` is `V×Dh`.
pub fn fuse(tape: &mut Tape, p: Var, v: Var, w: &FusionWeights) -> Result<FusedVars> {
    let scores = relation_scores(tape, p, v, &w.relation)?;
    let enhanced = enhance_views(tape, v, scores)?;
    let order = rank_views(tape.value(scores).data());
    let sf = sfusion(tape, p, enhanced, &w.sfusion)?;
    let (mf, fusion) = match (w.variant, &w.mfusion) {
        (FusionVariant::SingleView, _) => (None, sf),
        (FusionVariant::MultiView { k }, Some(mlp)) => {
            let mf = mfusion(tape, p, enhanced, &order, k, mlp)?;
            (Some(mf), tape.concat(&[sf, mf], 1)?)
        }
        (FusionVariant::MultiView { .. }, None) => {
            return Err(Error::Usage("multi-view fusion weights are not bound".into()));
        }
    };
    let (logits, embedding) = w.head.forward_with_penultimate(tape, fusion)?;
    Ok(FusedVars { scores, enhanced, order, sfusion: sf, mfusion: mf, fusion, embedding, logits })
}

/// Hidden width that brings the late-fusion head closest to the parameter
/// count of the fused head it is compared against.
pub fn late_hidden_width(cfg: &FusionConfig, dims: FusionDims) -> usize {
    let target = head_param_count(cfg, FusionVariant::MultiView { k: cfg.top_k }, dims) as f64;
    // (pair + 1 + classes)·H + classes = target
    let per_unit = (dims.pair() + 1 + dims.classes) as f64;
    (((target - dims.classes as f64) / per_unit).round() as usize).max(1)
}

pub fn init_late_fusion(store: &mut ParameterStore, cfg: &FusionConfig, dims: FusionDims, rng: &mut impl Rng) -> Result<()> {
    init_mlp(store, "late", &[dims.pair(), late_hidden_width(cfg, dims), dims.classes], false, rng)
}

pub fn late_param_count(cfg: &FusionConfig, dims: FusionDims) -> usize {
    mlp_param_count(&[dims.pair(), late_hidden_width(cfg, dims), dims.classes])
}

pub fn bind_late_fusion(tape: &mut Tape, store: &ParameterStore, trainable: bool) -> Result<Mlp> {
    Mlp::bind(tape, store, "late", 2, false, trainable)
}

/// Late-fusion comparator: `[p; maxpool(v)]` through a two-layer head.
/// Returns `(logits, embedding)`.
pub fn late_fusion_baseline(tape: &mut Tape, p: Var, v: Var, head: &Mlp) -> Result<(Var, Var)> {
    if view_count(tape, v, "late_fusion")? == 0 {
        return Err(Error::Input("late fusion needs at least one view".into()));
    }
    let pooled = tape.max_over_axis(v, 0)?;
    let width = tape.shape(pooled)[0];
    let pooled = tape.reshape(pooled, &[1, width])?;
    let joint = tape.concat(&[p, pooled], 1).map_err(|e| Error::Input(format!("late_fusion: {e}")))?;
    head.forward_with_penultimate(tape, joint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIMS: FusionDims = FusionDims { point_dim: 5, view_dim: 4, classes: 3 };

    fn small_cfg(k: usize) -> FusionConfig {
        FusionConfig { relation_hidden: 6, fusion_hidden: 7, fused_dim: 5, embed_dim: 4, top_k: k }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(seed: u64, variant: FusionVariant) -> ParameterStore {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = match variant {
            FusionVariant::MultiView { k } => k,
            FusionVariant::SingleView => 2,
        };
        init_fusion(&mut store, &small_cfg(k), variant, DIMS, &mut rng).unwrap();
        store
    }

    fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
        Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let mut store = setup(0, FusionVariant::SingleView);
        store.set("relation.fc2.w", Tensor::zeros(&[6, 1])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let w = FusionWeights::bind(&mut tape, &store, FusionVariant::SingleView, false).unwrap();
        let p = tape.constant(rand_tensor(&mut rng, &[1, 5]));
        let v = tape.constant(rand_tensor(&mut rng, &[3, 4]));
        let s = relation_scores(&mut tape, p, v, &w.relation).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn swapping_views_swaps_scores() {
        let store = setup(2, FusionVariant::SingleView);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pt = rand_tensor(&mut rng, &[1, 5]);
        let vt = rand_tensor(&mut rng, &[4, 4]);
        let score = |v: Tensor| {
            let mut tape = Tape::new();
            let w = FusionWeights::bind(&mut tape, &store, FusionVariant::SingleView, false).unwrap();
            let p = tape.constant(pt.clone());
            let v = tape.constant(v);
            let s = relation_scores(&mut tape, p, v, &w.relation).unwrap();
            tape.value(s).data().to_vec()
        };
        let a = score(vt.clone());
        let b = score(permute(&vt, &[2, 1, 0, 3]));
        assert_eq!(b, vec![a[2], a[1], a[0], a[3]]);
    }

    #[test]
    fn mismatched_widths_are_input_errors() {
        let store = setup(2, FusionVariant::SingleView);
        let mut tape = Tape::new();
        let w = FusionWeights::bind(&mut tape, &store, FusionVariant::SingleView, false).unwrap();
        let p = tape.constant(Tensor::zeros(&[1, 5]));
        let v = tape.constant(Tensor::zeros(&[3, 5]));
        assert!(matches!(relation_scores(&mut tape, p, v, &w.relation), Err(Error::Input(_))));
        let empty = tape.constant(Tensor::zeros(&[0, 4]));
        assert!(matches!(sfusion(&mut tape, p, empty, &w.sfusion), Err(Error::Input(_))));
    }

    #[test]
    fn relation_score_gradients() {
        let store = setup(4, FusionVariant::SingleView);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![
            rand_tensor(&mut rng, &[1, 5]),
            rand_tensor(&mut rng, &[3, 4]),
            store.value("relation.fc1.w").unwrap().clone(),
            store.value("relation.fc1.b").unwrap().clone(),
            store.value("relation.fc2.w").unwrap().clone(),
            store.value("relation.fc2.b").unwrap().clone(),
        ];
        let err = grad_check(
            |t, x| {
                let mlp = Mlp {
                    layers: vec![
                        crate::nn::Dense { w: x[2], b: x[3] },
                        crate::nn::Dense { w: x[4], b: x[5] },
                    ],
                    relu_out: false,
                };
                let s = relation_scores(t, x[0], x[1], &mlp)?;
                Ok(t.sum(s))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn enhancement_is_residual_scaling() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0]]).unwrap());
        let s = tape.constant(Tensor::vector(vec![1.0, 1e-300]));
        let e = enhance_views(&mut tape, v, s).unwrap();
        assert_eq!(tape.value(e).data(), &[2.0, 4.0, 3.0, -4.0]);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(select_top_k(&[0.9, 0.1, 0.5], 2).unwrap(), vec![0, 2]);
        assert_eq!(select_top_k(&[0.3, 0.3, 0.3], 2).unwrap(), vec![0, 1]);
        assert!(matches!(select_top_k(&[0.3, 0.3], 3), Err(Error::Input(_))));
        assert!(matches!(select_top_k(&[0.3], 0), Err(Error::Input(_))));
    }

    #[test]
    fn top_k_matches_selection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=12);
            // Coarse grid so ties are common.
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(1..=5) as f64 / 6.0).collect();
            for k in 1..=n {
                // Repeatedly take the lowest-index maximum of what remains.
                let mut left: Vec<usize> = (0..n).collect();
                let mut expected = Vec::new();
                for _ in 0..k {
                    let best = *left.iter().reduce(|a, b| if s[*b] > s[*a] { b } else { a }).unwrap();
                    expected.push(best);
                    left.retain(|&i| i != best);
                }
                assert_eq!(select_top_k(&s, k).unwrap(), expected);
            }
        }
    }

    fn run_fuse(store: &ParameterStore, variant: FusionVariant, p: &Tensor, v: &Tensor) -> FusedFeature {
        let mut tape = Tape::new();
        let w = FusionWeights::bind(&mut tape, store, variant, false).unwrap();
        let pv = tape.constant(p.clone());
        let vv = tape.constant(v.clone());
        fuse(&mut tape, pv, vv, &w).unwrap().values(&tape)
    }

    #[test]
    fn fused_feature_is_view_permutation_invariant() {
        let variant = FusionVariant::MultiView { k: 3 };
        let store = setup(7, variant);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let p = rand_tensor(&mut rng, &[1, 5]);
            let v = rand_tensor(&mut rng, &[5, 4]);
            let base = run_fuse(&store, variant, &p, &v);
            assert_eq!(base.fusion.len(), 10);
            assert_eq!(&base.fusion[..5], base.sfusion.as_slice());
            assert_eq!(&base.fusion[5..], base.mfusion.as_deref().unwrap());
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rng);
            let other = run_fuse(&store, variant, &p, &permute(&v, &perm));
            assert_eq!(other.sfusion, base.sfusion);
            assert_eq!(other.mfusion, base.mfusion);
            assert_eq!(other.logits, base.logits);
        }
    }

    #[test]
    fn single_view_variant_uses_sfusion_only() {
        let store = setup(9, FusionVariant::SingleView);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = run_fuse(&store, FusionVariant::SingleView, &rand_tensor(&mut rng, &[1, 5]), &rand_tensor(&mut rng, &[3, 4]));
        assert!(f.mfusion.is_none());
        assert_eq!(f.fusion, f.sfusion);
        assert_eq!(f.logits.len(), 3);
        assert_eq!(f.embedding.len(), 4);
    }

    #[test]
    fn mfusion_rejects_bad_k() {
        let store = setup(11, FusionVariant::MultiView { k: 2 });
        let mut tape = Tape::new();
        let w = FusionWeights::bind(&mut tape, &store, FusionVariant::MultiView { k: 2 }, false).unwrap();
        let p = tape.constant(Tensor::zeros(&[1, 5]));
        let v = tape.constant(Tensor::zeros(&[3, 4]));
        let mlp = w.mfusion.as_ref().unwrap();
        assert!(matches!(mfusion(&mut tape, p, v, &[0, 1, 2], 1, mlp), Err(Error::Input(_))));
        assert!(matches!(mfusion(&mut tape, p, v, &[0, 1, 2], 4, mlp), Err(Error::Input(_))));
    }

    #[test]
    fn late_fusion_matches_head_size_and_pools_views() {
        let cfg = FusionConfig::default();
        let dims = FusionDims { point_dim: 64, view_dim: 64, classes: 8 };
        let late = late_param_count(&cfg, dims) as f64;
        let head = head_param_count(&cfg, FusionVariant::MultiView { k: 4 }, dims) as f64;
        assert!((late - head).abs() / head < 0.10, "{late} vs {head}");

        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        init_late_fusion(&mut store, &small_cfg(2), DIMS, &mut rng).unwrap();
        let p = rand_tensor(&mut rng, &[1, 5]);
        let v = rand_tensor(&mut rng, &[4, 4]);
        let run = |v: Tensor| {
            let mut tape = Tape::new();
            let head = bind_late_fusion(&mut tape, &store, false).unwrap();
            let pv = tape.constant(p.clone());
            let vv = tape.constant(v);
            let (logits, _) = late_fusion_baseline(&mut tape, pv, vv, &head).unwrap();
            tape.value(logits).data().to_vec()
        };
        assert_eq!(run(permute(&v, &[3, 0, 2, 1])), run(v.clone()));
        let single = permute(&v, &[1]);
        let doubled = permute(&v, &[1, 1]);
        assert_eq!(run(single), run(doubled));
    }
}
