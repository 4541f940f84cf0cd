//! Self-check suite behind `pvrf verify`.
//!
//! Every check measures one number and compares it with a tolerance:
//! gradient checks report the worst relative error, invariants report the
//! worst deviation, and oracle comparisons report mismatch counts.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{
    bind_view_encoder, edge_conv, init_point_encoder, knn_graph, point_encode, view_encode,
    EdgeConvWeights, EncoderConfig, NeighborTable, PointEncoderWeights,
};
use crate::error::{Error, Result};
use crate::fusion::{
    bind_late_fusion, enhance_views, fuse, init_fusion, mfusion, rank_views, relation_scores,
    select_top_k, FusionConfig, FusionDims, FusionVariant, FusionWeights,
};
use crate::nn::{init_mlp, Mlp};
use crate::synth::{generate_shape, ShapeParams};
use crate::tensor::{decode_checkpoint, encode_checkpoint, grad_check_report, OpKind, ParameterStore, Tape, Tensor, Var};
use crate::train::{cosine_similarity, retrieval_map, train_fusion, Model, ModelConfig, ModelKind, PreparedSample, TrainSchedule};

/// Finite-difference step used by every gradient check.
pub const GRAD_STEP: f64 = 1e-5;
/// Largest accepted relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    /// Random instances per operation gradient check.
    pub seeds: usize,
    /// Corrupts one backward rule; the suite must then fail.
    pub sign_flip: Option<OpKind>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seeds: 100, sign_flip: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Fixed-width text table, one row per check.
    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:>11}  {:>11}  status  detail\n", "check", "measured", "tolerance");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{:<width$}  {:>11.3e}  {:>11.3e}  {:<6}  {}",
                c.name,
                c.measured,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" },
                c.detail
            );
        }
        out
    }

    fn record(&mut self, name: impl Into<String>, tolerance: f64, outcome: Result<(f64, String)>) {
        let name = name.into();
        let (measured, passed, detail) = match outcome {
            Ok((m, d)) => (m, m <= tolerance, d),
            Err(e) => (f64::NAN, false, format!("error: {e}")),
        };
        log::debug!("{name}: {measured:e} (tolerance {tolerance:e})");
        self.checks.push(CheckResult { name, measured, tolerance, passed, detail });
    }
}

/// Runs the whole suite. Errors inside a check are recorded as failures.
pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let mut report = VerifyReport::default();
    for kind in OpKind::ALL.into_iter().filter(|&k| k != OpKind::Leaf) {
        report.record(format!("grad {kind}"), GRAD_TOLERANCE, op_grad_check(kind, opts));
    }
    report.record("grad edge_conv", GRAD_TOLERANCE, edge_conv_grad(opts));
    report.record("grad point_encode", GRAD_TOLERANCE, point_encode_grad(opts));
    for (name, kind) in [
        ("grad fused forward (N=16, V=4, K=3)", ModelKind::Fusion(FusionVariant::MultiView { k: 3 })),
        ("grad single-view fused forward", ModelKind::Fusion(FusionVariant::SingleView)),
        ("grad late fusion forward", ModelKind::Late),
    ] {
        report.record(name, GRAD_TOLERANCE, model_grad(kind, opts));
    }
    report.record("relation scores outside (0,1)", 0.0, scores_in_range());
    report.record("enhanced norm ratio vs 1+s", 1e-12, norm_ratio());
    report.record("view permutation symmetry", 0.0, view_symmetry());
    report.record("top-k vs brute force (mismatches)", 0.0, top_k_oracle());
    report.record("mfusion vs straight-line reference", 1e-12, mfusion_oracle());
    report.record("mfusion K=2 vs single term", 0.0, mfusion_two());
    report.record("point permutation invariance", 0.0, point_permutation());
    report.record("knn vs brute force (mismatches)", 0.0, knn_oracle());
    report.record("retrieval AP vs brute force", 0.0, retrieval_oracle());
    report.record("PR precision increases with recall", 0.0, pr_monotone());
    report.record("clustered embeddings 1 - mAP", 0.0, clustered_map());
    report.record("checkpoint round trip (mismatches)", 0.0, checkpoint_round_trip());
    report.record("freeze contract violations", 0.0, freeze_contract());
    report
}

fn rng_for(tag: u64, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ seed)
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Values with magnitude in `[0.1, 1)`, away from the relu kink.
fn off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Pairwise-distinct values on a 0.1 grid, shuffled, so max routing is
/// stable under finite-difference steps.
fn distinct(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05 + rng.gen_range(0.0..0.01)).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn dim(rng: &mut impl Rng) -> usize {
    rng.gen_range(1..=6)
}

/// Weighted sum with fixed, non-uniform weights; turns any output scalar.
fn probe(t: &mut Tape, out: Var) -> Result<Var> {
    let shape = t.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| 1.0 + 0.5 * (1.7 * i as f64).sin()).collect())?;
    let w = t.constant(w);
    let y = t.mul(out, w)?;
    Ok(t.sum(y))
}

type Scalar = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Random inputs and a scalar function exercising `kind`.
fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Scalar) {
    let (r, c) = (dim(rng), dim(rng));
    let maybe_scalar = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.25) { vec![1] } else { vec![r, c] };
    match kind {
        OpKind::MatMul => {
            let k = dim(rng);
            (vec![uniform(rng, &[r, k], -1.0, 1.0), uniform(rng, &[k, c], -1.0, 1.0)], Box::new(|t, x| {
                let y = t.matmul(x[0], x[1])?;
                probe(t, y)
            }))
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let b = maybe_scalar(rng);
            let inputs = vec![uniform(rng, &[r, c], -1.0, 1.0), uniform(rng, &b, -1.0, 1.0)];
            let swap = rng.gen_bool(0.5);
            (inputs, Box::new(move |t, x| {
                let (a, b) = if swap { (x[1], x[0]) } else { (x[0], x[1]) };
                let y = match kind {
                    OpKind::Add => t.add(a, b)?,
                    OpKind::Sub => t.sub(a, b)?,
                    _ => t.mul(a, b)?,
                };
                probe(t, y)
            }))
        }
        OpKind::Scale => {
            let s = rng.gen_range(-2.0..2.0);
            (vec![uniform(rng, &[r, c], -1.0, 1.0)], Box::new(move |t, x| {
                let y = t.scale(x[0], s);
                probe(t, y)
            }))
        }
        OpKind::AddScalar => {
            let s = rng.gen_range(-2.0..2.0);
            (vec![uniform(rng, &[r, c], -1.0, 1.0)], Box::new(move |t, x| {
                let y = t.add_scalar(x[0], s);
                probe(t, y)
            }))
        }
        OpKind::AddRow => (vec![uniform(rng, &[r, c], -1.0, 1.0), uniform(rng, &[c], -1.0, 1.0)], Box::new(|t, x| {
            let y = t.add_row(x[0], x[1])?;
            probe(t, y)
        })),
        OpKind::MulCol => (vec![uniform(rng, &[r, c], -1.0, 1.0), uniform(rng, &[r], -1.0, 1.0)], Box::new(|t, x| {
            let y = t.mul_col(x[0], x[1])?;
            probe(t, y)
        })),
        OpKind::Relu => (vec![off_zero(rng, &[r, c])], Box::new(|t, x| {
            let y = t.relu(x[0]);
            probe(t, y)
        })),
        OpKind::Sigmoid => (vec![uniform(rng, &[r, c], -3.0, 3.0)], Box::new(|t, x| {
            let y = t.sigmoid(x[0]);
            probe(t, y)
        })),
        OpKind::Sum => (vec![uniform(rng, &[r, c], -1.0, 1.0)], Box::new(|t, x| {
            let y = t.sum(x[0]);
            probe(t, y)
        })),
        OpKind::MaxAxis | OpKind::MeanAxis => {
            let shape = [r, c, dim(rng)];
            let axis = rng.gen_range(0..3);
            let x = if kind == OpKind::MaxAxis { distinct(rng, &shape) } else { uniform(rng, &shape, -1.0, 1.0) };
            (vec![x], Box::new(move |t, x| {
                let y = if kind == OpKind::MaxAxis { t.max_over_axis(x[0], axis)? } else { t.mean_over_axis(x[0], axis)? };
                probe(t, y)
            }))
        }
        OpKind::Concat => {
            let axis = rng.gen_range(0..2);
            let parts: Vec<Tensor> = (0..rng.gen_range(1..=3))
                .map(|_| {
                    let d = dim(rng);
                    let shape = if axis == 0 { [d, c] } else { [r, d] };
                    uniform(rng, &shape, -1.0, 1.0)
                })
                .collect();
            (parts, Box::new(move |t, x| {
                let y = t.concat(x, axis)?;
                probe(t, y)
            }))
        }
        OpKind::Reshape => (vec![uniform(rng, &[r, c], -1.0, 1.0)], Box::new(move |t, x| {
            let y = t.reshape(x[0], &[c, r])?;
            probe(t, y)
        })),
        OpKind::GatherRows => {
            let rows: Vec<usize> = (0..dim(rng)).map(|_| rng.gen_range(0..r)).collect();
            (vec![uniform(rng, &[r, c], -1.0, 1.0)], Box::new(move |t, x| {
                let y = t.gather_rows(x[0], &rows)?;
                probe(t, y)
            }))
        }
        OpKind::Tile => {
            let shape = if rng.gen_bool(0.5) { vec![c] } else { vec![1, c] };
            (vec![uniform(rng, &shape, -1.0, 1.0)], Box::new(move |t, x| {
                let y = t.tile_rows(x[0], r)?;
                probe(t, y)
            }))
        }
        OpKind::NeighborMax => {
            let (m, k) = (dim(rng), dim(rng));
            let nbrs: Vec<usize> = (0..r * k).map(|_| rng.gen_range(0..m)).collect();
            (vec![uniform(rng, &[r, c], -1.0, 1.0), distinct(rng, &[m, c])], Box::new(move |t, x| {
                let y = t.neighbor_max(x[0], x[1], &nbrs, k)?;
                probe(t, y)
            }))
        }
        OpKind::SoftmaxCrossEntropy => {
            let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            (vec![uniform(rng, &[r, c], -3.0, 3.0)], Box::new(move |t, x| t.softmax_cross_entropy(x[0], &labels)))
        }
        OpKind::Leaf => unreachable!("leaves have no backward rule"),
    }
}

fn worst(checks: impl IntoIterator<Item = Result<(f64, String)>>) -> Result<(f64, String)> {
    let mut best = (0.0, String::new());
    for c in checks {
        let (err, detail) = c?;
        if err > best.0 || best.1.is_empty() {
            best = (err, detail);
        }
    }
    Ok(best)
}

fn run_grad(f: &Scalar, inputs: &[Tensor], opts: &VerifyOptions, label: &str) -> Result<(f64, String)> {
    let r = grad_check_report(|t, x| f(t, x), inputs, GRAD_STEP, opts.sign_flip)?;
    Ok((r.max_rel_error, format!("{label}: input {} index {}", r.input, r.index)))
}

fn op_grad_check(kind: OpKind, opts: &VerifyOptions) -> Result<(f64, String)> {
    worst((0..opts.seeds as u64).map(|seed| {
        let mut rng = rng_for(kind as u64 + 1, seed);
        let (inputs, f) = op_case(kind, &mut rng);
        run_grad(&f, &inputs, opts, &format!("seed {seed}"))
    }))
}

fn small_cloud(rng: &mut impl Rng, n: usize) -> Tensor {
    uniform(rng, &[n, 3], -1.0, 1.0)
}

fn edge_conv_grad(opts: &VerifyOptions) -> Result<(f64, String)> {
    worst((0..10u64).map(|seed| {
        let mut rng = rng_for(101, seed);
        let (n, d, h, k) = (12, 3, 5, 4);
        let x = small_cloud(&mut rng, n);
        let graph = knn_graph(&x, k)?;
        let inputs =
            vec![x, uniform(&mut rng, &[d, h], -1.0, 1.0), uniform(&mut rng, &[d, h], -1.0, 1.0), uniform(&mut rng, &[h], -0.5, 0.5)];
        let f: Scalar = Box::new(move |t, v| {
            let w = EdgeConvWeights { w_self: v[1], w_diff: v[2], bias: v[3] };
            let y = edge_conv(t, v[0], &graph, &w)?;
            probe(t, y)
        });
        run_grad(&f, &inputs, opts, &format!("seed {seed}"))
    }))
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig { knn_k: 4, point_widths: vec![5, 6], view_hidden: 7, view_dim: 5, descriptor_len: 12 }
}

fn tiny_fusion(top_k: usize) -> FusionConfig {
    FusionConfig { relation_hidden: 6, fusion_hidden: 7, fused_dim: 5, embed_dim: 4, top_k }
}

/// Gradient check over every parameter of the store plus the raw inputs;
/// parameters enter the tape as inputs through [`Tape::alias_param`].
fn store_grad<F>(store: &ParameterStore, data: Vec<Tensor>, opts: &VerifyOptions, label: &str, body: F) -> Result<(f64, String)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    let paths: Vec<String> = store.paths().map(String::from).collect();
    let lead = data.len();
    let mut inputs = data;
    inputs.extend(paths.iter().map(|p| store.value(p).expect("listed path").clone()));
    let f: Scalar = Box::new(move |t, v| {
        for (p, &var) in paths.iter().zip(&v[lead..]) {
            t.alias_param(p, var);
        }
        body(t, &v[..lead])
    });
    run_grad(&f, &inputs, opts, label)
}

/// Replaces the zero-initialised biases with small random values. At zero
/// bias a unit whose inputs are all dead sits exactly on the relu kink.
fn generic_biases(store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
    let paths: Vec<String> = store.paths().filter(|p| p.ends_with(".b")).map(String::from).collect();
    for p in paths {
        let shape = store.value(&p).expect("listed path").shape().to_vec();
        store.set(&p, uniform(rng, &shape, -0.2, 0.2))?;
    }
    Ok(())
}

fn point_encode_grad(opts: &VerifyOptions) -> Result<(f64, String)> {
    let enc = tiny_encoder();
    worst((0..5u64).map(|seed| {
        let mut rng = rng_for(102, seed);
        let mut store = ParameterStore::new();
        init_point_encoder(&mut store, &enc, &mut rng)?;
        generic_biases(&mut store, &mut rng)?;
        let points = small_cloud(&mut rng, 16);
        let graph = knn_graph(&points, enc.knn_k)?;
        let (cfg, snapshot) = (enc.clone(), store.clone());
        store_grad(&store, vec![points], opts, &format!("seed {seed}"), move |t, v| {
            let w = PointEncoderWeights::bind(t, &snapshot, &cfg, true)?;
            let p = point_encode(t, v[0], &graph, &w)?;
            probe(t, p)
        })
    }))
}

/// Whole-model gradient check. The scalar is the same `probe` functional the
/// op checks use.
fn model_grad(kind: ModelKind, opts: &VerifyOptions) -> Result<(f64, String)> {
    let config = ModelConfig { encoder: tiny_encoder(), fusion: tiny_fusion(3) };
    worst((0..3u64).map(|seed| {
        let mut model = Model::init(kind, &config, 3, seed)?;
        let mut rng = rng_for(103, seed);
        generic_biases(&mut model.store, &mut rng)?;
        let points = small_cloud(&mut rng, 16);
        let views = uniform(&mut rng, &[4, config.encoder.descriptor_len], 0.0, 1.0);
        let graph = knn_graph(&points, config.encoder.knn_k)?;
        let (cfg, store) = (config.clone(), model.store.clone());
        store_grad(&model.store, vec![points, views], opts, &format!("seed {seed}"), move |t, v| {
            let pw = PointEncoderWeights::bind(t, &store, &cfg.encoder, true)?;
            let p = point_encode(t, v[0], &graph, &pw)?;
            let vm = bind_view_encoder(t, &store, true)?;
            let views = view_encode(t, v[1], &vm)?;
            let logits = match kind {
                ModelKind::Fusion(variant) => {
                    let w = FusionWeights::bind(t, &store, variant, true)?;
                    fuse(t, p, views, &w)?.logits
                }
                ModelKind::Late => {
                    let head = bind_late_fusion(t, &store, true)?;
                    crate::fusion::late_fusion_baseline(t, p, views, &head)?.0
                }
                other => return Err(Error::Usage(format!("{} has no joint head", other.name()))),
            };
            probe(t, logits)
        })
    }))
}

struct RelationCase {
    p: Tensor,
    v: Tensor,
    store: ParameterStore,
}

fn relation_case(rng: &mut ChaCha8Rng, dims: FusionDims, views: usize, gain: f64) -> Result<RelationCase> {
    let mut store = ParameterStore::new();
    init_mlp(&mut store, "relation", &[dims.point_dim + dims.view_dim, 6, 1], false, rng)?;
    let p = uniform(rng, &[1, dims.point_dim], -gain, gain);
    let v = uniform(rng, &[views, dims.view_dim], -gain, gain);
    Ok(RelationCase { p, v, store })
}

/// Scores and enhanced views for the 1000 invariant cases, with inputs up to
/// 100× larger than unit scale so some scores saturate.
fn relation_outputs() -> Result<Vec<(Tensor, Vec<f64>, Tensor)>> {
    let dims = FusionDims { point_dim: 5, view_dim: 4, classes: 2 };
    (0..1000u64)
        .map(|seed| {
            let mut rng = rng_for(201, seed);
            let views = rng.gen_range(1..=12);
            let gain = [1.0, 10.0, 100.0][seed as usize % 3];
            let case = relation_case(&mut rng, dims, views, gain)?;
            let mut t = Tape::new();
            let relation = Mlp::bind(&mut t, &case.store, "relation", 2, false, false)?;
            let (p, v) = (t.constant(case.p), t.constant(case.v.clone()));
            let s = relation_scores(&mut t, p, v, &relation)?;
            let e = enhance_views(&mut t, v, s)?;
            Ok((case.v, t.value(s).data().to_vec(), t.value(e).clone()))
        })
        .collect()
}

fn scores_in_range() -> Result<(f64, String)> {
    let mut bad = 0usize;
    let mut total = 0usize;
    for (_, s, _) in relation_outputs()? {
        total += s.len();
        bad += s.iter().filter(|&&x| !(x > 0.0 && x < 1.0)).count();
    }
    Ok((bad as f64, format!("{total} scores over 1000 cases")))
}

fn norm_ratio() -> Result<(f64, String)> {
    let mut worst = 0.0f64;
    for (v, s, e) in relation_outputs()? {
        for (i, &si) in s.iter().enumerate() {
            let n0 = v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            let n1 = e.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if n0 > 0.0 {
                worst = worst.max((n1 / n0 - (1.0 + si)).abs());
            }
        }
    }
    Ok((worst, "max |‖v'‖/‖v‖ − (1+s)| over 1000 cases".into()))
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).expect("rows share a width")
}

fn fused_values(store: &ParameterStore, variant: FusionVariant, p: &Tensor, v: &Tensor) -> Result<crate::fusion::FusedFeature> {
    let mut t = Tape::new();
    let w = FusionWeights::bind(&mut t, store, variant, false)?;
    let (p, v) = (t.constant(p.clone()), t.constant(v.clone()));
    let out = fuse(&mut t, p, v, &w)?;
    Ok(out.values(&t))
}

fn view_symmetry() -> Result<(f64, String)> {
    let dims = FusionDims { point_dim: 6, view_dim: 5, classes: 4 };
    let mut diff = 0.0f64;
    let mut cases = 0usize;
    let mut seed = 0u64;
    while cases < 50 {
        seed += 1;
        let mut rng = rng_for(202, seed);
        let views = rng.gen_range(3..=12);
        let k = rng.gen_range(2..=views);
        let variant = FusionVariant::MultiView { k };
        let mut store = ParameterStore::new();
        init_fusion(&mut store, &tiny_fusion(k), variant, dims, &mut rng)?;
        let p = uniform(&mut rng, &[1, dims.point_dim], -1.0, 1.0);
        let v = uniform(&mut rng, &[views, dims.view_dim], -1.0, 1.0);
        let base = fused_values(&store, variant, &p, &v)?;
        let mut sorted = base.scores.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            continue;
        }
        let mut perm: Vec<usize> = (0..views).collect();
        perm.shuffle(&mut rng);
        let moved = fused_values(&store, variant, &p, &permute_rows(&v, &perm))?;
        let permuted_scores: Vec<f64> = perm.iter().map(|&i| base.scores[i]).collect();
        let pairs = [
            (&permuted_scores, &moved.scores),
            (&base.sfusion, &moved.sfusion),
            (base.mfusion.as_ref().expect("multi-view"), moved.mfusion.as_ref().expect("multi-view")),
            (&base.fusion, &moved.fusion),
            (&base.logits, &moved.logits),
        ];
        for (a, b) in pairs {
            diff = diff.max(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
        cases += 1;
    }
    Ok((diff, "max |difference| over 50 permuted cases".into()))
}

/// Repeatedly takes the largest remaining score, lowest index first.
fn top_k_reference(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &s) in scores.iter().enumerate() {
            if !taken[i] && best.map_or(true, |b| s > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("k ≤ len");
        taken[b] = true;
        out.push(b);
    }
    out
}

fn top_k_oracle() -> Result<(f64, String)> {
    let mut rng = rng_for(203, 0);
    let mut mismatches = 0usize;
    let mut comparisons = 0usize;
    for _ in 0..1000 {
        let v = rng.gen_range(1..=12);
        // Coarse values so ties are common.
        let scores: Vec<f64> = (0..v).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
        for k in 1..=v {
            comparisons += 1;
            if select_top_k(&scores, k)? != top_k_reference(&scores, k) {
                mismatches += 1;
            }
        }
    }
    Ok((mismatches as f64, format!("{comparisons} (vector, k) pairs")))
}

/// Plain-loop multi-view fusion with a two-layer relu MLP.
fn mfusion_reference(p: &[f64], v: &Tensor, order: &[usize], k_max: usize, store: &ParameterStore) -> Vec<f64> {
    let layer = |x: &[f64], name: &str| -> Vec<f64> {
        let w = store.value(&format!("mfusion.{name}.w")).expect("bound");
        let b = store.value(&format!("mfusion.{name}.b")).expect("bound");
        let (rows, cols) = w.dims2().expect("matrix");
        (0..cols)
            .map(|j| {
                let mut acc = 0.0;
                for i in 0..rows {
                    acc += x[i] * w.data()[i * cols + j];
                }
                (acc + b.data()[j]).max(0.0)
            })
            .collect()
    };
    let width = v.shape()[1];
    let mut total: Vec<f64> = Vec::new();
    for k in 2..=k_max {
        let pooled: Vec<f64> =
            (0..width).map(|c| order[..k].iter().map(|&r| v.row(r)[c]).fold(f64::NEG_INFINITY, f64::max)).collect();
        let input: Vec<f64> = p.iter().chain(&pooled).copied().collect();
        let out = layer(&layer(&input, "fc1"), "fc2");
        if total.is_empty() {
            total = out;
        } else {
            total.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
        }
    }
    total.iter().map(|x| x / (k_max - 1) as f64).collect()
}

struct MfusionCase {
    store: ParameterStore,
    p: Tensor,
    v: Tensor,
    order: Vec<usize>,
}

fn mfusion_case(seed: u64, views: usize, k: usize) -> Result<MfusionCase> {
    let dims = FusionDims { point_dim: 5, view_dim: 4, classes: 3 };
    let mut rng = rng_for(204, seed);
    let mut store = ParameterStore::new();
    init_fusion(&mut store, &tiny_fusion(k), FusionVariant::MultiView { k }, dims, &mut rng)?;
    let p = uniform(&mut rng, &[1, dims.point_dim], -1.0, 1.0);
    let v = uniform(&mut rng, &[views, dims.view_dim], -1.0, 1.0);
    let scores: Vec<f64> = (0..views).map(|_| rng.gen_range(0.0..1.0)).collect();
    Ok(MfusionCase { store, p, v, order: rank_views(&scores) })
}

fn run_mfusion(c: &MfusionCase, k: usize) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let mlp = Mlp::bind(&mut t, &c.store, "mfusion", 2, true, false)?;
    let (p, v) = (t.constant(c.p.clone()), t.constant(c.v.clone()));
    let out = mfusion(&mut t, p, v, &c.order, k, &mlp)?;
    Ok(t.value(out).data().to_vec())
}

fn mfusion_oracle() -> Result<(f64, String)> {
    let mut diff = 0.0f64;
    for seed in 0..100u64 {
        let views = 2 + seed as usize % 11;
        let k = 2 + (seed as usize / 11) % (views - 1);
        let c = mfusion_case(seed, views, k)?;
        let got = run_mfusion(&c, k)?;
        let want = mfusion_reference(c.p.data(), &c.v, &c.order, k, &c.store);
        diff = diff.max(got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok((diff, "max |difference| over 100 cases".into()))
}

fn mfusion_two() -> Result<(f64, String)> {
    let mut diff = 0.0f64;
    for seed in 0..20u64 {
        let c = mfusion_case(1000 + seed, 6, 2)?;
        let got = run_mfusion(&c, 2)?;
        let mut t = Tape::new();
        let mlp = Mlp::bind(&mut t, &c.store, "mfusion", 2, true, false)?;
        let v = t.constant(c.v.clone());
        let set = t.gather_rows(v, &c.order[..2])?;
        let m = t.max_over_axis(set, 0)?;
        let p = t.constant(c.p.clone().reshaped(vec![c.p.numel()])?);
        let joint = t.concat(&[p, m], 0)?;
        let joint = t.reshape(joint, &[1, c.p.numel() + c.v.shape()[1]])?;
        let single = mlp.forward(&mut t, joint)?;
        diff = diff.max(got.iter().zip(t.value(single).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok((diff, "20 cases".into()))
}

fn encode_points(points: &Tensor, cfg: &EncoderConfig, store: &ParameterStore) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let w = PointEncoderWeights::bind(&mut t, store, cfg, false)?;
    let graph = knn_graph(points, cfg.knn_k)?;
    let x = t.constant(points.clone());
    let out = point_encode(&mut t, x, &graph, &w)?;
    Ok(t.value(out).data().to_vec())
}

fn point_permutation() -> Result<(f64, String)> {
    let cfg = EncoderConfig::default();
    let params = ShapeParams { points: 128, jitter: 0.01, scale_jitter: 0.3 };
    let mut diff = 0.0f64;
    for cloud in 0..20u64 {
        let mut rng = rng_for(205, cloud);
        let mut store = ParameterStore::new();
        init_point_encoder(&mut store, &cfg, &mut rng)?;
        let points = generate_shape(cloud as usize % crate::synth::NUM_FAMILIES, cloud, &params)?;
        let base = encode_points(&points, &cfg, &store)?;
        let mut perm: Vec<usize> = (0..points.shape()[0]).collect();
        for _ in 0..50 {
            perm.shuffle(&mut rng);
            let moved = encode_points(&permute_rows(&points, &perm), &cfg, &store)?;
            diff = diff.max(base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    Ok((diff, "20 clouds × 50 permutations, 128 points".into()))
}

fn knn_reference(points: &Tensor, k: usize) -> NeighborTable {
    let n = points.shape()[0];
    let mut indices = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d: f64 = points.row(i).iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, j)
            })
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        indices.extend(others[..k].iter().map(|&(_, j)| j));
    }
    NeighborTable { n, k, indices }
}

fn knn_oracle() -> Result<(f64, String)> {
    let mut mismatches = 0usize;
    for seed in 0..50u64 {
        let mut rng = rng_for(206, seed);
        let n = rng.gen_range(10..=80);
        let k = rng.gen_range(1..n.min(12));
        let points = small_cloud(&mut rng, n);
        let got = knn_graph(&points, k)?;
        let want = knn_reference(&points, k);
        mismatches += got.indices.iter().zip(&want.indices).filter(|(a, b)| a != b).count();
    }
    Ok((mismatches as f64, "50 random clouds".into()))
}

/// Random retrieval instances on a coarse grid, so distance ties and zero
/// vectors occur.
fn retrieval_instances() -> Vec<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut out = Vec::new();
    for m in 2..=30usize {
        for rep in 0..10u64 {
            let mut rng = rng_for(207, (m as u64) << 8 | rep);
            let classes = rng.gen_range(1..=4);
            let width = rng.gen_range(1..=4);
            let emb = (0..m).map(|_| (0..width).map(|_| rng.gen_range(-2..=2) as f64).collect()).collect();
            let labels = (0..m).map(|_| rng.gen_range(0..classes)).collect();
            out.push((emb, labels));
        }
    }
    out
}

/// Average precision by counting: an item's rank is one plus the number of
/// items strictly closer or equally close with a lower index.
fn map_reference(emb: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let m = emb.len();
    let mut total = 0.0;
    let mut queries = 0usize;
    for q in 0..m {
        let dist: Vec<f64> = (0..m).map(|i| 1.0 - cosine_similarity(&emb[q], &emb[i])).collect();
        let rank = |i: usize| {
            1 + (0..m).filter(|&j| j != q && j != i && (dist[j] < dist[i] || (dist[j] == dist[i] && j < i))).count()
        };
        let mut ranks: Vec<usize> = (0..m).filter(|&i| i != q && labels[i] == labels[q]).map(rank).collect();
        if ranks.is_empty() {
            continue;
        }
        ranks.sort_unstable();
        let precision_sum: f64 = ranks.iter().enumerate().map(|(h, &r)| (h + 1) as f64 / r as f64).sum();
        total += precision_sum / ranks.len() as f64;
        queries += 1;
    }
    (queries > 0).then(|| total / queries as f64)
}

fn retrieval_oracle() -> Result<(f64, String)> {
    let mut diff = 0.0f64;
    let mut compared = 0usize;
    for (emb, labels) in retrieval_instances() {
        match (map_reference(&emb, &labels), retrieval_map(&emb, &labels)) {
            (Some(want), Ok(got)) => {
                diff = diff.max((got.map - want).abs());
                compared += 1;
            }
            (None, Err(_)) => {}
            (want, got) => {
                return Err(Error::Input(format!("reference gave {want:?}, implementation gave {:?}", got.map(|r| r.map))))
            }
        }
    }
    Ok((diff, format!("{compared} datasets with 2 ≤ M ≤ 30")))
}

fn pr_monotone() -> Result<(f64, String)> {
    let mut violations = 0usize;
    for (emb, labels) in retrieval_instances() {
        if let Ok(r) = retrieval_map(&emb, &labels) {
            violations += r.pr_curve.windows(2).filter(|w| w[1].precision > w[0].precision).count();
        }
    }
    Ok((violations as f64, "rising steps across all curves".into()))
}

fn clustered_map() -> Result<(f64, String)> {
    let mut emb = Vec::new();
    let mut labels = Vec::new();
    for c in 0..8 {
        for _ in 0..5 {
            let mut e = vec![0.0; 8];
            e[c] = 1.5;
            emb.push(e);
            labels.push(c);
        }
    }
    Ok((1.0 - retrieval_map(&emb, &labels)?.map, "8 orthogonal clusters of 5".into()))
}

fn checkpoint_round_trip() -> Result<(f64, String)> {
    let model = Model::init(
        ModelKind::Fusion(FusionVariant::MultiView { k: 4 }),
        &ModelConfig::default(),
        crate::synth::NUM_FAMILIES,
        7,
    )?;
    let back = decode_checkpoint(&encode_checkpoint(&model.store))?;
    let mismatches = model
        .store
        .iter()
        .filter(|(p, t)| back.value(p).map_or(true, |b| b.shape() != t.shape() || b.data() != t.data()))
        .count();
    Ok(((mismatches + back.len().abs_diff(model.store.len())) as f64, format!("{} tensors", model.store.len())))
}

fn tiny_training_set(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Vec<PreparedSample>> {
    (0..6u64)
        .map(|i| {
            let points = small_cloud(rng, 24);
            Ok(PreparedSample {
                class_id: i as usize % 3,
                sample_id: i,
                graph: knn_graph(&points, config.encoder.knn_k)?,
                points,
                views: uniform(rng, &[4, config.encoder.descriptor_len], 0.0, 1.0),
            })
        })
        .collect()
}

fn encoder_snapshot(store: &ParameterStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .filter(|(p, _)| p.starts_with("point.") || p.starts_with("view."))
        .map(|(p, t)| (p.to_string(), t.clone()))
        .collect()
}

fn freeze_contract() -> Result<(f64, String)> {
    let config = ModelConfig { encoder: tiny_encoder(), fusion: tiny_fusion(3) };
    let mut rng = rng_for(208, 0);
    let train = tiny_training_set(&config, &mut rng)?;
    let point = Model::init(ModelKind::Point, &config, 3, 1)?;
    let view = Model::init(ModelKind::View, &config, 3, 1)?;
    let start = encoder_snapshot(&point.store).into_iter().chain(encoder_snapshot(&view.store)).collect::<Vec<_>>();
    let schedule = TrainSchedule { total_epochs: 3, freeze_epochs: 2, batch_size: 2, lr: 1e-2, ..TrainSchedule::default() };

    let mut violations = 0usize;
    let mut frozen_steps = 0usize;
    let mut first_joint_changed = None;
    let kind = ModelKind::Fusion(FusionVariant::MultiView { k: 3 });
    train_fusion(&train, &point, &view, kind, &schedule, &mut |progress, store| {
        let now = encoder_snapshot(store);
        let same = now.len() == start.len() && now.iter().zip(&start).all(|(a, b)| a.0 == b.0 && a.1.data() == b.1.data());
        if progress.frozen {
            frozen_steps += 1;
            violations += usize::from(!same);
        } else if first_joint_changed.is_none() {
            first_joint_changed = Some(!same);
        }
    })?;
    if first_joint_changed != Some(true) {
        violations += 1;
    }
    Ok((violations as f64, format!("{frozen_steps} frozen steps, joint step changed encoders: {first_joint_changed:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_top_k_breaks_ties_by_index() {
        assert_eq!(top_k_reference(&[0.5, 0.9, 0.5, 0.9], 3), vec![1, 3, 0]);
    }

    #[test]
    fn reference_map_matches_hand_example() {
        let at = |deg: f64| vec![deg.to_radians().cos(), deg.to_radians().sin()];
        let emb = vec![at(0.0), at(50.0), at(20.0), at(90.0)];
        let want = (0.5 + 1.0 / 3.0 + 1.0 / 3.0 + 0.5) / 4.0;
        assert!((map_reference(&emb, &[0, 0, 1, 1]).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn table_has_one_row_per_check() {
        let mut r = VerifyReport::default();
        r.record("a", 1.0, Ok((0.5, String::new())));
        r.record("b", 1.0, Err(Error::Input("boom".into())));
        assert!(!r.passed());
        assert_eq!(r.table().lines().count(), 3);
        assert_eq!(r.failures().map(|c| c.name.as_str()).collect::<Vec<_>>(), ["b"]);
    }
}
