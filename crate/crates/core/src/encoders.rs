//! Point-cloud and multi-view feature extractors.
//!
//! The point branch stacks EdgeConv layers over a static k-NN graph built on
//! the input coordinates and max-pools over points. The view branch applies
//! one MLP to every view descriptor independently and keeps all rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_dense, init_mlp, mlp_param_count, Dense, Mlp};
use crate::tensor::{Init, ParameterStore, Tape, Tensor, Var};

/// Widths of both extractors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Neighbours per point in the EdgeConv graph.
    pub knn_k: usize,
    /// Per-point widths after each EdgeConv layer; the last is the point feature size.
    pub point_widths: Vec<usize>,
    pub view_hidden: usize,
    pub view_dim: usize,
    pub descriptor_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { knn_k: 8, point_widths: vec![32, 64], view_hidden: 128, view_dim: 64, descriptor_len: 192 }
    }
}

impl EncoderConfig {
    pub fn point_dim(&self) -> usize {
        *self.point_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be positive".into()));
        }
        if self.point_widths.is_empty() || self.point_widths.contains(&0) {
            return Err(Error::Config("point_widths must be a non-empty list of positive widths".into()));
        }
        if self.view_hidden == 0 || self.view_dim == 0 || self.descriptor_len == 0 {
            return Err(Error::Config("view encoder widths must be positive".into()));
        }
        Ok(())
    }

    pub fn point_param_count(&self) -> usize {
        let mut d = 3;
        let mut total = 0;
        for &h in &self.point_widths {
            total += 2 * d * h + h;
            d = h;
        }
        total
    }

    pub fn view_param_count(&self) -> usize {
        mlp_param_count(&[self.descriptor_len, self.view_hidden, self.view_dim])
    }
}

/// Row-major `N × k` table of neighbour indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborTable {
    pub n: usize,
    pub k: usize,
    pub indices: Vec<usize>,
}

impl NeighborTable {
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the first row with exactly the same coordinates, for every row.
fn first_occurrence(points: &Tensor) -> Vec<usize> {
    let n = points.shape()[0];
    let mut order: Vec<usize> = (0..n).collect();
    let key = |i: usize| points.row(i).iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    order.sort_by_key(|&i| (key(i), i));
    let mut canon = vec![0; n];
    let mut start = 0;
    while start < n {
        let head = order[start];
        let mut end = start;
        while end < n && points.row(order[end]) == points.row(head) {
            canon[order[end]] = head;
            end += 1;
        }
        start = end;
    }
    canon
}

/// k nearest neighbours of every row by Euclidean distance.
///
/// Rows are compared as a set: a row never neighbours itself or any row with
/// identical coordinates, and among coincident candidates only the lowest
/// index is eligible. Equal distances go to the lower index. Errors when
/// `k` is not smaller than the number of distinct rows.
pub fn knn_graph(points: &Tensor, k: usize) -> Result<NeighborTable> {
    let n = points.shape().first().copied().unwrap_or(0);
    if points.rank() != 2 {
        return Err(Error::Input(format!("knn_graph needs an N×D matrix, got {:?}", points.shape())));
    }
    if k == 0 {
        return Err(Error::Input("knn_graph needs k ≥ 1".into()));
    }
    let canon = first_occurrence(points);
    let distinct = canon.iter().enumerate().filter(|&(i, &c)| i == c).count();
    if k >= distinct {
        return Err(Error::Input(format!("k = {k} neighbours need more than {k} distinct points, got {distinct} (of {n})")));
    }
    let reps: Vec<usize> = (0..n).filter(|&i| canon[i] == i).collect();
    let mut indices = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(reps.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for i in 0..n {
        let xi = points.row(i);
        cand.clear();
        cand.extend(reps.iter().filter(|&&j| j != canon[i]).map(|&j| (sq_dist(xi, points.row(j)), j)));
        if cand.len() > k {
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
        }
        cand.sort_unstable_by(cmp);
        indices.extend(cand.iter().map(|&(_, j)| j));
    }
    Ok(NeighborTable { n, k, indices })
}

/// Weights of one EdgeConv layer. The edge input `concat(x_i, x_j − x_i)`
/// meets `[w_self; w_diff]`, followed by a relu.
#[derive(Clone, Copy, Debug)]
pub struct EdgeConvWeights {
    pub w_self: Var,
    pub w_diff: Var,
    pub bias: Var,
}

impl EdgeConvWeights {
    pub fn bind(tape: &mut Tape, store: &ParameterStore, prefix: &str, trainable: bool) -> Result<Self> {
        Ok(EdgeConvWeights {
            w_self: tape.param(store, &format!("{prefix}.w_self"), trainable)?,
            w_diff: tape.param(store, &format!("{prefix}.w_diff"), trainable)?,
            bias: tape.param(store, &format!("{prefix}.b"), trainable)?,
        })
    }
}

fn check_table(tape: &Tape, x: Var, nbrs: &NeighborTable) -> Result<()> {
    let n = tape.shape(x).first().copied().unwrap_or(0);
    if nbrs.n != n || nbrs.indices.len() != nbrs.n * nbrs.k {
        return Err(Error::dim("edge_conv", format!("neighbour table for {} rows applied to {} rows", nbrs.n, n)));
    }
    Ok(())
}

/// EdgeConv layer: `relu(max_j [x_i; x_j − x_i]·W + b)`.
///
/// Evaluated without materialising edges: the pre-activation splits into
/// `x_i·(W_self − W_diff) + b` plus `x_j·W_diff`, and relu commutes with max.
pub fn edge_conv(tape: &mut Tape, x: Var, nbrs: &NeighborTable, w: &EdgeConvWeights) -> Result<Var> {
    check_table(tape, x, nbrs)?;
    let w_center = tape.sub(w.w_self, w.w_diff)?;
    let center = tape.matmul(x, w_center)?;
    let center = tape.add_row(center, w.bias)?;
    let neighbor = tape.matmul(x, w.w_diff)?;
    let pooled = tape.neighbor_max(center, neighbor, &nbrs.indices, nbrs.k)?;
    Ok(tape.relu(pooled))
}

/// EdgeConv built literally from per-edge inputs; `N·k` rows wide.
pub fn edge_conv_explicit(tape: &mut Tape, x: Var, nbrs: &NeighborTable, w: &EdgeConvWeights) -> Result<Var> {
    check_table(tape, x, nbrs)?;
    let (n, k) = (nbrs.n, nbrs.k);
    let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let xi = tape.gather_rows(x, &centers)?;
    let xj = tape.gather_rows(x, &nbrs.indices)?;
    let diff = tape.sub(xj, xi)?;
    let edges = tape.concat(&[xi, diff], 1)?;
    let weight = tape.concat(&[w.w_self, w.w_diff], 0)?;
    let z = tape.matmul(edges, weight)?;
    let z = tape.add_row(z, w.bias)?;
    let z = tape.relu(z);
    let h = tape.shape(z)[1];
    let z = tape.reshape(z, &[n, k, h])?;
    tape.max_over_axis(z, 1)
}

/// All EdgeConv layers of the point branch.
#[derive(Clone, Debug)]
pub struct PointEncoderWeights {
    pub layers: Vec<EdgeConvWeights>,
}

impl PointEncoderWeights {
    pub fn bind(tape: &mut Tape, store: &ParameterStore, cfg: &EncoderConfig, trainable: bool) -> Result<Self> {
        let layers = (1..=cfg.point_widths.len())
            .map(|i| EdgeConvWeights::bind(tape, store, &format!("point.ec{i}"), trainable))
            .collect::<Result<_>>()?;
        Ok(PointEncoderWeights { layers })
    }
}

/// Per-point features after every EdgeConv layer (`N × Dp`).
pub fn point_features(tape: &mut Tape, points: Var, nbrs: &NeighborTable, w: &PointEncoderWeights) -> Result<Var> {
    let shape = tape.shape(points);
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::Input(format!("point cloud must be N×3, got {:?}", shape)));
    }
    let mut h = points;
    for layer in &w.layers {
        h = edge_conv(tape, h, nbrs, layer)?;
    }
    Ok(h)
}

/// Global point feature `1 × Dp`: EdgeConv stack then max over points.
pub fn point_encode(tape: &mut Tape, points: Var, nbrs: &NeighborTable, w: &PointEncoderWeights) -> Result<Var> {
    let h = point_features(tape, points, nbrs, w)?;
    let pooled = tape.max_over_axis(h, 0)?;
    let d = tape.shape(pooled)[0];
    tape.reshape(pooled, &[1, d])
}

/// Builds the graph and encodes a cloud in one call.
pub fn encode_cloud(tape: &mut Tape, points: &Tensor, k: usize, w: &PointEncoderWeights) -> Result<Var> {
    let nbrs = knn_graph(points, k)?;
    let x = tape.constant(points.clone());
    point_encode(tape, x, &nbrs, w)
}

/// Per-view features `V × Dh`; no pooling across views.
pub fn view_encode(tape: &mut Tape, descriptors: Var, mlp: &Mlp) -> Result<Var> {
    let expected = tape.shape(mlp.layers[0].w)[0];
    match tape.shape(descriptors) {
        &[_, d] if d == expected => mlp.forward(tape, descriptors),
        s => Err(Error::Input(format!("view descriptors must be V×{expected}, got {:?}", s))),
    }
}

pub fn bind_view_encoder(tape: &mut Tape, store: &ParameterStore, trainable: bool) -> Result<Mlp> {
    Mlp::bind(tape, store, "view", 2, true, trainable)
}

pub fn init_point_encoder(store: &mut ParameterStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<()> {
    let mut d = 3;
    for (i, &h) in cfg.point_widths.iter().enumerate() {
        let prefix = format!("point.ec{}", i + 1);
        // Edge inputs are 2d wide; scale both halves to that fan-in.
        store.insert(&format!("{prefix}.w_self"), he_matrix(2 * d, d, h, rng))?;
        store.insert(&format!("{prefix}.w_diff"), he_matrix(2 * d, d, h, rng))?;
        store.init_zeros(&format!("{prefix}.b"), &[h])?;
        d = h;
    }
    Ok(())
}

fn he_matrix(fan_in: usize, rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

pub fn init_view_encoder(store: &mut ParameterStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<()> {
    init_mlp(store, "view", &[cfg.descriptor_len, cfg.view_hidden, cfg.view_dim], true, rng)
}

/// Dense layer used by the unimodal classifiers.
pub fn init_linear_classifier(
    store: &mut ParameterStore,
    prefix: &str,
    input: usize,
    classes: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    init_dense(store, prefix, input, classes, Init::Xavier, rng)
}

pub fn bind_linear_classifier(tape: &mut Tape, store: &ParameterStore, prefix: &str, trainable: bool) -> Result<Dense> {
    Dense::bind(tape, store, prefix, trainable)
}
