//! Splat, blur and slice, and the differentiable filter built from them.
//!
//! With `S` the splat matrix (lattice vertex x point, entries = barycentric
//! weights) and `B` the blur, the filter is `out = S^T B S f`. `B` is made
//! self-adjoint by averaging the ascending and descending axis orders, so the
//! feature gradient is the same pipeline run on the upstream gradient.

use std::hash::{Hash, Hasher};

use super::calibration;
use super::embed::{bary_pullback, Elevation, LatticeKey, SimplexEmbedding, SimplexScratch};
use super::table::LatticeTable;
use crate::autograd::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Taps on each side of the center; the kernel has width `2 * RADIUS + 1 = 7`.
pub const BLUR_RADIUS: usize = 3;
const NO_NEIGHBOR: u32 = u32::MAX;

/// Symmetric 7-tap kernel `w_k = exp(-|k| * decay)` for offsets `-3..=3`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    taps: [f64; 2 * BLUR_RADIUS + 1],
    decay: f64,
}

impl BlurKernel {
    pub fn exponential(decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay.is_finite()) {
            return Err(Error::Config(format!("blur decay {decay} must be positive")));
        }
        let mut taps = [0.0; 2 * BLUR_RADIUS + 1];
        for (i, t) in taps.iter_mut().enumerate() {
            *t = (-(i as f64 - BLUR_RADIUS as f64).abs() * decay).exp();
        }
        Ok(Self { taps, decay })
    }

    /// Center tap 1, all others 0. Leaves tables unchanged.
    pub fn identity() -> Self {
        let mut taps = [0.0; 2 * BLUR_RADIUS + 1];
        taps[BLUR_RADIUS] = 1.0;
        Self { taps, decay: f64::INFINITY }
    }

    /// Weights for offsets `-3..=3`.
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    fn tap(&self, offset: usize) -> f64 {
        self.taps[BLUR_RADIUS + offset]
    }
}

/// Simplex embeddings of a batch of points, stored flat.
#[derive(Clone, Debug)]
pub struct PointSet {
    dim: usize,
    elevated: Vec<f64>,
    keys: Vec<i32>,
    weights: Vec<f64>,
    rank: Vec<usize>,
}

impl PointSet {
    /// Elevates every row of `positions` (`N x D`) with `scale` and locates its simplex.
    pub fn from_positions(positions: &Tensor, scale: f64) -> Result<Self> {
        let (n, d) = (positions.rows(), positions.cols());
        if d == 0 {
            return Err(Error::Config("positions need at least one dimension".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("lattice scale {scale} must be positive")));
        }
        if !positions.is_finite() {
            return Err(Error::NonFinite { op: "lattice positions" });
        }
        let elevation = Elevation::new(d);
        let d1 = d + 1;
        let mut set =
            Self { dim: d, elevated: vec![0.0; n * d1], keys: vec![0; n * d1 * d1], weights: vec![0.0; n * d1], rank: vec![0; n * d1] };
        let mut scratch = SimplexScratch::new(d);
        for i in 0..n {
            let y = &mut set.elevated[i * d1..(i + 1) * d1];
            elevation.apply_into(positions.row(i), scale, y);
            scratch.locate(
                &set.elevated[i * d1..(i + 1) * d1],
                &mut set.keys[i * d1 * d1..(i + 1) * d1 * d1],
                &mut set.weights[i * d1..(i + 1) * d1],
                &mut set.rank[i * d1..(i + 1) * d1],
            )?;
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.weights.len() / (self.dim + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        let d1 = self.dim + 1;
        &self.weights[i * d1..(i + 1) * d1]
    }

    pub fn rank(&self, i: usize) -> &[usize] {
        let d1 = self.dim + 1;
        &self.rank[i * d1..(i + 1) * d1]
    }

    /// Key of the remainder-`k` vertex of point `i`.
    pub fn vertex(&self, i: usize, k: usize) -> &[i32] {
        let d1 = self.dim + 1;
        let base = (i * d1 + k) * d1;
        &self.keys[base..base + d1]
    }

    pub fn elevated(&self, i: usize) -> &[f64] {
        let d1 = self.dim + 1;
        &self.elevated[i * d1..(i + 1) * d1]
    }

    pub fn simplex(&self, i: usize) -> SimplexEmbedding {
        let d1 = self.dim + 1;
        SimplexEmbedding {
            elevated: self.elevated(i).to_vec(),
            vertices: (0..d1).map(|k| LatticeKey(self.vertex(i, k).to_vec())).collect(),
            weights: self.weights(i).to_vec(),
            rank: self.rank(i).to_vec(),
        }
    }

    /// Hash of every point's simplex (vertex 0 and rank permutation).
    fn signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let d1 = self.dim + 1;
        for i in 0..self.len() {
            self.vertex(i, 0).hash(&mut h);
            self.rank(i).hash(&mut h);
        }
        d1.hash(&mut h);
        h.finish()
    }
}

fn splat_into(points: &PointSet, features: &Tensor, table: &mut LatticeTable, slots: &mut Vec<u32>) {
    let d1 = points.dim + 1;
    slots.clear();
    for i in 0..points.len() {
        let f = features.row(i);
        for k in 0..d1 {
            let w = points.weights(i)[k];
            let idx = table.find_or_insert(points.vertex(i, k));
            slots.push(idx as u32);
            table.value_mut(idx).iter_mut().zip(f).for_each(|(t, v)| *t += w * v);
        }
    }
}

fn check_features(points: &PointSet, features: &Tensor) -> Result<()> {
    if features.rows() != points.len() {
        return Err(Error::Shape { op: "splat", detail: format!("{} feature rows for {} points", features.rows(), points.len()) });
    }
    Ok(())
}

/// Accumulates each feature row onto its simplex vertices, scaled by the
/// barycentric weights.
pub fn splat(points: &PointSet, features: &Tensor) -> Result<LatticeTable> {
    check_features(points, features)?;
    let d1 = points.dim + 1;
    let mut table = LatticeTable::with_capacity(points.dim, features.cols(), d1 * points.len());
    splat_into(points, features, &mut table, &mut Vec::new());
    Ok(table)
}

/// Barycentric read-out of the table at each point; absent vertices read as zero.
pub fn slice(table: &LatticeTable, points: &PointSet) -> Result<Tensor> {
    if table.dim() != points.dim {
        return Err(Error::Shape {
            op: "slice",
            detail: format!("table of dimension {} for points of dimension {}", table.dim(), points.dim),
        });
    }
    let c = table.channels();
    let d1 = points.dim + 1;
    let mut out = Tensor::zeros(points.len(), c);
    for i in 0..points.len() {
        let row = out.row_mut(i);
        for k in 0..d1 {
            if let Some(v) = table.get(points.vertex(i, k)) {
                let w = points.weights(i)[k];
                row.iter_mut().zip(v).for_each(|(o, x)| *o += w * x);
            }
        }
    }
    Ok(out)
}

/// Neighbor indices of every table entry at offsets `+1..=+3, -1..=-3` along
/// each of the `D + 1` lattice axes.
#[derive(Clone, Debug)]
struct BlurGraph {
    d1: usize,
    neighbors: Vec<u32>,
}

impl BlurGraph {
    fn build(table: &LatticeTable) -> Self {
        let d = table.dim();
        let d1 = d + 1;
        let per_axis = 2 * BLUR_RADIUS;
        let mut neighbors = vec![NO_NEIGHBOR; table.len() * d1 * per_axis];
        let mut probe = vec![0i32; d];
        for e in 0..table.len() {
            let key = table.key(e);
            for axis in 0..d1 {
                for (dir, sign) in [(0usize, 1i32), (1, -1)] {
                    for m in 1..=BLUR_RADIUS as i32 {
                        // axis step: +1 on every coordinate, -D on the axis coordinate
                        for (i, p) in probe.iter_mut().enumerate() {
                            let step = if i == axis { -(d as i32) } else { 1 };
                            *p = key.0[i] + sign * m * step;
                        }
                        if let Some(idx) = table.find(&probe) {
                            let slot = ((e * d1 + axis) * per_axis) + dir * BLUR_RADIUS + (m as usize - 1);
                            neighbors[slot] = idx as u32;
                        }
                    }
                }
            }
        }
        Self { d1, neighbors }
    }

    fn axis_pass(&self, src: &[f64], dst: &mut [f64], channels: usize, axis: usize, kernel: &BlurKernel) {
        let per_axis = 2 * BLUR_RADIUS;
        let entries = src.len() / channels.max(1);
        for e in 0..entries {
            let out = &mut dst[e * channels..(e + 1) * channels];
            let w0 = kernel.tap(0);
            out.iter_mut().zip(&src[e * channels..(e + 1) * channels]).for_each(|(o, s)| *o = w0 * s);
            let base = (e * self.d1 + axis) * per_axis;
            for (slot, &nb) in self.neighbors[base..base + per_axis].iter().enumerate() {
                if nb == NO_NEIGHBOR {
                    continue;
                }
                let w = kernel.tap(slot % BLUR_RADIUS + 1);
                let nb = nb as usize;
                out.iter_mut().zip(&src[nb * channels..(nb + 1) * channels]).for_each(|(o, s)| *o += w * s);
            }
        }
    }

    /// Half the ascending-axis sweep plus half the descending one.
    fn apply(&self, values: &[f64], channels: usize, kernel: &BlurKernel) -> Vec<f64> {
        let sweep = |axes: &mut dyn Iterator<Item = usize>| {
            let mut cur = values.to_vec();
            let mut next = vec![0.0; values.len()];
            for axis in axes {
                self.axis_pass(&cur, &mut next, channels, axis, kernel);
                std::mem::swap(&mut cur, &mut next);
            }
            cur
        };
        let asc = sweep(&mut (0..self.d1));
        let desc = sweep(&mut (0..self.d1).rev());
        asc.iter().zip(&desc).map(|(a, b)| 0.5 * (a + b)).collect()
    }
}

/// Blurs over the occupied vertices: the 7-tap kernel is applied along every
/// lattice axis in turn; neighbors that are not in the table contribute zero
/// and no entries are created. Linear and self-adjoint.
pub fn blur(table: &LatticeTable, kernel: &BlurKernel) -> LatticeTable {
    let graph = BlurGraph::build(table);
    table.with_values(graph.apply(table.values(), table.channels(), kernel))
}

/// One 7-tap pass along a single lattice axis, over the occupied vertices.
pub fn blur_axis(table: &LatticeTable, axis: usize, kernel: &BlurKernel) -> LatticeTable {
    let graph = BlurGraph::build(table);
    let mut out = vec![0.0; table.values().len()];
    graph.axis_pass(table.values(), &mut out, table.channels(), axis, kernel);
    table.with_values(out)
}

/// Kernel and scale pairing for one embedding dimension.
#[derive(Clone, Debug)]
pub struct LatticeFilter {
    kernel: BlurKernel,
    /// Elevation scale per unit of decay rate: `scale = lambda * unit_scale`.
    unit_scale: f64,
}

impl LatticeFilter {
    pub fn new(kernel: BlurKernel, unit_scale: f64) -> Result<Self> {
        if !(unit_scale > 0.0 && unit_scale.is_finite()) {
            return Err(Error::Config(format!("unit scale {unit_scale} must be positive")));
        }
        Ok(Self { kernel, unit_scale })
    }

    /// The calibrated filter for `dim`-dimensional positions.
    pub fn for_dim(dim: usize) -> Self {
        let c = calibration::calibrated(dim);
        Self { kernel: BlurKernel::exponential(c.decay).expect("calibration table holds positive decays"), unit_scale: c.scale }
    }

    pub fn kernel(&self) -> &BlurKernel {
        &self.kernel
    }

    pub fn unit_scale(&self) -> f64 {
        self.unit_scale
    }

    /// Approximates `out_i = sum_j exp(-lambda |p_i - p_j|) f_j`.
    pub fn forward(&self, positions: &Tensor, features: &Tensor, lambda: f64) -> Result<(Tensor, FilterContext)> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("decay rate {lambda} must be positive")));
        }
        if positions.rows() == 0 {
            return Err(Error::Config("lattice filter needs at least one point".into()));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite { op: "lattice features" });
        }
        let scale = lambda * self.unit_scale;
        let points = PointSet::from_positions(positions, scale)?;
        check_features(&points, features)?;
        let d1 = points.dim + 1;
        let mut table = LatticeTable::with_capacity(points.dim, features.cols(), d1 * points.len());
        let mut slots = Vec::with_capacity(d1 * points.len());
        splat_into(&points, features, &mut table, &mut slots);
        let graph = BlurGraph::build(&table);
        let blurred = graph.apply(table.values(), table.channels(), &self.kernel);
        let ctx = FilterContext {
            elevation: Elevation::new(points.dim),
            scale,
            kernel: self.kernel.clone(),
            channels: features.cols(),
            entries: table.len(),
            features: features.clone(),
            slots,
            graph,
            blurred,
            points,
        };
        let out = ctx.slice_cached(&ctx.blurred);
        Ok((out, ctx))
    }
}

/// Everything the backward pass reuses from the forward pass.
#[derive(Clone, Debug)]
pub struct FilterContext {
    points: PointSet,
    /// Table entry of vertex `k` of point `i`, at `i * (D + 1) + k`.
    slots: Vec<u32>,
    graph: BlurGraph,
    blurred: Vec<f64>,
    features: Tensor,
    elevation: Elevation,
    scale: f64,
    kernel: BlurKernel,
    channels: usize,
    entries: usize,
}

impl FilterContext {
    pub fn points(&self) -> &PointSet {
        &self.points
    }

    /// Number of lattice vertices touched by splatting.
    pub fn lattice_size(&self) -> usize {
        self.entries
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn signature(&self) -> u64 {
        self.points.signature()
    }

    fn splat_cached(&self, values: &Tensor, channels: usize) -> Vec<f64> {
        let d1 = self.points.dim + 1;
        let mut table = vec![0.0; self.entries * channels];
        for i in 0..self.points.len() {
            let f = values.row(i);
            for k in 0..d1 {
                let w = self.points.weights(i)[k];
                let e = self.slots[i * d1 + k] as usize;
                table[e * channels..(e + 1) * channels].iter_mut().zip(f).for_each(|(t, v)| *t += w * v);
            }
        }
        table
    }

    fn slice_cached(&self, table: &[f64]) -> Tensor {
        let c = self.channels;
        let d1 = self.points.dim + 1;
        let mut out = Tensor::zeros(self.points.len(), c);
        for i in 0..self.points.len() {
            let row = out.row_mut(i);
            for k in 0..d1 {
                let w = self.points.weights(i)[k];
                let e = self.slots[i * d1 + k] as usize;
                row.iter_mut().zip(&table[e * c..(e + 1) * c]).for_each(|(o, x)| *o += w * x);
            }
        }
        out
    }

    /// Gradients with respect to the features and the (unscaled) positions.
    ///
    /// Position gradients differentiate the barycentric weights inside each
    /// point's current simplex, at both the splat and the slice site.
    pub fn backward(&self, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, c) = (self.points.len(), self.channels);
        if grad_out.rows() != n || grad_out.cols() != c {
            return Err(Error::Shape {
                op: "lattice_filter_backward",
                detail: format!("gradient {:?} for output [{n}, {c}]", grad_out.shape()),
            });
        }
        let splat_g = self.splat_cached(grad_out, c);
        let blurred_g = self.graph.apply(&splat_g, c, &self.kernel);
        let grad_features = self.slice_cached(&blurred_g);

        let d = self.points.dim;
        let d1 = d + 1;
        let mut grad_positions = Tensor::zeros(n, d);
        let mut grad_w = vec![0.0; d1];
        let mut grad_y = vec![0.0; d1];
        for i in 0..n {
            let (g, f) = (grad_out.row(i), self.features.row(i));
            for (k, gw) in grad_w.iter_mut().enumerate() {
                let e = self.slots[i * d1 + k] as usize;
                let u = &self.blurred[e * c..(e + 1) * c];
                let v = &blurred_g[e * c..(e + 1) * c];
                *gw = g.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() + f.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            }
            bary_pullback(&grad_w, self.points.rank(i), &mut grad_y);
            self.elevation.pullback_into(&grad_y, self.scale, grad_positions.row_mut(i));
        }
        Ok((grad_features, grad_positions))
    }
}

/// Filter with the calibrated parameters for the position dimension.
pub fn lattice_filter_forward(positions: &Tensor, features: &Tensor, lambda: f64) -> Result<(Tensor, FilterContext)> {
    LatticeFilter::for_dim(positions.cols()).forward(positions, features, lambda)
}

pub fn lattice_filter_backward(ctx: &FilterContext, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    ctx.backward(grad_out)
}

#[derive(Debug)]
struct LatticeFilterOp {
    ctx: FilterContext,
}

impl CustomOp for LatticeFilterOp {
    fn name(&self) -> &'static str {
        "lattice_filter"
    }

    fn backward(&self, _inputs: &[&Tensor], grad_out: &[f64], needs: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
        let g = Tensor::from_rows(self.ctx.points.len(), self.ctx.channels, grad_out.to_vec());
        let (gf, gp) = self.ctx.backward(&g)?;
        Ok(vec![needs[0].then(|| gp.into_data()), needs[1].then(|| gf.into_data())])
    }

    fn signature(&self) -> Option<u64> {
        Some(self.ctx.signature())
    }
}

impl Tape {
    /// Records the lattice filter of `features` at `positions` on the tape.
    pub fn lattice_filter(&mut self, positions: Var, features: Var, lambda: f64, filter: &LatticeFilter) -> Result<Var> {
        let (out, ctx) = filter.forward(self.value(positions), self.value(features), lambda)?;
        self.push_custom(out, vec![positions, features], Box::new(LatticeFilterOp { ctx }))
    }
}
