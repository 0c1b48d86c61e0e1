//! Separable coordinate maps built by streamline integration of the group
//! vector fields from a base point, sampled on the bin-grid nodes and
//! evaluated by masked multilinear interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local_frames::{field_at, FrameField};
use crate::phase_binning::GridGeometry;
use crate::signal_io::TimeSeries;
use crate::weights::Partition;

/// Hard cap on integration steps per trace.
pub const MAX_TRACE_STEPS: usize = 10_000;

/// A vector field that can be traced: unit directions over a bounded box.
pub trait VectorField: Sync {
    fn dims(&self) -> usize;
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    /// Unit direction of the requested group's field at `x`.
    fn direction(&self, x: &[f64], group: &[usize]) -> Result<Vec<f64>>;
}

impl VectorField for FrameField {
    fn dims(&self) -> usize {
        self.geometry().dims
    }

    fn lower(&self) -> &[f64] {
        &self.geometry().lower
    }

    fn upper(&self) -> &[f64] {
        &self.geometry().upper
    }

    fn direction(&self, x: &[f64], group: &[usize]) -> Result<Vec<f64>> {
        field_at(self, x, group)
    }
}

/// Ordered polyline with a signed, strictly monotone parameter per vertex.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Streamline {
    dims: usize,
    points: Vec<f64>,
    params: Vec<f64>,
}

impl Streamline {
    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dims..(i + 1) * self.dims]
    }

    pub fn param(&self, i: usize) -> f64 {
        self.params[i]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Point at the given parameter by linear interpolation; requires
    /// ascending parameters (as produced by [`trace_bidirectional`]).
    pub fn point_at_param(&self, p: f64) -> Option<Vec<f64>> {
        if self.is_empty() || p < self.params[0] || p > self.params[self.len() - 1] {
            return None;
        }
        let j = self.params.partition_point(|&q| q < p).min(self.len() - 1);
        if j == 0 {
            return Some(self.point(0).to_vec());
        }
        let (p0, p1) = (self.params[j - 1], self.params[j]);
        let t = if p1 > p0 { (p - p0) / (p1 - p0) } else { 0.0 };
        let a = self.point(j - 1);
        let b = self.point(j);
        Some((0..self.dims).map(|d| a[d] + t * (b[d] - a[d])).collect())
    }
}

fn oriented_direction(
    field: &impl VectorField,
    x: &[f64],
    group: &[usize],
    reference: &[f64],
) -> Result<Vec<f64>> {
    let mut dir = field.direction(x, group)?;
    let dot: f64 = dir.iter().zip(reference).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        for d in &mut dir {
            *d = -*d;
        }
    }
    Ok(dir)
}

fn in_bounds(field: &impl VectorField, x: &[f64]) -> bool {
    x.iter()
        .zip(field.lower().iter().zip(field.upper()))
        .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
}

/// Traces a streamline of the unit-normalized group field from `start` by
/// fourth-order fixed-step integration. The parameter is arc length,
/// signed by `direction`. Terminates at `max_param`, on domain exit, or on
/// entry into a region with no valid interpolation stencil.
pub fn trace_streamline(
    field: &impl VectorField,
    start: &[f64],
    group: &[usize],
    direction: f64,
    max_param: f64,
    step: f64,
) -> Result<Streamline> {
    let dims = field.dims();
    if start.len() != dims {
        return Err(Error::ShapeMismatch("start point has wrong dimension".into()));
    }
    if direction != 1.0 && direction != -1.0 {
        return Err(Error::InvalidInput(format!(
            "direction must be +1 or -1, got {direction}"
        )));
    }
    if !(step > 0.0) || !(max_param >= 0.0) {
        return Err(Error::InvalidInput("step and max_param must be positive".into()));
    }
    for d in 0..dims {
        if start[d] < field.lower()[d] || start[d] > field.upper()[d] {
            return Err(Error::OutOfBounds {
                dim: d,
                value: start[d],
                lo: field.lower()[d],
                hi: field.upper()[d],
            });
        }
    }
    let mut line = Streamline {
        dims,
        points: start.to_vec(),
        params: vec![0.0],
    };
    // Initial orientation: the field direction at the start, flipped by the
    // requested trace direction.
    let mut ref_dir = match field.direction(start, group) {
        Ok(mut dir) => {
            for d in &mut dir {
                *d *= direction;
            }
            dir
        }
        Err(Error::NoValidStencil(_)) | Err(Error::OutOfBounds { .. }) => return Ok(line),
        Err(e) => return Err(e),
    };
    let mut x = start.to_vec();
    let mut travelled = 0.0_f64;
    for _ in 0..MAX_TRACE_STEPS {
        let remaining = max_param - travelled;
        if remaining <= step * 1e-12 {
            break;
        }
        let h = step.min(remaining);
        let probe = |p: &[f64], reference: &[f64]| -> Option<Vec<f64>> {
            if !in_bounds(field, p) {
                return None;
            }
            oriented_direction(field, p, group, reference).ok()
        };
        let Some(k1) = probe(&x, &ref_dir) else { break };
        let mid1: Vec<f64> = (0..dims).map(|d| x[d] + 0.5 * h * k1[d]).collect();
        let Some(k2) = probe(&mid1, &k1) else { break };
        let mid2: Vec<f64> = (0..dims).map(|d| x[d] + 0.5 * h * k2[d]).collect();
        let Some(k3) = probe(&mid2, &k1) else { break };
        let end: Vec<f64> = (0..dims).map(|d| x[d] + h * k3[d]).collect();
        let Some(k4) = probe(&end, &k1) else { break };
        let next: Vec<f64> = (0..dims)
            .map(|d| x[d] + h / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]))
            .collect();
        if !in_bounds(field, &next) {
            break;
        }
        travelled += h;
        line.points.extend_from_slice(&next);
        line.params.push(direction * travelled);
        let norm: f64 = (0..dims)
            .map(|d| (next[d] - x[d]) * (next[d] - x[d]))
            .sum::<f64>()
            .sqrt();
        if norm < step * 1e-12 {
            break;
        }
        ref_dir = (0..dims).map(|d| (next[d] - x[d]) / norm).collect();
        x = next;
    }
    Ok(line)
}

/// Streamline through `start` traced in both directions and merged into one
/// polyline with ascending parameters (zero at `start`).
pub fn trace_bidirectional(
    field: &impl VectorField,
    start: &[f64],
    group: &[usize],
    max_param: f64,
    step: f64,
) -> Result<Streamline> {
    let backward = trace_streamline(field, start, group, -1.0, max_param, step)?;
    let forward = trace_streamline(field, start, group, 1.0, max_param, step)?;
    let dims = field.dims();
    let mut points = Vec::with_capacity((backward.len() + forward.len()) * dims);
    let mut params = Vec::with_capacity(backward.len() + forward.len());
    for i in (1..backward.len()).rev() {
        points.extend_from_slice(backward.point(i));
        params.push(backward.param(i));
    }
    for i in 0..forward.len() {
        points.extend_from_slice(forward.point(i));
        params.push(forward.param(i));
    }
    Ok(Streamline {
        dims,
        points,
        params,
    })
}

/// Closest approach of the traced polyline's vertices to the reference
/// curve: nearest reference vertex with linear refinement onto its adjacent
/// segments. Returns the distance and the interpolated reference parameter.
fn closest_approach(traced: &Streamline, reference: &Streamline) -> Option<(f64, f64)> {
    if reference.len() < 2 || traced.is_empty() {
        return None;
    }
    let dims = traced.dims();
    let mut best: Option<(f64, f64)> = None;
    for i in 0..traced.len() {
        let p = traced.point(i);
        // Nearest reference vertex.
        let mut jbest = 0;
        let mut dbest = f64::INFINITY;
        for j in 0..reference.len() {
            let q = reference.point(j);
            let d2: f64 = (0..dims).map(|d| (p[d] - q[d]) * (p[d] - q[d])).sum();
            if d2 < dbest {
                dbest = d2;
                jbest = j;
            }
        }
        // Refine onto the segments adjacent to the nearest vertex.
        let mut candidate = (dbest.sqrt(), reference.param(jbest));
        for (ja, jb) in [(jbest.wrapping_sub(1), jbest), (jbest, jbest + 1)] {
            if ja >= reference.len() || jb >= reference.len() {
                continue;
            }
            let a = reference.point(ja);
            let b = reference.point(jb);
            let mut seg_len2 = 0.0;
            let mut dot = 0.0;
            for d in 0..dims {
                let ab = b[d] - a[d];
                seg_len2 += ab * ab;
                dot += (p[d] - a[d]) * ab;
            }
            if seg_len2 <= 0.0 {
                continue;
            }
            let t = (dot / seg_len2).clamp(0.0, 1.0);
            let mut d2 = 0.0;
            for d in 0..dims {
                let q = a[d] + t * (b[d] - a[d]);
                d2 += (p[d] - q) * (p[d] - q);
            }
            let dist = d2.sqrt();
            if dist < candidate.0 {
                let param = reference.param(ja) + t * (reference.param(jb) - reference.param(ja));
                candidate = (dist, param);
            }
        }
        if best.is_none_or(|(bd, _)| candidate.0 < bd) {
            best = Some(candidate);
        }
    }
    best
}

/// Options for map construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapOptions {
    /// Integration step (absolute units).
    pub step: f64,
    /// Crossing acceptance distance (absolute units).
    pub cross_tol: f64,
    /// Trace length bound (absolute units).
    pub max_param: f64,
}

impl MapOptions {
    /// Defaults derived from the field geometry: step of 1% of the domain
    /// diagonal, crossing tolerance of a quarter bin width, traces bounded
    /// by 2.5 diagonals.
    pub fn for_field(field: &FrameField) -> Self {
        let geom = field.geometry();
        let diag: f64 = (0..geom.dims)
            .map(|d| {
                let r = geom.upper[d] - geom.lower[d];
                r * r
            })
            .sum::<f64>()
            .sqrt();
        let min_width = geom
            .widths
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        Self {
            step: 0.01 * diag,
            cross_tol: 0.25 * min_width,
            max_param: 2.5 * diag,
        }
    }
}

/// Grid-sampled separable coordinates with streamline-based construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordinateMap {
    geometry: GridGeometry,
    pub x0: Vec<f64>,
    pub partition: Partition,
    /// Reference curve of type 1 (along the group-1 field through x0).
    pub gamma1: Streamline,
    /// Reference curve of type 2.
    pub gamma2: Streamline,
    u1: Vec<f64>,
    u2: Vec<f64>,
    defined: Vec<bool>,
    pub options: MapOptions,
}

impl CoordinateMap {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn node_u(&self, flat: usize) -> Option<[f64; 2]> {
        if self.defined[flat] {
            Some([self.u1[flat], self.u2[flat]])
        } else {
            None
        }
    }

    pub fn defined(&self) -> &[bool] {
        &self.defined
    }

    pub fn defined_nodes(&self) -> usize {
        self.defined.iter().filter(|&&d| d).count()
    }

    /// Fraction of usable-field nodes on which u is defined.
    pub fn defined_fraction(&self, field: &FrameField) -> f64 {
        let usable: Vec<usize> = field.usable_bins().collect();
        if usable.is_empty() {
            return 0.0;
        }
        let defined = usable.iter().filter(|&&b| self.defined[b]).count();
        defined as f64 / usable.len() as f64
    }

    /// Applies a strictly monotone remap to one component's node values.
    pub fn remap_component(&mut self, component: usize, f: impl Fn(f64) -> f64) {
        let values = if component == 0 { &mut self.u1 } else { &mut self.u2 };
        for v in values.iter_mut() {
            *v = f(*v);
        }
    }

    /// Swaps the two coordinate components (and the stored partition).
    pub fn swap_components(&mut self) {
        std::mem::swap(&mut self.u1, &mut self.u2);
        std::mem::swap(&mut self.gamma1, &mut self.gamma2);
        std::mem::swap(&mut self.partition.group1, &mut self.partition.group2);
    }

    /// Interpolated u at a point; `None` when no defined stencil exists.
    pub fn evaluate_point(&self, x: &[f64]) -> Option<[f64; 2]> {
        let geom = &self.geometry;
        let dims = geom.dims;
        if !geom.contains(x) {
            return None;
        }
        let mut base = vec![0usize; dims];
        let mut frac = vec![0.0; dims];
        for d in 0..dims {
            let t = (x[d] - geom.lower[d]) / geom.widths[d] - 0.5;
            let max_base = geom.bins_per_dim[d] - 2;
            let i = t.floor().clamp(0.0, max_base as f64);
            base[d] = i as usize;
            frac[d] = (t - i).clamp(0.0, 1.0);
        }
        let mut acc = [0.0; 2];
        let mut total = 0.0;
        for corner in 0..(1usize << dims) {
            let mut idx = base.clone();
            let mut weight = 1.0;
            for d in 0..dims {
                if corner & (1 << d) != 0 {
                    idx[d] += 1;
                    weight *= frac[d];
                } else {
                    weight *= 1.0 - frac[d];
                }
            }
            if weight == 0.0 {
                continue;
            }
            let flat = geom.flat_index(&idx);
            if !self.defined[flat] {
                continue;
            }
            acc[0] += weight * self.u1[flat];
            acc[1] += weight * self.u2[flat];
            total += weight;
        }
        if total <= 0.0 {
            return None;
        }
        Some([acc[0] / total, acc[1] / total])
    }
}

fn node_u_value(
    field: &FrameField,
    node: &[f64],
    cross_group: &[usize],
    reference: &Streamline,
    opts: &MapOptions,
) -> Option<f64> {
    let traced = trace_bidirectional(field, node, cross_group, opts.max_param, opts.step).ok()?;
    let (dist, param) = closest_approach(&traced, reference)?;
    (dist <= opts.cross_tol).then_some(param)
}

fn build_map_impl(
    field: &FrameField,
    partition: &Partition,
    x0: &[f64],
    opts: &MapOptions,
    run_nodes: impl Fn(&(dyn Fn(usize) -> (Option<f64>, Option<f64>) + Sync)) -> Vec<(Option<f64>, Option<f64>)>,
) -> Result<CoordinateMap> {
    let geom = field.geometry().clone();
    if geom.dims != 2 || partition.group1.len() != 1 || partition.group2.len() != 1 {
        return Err(Error::Unsupported(
            "map construction requires two one-dimensional groups".into(),
        ));
    }
    let base_bin = geom.containing_bin(x0)?;
    if !field.is_usable(base_bin) {
        return Err(Error::InvalidInput(
            "base point does not lie in a usable bin".into(),
        ));
    }
    let g1 = &partition.group1[..];
    let g2 = &partition.group2[..];
    let gamma1 = trace_bidirectional(field, x0, g1, opts.max_param, opts.step)?;
    let gamma2 = trace_bidirectional(field, x0, g2, opts.max_param, opts.step)?;
    if gamma1.len() < 2 || gamma2.len() < 2 {
        return Err(Error::InvalidInput(
            "reference curve shorter than 2 vertices".into(),
        ));
    }
    let node_values = |flat: usize| -> (Option<f64>, Option<f64>) {
        let node = geom.center(flat);
        // u1 is read off gamma1 where the group-2 streamline through the
        // node crosses it; u2 symmetrically.
        let u1 = node_u_value(field, &node, g2, &gamma1, opts);
        let u2 = node_u_value(field, &node, g1, &gamma2, opts);
        (u1, u2)
    };
    let values = run_nodes(&node_values);
    let mut u1 = vec![0.0; geom.n_bins()];
    let mut u2 = vec![0.0; geom.n_bins()];
    let mut defined = vec![false; geom.n_bins()];
    for (flat, (a, b)) in values.into_iter().enumerate() {
        if let (Some(a), Some(b)) = (a, b) {
            u1[flat] = a;
            u2[flat] = b;
            defined[flat] = true;
        }
    }
    Ok(CoordinateMap {
        geometry: geom,
        x0: x0.to_vec(),
        partition: partition.clone(),
        gamma1,
        gamma2,
        u1,
        u2,
        defined,
        options: opts.clone(),
    })
}

/// Builds the separable coordinate map: reference curves through `x0`
/// along each group field, then per-node crossing parameters. Node traces
/// run in parallel when the `parallel` feature is enabled.
pub fn build_map(
    field: &FrameField,
    partition: &Partition,
    x0: &[f64],
    opts: &MapOptions,
) -> Result<CoordinateMap> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        build_map_impl(field, partition, x0, opts, |node_values| {
            let n = field.geometry().n_bins();
            (0..n).into_par_iter().map(node_values).collect()
        })
    }
    #[cfg(not(feature = "parallel"))]
    {
        build_map_seq(field, partition, x0, opts)
    }
}

/// Single-threaded fallback for [`build_map`]; used when the `parallel`
/// feature is disabled and exposed for benchmarking.
pub fn build_map_seq(
    field: &FrameField,
    partition: &Partition,
    x0: &[f64],
    opts: &MapOptions,
) -> Result<CoordinateMap> {
    build_map_impl(field, partition, x0, opts, |node_values| {
        let n = field.geometry().n_bins();
        (0..n).map(node_values).collect()
    })
}

/// Map evaluation result: kept time indices with their u values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MappedSeries {
    t_index: Vec<usize>,
    u: Vec<f64>,
    pub dropped: usize,
    pub sample_rate: f64,
}

impl MappedSeries {
    pub fn from_channels(u1: Vec<f64>, u2: Vec<f64>, sample_rate: f64) -> Self {
        assert_eq!(u1.len(), u2.len());
        let mut u = Vec::with_capacity(u1.len() * 2);
        for (a, b) in u1.iter().zip(&u2) {
            u.push(*a);
            u.push(*b);
        }
        Self {
            t_index: (0..u1.len()).collect(),
            u,
            dropped: 0,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.t_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_index.is_empty()
    }

    pub fn t_index(&self, i: usize) -> usize {
        self.t_index[i]
    }

    pub fn time_indices(&self) -> &[usize] {
        &self.t_index
    }

    pub fn get(&self, i: usize) -> [f64; 2] {
        [self.u[2 * i], self.u[2 * i + 1]]
    }

    pub fn channel(&self, k: usize) -> Vec<f64> {
        self.u.iter().skip(k).step_by(2).copied().collect()
    }
}

/// Evaluates the map over a series of points by masked multilinear
/// interpolation of the node u values. Points with no defined stencil are
/// dropped and counted.
pub fn evaluate_map(map: &CoordinateMap, series: &TimeSeries) -> Result<MappedSeries> {
    if map.defined_nodes() == 0 {
        return Err(Error::InvalidInput("map has an empty defined region".into()));
    }
    if series.n_channels() != 2 {
        return Err(Error::ShapeMismatch("map evaluation expects 2 channels".into()));
    }
    let mut t_index = Vec::with_capacity(series.len());
    let mut u = Vec::with_capacity(series.len() * 2);
    let mut dropped = 0;
    for t in 0..series.len() {
        match map.evaluate_point(series.sample(t)) {
            Some(val) => {
                t_index.push(t);
                u.extend_from_slice(&val);
            }
            None => dropped += 1,
        }
    }
    Ok(MappedSeries {
        t_index,
        u,
        dropped,
        sample_rate: series.sample_rate(),
    })
}

/// Constant-u curves for one family: group-2 streamlines seeded on gamma1
/// at the given parameter levels (family 1), or group-1 streamlines seeded
/// on gamma2 (family 2). The curves are the level sets of the respective
/// coordinate.
pub fn constant_u_curves(
    field: &FrameField,
    map: &CoordinateMap,
    family: usize,
    levels: &[f64],
) -> Result<Vec<(f64, Streamline)>> {
    let (reference, cross_group) = match family {
        1 => (&map.gamma1, &map.partition.group2),
        2 => (&map.gamma2, &map.partition.group1),
        _ => return Err(Error::InvalidInput("family must be 1 or 2".into())),
    };
    let mut out = Vec::new();
    for &level in levels {
        if let Some(seed) = reference.point_at_param(level) {
            let line = trace_bidirectional(
                field,
                &seed,
                cross_group,
                map.options.max_param,
                map.options.step,
            )?;
            out.push((level, line));
        }
    }
    Ok(out)
}
