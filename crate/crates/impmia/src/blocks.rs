//! Block-partitioned margin-gradient matrix construction.
//!
//! Candidates that survive the margin prefilter contribute one gradient
//! column per view (original, plus horizontal flip for image-shaped pools).
//! Parameters are packed into blocks of whole row groups, and each block
//! stores centered, unit-normalized columns together with the matching
//! centered, normalized slice of the target parameter vector.
//!
//! Centering follows the per-row mean across columns. A single-column block
//! has a degenerate row mean (it would annihilate the column), so that case
//! centers the column by its own scalar mean, mirroring the treatment of the
//! target vector.

use crate::data::CandidatePool;
use crate::nn::{self, ArchSpec, ParamVector};
use crate::scalar::Scalar;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("no correctly classified candidates")]
    NoRetainedCandidates,
    #[error("row group of layer {layer} has {size} parameters, exceeding block size target {target}")]
    RowGroupTooLarge {
        layer: usize,
        size: usize,
        target: usize,
    },
    #[error("invalid layer selection: {0}")]
    BadLayerSelection(String),
    #[error("block id {0} out of range")]
    BadBlockId(usize),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error("block cache io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed block cache: {0}")]
    Malformed(String),
}

/// One retained candidate: its label, original-view margin, and the views
/// whose gradients enter the matrix (original first, flip second).
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub sample_id: u64,
    pub label: usize,
    pub margin: f64,
    pub views: Vec<Vec<f64>>,
}

/// Keep candidates with nonnegative original-view margin, in pool order.
/// The flip view is added when the pool is image-shaped.
pub fn prefilter(
    pool: &CandidatePool,
    arch: &ArchSpec,
    theta: &ParamVector<f64>,
) -> Result<Vec<ViewSet>, BlockError> {
    let width = pool.image_width();
    let mut retained = Vec::new();
    for entry in &pool.samples {
        let delta = nn::margin(arch, theta, &entry.x, entry.y)?;
        if delta < 0.0 {
            continue;
        }
        let mut views = vec![entry.x.clone()];
        if let Some(w) = width {
            views.push(nn::flip_features(&entry.x, w));
        }
        retained.push(ViewSet {
            sample_id: entry.id,
            label: entry.y,
            margin: delta,
            views,
        });
    }
    if retained.is_empty() {
        return Err(BlockError::NoRetainedCandidates);
    }
    Ok(retained)
}

/// One block of the parameter partition: a contiguous flat index range plus
/// the layers it draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub block_id: usize,
    pub start: usize,
    pub end: usize,
    pub first_layer: usize,
    pub last_layer: usize,
}

impl BlockSpec {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Ordered partition of the selected parameters into blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub blocks: Vec<BlockSpec>,
    pub block_size_target: usize,
}

/// Greedily pack row groups (one output neuron's incoming weights) into
/// blocks of at most `block_size_target` parameters, preserving layer order.
/// `last_k_layers = 0` selects all layers, otherwise only the final `k`.
pub fn make_block_layout(
    arch: &ArchSpec,
    last_k_layers: usize,
    block_size_target: usize,
) -> Result<BlockLayout, BlockError> {
    let layout = arch.layout();
    let depth = layout.len();
    if last_k_layers > depth {
        return Err(BlockError::BadLayerSelection(format!(
            "requested last {last_k_layers} layers of a {depth}-layer network"
        )));
    }
    let first = if last_k_layers == 0 {
        0
    } else {
        depth - last_k_layers
    };
    let mut blocks: Vec<BlockSpec> = Vec::new();
    let mut cur_start = layout[first].offset;
    let mut cur_len = 0usize;
    let mut cur_first_layer = first;
    for slot in &layout[first..] {
        if slot.cols > block_size_target {
            return Err(BlockError::RowGroupTooLarge {
                layer: slot.layer,
                size: slot.cols,
                target: block_size_target,
            });
        }
        for r in 0..slot.rows {
            if cur_len + slot.cols > block_size_target {
                blocks.push(BlockSpec {
                    block_id: blocks.len(),
                    start: cur_start,
                    end: cur_start + cur_len,
                    first_layer: cur_first_layer,
                    last_layer: slot.layer.saturating_sub(usize::from(r == 0)),
                });
                cur_start += cur_len;
                cur_len = 0;
                cur_first_layer = slot.layer;
            }
            cur_len += slot.cols;
        }
    }
    if cur_len > 0 {
        blocks.push(BlockSpec {
            block_id: blocks.len(),
            start: cur_start,
            end: cur_start + cur_len,
            first_layer: cur_first_layer,
            last_layer: depth - 1,
        });
    }
    Ok(BlockLayout {
        blocks,
        block_size_target,
    })
}

/// One assembled block of the gradient matrix.
#[derive(Debug, Clone)]
pub struct GradientBlock<S> {
    pub block_id: usize,
    /// Rows (parameters) per column.
    pub p_b: usize,
    /// Column-major `p_b x m_v` matrix of centered unit columns.
    pub columns: Vec<S>,
    /// Norm each column had just before unit scaling; debiasing divides by it.
    pub column_norms: Vec<f64>,
    /// Per-row mean removed from every column.
    pub center: Vec<S>,
    /// Centered, unit-normalized slice of the target parameters.
    pub theta_block: Vec<S>,
    /// `(sample_id, view_id)` per stored column.
    pub column_index: Vec<(u64, u8)>,
    /// Original-view margin of each stored column's sample.
    pub margins: Vec<f64>,
    /// Columns dropped for having zero norm.
    pub dropped: Vec<(u64, u8)>,
}

impl<S: Scalar> GradientBlock<S> {
    pub fn m_v(&self) -> usize {
        self.column_index.len()
    }

    pub fn column(&self, j: usize) -> &[S] {
        &self.columns[j * self.p_b..(j + 1) * self.p_b]
    }
}

/// Center and normalize a set of raw f64 columns plus the target slice,
/// applying the drop rules. Shared by assembly and by tests that build
/// synthetic blocks.
pub fn process_block_data<S: Scalar>(
    block_id: usize,
    p_b: usize,
    raw: Vec<(u64, u8, f64, Vec<f64>)>,
    theta_slice: &[f64],
) -> GradientBlock<S> {
    let mut dropped = Vec::new();
    let mut cols: Vec<(u64, u8, f64, Vec<f64>)> = Vec::with_capacity(raw.len());
    for (id, view, margin, values) in raw {
        let norm: f64 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            dropped.push((id, view));
        } else {
            cols.push((id, view, margin, values));
        }
    }

    // Row means across columns; a lone column is centered by its own scalar
    // mean instead (the row mean would zero it out).
    let mut center = vec![0.0f64; p_b];
    if cols.len() >= 2 {
        for (_, _, _, v) in &cols {
            for (c, x) in center.iter_mut().zip(v) {
                *c += x;
            }
        }
        let inv = 1.0 / cols.len() as f64;
        for c in &mut center {
            *c *= inv;
        }
    } else if cols.len() == 1 {
        let mean = cols[0].3.iter().sum::<f64>() / p_b as f64;
        center.fill(mean);
    }

    let mut columns = Vec::new();
    let mut column_norms = Vec::new();
    let mut column_index = Vec::new();
    let mut margins = Vec::new();
    for (id, view, margin, mut v) in cols {
        for (x, c) in v.iter_mut().zip(&center) {
            *x -= c;
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            dropped.push((id, view));
            continue;
        }
        columns.extend(v.iter().map(|x| S::from_f64_lossy(x / norm)));
        column_norms.push(norm);
        column_index.push((id, view));
        margins.push(margin);
    }

    let theta_mean = theta_slice.iter().sum::<f64>() / p_b as f64;
    let mut theta_c: Vec<f64> = theta_slice.iter().map(|t| t - theta_mean).collect();
    let theta_norm: f64 = theta_c.iter().map(|t| t * t).sum::<f64>().sqrt();
    if theta_norm > 0.0 {
        for t in &mut theta_c {
            *t /= theta_norm;
        }
    }

    GradientBlock {
        block_id,
        p_b,
        columns,
        column_norms,
        center: center.into_iter().map(S::from_f64_lossy).collect(),
        theta_block: theta_c.into_iter().map(S::from_f64_lossy).collect(),
        column_index,
        margins,
        dropped,
    }
}

/// Build one gradient block: compute each view's margin gradient, slice it to
/// the block's parameter range, then center and normalize.
pub fn assemble_block<S: Scalar>(
    layout: &BlockLayout,
    block_id: usize,
    viewsets: &[ViewSet],
    arch: &ArchSpec,
    theta: &ParamVector<f64>,
) -> Result<GradientBlock<S>, BlockError> {
    let spec = *layout
        .blocks
        .get(block_id)
        .ok_or(BlockError::BadBlockId(block_id))?;
    let mut raw = Vec::new();
    for vs in viewsets {
        for (view_id, view) in vs.views.iter().enumerate() {
            let g = nn::margin_gradient(arch, theta, view, vs.label)?;
            raw.push((
                vs.sample_id,
                view_id as u8,
                vs.margin,
                g.values[spec.start..spec.end].to_vec(),
            ));
        }
    }
    Ok(process_block_data(
        block_id,
        spec.len(),
        raw,
        &theta.values[spec.start..spec.end],
    ))
}

// ---------------------------------------------------------------------------
// Optional per-block cache file.
// ---------------------------------------------------------------------------

const BLOCK_MAGIC: &str = "impmia-block v1";

pub fn save_block<S: Scalar>(path: &Path, block: &GradientBlock<S>) -> Result<(), BlockError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{BLOCK_MAGIC}")?;
    writeln!(w, "block_id = {}", block.block_id)?;
    writeln!(w, "p_b = {}", block.p_b)?;
    writeln!(w, "m_v = {}", block.m_v())?;
    writeln!(w, "precision = {}", S::LABEL)?;
    let index: Vec<String> = block
        .column_index
        .iter()
        .map(|(id, v)| format!("{id}:{v}"))
        .collect();
    writeln!(w, "column_index = {}", index.join(","))?;
    let dropped: Vec<String> = block
        .dropped
        .iter()
        .map(|(id, v)| format!("{id}:{v}"))
        .collect();
    writeln!(w, "dropped = {}", dropped.join(","))?;
    writeln!(w, "end-header")?;
    for v in &block.columns {
        write_scalar(&mut w, *v)?;
    }
    for v in &block.column_norms {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &block.center {
        write_scalar(&mut w, *v)?;
    }
    for v in &block.theta_block {
        write_scalar(&mut w, *v)?;
    }
    for v in &block.margins {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn write_scalar<S: Scalar, W: Write>(w: &mut W, v: S) -> std::io::Result<()> {
    if S::LABEL == "f32" {
        w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())
    } else {
        w.write_all(&v.to_f64_lossy().to_le_bytes())
    }
}

pub fn load_block<S: Scalar>(path: &Path) -> Result<GradientBlock<S>, BlockError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != BLOCK_MAGIC {
        return Err(BlockError::Malformed(format!("bad magic {:?}", line.trim_end())));
    }
    let mut block_id = None;
    let mut p_b = None;
    let mut m_v = None;
    let mut precision = String::new();
    let mut column_index: Vec<(u64, u8)> = Vec::new();
    let mut dropped: Vec<(u64, u8)> = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(BlockError::Malformed("missing end-header".into()));
        }
        let t = line.trim_end_matches(['\n', '\r']);
        if t == "end-header" {
            break;
        }
        let Some((k, v)) = t.split_once(" = ") else {
            return Err(BlockError::Malformed(format!("bad header line {t:?}")));
        };
        match k {
            "block_id" => block_id = Some(parse_num(v)?),
            "p_b" => p_b = Some(parse_num(v)?),
            "m_v" => m_v = Some(parse_num(v)?),
            "precision" => precision = v.to_string(),
            "column_index" => column_index = parse_index(v)?,
            "dropped" => dropped = parse_index(v)?,
            _ => {}
        }
    }
    if precision != S::LABEL {
        return Err(BlockError::Malformed(format!(
            "precision mismatch: file {precision}, requested {}",
            S::LABEL
        )));
    }
    let block_id = block_id.ok_or_else(|| BlockError::Malformed("missing block_id".into()))?;
    let p_b = p_b.ok_or_else(|| BlockError::Malformed("missing p_b".into()))?;
    let m_v = m_v.ok_or_else(|| BlockError::Malformed("missing m_v".into()))?;
    if column_index.len() != m_v {
        return Err(BlockError::Malformed("column_index length mismatch".into()));
    }
    let scalar_bytes = if S::LABEL == "f32" { 4 } else { 8 };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let expect = scalar_bytes * (p_b * m_v + p_b + p_b) + 8 * (m_v + m_v);
    if bytes.len() != expect {
        return Err(BlockError::Malformed(format!(
            "expected {expect} data bytes, found {}",
            bytes.len()
        )));
    }
    let mut pos = 0usize;
    let mut read_scalars = |n: usize, pos: &mut usize| -> Vec<S> {
        let out: Vec<S> = bytes[*pos..*pos + n * scalar_bytes]
            .chunks_exact(scalar_bytes)
            .map(|c| {
                if scalar_bytes == 4 {
                    S::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64)
                } else {
                    S::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap()))
                }
            })
            .collect();
        *pos += n * scalar_bytes;
        out
    };
    let columns = read_scalars(p_b * m_v, &mut pos);
    let column_norms: Vec<f64> = bytes[pos..pos + 8 * m_v]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    pos += 8 * m_v;
    let center = read_scalars(p_b, &mut pos);
    let theta_block = read_scalars(p_b, &mut pos);
    let margins: Vec<f64> = bytes[pos..pos + 8 * m_v]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(GradientBlock {
        block_id,
        p_b,
        columns,
        column_norms,
        center,
        theta_block,
        column_index,
        margins,
        dropped,
    })
}

fn parse_num(v: &str) -> Result<usize, BlockError> {
    v.parse()
        .map_err(|_| BlockError::Malformed(format!("bad integer {v:?}")))
}

fn parse_index(v: &str) -> Result<Vec<(u64, u8)>, BlockError> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|pair| {
            let (id, view) = pair
                .split_once(':')
                .ok_or_else(|| BlockError::Malformed(format!("bad index pair {pair:?}")))?;
            Ok((
                id.parse()
                    .map_err(|_| BlockError::Malformed(format!("bad id {id:?}")))?,
                view.parse()
                    .map_err(|_| BlockError::Malformed(format!("bad view {view:?}")))?,
            ))
        })
        .collect()
}
