//! Learned-adjacency extraction and 8-bit PGM rendering.
//!
//! Images are binary portable graymaps (P5): row i is the source joint,
//! column j the target joint, pixels linearly min-max scaled with the
//! original min/max recorded in a header comment. Degenerate scaling
//! (min = max) renders 0 for an all-zero matrix and mid-gray 128
//! otherwise.

use crate::data::sample::SkeletonSequence;
use crate::error::{Error, Result};
use crate::model::config::NetworkConfig;
use crate::model::layers::embedded_gaussian;
use crate::model::network::network_trunk;
use crate::model::params::{NetParams, ParamVars, SpatialParams};
use crate::tape::{Phase, Tape};
use crate::tensor::{Real, Tensor};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjacencyTerm {
    /// Fixed normalized physical adjacency.
    A,
    /// Learned global adjacency.
    B,
    /// Data-dependent similarity graph; needs a sample.
    C,
    /// Elementwise sum of the enabled terms.
    Sum,
}

impl AdjacencyTerm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(AdjacencyTerm::A),
            "B" | "b" => Ok(AdjacencyTerm::B),
            "C" | "c" => Ok(AdjacencyTerm::C),
            "sum" => Ok(AdjacencyTerm::Sum),
            other => Err(Error::invalid(format!(
                "term must be A, B, C or sum, got '{other}'"
            ))),
        }
    }
}

fn layer_b_matrix<E: Real>(
    params: &NetParams<E>,
    layer: usize,
    subset: usize,
) -> Result<Tensor<f64>> {
    match &params.layout.blocks[layer].spatial {
        SpatialParams::Adaptive { b: Some(b), .. } => {
            Ok(params.store.value(b[subset]).cast::<f64>())
        }
        _ => Err(Error::invalid(format!(
            "layer {layer} has no learned global adjacency (B term disabled or baseline layer)"
        ))),
    }
}

/// Per-sample similarity graph of one layer/subset: runs the trunk in eval
/// phase up to the layer's input, then applies that layer's θ/φ pair.
/// Person 0 of the sample is used.
fn layer_c_matrix<E: Real>(
    params: &mut NetParams<E>,
    cfg: &NetworkConfig,
    layer: usize,
    subset: usize,
    sample: &SkeletonSequence,
) -> Result<Tensor<f64>> {
    let (theta, phi) = match &params.layout.blocks[layer].spatial {
        SpatialParams::Adaptive {
            theta: Some(theta),
            phi: Some(phi),
            ..
        } => (theta[subset], phi[subset]),
        _ => {
            return Err(Error::invalid(format!(
                "layer {layer} has no similarity term (C disabled or baseline layer)"
            )))
        }
    };
    if sample.channels() != cfg.in_channels
        || sample.joints() != cfg.skeleton.num_joints()
        || sample.persons() != cfg.persons
    {
        return Err(Error::invalid(format!(
            "sample '{}' (C={} N={} M={}) does not match the network (C={} N={} M={})",
            sample.id,
            sample.channels(),
            sample.joints(),
            sample.persons(),
            cfg.in_channels,
            cfg.skeleton.num_joints(),
            cfg.persons
        )));
    }
    let x = Tensor::<E>::from_vec(
        &[
            1,
            sample.channels(),
            sample.frames(),
            sample.joints(),
            sample.persons(),
        ],
        sample.data().iter().map(|&v| E::from_f64(v as f64)).collect(),
    )?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &params.store, false);
    let xv = tape.leaf(x, false);
    let seeds = vec![0u64; cfg.blocks.len()];
    let NetParams {
        store: _,
        bufs,
        layout,
    } = params;
    let h = network_trunk(
        &mut tape,
        xv,
        layout,
        &vars,
        bufs,
        cfg,
        Phase::Eval,
        &seeds,
        Some(layer),
    )?;
    let c = embedded_gaussian(&mut tape, h, vars.get(theta), vars.get(phi))?;
    let cv = tape.value(c);
    let n = cv.shape()[1];
    // Person 0 is the first slice of the folded batch.
    let data: Vec<f64> = cv.data()[..n * n].iter().map(|v| v.to_f64()).collect();
    Tensor::from_vec(&[n, n], data)
}

/// Extracts one N×N adjacency term of one layer/subset.
pub fn extract_adjacency<E: Real>(
    params: &mut NetParams<E>,
    cfg: &NetworkConfig,
    layer: usize,
    subset: usize,
    term: AdjacencyTerm,
    sample: Option<&SkeletonSequence>,
) -> Result<Tensor<f64>> {
    if layer >= cfg.blocks.len() {
        return Err(Error::invalid(format!(
            "layer {layer} out of range for {} blocks",
            cfg.blocks.len()
        )));
    }
    if subset >= crate::graph::NUM_SUBSETS {
        return Err(Error::invalid(format!(
            "subset {subset} out of range for {} subsets",
            crate::graph::NUM_SUBSETS
        )));
    }
    let toggles = cfg.blocks[layer].toggles;
    match term {
        AdjacencyTerm::A => Ok(cfg.adjacency()?.matrices[subset].clone()),
        AdjacencyTerm::B => layer_b_matrix(params, layer, subset),
        AdjacencyTerm::C => {
            let sample = sample.ok_or_else(|| {
                Error::invalid("term C is data-dependent and requires a sample")
            })?;
            layer_c_matrix(params, cfg, layer, subset, sample)
        }
        AdjacencyTerm::Sum => {
            let n = cfg.skeleton.num_joints();
            let mut acc = Tensor::<f64>::zeros(&[n, n]);
            let add = |t: Tensor<f64>, acc: &mut Tensor<f64>| {
                for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a += v;
                }
            };
            if toggles.use_a {
                add(cfg.adjacency()?.matrices[subset].clone(), &mut acc);
            }
            if toggles.use_b {
                add(layer_b_matrix(params, layer, subset)?, &mut acc);
            }
            if toggles.use_c {
                let sample = sample.ok_or_else(|| {
                    Error::invalid(
                        "term sum includes the data-dependent C term and requires a sample",
                    )
                })?;
                add(layer_c_matrix(params, cfg, layer, subset, sample)?, &mut acc);
            }
            Ok(acc)
        }
    }
}

/// Renders a matrix as a binary 8-bit PGM with `# min=… max=…` recorded in
/// a header comment before the dimensions.
pub fn render_pgm(matrix: &Tensor<f64>) -> Result<Vec<u8>> {
    if matrix.ndim() != 2 {
        return Err(Error::invalid(format!(
            "render_pgm: need a matrix, got shape {:?}",
            matrix.shape()
        )));
    }
    let (rows, cols) = (matrix.shape()[0], matrix.shape()[1]);
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in matrix.data() {
        if !v.is_finite() {
            return Err(Error::Numeric("render_pgm: non-finite matrix entry".into()));
        }
        min = min.min(v);
        max = max.max(v);
    }
    let mut out = Vec::with_capacity(64 + rows * cols);
    out.extend_from_slice(format!("P5\n# min={min} max={max}\n{cols} {rows}\n255\n").as_bytes());
    if max > min {
        let scale = 255.0 / (max - min);
        for &v in matrix.data() {
            out.push(((v - min) * scale).round() as u8);
        }
    } else {
        let fill = if min == 0.0 { 0u8 } else { 128u8 };
        out.extend(std::iter::repeat(fill).take(rows * cols));
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, matrix: &Tensor<f64>) -> Result<()> {
    std::fs::write(path, render_pgm(matrix)?)?;
    Ok(())
}

/// Parsed PGM: width, height, pixels, and the min/max recorded in the
/// header comment.
pub struct ParsedPgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub min: f64,
    pub max: f64,
}

pub fn parse_pgm(bytes: &[u8]) -> Result<ParsedPgm> {
    let header_end = find_header_end(bytes)?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::format("pgm: header is not UTF-8"))?;
    let mut min = None;
    let mut max = None;
    let mut fields = Vec::new();
    for (i, line) in header.lines().enumerate() {
        if i == 0 {
            if line.trim() != "P5" {
                return Err(Error::format(format!("pgm: bad magic '{line}'")));
            }
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            for tok in comment.split_whitespace() {
                if let Some(v) = tok.strip_prefix("min=") {
                    min = Some(v.parse().map_err(|_| Error::format("pgm: bad min"))?);
                } else if let Some(v) = tok.strip_prefix("max=") {
                    max = Some(v.parse().map_err(|_| Error::format("pgm: bad max"))?);
                }
            }
            continue;
        }
        fields.extend(line.split_whitespace().map(|s| s.to_string()));
    }
    if fields.len() != 3 || fields[2] != "255" {
        return Err(Error::format(format!(
            "pgm: expected 'width height 255', got {fields:?}"
        )));
    }
    let width: usize = fields[0].parse().map_err(|_| Error::format("pgm: bad width"))?;
    let height: usize = fields[1].parse().map_err(|_| Error::format("pgm: bad height"))?;
    let pixels = bytes[header_end..].to_vec();
    if pixels.len() != width * height {
        return Err(Error::format(format!(
            "pgm: {} pixels for {width}×{height}",
            pixels.len()
        )));
    }
    Ok(ParsedPgm {
        width,
        height,
        pixels,
        min: min.ok_or_else(|| Error::format("pgm: missing min comment"))?,
        max: max.ok_or_else(|| Error::format("pgm: missing max comment"))?,
    })
}

// The raster starts after the newline that terminates the maxval line;
// comments only appear before it.
fn find_header_end(bytes: &[u8]) -> Result<usize> {
    let mut newlines = 0;
    let mut i = 0;
    let mut in_comment = false;
    let mut logical_lines = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b == b'\n' {
            newlines += 1;
            if !in_comment {
                logical_lines += 1;
            }
            in_comment = false;
            if logical_lines == 3 {
                return Ok(i + 1);
            }
        } else if b == b'#' && !in_comment {
            in_comment = true;
        }
        i += 1;
    }
    let _ = newlines;
    Err(Error::format("pgm: truncated header"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_scaling() {
        let m = Tensor::from_vec(&[2, 3], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.5]).unwrap();
        let bytes = render_pgm(&m).unwrap();
        let parsed = parse_pgm(&bytes).unwrap();
        assert_eq!((parsed.width, parsed.height), (3, 2));
        assert_eq!(parsed.min, 0.0);
        assert_eq!(parsed.max, 1.0);
        let expect: Vec<u8> = m
            .data()
            .iter()
            .map(|&v| ((v - parsed.min) * 255.0 / (parsed.max - parsed.min)).round() as u8)
            .collect();
        assert_eq!(parsed.pixels, expect);
    }

    #[test]
    fn all_zero_matrix_renders_black() {
        let bytes = render_pgm(&Tensor::<f64>::zeros(&[4, 4])).unwrap();
        let parsed = parse_pgm(&bytes).unwrap();
        assert!(parsed.pixels.iter().all(|&p| p == 0));
        assert_eq!(parsed.min, 0.0);
        assert_eq!(parsed.max, 0.0);
    }

    #[test]
    fn constant_nonzero_matrix_renders_mid_gray() {
        let bytes = render_pgm(&Tensor::full(&[3, 3], 0.25f64)).unwrap();
        let parsed = parse_pgm(&bytes).unwrap();
        assert!(parsed.pixels.iter().all(|&p| p == 128));
        assert_eq!(parsed.min, 0.25);
        assert_eq!(parsed.max, 0.25);
    }
}
