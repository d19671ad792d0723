//! Graph label propagation over a pixel-similarity graph, used as a classical
//! baseline for slender-object segmentation.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighborhood {
    Four,
    Eight,
}

impl Neighborhood {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "4" => Ok(Neighborhood::Four),
            "8" => Ok(Neighborhood::Eight),
            other => Err(Error::Config(format!("connectivity must be 4 or 8, got '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Neighborhood::Four => "4",
            Neighborhood::Eight => "8",
        }
    }

    fn offsets(&self) -> &'static [(i64, i64)] {
        match self {
            Neighborhood::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Neighborhood::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// Self-loop weight: a fixed value or the node's mean neighbour weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelfWeight {
    Fixed(f64),
    MeanNeighbor,
}

/// Sparse similarity graph in compressed-row form. `raw` holds the symmetric
/// weights including self-loops; `norm` the row-normalized version.
#[derive(Debug, Clone)]
pub struct PixelGraph {
    pub width: usize,
    pub height: usize,
    pub neighborhood: Neighborhood,
    pub sigma: f64,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    raw: Vec<f64>,
    norm: Vec<f64>,
}

impl PixelGraph {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(column, raw weight, normalized weight)` entries of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.cols[r.clone()]
            .iter()
            .zip(&self.raw[r.clone()])
            .zip(&self.norm[r])
            .map(|((&c, &w), &n)| (c, w, n))
    }

    pub fn raw_weight(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|e| e.0 == j).map_or(0.0, |e| e.1)
    }

    /// Dense row-normalized matrix, for small graphs.
    pub fn dense(&self) -> Vec<f64> {
        let n = self.len();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for (j, _, w) in self.row(i) {
                m[i * n + j] = w;
            }
        }
        m
    }
}

/// `W_ij = exp(-(I_i - I_j)^2 / sigma^2)` for neighbours, plus a self-loop.
pub fn build_weights(
    image: &[f64],
    width: usize,
    height: usize,
    neighborhood: Neighborhood,
    sigma: f64,
    self_weight: SelfWeight,
) -> Result<PixelGraph> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if image.len() != width * height {
        return Err(Error::shape("build_weights", format!("{} pixels for {width}x{height}", image.len())));
    }
    if let SelfWeight::Fixed(w) = self_weight {
        if !(w >= 0.0) {
            return Err(Error::InvalidArgument(format!("self weight must be nonnegative, got {w}")));
        }
    }
    let s2 = sigma * sigma;
    let mut offsets = vec![0];
    let mut cols = Vec::new();
    let mut raw = Vec::new();
    let mut norm = Vec::new();
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            let i = (y * width as i64 + x) as usize;
            let mut entries = Vec::with_capacity(9);
            for &(dy, dx) in neighborhood.offsets() {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= height as i64 || nx >= width as i64 {
                    continue;
                }
                let j = (ny * width as i64 + nx) as usize;
                let d = image[i] - image[j];
                entries.push((j, (-d * d / s2).exp()));
            }
            let sw = match self_weight {
                SelfWeight::Fixed(w) => w,
                SelfWeight::MeanNeighbor if entries.is_empty() => 1.0,
                SelfWeight::MeanNeighbor => entries.iter().map(|e| e.1).sum::<f64>() / entries.len() as f64,
            };
            entries.push((i, sw));
            entries.sort_by_key(|e| e.0);
            let total: f64 = entries.iter().map(|e| e.1).sum();
            for (j, w) in entries {
                cols.push(j);
                raw.push(w);
                norm.push(if total > 0.0 { w / total } else { 0.0 });
            }
            offsets.push(cols.len());
        }
    }
    Ok(PixelGraph {
        width,
        height,
        neighborhood,
        sigma,
        offsets,
        cols,
        raw,
        norm,
    })
}

/// Synchronous updates `L <- W_norm L`, re-imposing `clamp[i]` after each step.
pub fn propagate(labels: &[f64], graph: &PixelGraph, steps: usize, clamp: Option<&[Option<f64>]>) -> Result<Vec<f64>> {
    if labels.len() != graph.len() || clamp.is_some_and(|c| c.len() != graph.len()) {
        return Err(Error::shape(
            "propagate",
            format!("{} labels for a {}-node graph", labels.len(), graph.len()),
        ));
    }
    let mut cur = labels.to_vec();
    let mut next = vec![0.0; cur.len()];
    for _ in 0..steps {
        for (i, out) in next.iter_mut().enumerate() {
            *out = graph.row(i).map(|(j, _, w)| w * cur[j]).sum();
        }
        if let Some(c) = clamp {
            for (v, s) in next.iter_mut().zip(c) {
                if let Some(s) = s {
                    *v = *s;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seed {
    pub x: usize,
    pub y: usize,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationParams {
    pub neighborhood: Neighborhood,
    pub sigma: f64,
    pub self_weight: SelfWeight,
    pub steps: usize,
    pub theta: f64,
}

impl Default for PropagationParams {
    fn default() -> Self {
        PropagationParams {
            neighborhood: Neighborhood::Eight,
            sigma: 0.1,
            self_weight: SelfWeight::MeanNeighbor,
            steps: 1000,
            theta: 0.5,
        }
    }
}

/// Result of [`segment_by_propagation`].
#[derive(Debug, Clone)]
pub struct PropagationResult {
    pub labels: Vec<f64>,
    pub mask: Vec<f32>,
}

/// Propagate seed labels over the similarity graph of a grayscale image in
/// `[0, 1]` and threshold at `theta`. Unseeded pixels start at 0, so with no
/// steps the mask is exactly the foreground seeds.
pub fn segment_by_propagation(
    image: &[f64],
    width: usize,
    height: usize,
    seeds: &[Seed],
    params: &PropagationParams,
) -> Result<PropagationResult> {
    if !seeds.iter().any(|s| s.label == 1) || !seeds.iter().any(|s| s.label == 0) {
        return Err(Error::InvalidArgument("seeds must include both a foreground and a background pixel".into()));
    }
    if !(params.theta > 0.0 && params.theta < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {} outside (0, 1)", params.theta)));
    }
    let graph = build_weights(image, width, height, params.neighborhood, params.sigma, params.self_weight)?;
    let mut clamp = vec![None; width * height];
    for s in seeds {
        if s.x >= width || s.y >= height || s.label > 1 {
            return Err(Error::InvalidArgument(format!("bad seed {s:?} for {width}x{height}")));
        }
        clamp[s.y * width + s.x] = Some(s.label as f64);
    }
    let init: Vec<f64> = clamp.iter().map(|c| c.unwrap_or(0.0)).collect();
    let labels = propagate(&init, &graph, params.steps, Some(&clamp))?;
    let mask = labels.iter().map(|&v| if v >= params.theta { 1.0 } else { 0.0 }).collect();
    Ok(PropagationResult { labels, mask })
}

/// Parse seeds from lines of `x,y,label` (commas or whitespace; `#` comments).
pub fn parse_seeds(text: &str) -> Result<Vec<Seed>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with(|c: char| c.is_alphabetic()) {
            continue;
        }
        let f: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        let parse = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Data(format!("seed line {}: '{s}' is not a nonnegative integer", n + 1)))
        };
        if f.len() != 3 {
            return Err(Error::Data(format!("seed line {}: expected x,y,label", n + 1)));
        }
        let label = parse(f[2])?;
        if label > 1 {
            return Err(Error::Data(format!("seed line {}: label must be 0 or 1", n + 1)));
        }
        out.push(Seed {
            x: parse(f[0])?,
            y: parse(f[1])?,
            label: label as u8,
        });
    }
    Ok(out)
}

pub fn read_seeds(path: &Path) -> Result<Vec<Seed>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_seeds(&s)
}

pub fn format_seeds(seeds: &[Seed]) -> String {
    let mut s = String::from("x,y,label\n");
    for sd in seeds {
        s.push_str(&format!("{},{},{}\n", sd.x, sd.y, sd.label));
    }
    s
}

/// Demo instance: a 1-pixel bright line on a dark `side x side` frame, with
/// one seed on the line and one in the background. Returns
/// `(image, ground truth, seeds)`.
pub fn bright_line_instance(side: usize) -> (Vec<f64>, Vec<f32>, Vec<Seed>) {
    let row = side / 2 - 1;
    let mut img = vec![0.1; side * side];
    let mut gt = vec![0.0f32; side * side];
    for x in 0..side {
        img[row * side + x] = 0.9;
        gt[row * side + x] = 1.0;
    }
    let seeds = vec![
        Seed { x: 0, y: row, label: 1 },
        Seed {
            x: side - 1,
            y: side - 1,
            label: 0,
        },
    ];
    (img, gt, seeds)
}
