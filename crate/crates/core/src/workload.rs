//! CNN models as ordered layer lists, and the analytical per-layer cost
//! (operation count and byte footprints) every other module consumes.
//!
//! Branching topologies are flattened in execution order. The shape-chaining
//! check between consecutive rows therefore accepts a few non-linear links:
//! anything after a `split` or `eltwise`, a branch that re-reads the most
//! recent split's output, a concatenating merge whose input channel count is
//! the sum of the branch tails, and an fc layer flattening a feature map.

use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const MODEL_CSV_HEADER: &str = "name,kind,in_h,in_w,in_c,out_h,out_w,out_c,k_h,k_w";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Fc,
    Pool,
    Bn,
    Relu,
    Eltwise,
    Split,
}

impl LayerKind {
    pub fn has_window(self) -> bool {
        matches!(self, Self::Conv | Self::Fc | Self::Pool)
    }

    /// Conv and fc: the layers whose weights are counted by the weight
    /// traffic ratio.
    pub fn is_weighted(self) -> bool {
        matches!(self, Self::Conv | Self::Fc)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Conv => "conv",
            Self::Fc => "fc",
            Self::Pool => "pool",
            Self::Bn => "bn",
            Self::Relu => "relu",
            Self::Eltwise => "eltwise",
            Self::Split => "split",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "conv" => Self::Conv,
            "fc" => Self::Fc,
            "pool" => Self::Pool,
            "bn" => Self::Bn,
            "relu" => Self::Relu,
            "eltwise" => Self::Eltwise,
            "split" => Self::Split,
            other => return Err(format!("unknown layer kind `{other}`")),
        })
    }
}

/// Height, width, channels of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub h: u64,
    pub w: u64,
    pub c: u64,
}

impl Shape {
    pub fn new(h: u64, w: u64, c: u64) -> Self {
        Self { h, w, c }
    }

    pub fn elements(&self) -> u64 {
        self.h * self.w * self.c
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub input: Shape,
    pub output: Shape,
    pub k_h: u64,
    pub k_w: u64,
}

impl LayerSpec {
    pub fn new(
        name: impl Into<String>,
        kind: LayerKind,
        input: Shape,
        output: Shape,
        k_h: u64,
        k_w: u64,
    ) -> Result<Self> {
        let layer = Self {
            name: name.into(),
            kind,
            input,
            output,
            k_h,
            k_w,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::InvalidLayer {
                name: self.name.clone(),
                msg,
            })
        };
        let dims = [
            self.input.h,
            self.input.w,
            self.input.c,
            self.output.h,
            self.output.w,
            self.output.c,
        ];
        if dims.contains(&0) {
            return bad("all feature-map dimensions must be >= 1".into());
        }
        if self.kind.has_window() {
            if self.k_h == 0 || self.k_w == 0 {
                return bad(format!("{} layers need a kernel window >= 1x1", self.kind));
            }
        } else if self.k_h != 0 || self.k_w != 0 {
            return bad(format!("{} layers take no kernel window (use 0,0)", self.kind));
        }
        if self.kind == LayerKind::Fc && (self.input.h, self.input.w, self.output.h, self.output.w) != (1, 1, 1, 1) {
            return bad("fc layers must have 1x1 input and output maps".into());
        }
        if matches!(self.kind, LayerKind::Pool | LayerKind::Bn | LayerKind::Relu) && self.output.c != self.input.c {
            return bad(format!("{} layers must preserve the channel count", self.kind));
        }
        Ok(())
    }
}

/// Operation count and byte footprints of one layer for a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCost {
    pub flops_per_image: u64,
    pub weight_bytes: u64,
    pub in_act_bytes_per_image: u64,
    pub out_act_bytes_per_image: u64,
}

impl LayerCost {
    /// Flops per byte when every byte of the layer (weights loaded once)
    /// crosses the memory interface.
    pub fn arithmetic_intensity(&self) -> f64 {
        let bytes = self.weight_bytes + self.in_act_bytes_per_image + self.out_act_bytes_per_image;
        self.flops_per_image as f64 / bytes as f64
    }
}

pub fn layer_cost(layer: &LayerSpec, element_size: u64) -> LayerCost {
    let out = layer.output;
    let out_elems = out.elements();
    let window = layer.k_h * layer.k_w;

    let flops_per_image = match layer.kind {
        LayerKind::Conv => 2 * out_elems * layer.input.c * window,
        LayerKind::Fc => 2 * layer.input.c * out.c,
        LayerKind::Pool => out_elems * window,
        LayerKind::Bn => 2 * out_elems,
        LayerKind::Relu | LayerKind::Eltwise | LayerKind::Split => out_elems,
    };
    let weight_bytes = match layer.kind {
        LayerKind::Conv => window * layer.input.c * out.c * element_size,
        LayerKind::Fc => layer.input.c * out.c * element_size,
        LayerKind::Bn => 2 * out.c * element_size,
        _ => 0,
    };
    let mut in_act = layer.input.elements() * element_size;
    let mut out_act = out_elems * element_size;
    match layer.kind {
        LayerKind::Eltwise => in_act *= 2,
        LayerKind::Split => out_act *= 2,
        _ => {}
    }

    LayerCost {
        flops_per_image,
        weight_bytes,
        in_act_bytes_per_image: in_act,
        out_act_bytes_per_image: out_act,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnnModel {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl CnnModel {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Self> {
        let model = Self {
            name: name.into(),
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::EmptyModel(self.name.clone()));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        if let Some(i) = first_chain_break(&self.layers) {
            let (prev, cur) = (&self.layers[i - 1], &self.layers[i]);
            return Err(Error::InvalidLayer {
                name: cur.name.clone(),
                msg: format!(
                    "input {} does not follow from `{}` (output {})",
                    cur.input, prev.name, prev.output
                ),
            });
        }
        Ok(())
    }

    pub fn costs(&self, element_size: u64) -> Vec<LayerCost> {
        self.layers.iter().map(|l| layer_cost(l, element_size)).collect()
    }

    pub fn total_weight_bytes(&self, element_size: u64) -> u64 {
        self.costs(element_size).iter().map(|c| c.weight_bytes).sum()
    }

    /// Largest per-image activation footprint (input plus output) of any layer.
    pub fn max_activation_bytes(&self, element_size: u64) -> u64 {
        self.costs(element_size)
            .iter()
            .map(|c| c.in_act_bytes_per_image + c.out_act_bytes_per_image)
            .max()
            .unwrap_or(0)
    }
}

/// Returns the index of the first row whose input cannot be explained by the
/// rows before it.
fn first_chain_break(layers: &[LayerSpec]) -> Option<usize> {
    let mut split_out: Option<Shape> = None;
    let mut tail_channels = 0u64;

    for (i, cur) in layers.iter().enumerate() {
        let Some(prev) = i.checked_sub(1).map(|p| &layers[p]) else {
            if cur.kind == LayerKind::Split {
                split_out = Some(cur.output);
            }
            continue;
        };
        let ok = if cur.input == prev.output || matches!(prev.kind, LayerKind::Split | LayerKind::Eltwise) {
            true
        } else if split_out == Some(cur.input) {
            // a new branch off the last split; the previous row closed a branch
            tail_channels += prev.output.c;
            true
        } else if split_out.is_some()
            && (cur.input.h, cur.input.w) == (prev.output.h, prev.output.w)
            && cur.input.c == tail_channels + prev.output.c
        {
            // concatenation of all branches
            split_out = None;
            true
        } else {
            cur.kind == LayerKind::Fc && cur.input.c == prev.output.elements()
        };
        if !ok {
            return Some(i);
        }
        if cur.kind == LayerKind::Split {
            split_out = Some(cur.output);
            tail_channels = 0;
        }
    }
    None
}

/// Parses the model CSV format. `source_name` is used only in error messages.
pub fn parse_model<R: BufRead>(reader: R, source_name: &str) -> Result<CnnModel> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        msg,
    };

    let mut layers = Vec::new();
    let mut saw_header = false;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        if !saw_header {
            if text != MODEL_CSV_HEADER {
                return Err(parse_err(lineno, format!("expected header `{MODEL_CSV_HEADER}`")));
            }
            saw_header = true;
            continue;
        }

        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        if fields.len() != 10 {
            return Err(parse_err(
                lineno,
                format!("expected 10 columns, found {}", fields.len()),
            ));
        }
        let kind: LayerKind = fields[1].parse().map_err(|e| parse_err(lineno, e))?;
        let mut nums = [0u64; 8];
        for (slot, field) in nums.iter_mut().zip(&fields[2..]) {
            *slot = field
                .parse()
                .map_err(|_| parse_err(lineno, format!("`{field}` is not a non-negative integer")))?;
        }
        let layer = LayerSpec {
            name: fields[0].to_string(),
            kind,
            input: Shape::new(nums[0], nums[1], nums[2]),
            output: Shape::new(nums[3], nums[4], nums[5]),
            k_h: nums[6],
            k_w: nums[7],
        };
        layer.validate().map_err(|e| parse_err(lineno, e.to_string()))?;
        layers.push(layer);
    }
    if !saw_header {
        return Err(parse_err(0, "missing header line".into()));
    }

    let name = std::path::Path::new(source_name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(source_name)
        .to_string();
    CnnModel::new(name, layers)
}

pub fn load_model(path: &std::path::Path) -> Result<CnnModel> {
    let file = std::fs::File::open(path)?;
    parse_model(std::io::BufReader::new(file), &path.display().to_string())
}

/// Ratio of weight bytes to all bytes moved by the conv and fc layers when
/// each weight is loaded once per pass of `batch` images.
pub fn weight_traffic_ratio(model: &CnnModel, batch: u64, element_size: u64) -> Result<f64> {
    let mut weighted = model.layers.iter().filter(|l| l.kind.is_weighted()).peekable();
    if weighted.peek().is_none() {
        return Err(Error::NoWeightedLayers);
    }
    let (mut weights, mut acts) = (0u64, 0u64);
    for layer in weighted {
        let c = layer_cost(layer, element_size);
        weights += c.weight_bytes;
        acts += c.in_act_bytes_per_image + c.out_act_bytes_per_image;
    }
    let weights = weights as f64;
    Ok(weights / (weights + batch as f64 * acts as f64))
}
